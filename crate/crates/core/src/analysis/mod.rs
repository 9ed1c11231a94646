// SPDX-License-Identifier: MIT OR Apache-2.0

//! Language-independent and degenerate knowledge neurons.

mod dkn;
mod likn;

pub use dkn::{
    aggregate_dkn_bank, ceil_fraction, detect_degenerate, find_degenerate_pairs, pair, prob_with_suppressed,
    DegenerateSearch, DknConfig, DknSet, NeuronPair, DEFAULT_T_HIGH, DEFAULT_T_LOW, DEFAULT_T_PERCENT,
};
pub use likn::{intersect_languages, LiknSet};

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Knowledge-neuron laboratory.
//!
//! Trains toy auto-encoding and auto-regressive transformers on a synthetic
//! multilingual fact corpus, localizes the FFN units that store each fact
//! with baseline-adapted integrated gradients, derives language-independent
//! and degenerate knowledge neurons, and evaluates neuron editing and
//! DKN-based fact checking.
//!
//! The model and attribution code are generic over [`Scalar`]; the aliases
//! below name the two precisions the pipeline uses.

pub mod analysis;
pub mod attribution;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod scalar;
pub mod seeds;

pub use error::{Error, Result};
pub use model::{NeuronId, Transformer};
pub use scalar::Scalar;

/// Single-precision transformer, the default training precision.
pub type Transformer32 = model::Transformer<f32>;
/// Double-precision transformer, used on every attribution path.
pub type Transformer64 = model::Transformer<f64>;
/// Attribution map in double precision.
pub type AttributionMap64 = attribution::AttributionMap<f64>;
/// Activation snapshot in double precision.
pub type ActivationSnapshot64 = model::ActivationSnapshot<f64>;

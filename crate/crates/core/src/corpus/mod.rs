// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic multilingual fact corpus.
//!
//! Facts are `(head, relation, tail)` triples over abstract entity symbols.
//! Each [`LanguageSpec`] supplies a surface template per relation and a
//! lexicon; vocabularies of distinct languages are disjoint apart from the
//! special tokens. Every fact is rendered as a cloze query in every language
//! for both the auto-encoding and auto-regressive architectures.

mod generate;
mod render;
mod split;
mod types;

pub use generate::{generate_corpus, sample_wrong_fact, synthetic_languages, Corpus, CorpusParams};
pub use render::{fill_candidate, render_cloze};
pub use split::split_by_relation;
pub use types::{
    Architecture, ClozeQuery, FactSet, FactTriple, LanguageSpec, TokenId, Vocab, WrongFact, BLANK_SLOT, EOS, HEAD_SLOT,
    MASK, PAD,
};

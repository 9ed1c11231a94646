// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

/// Errors raised anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("no template for relation `{relation}` in language `{lang}`")]
    MissingTemplate { relation: String, lang: String },

    #[error("fact `{fact_id}`: answer `{surface}` is {tokens} tokens, expected exactly one")]
    MultiTokenAnswer { fact_id: String, surface: String, tokens: usize },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("neuron (layer {layer}, unit {unit}) out of range for {layers}x{units} model")]
    NeuronOutOfRange { layer: usize, unit: usize, layers: usize, units: usize },

    #[error("query error: {0}")]
    Query(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("non-finite gradient at neuron (layer {layer}, unit {unit})")]
    NonFiniteGradient { layer: usize, unit: usize },

    #[error("attribution error: {0}")]
    Attribution(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("stage `{stage}` failed{}: {message}", record.as_ref().map(|r| format!(" at record `{r}`")).unwrap_or_default())]
    Stage { stage: String, record: Option<String>, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record in {path} line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Baseline-adapted integrated gradients over FFN neurons.
//!
//! For each eligible word of a cloze query a baseline sentence is built by
//! replacing that word with `<mask>` (auto-encoding) or `<eos>`
//! (auto-regressive). Every neuron is integrated from its baseline
//! activation to its query activation with a right Riemann sum, the
//! per-word maps are summed and normalized, and knowledge neurons are the
//! units whose score exceeds `max score * tau`.

mod baseline;
mod ig;
mod select;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::ClozeQuery;
use crate::error::{Error, Result};
use crate::model::NeuronId;
use crate::scalar::Scalar;

pub use baseline::build_baseline;
pub use ig::{
    aggregate_normalize, attribute_query, attribute_word, integrated_gradients, layer_completeness, Completeness,
    NeuronProbe,
};
pub use select::{select_knowledge_neurons, select_with_tau, KnowledgeNeuronSet};

/// Default number of Riemann steps for pipeline runs.
pub const DEFAULT_STEPS: usize = 20;
/// Default threshold scaling factor for every language.
pub const DEFAULT_TAU: f64 = 0.2;

macro_rules! tagged_enum {
    ($(#[$m:meta])* $name:ident { $($(#[$vm:meta])* $variant:ident => $tag:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
        pub enum $name {
            $($(#[$vm])* #[serde(rename = $tag)] $variant),+
        }

        impl $name {
            pub fn tag(self) -> &'static str {
                match self { $($name::$variant => $tag),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.tag())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($tag => Ok($name::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}`, expected one of: {}"),
                        other,
                        [$($tag),+].join(", ")
                    ))),
                }
            }
        }
    };
}

tagged_enum!(
    /// Where the integration path starts.
    BaselineMode {
        /// Activations of the per-word `<mask>`/`<eos>` baseline sentence.
        Adapted => "adapted",
        /// All-zero activations, one pass per query.
        Zero => "zero",
    }
);

tagged_enum!(
    /// Coefficient in front of the Riemann sum.
    RiemannCoefficient {
        /// `(w̄ - w') / N`, which satisfies completeness.
        Standard => "standard",
        /// `w̄ / N`, as printed in the original formulation.
        Paper => "paper",
    }
);

tagged_enum!(
    /// How activations are clamped along the integration path.
    ClampMode {
        /// All units of a layer are interpolated together; one path per layer.
        Layer => "layer",
        /// One unit is interpolated at a time with the rest left natural.
        Neuron => "neuron",
    }
);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub riemann_steps: usize,
    pub tau_per_language: BTreeMap<String, f64>,
    pub baseline_mode: BaselineMode,
    pub coefficient: RiemannCoefficient,
    pub clamp_mode: ClampMode,
}

impl AttributionConfig {
    /// Pipeline defaults with `tau` for every language in `languages`.
    pub fn with_languages<S: AsRef<str>>(languages: &[S], tau: f64) -> Self {
        Self {
            riemann_steps: DEFAULT_STEPS,
            tau_per_language: languages.iter().map(|l| (l.as_ref().to_string(), tau)).collect(),
            baseline_mode: BaselineMode::Adapted,
            coefficient: RiemannCoefficient::Standard,
            clamp_mode: ClampMode::Layer,
        }
    }

    pub fn tau(&self, lang: &str) -> Result<f64> {
        let tau = *self
            .tau_per_language
            .get(lang)
            .ok_or_else(|| Error::Config(format!("no tau configured for language `{lang}`")))?;
        check_tau(tau)?;
        Ok(tau)
    }

    /// Checks the step count and that every language in `languages` has a
    /// tau inside (0, 1).
    pub fn validate<S: AsRef<str>>(&self, languages: &[S]) -> Result<()> {
        if self.riemann_steps == 0 {
            return Err(Error::Config("riemann_steps must be at least 1".into()));
        }
        for lang in languages {
            self.tau(lang.as_ref())?;
        }
        Ok(())
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("tau must lie strictly between 0 and 1, got {tau}")))
    }
}

/// Attribution scores for every neuron of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap<T> {
    pub query_id: String,
    pub fact_id: String,
    pub lang_id: String,
    /// `L x n` scores indexed by `[layer, unit]`.
    pub scores: Array2<T>,
    pub normalized: bool,
}

impl<T: Scalar> AttributionMap<T> {
    pub fn from_query(query: &ClozeQuery, scores: Array2<T>, normalized: bool) -> Self {
        Self {
            query_id: query.id.clone(),
            fact_id: query.fact_id.clone(),
            lang_id: query.lang_id.clone(),
            scores,
            normalized,
        }
    }

    pub fn score(&self, id: NeuronId) -> T {
        self.scores[[id.layer, id.unit]]
    }

    pub fn iter(&self) -> impl Iterator<Item = (NeuronId, T)> + '_ {
        self.scores.indexed_iter().map(|((l, u), &v)| (NeuronId::new(l, u), v))
    }

    /// Highest-scoring neuron; ties go to the lowest `(layer, unit)`.
    pub fn argmax(&self) -> (NeuronId, T) {
        self.iter()
            .fold(None, |best: Option<(NeuronId, T)>, (id, v)| match best {
                Some((_, b)) if b >= v => best,
                _ => Some((id, v)),
            })
            .expect("attribution map has at least one neuron")
    }

    pub fn total(&self) -> T {
        self.scores.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn to_record(&self) -> AttributionRecord {
        let (layers, units) = self.scores.dim();
        AttributionRecord {
            query_id: self.query_id.clone(),
            fact_id: self.fact_id.clone(),
            lang_id: self.lang_id.clone(),
            layers,
            units,
            normalized: self.normalized,
            scores: self.scores.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
        }
    }
}

/// Serialized form of an [`AttributionMap`], scores flattened row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRecord {
    pub query_id: String,
    pub fact_id: String,
    pub lang_id: String,
    pub layers: usize,
    pub units: usize,
    pub normalized: bool,
    pub scores: Vec<f64>,
}

impl AttributionRecord {
    pub fn to_map(&self) -> Result<AttributionMap<f64>> {
        let scores = Array2::from_shape_vec((self.layers, self.units), self.scores.clone())
            .map_err(|e| Error::Attribution(format!("record `{}`: {e}", self.query_id)))?;
        Ok(AttributionMap {
            query_id: self.query_id.clone(),
            fact_id: self.fact_id.clone(),
            lang_id: self.lang_id.clone(),
            scores,
            normalized: self.normalized,
        })
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::attribution::KnowledgeNeuronSet;
use crate::error::{Error, Result};
use crate::model::NeuronId;

/// Knowledge neurons shared by every language's rendering of one fact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiknSet {
    pub fact_id: String,
    pub neurons: BTreeSet<NeuronId>,
    pub source_sets: Vec<KnowledgeNeuronSet>,
}

impl LiknSet {
    pub fn languages(&self) -> Vec<&str> {
        self.source_sets.iter().map(|s| s.lang_id.as_str()).collect()
    }
}

/// Intersection of the per-language knowledge-neuron sets of one fact.
/// An empty intersection is a valid result.
pub fn intersect_languages(sets: &[KnowledgeNeuronSet]) -> Result<LiknSet> {
    let first = sets.first().ok_or_else(|| Error::Analysis("no knowledge-neuron sets to intersect".into()))?;
    if sets.len() < 2 {
        return Err(Error::Analysis(format!(
            "fact `{}`: language-independent neurons need at least two languages, got {}",
            first.fact_id,
            sets.len()
        )));
    }
    if let Some(bad) = sets.iter().find(|s| s.fact_id != first.fact_id) {
        return Err(Error::Analysis(format!(
            "cannot intersect sets of different facts `{}` and `{}`",
            first.fact_id, bad.fact_id
        )));
    }
    let mut langs = BTreeSet::new();
    if let Some(dup) = sets.iter().find(|s| !langs.insert(s.lang_id.as_str())) {
        return Err(Error::Analysis(format!("fact `{}`: language `{}` appears twice", first.fact_id, dup.lang_id)));
    }
    let neurons =
        sets[1..].iter().fold(first.neurons.clone(), |acc, s| acc.intersection(&s.neurons).copied().collect());
    Ok(LiknSet { fact_id: first.fact_id.clone(), neurons, source_sets: sets.to_vec() })
}

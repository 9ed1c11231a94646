// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{check_tau, AttributionConfig, AttributionMap};
use crate::error::{Error, Result};
use crate::model::NeuronId;
use crate::scalar::Scalar;

/// Thresholded knowledge neurons of one query in one language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeNeuronSet {
    pub query_id: String,
    pub fact_id: String,
    pub lang_id: String,
    pub neurons: BTreeSet<NeuronId>,
    pub threshold_used: f64,
    pub max_score: f64,
}

/// Knowledge neurons of `attr` under the threshold `max score * tau` of
/// `lang`. Membership is strict: a score equal to the threshold is out.
pub fn select_knowledge_neurons<T: Scalar>(
    attr: &AttributionMap<T>,
    lang: &str,
    config: &AttributionConfig,
) -> Result<KnowledgeNeuronSet> {
    let mut set = select_with_tau(attr, config.tau(lang)?)?;
    set.lang_id = lang.to_string();
    Ok(set)
}

pub fn select_with_tau<T: Scalar>(attr: &AttributionMap<T>, tau: f64) -> Result<KnowledgeNeuronSet> {
    check_tau(tau)?;
    let (_, max) = attr.argmax();
    if max <= T::zero() || !max.is_finite() {
        return Err(Error::Attribution(format!("query `{}` has no positive attribution (max {max})", attr.query_id)));
    }
    let threshold = max * T::lit(tau);
    let neurons = attr.iter().filter(|&(_, v)| v > threshold).map(|(id, _)| id).collect();
    Ok(KnowledgeNeuronSet {
        query_id: attr.query_id.clone(),
        fact_id: attr.fact_id.clone(),
        lang_id: attr.lang_id.clone(),
        neurons,
        threshold_used: threshold.to_f64().unwrap_or(f64::NAN),
        max_score: max.to_f64().unwrap_or(f64::NAN),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn map(scores: Array2<f64>) -> AttributionMap<f64> {
        AttributionMap { query_id: "q".into(), fact_id: "f".into(), lang_id: "en".into(), scores, normalized: false }
    }

    #[test]
    fn dynamic_threshold_example() {
        let mut s = Array2::zeros((3, 4));
        s[[1, 0]] = 0.5;
        s[[2, 3]] = 0.2;
        s[[0, 1]] = 0.05;
        let set = select_with_tau(&map(s), 0.3).unwrap();
        assert!((set.threshold_used - 0.15).abs() < 1e-12);
        let want: BTreeSet<_> = [NeuronId::new(1, 0), NeuronId::new(2, 3)].into();
        assert_eq!(set.neurons, want);
    }

    #[test]
    fn tau_near_one_keeps_only_argmax() {
        let s = Array2::from_shape_vec((1, 3), vec![0.3, 0.5, 0.2]).unwrap();
        let set = select_with_tau(&map(s), 1.0 - 1e-12).unwrap();
        assert_eq!(set.neurons, [NeuronId::new(0, 1)].into());
    }

    #[test]
    fn uniform_scores_are_all_selected() {
        let s = Array2::from_elem((2, 5), 0.1);
        assert_eq!(select_with_tau(&map(s), 0.5).unwrap().neurons.len(), 10);
    }

    #[test]
    fn tau_outside_unit_interval_is_rejected() {
        let s = Array2::from_elem((1, 2), 0.5);
        for tau in [0.0, 1.0, -0.1, 1.5] {
            assert!(matches!(select_with_tau(&map(s.clone()), tau), Err(Error::Config(_))));
        }
    }
}

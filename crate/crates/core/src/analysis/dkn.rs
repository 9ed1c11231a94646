// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ClozeQuery;
use crate::error::{Error, Result};
use crate::model::{Intervention, NeuronId, Transformer};
use crate::scalar::Scalar;

pub const DEFAULT_T_LOW: f64 = 0.05;
pub const DEFAULT_T_HIGH: f64 = 0.30;
pub const DEFAULT_T_PERCENT: f64 = 0.30;

/// Probability-drop thresholds for degenerate pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DknConfig {
    pub t_low: f64,
    pub t_high: f64,
}

impl Default for DknConfig {
    fn default() -> Self {
        Self { t_low: DEFAULT_T_LOW, t_high: DEFAULT_T_HIGH }
    }
}

impl DknConfig {
    pub fn validate(&self) -> Result<()> {
        if 0.0 <= self.t_low && self.t_low < self.t_high && self.t_high <= 1.0 {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "DKN thresholds need 0 <= t_low < t_high <= 1, got t_low={} t_high={}",
                self.t_low, self.t_high
            )))
        }
    }
}

/// An unordered neuron pair, stored smaller id first.
pub type NeuronPair = (NeuronId, NeuronId);

pub fn pair(a: NeuronId, b: NeuronId) -> NeuronPair {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Degenerate pairs found for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DknSet {
    pub query_id: String,
    pub fact_id: String,
    pub lang_id: String,
    pub relation: String,
    pub pairs: BTreeSet<NeuronPair>,
    /// Gold probability with no neuron suppressed.
    pub base_prob: f64,
    /// Knowledge neurons whose lone suppression stays within `t_low`.
    pub candidates: BTreeSet<NeuronId>,
    pub config: DknConfig,
}

impl DknSet {
    /// Every neuron that occurs in at least one pair.
    pub fn neurons(&self) -> BTreeSet<NeuronId> {
        self.pairs.iter().flat_map(|&(a, b)| [a, b]).collect()
    }
}

/// Outcome of the two passes over a knowledge-neuron set.
#[derive(Debug, Clone, PartialEq)]
pub struct DegenerateSearch {
    pub base_prob: f64,
    pub candidates: BTreeSet<NeuronId>,
    pub pairs: BTreeSet<NeuronPair>,
}

/// Runs the degenerate-pair search against any probability oracle.
/// `prob(s)` must return the gold probability with the neurons in `s`
/// suppressed.
///
/// Pass one keeps each neuron whose lone suppression lowers the
/// probability by at most `t_low`. Pass two returns every pair of those
/// neurons whose joint suppression lowers it by more than `t_high`.
pub fn find_degenerate_pairs<F>(kn_set: &BTreeSet<NeuronId>, config: &DknConfig, prob: F) -> Result<DegenerateSearch>
where
    F: Fn(&[NeuronId]) -> Result<f64> + Sync,
{
    config.validate()?;
    if kn_set.is_empty() {
        return Err(Error::Analysis("degenerate search needs a non-empty knowledge-neuron set".into()));
    }
    let base_prob = prob(&[])?;
    let members: Vec<NeuronId> = kn_set.iter().copied().collect();

    let single_drops = members.par_iter().map(|&n| Ok((n, base_prob - prob(&[n])?))).collect::<Result<Vec<_>>>()?;
    let candidates: Vec<NeuronId> =
        single_drops.into_iter().filter(|&(_, drop)| drop <= config.t_low).map(|(n, _)| n).collect();

    let probes: Vec<NeuronPair> =
        candidates.iter().enumerate().flat_map(|(i, &a)| candidates[i + 1..].iter().map(move |&b| (a, b))).collect();
    let pairs = probes
        .par_iter()
        .map(|&(a, b)| Ok(((a, b), base_prob - prob(&[a, b])?)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&(_, drop)| drop > config.t_high)
        .map(|(p, _)| p)
        .collect();

    Ok(DegenerateSearch { base_prob, candidates: candidates.into_iter().collect(), pairs })
}

/// Gold probability of `query` with `suppressed` zeroed at every position.
/// `suppressed` must be a subset of `kn_set`.
pub fn prob_with_suppressed<T: Scalar>(
    model: &Transformer<T>,
    query: &ClozeQuery,
    kn_set: &BTreeSet<NeuronId>,
    suppressed: &BTreeSet<NeuronId>,
) -> Result<f64> {
    if let Some(n) = suppressed.iter().find(|n| !kn_set.contains(n)) {
        return Err(Error::Analysis(format!("query `{}`: suppressed neuron {n} is not a knowledge neuron", query.id)));
    }
    suppressed_prob(model, query, suppressed.iter().copied())
}

fn suppressed_prob<T: Scalar>(
    model: &Transformer<T>,
    query: &ClozeQuery,
    suppressed: impl IntoIterator<Item = NeuronId>,
) -> Result<f64> {
    let targets: Vec<NeuronId> = suppressed.into_iter().collect();
    let p = if targets.is_empty() {
        model.gold_prob(query, None)?
    } else {
        model.gold_prob(query, Some(&Intervention::suppress(targets)?))?
    };
    Ok(p.to_f64().unwrap_or(f64::NAN))
}

/// Degenerate pairs of `query` under suppression in `model`.
pub fn detect_degenerate<T: Scalar>(
    model: &Transformer<T>,
    query: &ClozeQuery,
    kn_set: &BTreeSet<NeuronId>,
    config: &DknConfig,
) -> Result<DknSet> {
    for &n in kn_set {
        model.check_neuron(n)?;
    }
    let search = find_degenerate_pairs(kn_set, config, |s| suppressed_prob(model, query, s.iter().copied())).map_err(
        |e| match e {
            Error::Analysis(m) => Error::Analysis(format!("query `{}`: {m}", query.id)),
            other => other,
        },
    )?;
    Ok(DknSet {
        query_id: query.id.clone(),
        fact_id: query.fact_id.clone(),
        lang_id: query.lang_id.clone(),
        relation: query.relation.clone(),
        pairs: search.pairs,
        base_prob: search.base_prob,
        candidates: search.candidates,
        config: *config,
    })
}

/// Smallest count that reaches a fraction `t` of `n`, guarding against
/// floating-point overshoot such as `0.3 * 10 = 3.0000000000000004`.
pub fn ceil_fraction(t: f64, n: usize) -> usize {
    let exact = t * n as f64;
    let rounded = exact.round();
    if (exact - rounded).abs() <= 1e-9 * exact.abs().max(1.0) {
        rounded as usize
    } else {
        exact.ceil() as usize
    }
}

/// Neurons that occur in the pairs of at least `ceil(t * dkn_sets.len())`
/// queries, each query counted once.
pub fn aggregate_dkn_bank(dkn_sets: &[DknSet], t_percent: f64) -> Result<BTreeSet<NeuronId>> {
    if dkn_sets.is_empty() {
        return Err(Error::Analysis("DKN bank needs at least one mining query".into()));
    }
    if !(t_percent > 0.0 && t_percent <= 1.0) {
        return Err(Error::Config(format!("t_percent must lie in (0, 1], got {t_percent}")));
    }
    let cutoff = ceil_fraction(t_percent, dkn_sets.len()).max(1);
    let mut counts: BTreeMap<NeuronId, usize> = BTreeMap::new();
    for set in dkn_sets {
        for n in set.neurons() {
            *counts.entry(n).or_default() += 1;
        }
    }
    Ok(counts.into_iter().filter(|&(_, c)| c >= cutoff).map(|(n, _)| n).collect())
}

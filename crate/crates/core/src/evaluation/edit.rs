// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, IndexedRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::ClozeQuery;
use crate::error::{Error, Result};
use crate::model::{EditMode, Intervention, NeuronId, Transformer};
use crate::scalar::Scalar;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Suppress,
    Enhance,
}

impl EditKind {
    pub const BOTH: [EditKind; 2] = [EditKind::Suppress, EditKind::Enhance];

    pub fn mode(self) -> EditMode {
        match self {
            EditKind::Suppress => EditMode::Suppress,
            EditKind::Enhance => EditMode::Enhance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Relevant,
    Irrelevant,
}

/// Gold probability of one query before and after an edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditOutcome {
    pub query_id: String,
    pub mode: EditKind,
    pub target_kind: TargetKind,
    pub prob_before: f64,
    pub prob_after: f64,
    pub delta: f64,
}

/// An edit of `neurons` judged on `query` (relevant) and `partner`
/// (irrelevant).
#[derive(Debug, Clone)]
pub struct EditTrial<'a> {
    pub query: &'a ClozeQuery,
    pub partner: &'a ClozeQuery,
    pub neurons: BTreeSet<NeuronId>,
}

/// Measured outcomes of one [`EditTrial`] under both edit kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub query_id: String,
    pub partner_id: String,
    pub n_neurons: usize,
    /// The relevant query's gold answer was top-1 before editing.
    pub mastered: bool,
    pub outcomes: Vec<EditOutcome>,
}

impl TrialResult {
    pub fn delta(&self, mode: EditKind, target: TargetKind) -> f64 {
        self.outcomes.iter().find(|o| o.mode == mode && o.target_kind == target).map(|o| o.delta).unwrap_or(0.0)
    }

    pub fn row(&self) -> DeltaRow {
        DeltaRow {
            mastered: self.mastered,
            suppress: (
                self.delta(EditKind::Suppress, TargetKind::Relevant),
                self.delta(EditKind::Suppress, TargetKind::Irrelevant),
            ),
            enhance: (
                self.delta(EditKind::Enhance, TargetKind::Relevant),
                self.delta(EditKind::Enhance, TargetKind::Irrelevant),
            ),
        }
    }
}

/// The four deltas of one trial as `(relevant, irrelevant)` per edit kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaRow {
    pub mastered: bool,
    pub suppress: (f64, f64),
    pub enhance: (f64, f64),
}

impl DeltaRow {
    fn columns(&self) -> [f64; 4] {
        [self.suppress.0, self.suppress.1, self.enhance.0, self.enhance.1]
    }

    /// The same row with relevant and irrelevant roles exchanged.
    pub fn swapped(self) -> Self {
        Self {
            mastered: self.mastered,
            suppress: (self.suppress.1, self.suppress.0),
            enhance: (self.enhance.1, self.enhance.0),
        }
    }
}

/// Which trials are left out before averaging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExclusionRule {
    pub drop_unmastered: bool,
    /// Fraction of trials dropped from the top of each delta list.
    pub top_fraction: f64,
}

impl Default for ExclusionRule {
    fn default() -> Self {
        Self { drop_unmastered: true, top_fraction: 0.05 }
    }
}

impl ExclusionRule {
    pub const NONE: ExclusionRule = ExclusionRule { drop_unmastered: false, top_fraction: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if (0.0..0.5).contains(&self.top_fraction) {
            Ok(())
        } else {
            Err(Error::Config(format!("top_fraction must lie in [0, 0.5), got {}", self.top_fraction)))
        }
    }

    pub fn describe(&self) -> String {
        let mut parts = Vec::new();
        if self.drop_unmastered {
            parts.push("unmastered queries dropped".to_string());
        }
        if self.top_fraction > 0.0 {
            parts.push(format!(
                "largest {}% of each relevant and irrelevant delta list dropped",
                self.top_fraction * 100.0
            ));
        }
        if parts.is_empty() {
            "no exclusion".into()
        } else {
            parts.join("; ")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SrFlag {
    Finite,
    /// Irrelevant deltas average to zero while relevant ones do not.
    Infinite,
    /// No included trial, or both means are zero.
    Undefined,
}

/// Success rate under one edit kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrComponent {
    /// `None` unless `flag` is [`SrFlag::Finite`].
    pub ratio: Option<f64>,
    pub relevant_mean: f64,
    pub irrelevant_mean: f64,
    pub flag: SrFlag,
}

impl SrComponent {
    fn from_means(relevant_mean: f64, irrelevant_mean: f64, n: usize) -> Self {
        let flag = if n == 0 || (relevant_mean == 0.0 && irrelevant_mean == 0.0) {
            SrFlag::Undefined
        } else if irrelevant_mean == 0.0 {
            SrFlag::Infinite
        } else {
            SrFlag::Finite
        };
        Self {
            ratio: (flag == SrFlag::Finite).then(|| relevant_mean / irrelevant_mean),
            relevant_mean,
            irrelevant_mean,
            flag,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrReport {
    pub sr_suppress: SrComponent,
    pub sr_enhance: SrComponent,
    /// Sum of both ratios, present only when both are finite.
    pub sr_total: Option<f64>,
    pub flag: SrFlag,
    pub n_trials: usize,
    pub n_included: usize,
    pub n_excluded: usize,
    /// Trials that could not be formed, e.g. a fact without shared neurons.
    pub n_skipped: usize,
    pub exclusion_rule: String,
}

impl SrReport {
    /// `sr_total`, or `-inf`/`+inf` for flagged reports so comparisons
    /// still order them.
    pub fn total_for_comparison(&self) -> f64 {
        match (self.sr_total, self.flag) {
            (Some(v), _) => v,
            (None, SrFlag::Infinite) => f64::INFINITY,
            (None, _) => f64::NEG_INFINITY,
        }
    }
}

fn top_indices(values: impl Iterator<Item = f64>, k: usize) -> BTreeSet<usize> {
    let mut idx: Vec<(usize, f64)> = values.enumerate().collect();
    idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    idx.into_iter().take(k).map(|(i, _)| i).collect()
}

/// Success rates from per-trial deltas.
///
/// The exclusion rule first removes unmastered trials, then drops the
/// `floor(top_fraction * n)` largest entries of each of the four delta
/// lists; a trial dropped from any list is removed from all of them.
pub fn success_rate(rows: &[DeltaRow], n_skipped: usize, rule: &ExclusionRule) -> Result<SrReport> {
    rule.validate()?;
    let kept: Vec<&DeltaRow> = rows.iter().filter(|r| r.mastered || !rule.drop_unmastered).collect();
    let k = (rule.top_fraction * kept.len() as f64).floor() as usize;
    let mut dropped = BTreeSet::new();
    for col in 0..4 {
        dropped.extend(top_indices(kept.iter().map(|r| r.columns()[col]), k));
    }
    let included: Vec<&DeltaRow> =
        kept.iter().enumerate().filter(|(i, _)| !dropped.contains(i)).map(|(_, r)| *r).collect();
    let n = included.len();
    let mean = |col: usize| {
        if n == 0 {
            0.0
        } else {
            included.iter().map(|r| r.columns()[col]).sum::<f64>() / n as f64
        }
    };
    let sr_suppress = SrComponent::from_means(mean(0), mean(1), n);
    let sr_enhance = SrComponent::from_means(mean(2), mean(3), n);
    let flag = match (sr_suppress.flag, sr_enhance.flag) {
        (SrFlag::Finite, SrFlag::Finite) => SrFlag::Finite,
        (SrFlag::Undefined, _) | (_, SrFlag::Undefined) => SrFlag::Undefined,
        _ => SrFlag::Infinite,
    };
    Ok(SrReport {
        sr_total: sr_suppress.ratio.zip(sr_enhance.ratio).map(|(a, b)| a + b),
        sr_suppress,
        sr_enhance,
        flag,
        n_trials: rows.len(),
        n_included: n,
        n_excluded: rows.len() - n,
        n_skipped,
        exclusion_rule: rule.describe(),
    })
}

fn outcome(query: &ClozeQuery, mode: EditKind, target: TargetKind, before: f64, after: f64) -> EditOutcome {
    EditOutcome {
        query_id: query.id.clone(),
        mode,
        target_kind: target,
        prob_before: before,
        prob_after: after,
        delta: (after - before).abs(),
    }
}

fn f<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Runs one trial: both edit kinds, judged on the query and its partner,
/// always relative to the unedited model.
pub fn run_trial<T: Scalar>(model: &Transformer<T>, trial: &EditTrial<'_>) -> Result<TrialResult> {
    let q = trial.query;
    let p = trial.partner;
    let q_dist = model.predict(q, None)?;
    let q_before = f(q_dist[q.gold_token as usize]);
    let mastered = crate::model::argmax(&q_dist) == q.gold_token as usize;
    let p_before = f(model.gold_prob(p, None)?);
    let mut outcomes = Vec::with_capacity(4);
    for kind in EditKind::BOTH {
        let (q_after, p_after) = if trial.neurons.is_empty() {
            (q_before, p_before)
        } else {
            let iv = Intervention::new(trial.neurons.iter().copied(), kind.mode())?;
            (f(model.gold_prob(q, Some(&iv))?), f(model.gold_prob(p, Some(&iv))?))
        };
        outcomes.push(outcome(q, kind, TargetKind::Relevant, q_before, q_after));
        outcomes.push(outcome(p, kind, TargetKind::Irrelevant, p_before, p_after));
    }
    Ok(TrialResult {
        query_id: q.id.clone(),
        partner_id: p.id.clone(),
        n_neurons: trial.neurons.len(),
        mastered,
        outcomes,
    })
}

/// Runs every trial in parallel, keeping input order.
pub fn run_trials<T: Scalar>(model: &Transformer<T>, trials: &[EditTrial<'_>]) -> Result<Vec<TrialResult>> {
    trials.par_iter().map(|t| run_trial(model, t)).collect()
}

/// Draws, for every query, a partner query of a different relation in the
/// same language and architecture. Each draw uses its own sub-seed, so the
/// pairing does not depend on query order.
pub fn irrelevant_pairing(queries: &[ClozeQuery], seed: u64) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for q in queries {
        let mut pool: Vec<&ClozeQuery> = queries
            .iter()
            .filter(|o| o.relation != q.relation && o.lang_id == q.lang_id && o.architecture == q.architecture)
            .collect();
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        let mut rng = seeds::rng_for(seed, &q.id);
        let partner = pool.choose(&mut rng).ok_or_else(|| {
            Error::Evaluation(format!("query `{}` has no query of a different relation to pair with", q.id))
        })?;
        out.insert(q.id.clone(), partner.id.clone());
    }
    Ok(out)
}

fn lookup<'a>(by_id: &BTreeMap<&str, &'a ClozeQuery>, id: &str) -> Result<&'a ClozeQuery> {
    by_id.get(id).copied().ok_or_else(|| Error::Evaluation(format!("unknown query `{id}`")))
}

/// Edits each query's own neuron set and reports success rates.
pub fn editing_success_rate<T: Scalar>(
    model: &Transformer<T>,
    queries: &[ClozeQuery],
    neuron_sets: &BTreeMap<String, BTreeSet<NeuronId>>,
    pairing: &BTreeMap<String, String>,
    rule: &ExclusionRule,
) -> Result<(SrReport, Vec<TrialResult>)> {
    let by_id: BTreeMap<&str, &ClozeQuery> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let trials = queries
        .iter()
        .map(|q| {
            let neurons = neuron_sets
                .get(&q.id)
                .ok_or_else(|| Error::Evaluation(format!("query `{}` has no neuron set", q.id)))?;
            let partner_id = pairing
                .get(&q.id)
                .ok_or_else(|| Error::Evaluation(format!("query `{}` has no irrelevant partner", q.id)))?;
            let partner = lookup(&by_id, partner_id)?;
            if partner.relation == q.relation {
                return Err(Error::Evaluation(format!("partner `{}` of `{}` shares its relation", partner.id, q.id)));
            }
            Ok(EditTrial { query: q, partner, neurons: neurons.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    let results = run_trials(model, &trials)?;
    let rows: Vec<DeltaRow> = results.iter().map(TrialResult::row).collect();
    Ok((success_rate(&rows, 0, rule)?, results))
}

/// Neuron sets of the same sizes as `sets`, drawn uniformly without
/// replacement from the whole model, one sub-seed per query.
pub fn random_control(
    sets: &BTreeMap<String, BTreeSet<NeuronId>>,
    n_layers: usize,
    ffn_dim: usize,
    seed: u64,
) -> Result<BTreeMap<String, BTreeSet<NeuronId>>> {
    let total = n_layers * ffn_dim;
    sets.iter()
        .map(|(id, s)| {
            if s.len() > total {
                return Err(Error::Evaluation(format!("set for `{id}` is larger than the model")));
            }
            let mut rng = seeds::rng_for(seed, id);
            let picked = index::sample(&mut rng, total, s.len())
                .into_iter()
                .map(|i| NeuronId::new(i / ffn_dim, i % ffn_dim))
                .collect();
            Ok((id.clone(), picked))
        })
        .collect()
}

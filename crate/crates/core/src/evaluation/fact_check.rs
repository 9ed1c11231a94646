// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{fill_candidate, Architecture, ClozeQuery, TokenId};
use crate::error::{Error, Result};
use crate::model::{NeuronId, Transformer};
use crate::scalar::Scalar;

/// Degenerate neurons of one relation and the activation threshold used to
/// judge statements with them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DknBank {
    pub relation: String,
    pub architecture: Architecture,
    pub neurons: BTreeSet<NeuronId>,
    pub t_percent: f64,
    pub n_mining_queries: usize,
    /// Minimum number of mining queries a neuron had to appear in.
    pub cutoff: usize,
    pub lambda: f64,
}

/// Activations of `neurons` when `candidate` fills the answer slot of
/// `query`, read at the candidate's position.
pub fn statement_activations<T: Scalar>(
    model: &Transformer<T>,
    neurons: &BTreeSet<NeuronId>,
    query: &ClozeQuery,
    candidate: TokenId,
) -> Result<Vec<f64>> {
    for &n in neurons {
        model.check_neuron(n)?;
    }
    if neurons.is_empty() {
        return Ok(Vec::new());
    }
    let (tokens, pos) = fill_candidate(query, candidate);
    let snap = model.activations_at(&tokens, pos)?;
    Ok(neurons.iter().map(|&n| snap.get(n).to_f64().unwrap_or(f64::NAN)).collect())
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Mean bank activation on the filled statement; `None` for an empty bank.
pub fn bank_activation<T: Scalar>(
    model: &Transformer<T>,
    neurons: &BTreeSet<NeuronId>,
    query: &ClozeQuery,
    candidate: TokenId,
) -> Result<Option<f64>> {
    Ok(mean(&statement_activations(model, neurons, query, candidate)?))
}

/// The decision rule: a statement is correct when the mean of the bank
/// activations exceeds `lambda`; no activations means incorrect.
pub fn judge_activations(activations: &[f64], lambda: f64) -> bool {
    mean(activations).is_some_and(|m| m > lambda)
}

/// `true` when the mean bank activation on the filled statement exceeds
/// `lambda`. An empty bank judges every statement incorrect.
pub fn fact_check<T: Scalar>(
    model: &Transformer<T>,
    bank: &BTreeSet<NeuronId>,
    query: &ClozeQuery,
    candidate: TokenId,
    lambda: f64,
) -> Result<bool> {
    Ok(judge_activations(&statement_activations(model, bank, query, candidate)?, lambda))
}

/// `true` when `candidate` is the model's top-1 answer to the unfilled query.
pub fn fact_check_baseline<T: Scalar>(model: &Transformer<T>, query: &ClozeQuery, candidate: TokenId) -> Result<bool> {
    Ok(model.top1(query, None)? == candidate)
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 { values[mid] } else { (values[mid - 1] + values[mid]) / 2.0 })
}

/// Median bank activation over the gold-filled statements of the mining
/// queries. `0.0` for an empty bank, which never fires anyway.
pub fn calibrate_lambda<T: Scalar>(
    model: &Transformer<T>,
    bank: &BTreeSet<NeuronId>,
    mining: &[ClozeQuery],
) -> Result<f64> {
    let mut acts = mining
        .par_iter()
        .map(|q| bank_activation(model, bank, q, q.gold_token))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    Ok(median(&mut acts).unwrap_or(0.0))
}

/// Precision, recall and F1 with "correct" as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    /// Nothing was predicted positive.
    pub precision_zero_division: bool,
    /// No gold positive exists.
    pub recall_zero_division: bool,
}

pub fn prf1(predictions: &[bool], gold: &[bool]) -> Result<Prf1> {
    if predictions.len() != gold.len() {
        return Err(Error::Evaluation(format!("{} predictions for {} gold labels", predictions.len(), gold.len())));
    }
    let mut c = [0usize; 4];
    for (&p, &g) in predictions.iter().zip(gold) {
        c[(p as usize) * 2 + g as usize] += 1;
    }
    let [tn, fn_, fp, tp] = c;
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(Prf1 {
        precision,
        recall,
        f1,
        tp,
        fp,
        fn_,
        tn,
        precision_zero_division: tp + fp == 0,
        recall_zero_division: tp + fn_ == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactCheckMethod {
    /// Mean activation of the relation's DKN bank against lambda.
    WithDkn,
    /// Top-1 prediction of the unedited model; a stand-in for direct
    /// evaluation by the model.
    WithoutDkn,
}

/// One judged statement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Judgement {
    pub query_id: String,
    pub relation: String,
    pub candidate: TokenId,
    pub gold: bool,
    pub predicted: bool,
    /// Mean bank activation, for the DKN method with a non-empty bank.
    pub activation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactCheckReport {
    pub method: FactCheckMethod,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Prf1,
    /// Lambda per relation; empty for the baseline.
    pub lambda_used: BTreeMap<String, f64>,
    pub t_percent_used: Option<f64>,
    pub per_relation: BTreeMap<String, Prf1>,
}

impl FactCheckReport {
    fn build(
        method: FactCheckMethod,
        judgements: &[Judgement],
        lambda_used: BTreeMap<String, f64>,
        t_percent_used: Option<f64>,
    ) -> Result<Self> {
        let labels = |js: &[&Judgement]| -> Result<Prf1> {
            let p: Vec<bool> = js.iter().map(|j| j.predicted).collect();
            let g: Vec<bool> = js.iter().map(|j| j.gold).collect();
            prf1(&p, &g)
        };
        let all: Vec<&Judgement> = judgements.iter().collect();
        let counts = labels(&all)?;
        let relations: BTreeSet<&str> = judgements.iter().map(|j| j.relation.as_str()).collect();
        let per_relation = relations
            .into_iter()
            .map(|r| {
                let js: Vec<&Judgement> = judgements.iter().filter(|j| j.relation == r).collect();
                Ok((r.to_string(), labels(&js)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            method,
            precision: counts.precision,
            recall: counts.recall,
            f1: counts.f1,
            counts,
            lambda_used,
            t_percent_used,
            per_relation,
        })
    }
}

/// A statement to judge: a query with a candidate answer and its label.
#[derive(Debug, Clone)]
pub struct Statement<'a> {
    pub query: &'a ClozeQuery,
    pub candidate: TokenId,
    pub gold: bool,
}

/// Judges every statement with both methods. `banks` is keyed by relation;
/// a relation without a bank is treated as having an empty one.
pub fn fact_check_experiment<T: Scalar>(
    model: &Transformer<T>,
    banks: &BTreeMap<String, DknBank>,
    statements: &[Statement<'_>],
) -> Result<(FactCheckReport, FactCheckReport, Vec<Judgement>, Vec<Judgement>)> {
    let empty = BTreeSet::new();
    let judged = statements
        .par_iter()
        .map(|s| {
            let bank = banks.get(&s.query.relation);
            let neurons = bank.map(|b| &b.neurons).unwrap_or(&empty);
            let lambda = bank.map(|b| b.lambda).unwrap_or(0.0);
            let activation = bank_activation(model, neurons, s.query, s.candidate)?;
            let with = Judgement {
                query_id: s.query.id.clone(),
                relation: s.query.relation.clone(),
                candidate: s.candidate,
                gold: s.gold,
                predicted: activation.is_some_and(|a| a > lambda),
                activation,
            };
            let without = Judgement {
                predicted: fact_check_baseline(model, s.query, s.candidate)?,
                activation: None,
                ..with.clone()
            };
            Ok((with, without))
        })
        .collect::<Result<Vec<_>>>()?;
    let (with, without): (Vec<Judgement>, Vec<Judgement>) = judged.into_iter().unzip();
    let lambdas = banks.iter().map(|(r, b)| (r.clone(), b.lambda)).collect();
    let t = banks.values().next().map(|b| b.t_percent);
    let with_report = FactCheckReport::build(FactCheckMethod::WithDkn, &with, lambdas, t)?;
    let without_report = FactCheckReport::build(FactCheckMethod::WithoutDkn, &without, BTreeMap::new(), None)?;
    Ok((with_report, without_report, with, without))
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! In-memory building blocks shared by the pipeline stages and the
//! single-step CLI commands. Failures name the offending record.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use crate::analysis::{
    aggregate_dkn_bank, ceil_fraction, detect_degenerate, intersect_languages, DknConfig, DknSet, LiknSet,
};
use crate::attribution::{
    attribute_query, select_knowledge_neurons, AttributionConfig, AttributionRecord, KnowledgeNeuronSet,
};
use crate::corpus::{split_by_relation, Architecture, ClozeQuery, Corpus};
use crate::error::{Error, Result};
use crate::evaluation::{calibrate_lambda, DknBank, Statement};
use crate::model::{NeuronId, Transformer};

pub(crate) fn at_record(stage: &str, record: &str, e: Error) -> Error {
    match e {
        e @ Error::Stage { .. } => e,
        other => {
            Error::Stage { stage: stage.to_string(), record: Some(record.to_string()), message: other.to_string() }
        }
    }
}

pub(crate) fn in_stage(stage: &str, e: Error) -> Error {
    match e {
        e @ Error::Stage { .. } => e,
        other => Error::Stage { stage: stage.to_string(), record: None, message: other.to_string() },
    }
}

/// Attribution maps and knowledge-neuron sets for every query.
pub fn locate(
    model: &Transformer<f64>,
    queries: &[ClozeQuery],
    config: &AttributionConfig,
) -> Result<(Vec<AttributionRecord>, Vec<KnowledgeNeuronSet>)> {
    let out = queries
        .par_iter()
        .map(|q| {
            let map = attribute_query(model, q, config).map_err(|e| at_record("locate", &q.id, e))?;
            let set = select_knowledge_neurons(&map, &q.lang_id, config).map_err(|e| at_record("locate", &q.id, e))?;
            Ok((map.to_record(), set))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(out.into_iter().unzip())
}

/// Shared neurons of every fact that has a set in at least two languages.
/// Output is ordered by fact id.
pub fn likn_sets(sets: &[KnowledgeNeuronSet]) -> Result<Vec<LiknSet>> {
    let mut by_fact: BTreeMap<&str, Vec<KnowledgeNeuronSet>> = BTreeMap::new();
    for s in sets {
        by_fact.entry(s.fact_id.as_str()).or_default().push(s.clone());
    }
    by_fact
        .into_iter()
        .filter(|(_, v)| v.len() >= 2)
        .map(|(fact, mut v)| {
            v.sort_by(|a, b| a.lang_id.cmp(&b.lang_id));
            intersect_languages(&v).map_err(|e| at_record("likn", fact, e))
        })
        .collect()
}

/// Degenerate pairs for every query that has a knowledge-neuron set.
pub fn dkn_sets(
    model: &Transformer<f64>,
    queries: &[ClozeQuery],
    sets: &BTreeMap<String, BTreeSet<NeuronId>>,
    config: &DknConfig,
) -> Result<Vec<DknSet>> {
    queries
        .par_iter()
        .filter_map(|q| sets.get(&q.id).map(|s| (q, s)))
        .map(|(q, s)| detect_degenerate(model, q, s, config).map_err(|e| at_record("dkn", &q.id, e)))
        .collect()
}

/// Mining and checking fact ids. The split is drawn once on the first
/// language's auto-encoding renderings so every language and architecture
/// sees the same facts on each side.
pub fn fact_split(corpus: &Corpus, ratio: f64, seed: u64) -> Result<(BTreeSet<String>, BTreeSet<String>)> {
    let first =
        corpus.facts.languages.first().ok_or_else(|| Error::Corpus("corpus has no languages".into()))?.lang_id.clone();
    let pivot: Vec<ClozeQuery> = corpus
        .queries
        .iter()
        .filter(|q| q.lang_id == first && q.architecture == Architecture::AutoEncoding)
        .cloned()
        .collect();
    let (mining, checking) = split_by_relation(&pivot, ratio, seed)?;
    Ok((mining.into_iter().map(|q| q.fact_id).collect(), checking.into_iter().map(|q| q.fact_id).collect()))
}

/// One DKN bank per relation, mined from the DKN sets of `mining_facts`.
/// `lambda` overrides the calibrated threshold when given.
pub fn mine_banks(
    model: &Transformer<f64>,
    queries: &[ClozeQuery],
    dkn: &[DknSet],
    mining_facts: &BTreeSet<String>,
    t_percent: f64,
    lambda: Option<f64>,
) -> Result<BTreeMap<String, DknBank>> {
    let arch = queries.first().map(|q| q.architecture).ok_or_else(|| Error::Stage {
        stage: "dkn".into(),
        record: None,
        message: "no queries".into(),
    })?;
    let relations: BTreeSet<&str> = queries.iter().map(|q| q.relation.as_str()).collect();
    relations
        .into_iter()
        .map(|rel| {
            let sets: Vec<DknSet> =
                dkn.iter().filter(|s| s.relation == rel && mining_facts.contains(&s.fact_id)).cloned().collect();
            let neurons = aggregate_dkn_bank(&sets, t_percent).map_err(|e| at_record("dkn", rel, e))?;
            let mining: Vec<ClozeQuery> =
                queries.iter().filter(|q| q.relation == rel && mining_facts.contains(&q.fact_id)).cloned().collect();
            let lambda = match lambda {
                Some(l) => l,
                None => calibrate_lambda(model, &neurons, &mining).map_err(|e| at_record("dkn", rel, e))?,
            };
            Ok((
                rel.to_string(),
                DknBank {
                    relation: rel.to_string(),
                    architecture: arch,
                    cutoff: ceil_fraction(t_percent, sets.len()),
                    n_mining_queries: sets.len(),
                    neurons,
                    t_percent,
                    lambda,
                },
            ))
        })
        .collect()
}

/// A correct and an incorrect statement for each checking query.
pub fn checking_statements<'a>(
    corpus: &Corpus,
    queries: &'a [ClozeQuery],
    checking_facts: &BTreeSet<String>,
) -> Result<Vec<Statement<'a>>> {
    let mut out = Vec::new();
    for q in queries.iter().filter(|q| checking_facts.contains(&q.fact_id)) {
        let wrong = corpus
            .wrong_for(&q.fact_id, &q.lang_id)
            .ok_or_else(|| at_record("fact-check", &q.id, Error::Corpus("no wrong answer for this fact".into())))?;
        out.push(Statement { query: q, candidate: q.gold_token, gold: true });
        out.push(Statement { query: q, candidate: wrong.wrong_token, gold: false });
    }
    Ok(out)
}

pub fn sets_by_query(sets: &[KnowledgeNeuronSet]) -> BTreeMap<String, BTreeSet<NeuronId>> {
    sets.iter().map(|s| (s.query_id.clone(), s.neurons.clone())).collect()
}

pub fn sets_by_fact_lang(sets: &[KnowledgeNeuronSet]) -> BTreeMap<(String, String), BTreeSet<NeuronId>> {
    sets.iter().map(|s| ((s.fact_id.clone(), s.lang_id.clone()), s.neurons.clone())).collect()
}

pub fn likn_by_fact(sets: &[LiknSet]) -> BTreeMap<String, LiknSet> {
    sets.iter().map(|s| (s.fact_id.clone(), s.clone())).collect()
}

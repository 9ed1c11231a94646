// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::edit::{run_trials, success_rate, DeltaRow, EditTrial, ExclusionRule, SrReport, TrialResult};
use crate::analysis::LiknSet;
use crate::corpus::ClozeQuery;
use crate::error::{Error, Result};
use crate::model::{NeuronId, Transformer};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Protocol {
    /// Edit the language-independent neurons of the fact.
    #[serde(rename = "likn")]
    Likn,
    /// Edit the other language's knowledge neurons.
    #[serde(rename = "mono-kn")]
    MonoKn,
    /// Edit the union of every language's knowledge neurons.
    #[serde(rename = "seq-kn")]
    SeqKn,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Likn, Protocol::MonoKn, Protocol::SeqKn];

    pub fn tag(self) -> &'static str {
        match self {
            Protocol::Likn => "likn",
            Protocol::MonoKn => "mono-kn",
            Protocol::SeqKn => "seq-kn",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Protocol::ALL
            .into_iter()
            .find(|p| p.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown protocol `{s}`, expected likn, mono-kn or seq-kn")))
    }
}

/// Success rates of one protocol, keyed by the language the edits are
/// measured on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossLingualReport {
    pub protocol: Protocol,
    pub per_language: BTreeMap<String, SrReport>,
}

impl CrossLingualReport {
    /// Mean `sr_total` over evaluation languages; flagged languages count
    /// as infinite or minus infinite.
    pub fn mean_total(&self) -> f64 {
        let n = self.per_language.len().max(1) as f64;
        self.per_language.values().map(SrReport::total_for_comparison).sum::<f64>() / n
    }
}

/// The neuron set `protocol` edits when measuring fact `fact_id` on
/// language `eval_lang`, or `None` when the fact has to be skipped.
pub fn protocol_targets(
    protocol: Protocol,
    fact_id: &str,
    eval_lang: &str,
    per_language: &BTreeMap<(String, String), BTreeSet<NeuronId>>,
    likn: &BTreeMap<String, LiknSet>,
    languages: &[String],
) -> Option<BTreeSet<NeuronId>> {
    let kn = |lang: &str| per_language.get(&(fact_id.to_string(), lang.to_string()));
    let set = match protocol {
        Protocol::Likn => likn.get(fact_id)?.neurons.clone(),
        Protocol::MonoKn => {
            let mut others = languages.iter().filter(|l| l.as_str() != eval_lang);
            let source = others.next()?;
            kn(source)?.clone()
        }
        Protocol::SeqKn => {
            let mut union = BTreeSet::new();
            for lang in languages {
                union.extend(kn(lang)?.iter().copied());
            }
            union
        }
    };
    (!set.is_empty()).then_some(set)
}

/// Runs `protocol` over `queries` (one architecture, every language).
///
/// `per_language` maps `(fact_id, lang_id)` to that rendering's knowledge
/// neurons, `likn` maps fact ids to their shared neurons and `pairing`
/// gives each query its irrelevant partner. Facts whose edit set is
/// missing or empty are skipped and counted in `n_skipped`.
pub fn cross_lingual_edit_experiment<T: Scalar>(
    model: &Transformer<T>,
    queries: &[ClozeQuery],
    per_language: &BTreeMap<(String, String), BTreeSet<NeuronId>>,
    likn: &BTreeMap<String, LiknSet>,
    pairing: &BTreeMap<String, String>,
    protocol: Protocol,
    rule: &ExclusionRule,
) -> Result<(CrossLingualReport, Vec<TrialResult>)> {
    let languages: Vec<String> =
        queries.iter().map(|q| q.lang_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if languages.len() < 2 {
        return Err(Error::Evaluation(format!(
            "cross-lingual editing needs at least two languages, got {}",
            languages.len()
        )));
    }
    if protocol == Protocol::MonoKn && languages.len() != 2 {
        return Err(Error::Evaluation("the mono-kn protocol is defined for exactly two languages".into()));
    }
    let by_id: BTreeMap<&str, &ClozeQuery> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut per_lang_report = BTreeMap::new();
    let mut all_results = Vec::new();
    for lang in &languages {
        let mut trials = Vec::new();
        let mut skipped = 0;
        for q in queries.iter().filter(|q| &q.lang_id == lang) {
            let Some(neurons) = protocol_targets(protocol, &q.fact_id, lang, per_language, likn, &languages) else {
                skipped += 1;
                continue;
            };
            let partner = pairing
                .get(&q.id)
                .and_then(|id| by_id.get(id.as_str()).copied())
                .ok_or_else(|| Error::Evaluation(format!("query `{}` has no irrelevant partner", q.id)))?;
            trials.push(EditTrial { query: q, partner, neurons });
        }
        let results = run_trials(model, &trials)?;
        let rows: Vec<DeltaRow> = results.iter().map(TrialResult::row).collect();
        per_lang_report.insert(lang.clone(), success_rate(&rows, skipped, rule)?);
        all_results.extend(results);
    }
    Ok((CrossLingualReport { protocol, per_language: per_lang_report }, all_results))
}

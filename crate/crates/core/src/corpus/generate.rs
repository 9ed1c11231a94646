// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::render_cloze;
use super::types::{
    entity_list, Architecture, ClozeQuery, FactSet, FactTriple, LanguageSpec, Vocab, WrongFact, BLANK_SLOT, HEAD_SLOT,
};
use crate::error::{Error, Result};
use crate::io;
use crate::seeds;

/// Size and seed of a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub n_relations: usize,
    pub n_facts_per_relation: usize,
    pub seed: u64,
}

/// A generated corpus: facts, all cloze renderings, and wrong answers.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub facts: FactSet,
    pub queries: Vec<ClozeQuery>,
    pub wrong_facts: Vec<WrongFact>,
}

#[derive(Serialize, Deserialize)]
struct FactRecord {
    id: String,
    head: String,
    relation: String,
    tail: String,
    lang: String,
    template_id: String,
}

/// Languages `lang_ids` with one template per relation `rel0..`.
///
/// Each template holds two relation-specific function words, the head slot
/// at a seeded position among them, and the blank at the end.
pub fn synthetic_languages(lang_ids: &[String], n_relations: usize, seed: u64) -> Vec<LanguageSpec> {
    let mut rng = seeds::rng_for(seed, "languages");
    lang_ids
        .iter()
        .map(|lang| {
            let mut spec = LanguageSpec::new(lang.clone());
            for r in 0..n_relations {
                let mut pattern: Vec<String> = (0..2).map(|k| format!("{lang}:rel{r}.w{k}")).collect();
                let head_at = rng.random_range(0..=pattern.len());
                pattern.insert(head_at, HEAD_SLOT.to_string());
                pattern.push(BLANK_SLOT.to_string());
                spec.templates.insert(relation_name(r), pattern);
            }
            spec
        })
        .collect()
}

fn relation_name(r: usize) -> String {
    format!("rel{r}")
}

/// Picks the fact whose tail serves as the wrong answer for `fact`.
fn sample_wrong_source<'a>(fact: &FactTriple, facts: &'a [FactTriple], seed: u64) -> Result<&'a FactTriple> {
    let pool: Vec<&FactTriple> = facts.iter().filter(|f| f.relation == fact.relation && f.tail != fact.tail).collect();
    if pool.is_empty() {
        return Err(Error::Corpus(format!(
            "relation `{}` has a single distinct tail; cannot sample a wrong fact for `{}`",
            fact.relation, fact.id
        )));
    }
    let mut rng = seeds::rng_for(seed, &fact.id);
    Ok(pool[rng.random_range(0..pool.len())])
}

/// Samples a wrong answer for `fact` from another fact of the same relation,
/// rendered in `lang_id`. The source fact depends only on `seed` and the fact,
/// so every language receives the same wrong entity.
pub fn sample_wrong_fact(fact: &FactTriple, fact_set: &FactSet, lang_id: &str, seed: u64) -> Result<WrongFact> {
    let source = sample_wrong_source(fact, &fact_set.facts, seed)?;
    let lang = fact_set.language(lang_id).ok_or_else(|| Error::Corpus(format!("unknown language `{lang_id}`")))?;
    let surface = lang.surface(&source.tail);
    if surface.len() != 1 {
        return Err(Error::MultiTokenAnswer {
            fact_id: source.id.clone(),
            surface: surface.join(" "),
            tokens: surface.len(),
        });
    }
    let wrong_token = fact_set
        .vocab
        .id(&surface[0])
        .ok_or_else(|| Error::Corpus(format!("token `{}` not in vocabulary", surface[0])))?;
    Ok(WrongFact { fact_id: fact.id.clone(), lang_id: lang_id.to_string(), wrong_token, provenance: source.id.clone() })
}

/// Generates `n_relations * n_facts_per_relation` facts, renders each in
/// every language for both architectures, and samples one wrong answer per
/// fact.
///
/// Every relation draws its heads and its tails from the same two entity
/// pools. Head `i` of relation `r` maps to tail `sigma((i + r) mod n)` for
/// one seeded permutation `sigma`, so no head keeps its tail across
/// relations (while `r < n`). The answer is then a function of the head and
/// the relation jointly, which a purely additive path from the head token
/// and the template words to the output cannot represent.
pub fn generate_corpus(params: &CorpusParams, languages: &[LanguageSpec]) -> Result<Corpus> {
    if params.n_relations == 0 {
        return Err(Error::Config("at least one relation is required".into()));
    }
    if params.n_facts_per_relation < 4 {
        return Err(Error::Config(format!(
            "{} facts per relation is too few for wrong-fact sampling and splits (need >= 4)",
            params.n_facts_per_relation
        )));
    }
    if languages.is_empty() {
        return Err(Error::Config("at least one language is required".into()));
    }

    let n = params.n_facts_per_relation;
    let mut sigma: Vec<usize> = (0..n).collect();
    sigma.shuffle(&mut seeds::rng_for(params.seed, "tails"));
    let mut facts = Vec::with_capacity(params.n_relations * n);
    for r in 0..params.n_relations {
        for i in 0..n {
            facts.push(FactTriple {
                id: format!("f{r:02}.{i:03}"),
                head: format!("head{i}"),
                relation: relation_name(r),
                tail: format!("tail{}", sigma[(i + r) % n]),
            });
        }
    }
    for lang in languages {
        for r in 0..params.n_relations {
            lang.template(&relation_name(r))?;
        }
    }

    let vocab = Vocab::build(languages, &entity_list(&facts))?;
    let fact_set = FactSet { facts, languages: languages.to_vec(), vocab };

    let mut queries = Vec::with_capacity(fact_set.facts.len() * languages.len() * 2);
    for fact in &fact_set.facts {
        for lang in languages {
            for arch in Architecture::ALL {
                queries.push(render_cloze(fact, lang, arch, &fact_set.vocab)?);
            }
        }
    }

    let wrong_seed = seeds::derive_seed(params.seed, "wrong-facts");
    let mut wrong_facts = Vec::with_capacity(fact_set.facts.len() * languages.len());
    for fact in &fact_set.facts {
        for lang in languages {
            wrong_facts.push(sample_wrong_fact(fact, &fact_set, &lang.lang_id, wrong_seed)?);
        }
    }

    Ok(Corpus { facts: fact_set, queries, wrong_facts })
}

impl Corpus {
    pub fn queries_for(&self, arch: Architecture) -> Vec<ClozeQuery> {
        self.queries.iter().filter(|q| q.architecture == arch).cloned().collect()
    }

    pub fn query(&self, id: &str) -> Option<&ClozeQuery> {
        self.queries.iter().find(|q| q.id == id)
    }

    pub fn wrong_for(&self, fact_id: &str, lang_id: &str) -> Option<&WrongFact> {
        self.wrong_facts.iter().find(|w| w.fact_id == fact_id && w.lang_id == lang_id)
    }

    pub const FILES: [&'static str; 5] =
        ["facts.jsonl", "queries.jsonl", "wrong_facts.jsonl", "languages.json", "vocab.json"];

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut records = Vec::new();
        for fact in &self.facts.facts {
            for lang in &self.facts.languages {
                records.push(FactRecord {
                    id: fact.id.clone(),
                    head: fact.head.clone(),
                    relation: fact.relation.clone(),
                    tail: fact.tail.clone(),
                    lang: lang.lang_id.clone(),
                    template_id: lang.template_id(&fact.relation),
                });
            }
        }
        io::write_jsonl(&dir.join("facts.jsonl"), &records)?;
        io::write_jsonl(&dir.join("queries.jsonl"), &self.queries)?;
        io::write_jsonl(&dir.join("wrong_facts.jsonl"), &self.wrong_facts)?;
        io::write_json(&dir.join("languages.json"), &self.facts.languages)?;
        io::write_json(&dir.join("vocab.json"), self.facts.vocab.tokens())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let records: Vec<FactRecord> = io::read_jsonl(&dir.join("facts.jsonl"))?;
        let mut facts: Vec<FactTriple> = Vec::new();
        let mut seen = BTreeMap::new();
        for r in records {
            if seen.insert(r.id.clone(), ()).is_none() {
                facts.push(FactTriple { id: r.id, head: r.head, relation: r.relation, tail: r.tail });
            }
        }
        let languages: Vec<LanguageSpec> = io::read_json(&dir.join("languages.json"))?;
        let tokens: Vec<String> = io::read_json(&dir.join("vocab.json"))?;
        let vocab = Vocab::from_tokens(tokens)?;
        Ok(Self {
            facts: FactSet { facts, languages, vocab },
            queries: io::read_jsonl(&dir.join("queries.jsonl"))?,
            wrong_facts: io::read_jsonl(&dir.join("wrong_facts.jsonl"))?,
        })
    }
}

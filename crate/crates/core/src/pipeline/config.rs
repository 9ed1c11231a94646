// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{DknConfig, DEFAULT_T_HIGH, DEFAULT_T_LOW, DEFAULT_T_PERCENT};
use crate::attribution::{AttributionConfig, BaselineMode, ClampMode, RiemannCoefficient, DEFAULT_STEPS, DEFAULT_TAU};
use crate::corpus::{Architecture, CorpusParams};
use crate::error::{Error, Result};
use crate::evaluation::ExclusionRule;
use crate::model::{ModelConfig, TrainConfig};
use crate::seeds::derive_seed;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub languages: Vec<String>,
    pub relations: usize,
    pub facts_per_relation: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architectures: Vec<Architecture>,
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Per-sequence dropout of FFN units during training.
    #[serde(default)]
    pub ffn_dropout: f64,
    pub precision: Precision,
    /// Training accuracy every downstream stage requires.
    pub min_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionSection {
    pub steps: usize,
    pub baseline_mode: BaselineMode,
    pub riemann_coeff: RiemannCoefficient,
    pub clamp_mode: ClampMode,
    /// Also localize with the zero baseline for comparison.
    pub compare_zero_baseline: bool,
    pub tau: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DknSection {
    pub t_low: f64,
    pub t_high: f64,
    pub t_percent: f64,
    /// Share of each relation's facts used to mine DKN banks.
    pub split_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub drop_unmastered: bool,
    pub top_fraction: f64,
    /// Fixed fact-check threshold; calibrated per relation when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
}

/// Everything one pipeline run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Worker threads; all available cores when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Forces a single worker.
    #[serde(default)]
    pub deterministic: bool,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub attribution: AttributionSection,
    pub dkn: DknSection,
    pub evaluation: EvaluationSection,
}

impl RunConfig {
    /// The reference setting: two languages, two relations, eight facts per
    /// relation, 4-layer models with 512 FFN units.
    pub fn reference() -> Self {
        let languages = vec!["en".to_string(), "zh".to_string()];
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 7,
            out_dir: None,
            workers: None,
            deterministic: false,
            corpus: CorpusSection { languages: languages.clone(), relations: 2, facts_per_relation: 8 },
            model: ModelSection {
                architectures: Architecture::ALL.to_vec(),
                layers: 4,
                dim: 128,
                heads: 4,
                ffn_dim: 512,
                max_seq_len: 8,
                epochs: 300,
                learning_rate: 1e-3,
                batch_size: 8,
                weight_decay: 0.0,
                ffn_dropout: 0.0,
                precision: Precision::F32,
                min_accuracy: 0.9,
            },
            attribution: AttributionSection {
                steps: DEFAULT_STEPS,
                baseline_mode: BaselineMode::Adapted,
                riemann_coeff: RiemannCoefficient::Standard,
                clamp_mode: ClampMode::Layer,
                compare_zero_baseline: true,
                tau: languages.iter().map(|l| (l.clone(), DEFAULT_TAU)).collect(),
            },
            dkn: DknSection {
                t_low: DEFAULT_T_LOW,
                t_high: DEFAULT_T_HIGH,
                t_percent: DEFAULT_T_PERCENT,
                split_ratio: 0.5,
            },
            evaluation: EvaluationSection { drop_unmastered: true, top_fraction: 0.05, lambda: None },
        }
    }

    /// The reference setting restricted to one language.
    pub fn monolingual() -> Self {
        let mut cfg = Self::reference();
        cfg.corpus.languages = vec!["en".into()];
        cfg.attribution.tau = [("en".to_string(), DEFAULT_TAU)].into();
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        let langs = &self.corpus.languages;
        if langs.is_empty() {
            return bad("corpus.languages is empty".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in langs {
            if !seen.insert(l) {
                return bad(format!("language `{l}` is listed twice"));
            }
        }
        if self.corpus.relations < 2 {
            return bad("corpus.relations must be at least 2 so every query has an irrelevant partner".into());
        }
        if self.corpus.facts_per_relation < 4 {
            return bad("corpus.facts_per_relation must be at least 4".into());
        }
        if self.model.architectures.is_empty() {
            return bad("model.architectures is empty".into());
        }
        for arch in &self.model.architectures {
            self.model_config(*arch, usize::MAX).validate()?;
        }
        if !(0.0..=1.0).contains(&self.model.min_accuracy) {
            return bad(format!("model.min_accuracy must lie in [0, 1], got {}", self.model.min_accuracy));
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        if self.model.batch_size == 0 {
            return bad("model.batch_size must be at least 1".into());
        }
        if let Some(extra) = self.attribution.tau.keys().find(|k| !langs.contains(k)) {
            return bad(format!("attribution.tau names unknown language `{extra}`"));
        }
        self.attribution_config().validate(langs)?;
        self.dkn_config().validate()?;
        if !(self.dkn.t_percent > 0.0 && self.dkn.t_percent <= 1.0) {
            return bad(format!("dkn.t_percent must lie in (0, 1], got {}", self.dkn.t_percent));
        }
        if !(self.dkn.split_ratio > 0.0 && self.dkn.split_ratio < 1.0) {
            return bad(format!("dkn.split_ratio must lie in (0, 1), got {}", self.dkn.split_ratio));
        }
        self.exclusion_rule().validate()?;
        if let Some(l) = self.evaluation.lambda {
            if !l.is_finite() {
                return bad("evaluation.lambda must be finite".into());
            }
        }
        Ok(())
    }

    pub fn sub_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label)
    }

    pub fn corpus_params(&self) -> CorpusParams {
        CorpusParams {
            n_relations: self.corpus.relations,
            n_facts_per_relation: self.corpus.facts_per_relation,
            seed: self.sub_seed("corpus"),
        }
    }

    pub fn model_config(&self, arch: Architecture, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            architecture: arch,
            n_layers: self.model.layers,
            model_dim: self.model.dim,
            n_heads: self.model.heads,
            ffn_dim: self.model.ffn_dim,
            vocab_size,
            max_seq_len: self.model.max_seq_len,
            seed: self.sub_seed(&format!("init/{}", arch.tag())),
        }
    }

    pub fn train_config(&self, arch: Architecture) -> TrainConfig {
        TrainConfig {
            epochs: self.model.epochs,
            learning_rate: self.model.learning_rate,
            batch_size: self.model.batch_size,
            weight_decay: self.model.weight_decay,
            ffn_dropout: self.model.ffn_dropout,
            seed: self.sub_seed(&format!("train/{}", arch.tag())),
        }
    }

    pub fn attribution_config(&self) -> AttributionConfig {
        AttributionConfig {
            riemann_steps: self.attribution.steps,
            tau_per_language: self.attribution.tau.clone(),
            baseline_mode: self.attribution.baseline_mode,
            coefficient: self.attribution.riemann_coeff,
            clamp_mode: self.attribution.clamp_mode,
        }
    }

    pub fn dkn_config(&self) -> DknConfig {
        DknConfig { t_low: self.dkn.t_low, t_high: self.dkn.t_high }
    }

    pub fn exclusion_rule(&self) -> ExclusionRule {
        ExclusionRule { drop_unmastered: self.evaluation.drop_unmastered, top_fraction: self.evaluation.top_fraction }
    }

    pub fn is_multilingual(&self) -> bool {
        self.corpus.languages.len() >= 2
    }

    /// Thread count for the worker pool.
    pub fn effective_workers(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        }
    }

    /// Canonical JSON of the settings that affect results. Output location
    /// and thread settings are left out: a run can be moved, and results
    /// do not depend on the worker count.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.out_dir = None;
        c.workers = None;
        c.deterministic = false;
        serde_json::to_string(&c).expect("run config serializes to JSON")
    }
}

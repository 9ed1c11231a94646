// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{Precision, RunConfig};
use super::manifest::{digests, missing_input, StageManifest, StageStatus};
use super::ops::{self, in_stage};
use crate::analysis::{DknSet, LiknSet};
use crate::attribution::{AttributionConfig, BaselineMode, KnowledgeNeuronSet};
use crate::corpus::{generate_corpus, synthetic_languages, Architecture, ClozeQuery, Corpus};
use crate::error::{Error, Result};
use crate::evaluation::{
    cross_lingual_edit_experiment, editing_success_rate, fact_check_experiment, irrelevant_pairing, random_control,
    CrossLingualReport, DknBank, FactCheckMethod, FactCheckReport, Judgement, Protocol, SrReport, TrialResult,
};
use crate::io;
use crate::model::{load_checkpoint, save_checkpoint, train, TrainLog, Transformer};
use crate::report::{write_layer_distribution, LayerHistogram};

pub const CORPUS_DIR: &str = "01-corpus";
pub const TRAIN_DIR: &str = "02-train";
pub const LOCATE_DIR: &str = "03-locate";
pub const LIKN_DIR: &str = "04-likn";
pub const DKN_DIR: &str = "05-dkn";
pub const EDIT_DIR: &str = "06-edit-eval";
pub const XLING_DIR: &str = "07-xling-eval";
pub const FACT_CHECK_DIR: &str = "08-fact-check";
pub const REPORT_DIR: &str = "09-report";

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const ATTRIBUTIONS_FILE: &str = "attributions.jsonl";
pub const NEURON_SETS_FILE: &str = "neuron_sets.jsonl";
pub const ZERO_NEURON_SETS_FILE: &str = "neuron_sets_zero_baseline.jsonl";
pub const LIKN_FILE: &str = "likn.jsonl";
pub const DKN_SETS_FILE: &str = "dkn_sets.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const BANKS_FILE: &str = "banks.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const TRIALS_FILE: &str = "trials.jsonl";
pub const JUDGEMENTS_FILE: &str = "judgements.jsonl";

/// One line of the fact-checking judgement log.
#[derive(Debug, Serialize)]
struct JudgementRecord<'a> {
    method: FactCheckMethod,
    #[serde(flatten)]
    judgement: &'a Judgement,
}

/// One line of the cross-lingual trial log.
#[derive(Debug, Serialize)]
struct ProtocolTrial<'a> {
    protocol: Protocol,
    #[serde(flatten)]
    trial: &'a TrialResult,
}

/// Result of one stage within a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub status: StageStatus,
    /// The stage's existing outputs were verified and reused.
    pub reused: bool,
}

/// What a stage body produced.
struct Produced {
    outputs: Vec<PathBuf>,
    /// Set when the stage does not apply to this run.
    skipped: Option<String>,
}

impl Produced {
    fn files(outputs: Vec<PathBuf>) -> Self {
        Self { outputs, skipped: None }
    }

    fn skipped(reason: &str) -> Self {
        Self { outputs: Vec::new(), skipped: Some(reason.to_string()) }
    }
}

/// Mining and checking facts of the fact-checking split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactSplit {
    pub ratio: f64,
    pub mining: BTreeSet<String>,
    pub checking: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditEvalReport {
    pub architecture: Architecture,
    /// Knowledge neurons from the adapted baseline.
    pub amig: SrReport,
    /// Size-matched random neurons.
    pub random: SrReport,
    pub zero_baseline: Option<SrReport>,
    pub mean_set_size: f64,
    pub mean_set_size_zero_baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XlingReport {
    pub architecture: Architecture,
    pub protocols: Vec<CrossLingualReport>,
    /// Protocols that do not apply to this language count.
    pub not_applicable: Vec<Protocol>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactCheckSummary {
    pub architecture: Architecture,
    pub n_statements: usize,
    pub with_dkn: FactCheckReport,
    pub without_dkn: FactCheckReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiknSummary {
    pub n_facts: usize,
    pub n_empty: usize,
    pub mean_size: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankSummary {
    pub size: usize,
    pub cutoff: usize,
    pub n_mining_queries: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DknSummary {
    pub n_queries: usize,
    pub n_with_pairs: usize,
    pub mean_pairs: f64,
    pub mean_candidates: f64,
    pub banks: BTreeMap<String, BankSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSummary {
    pub train_accuracy: f64,
    pub mean_kn_size: BTreeMap<String, f64>,
    pub likn: Option<LiknSummary>,
    pub dkn: DknSummary,
    pub edit: EditEvalReport,
    pub xling: Option<XlingReport>,
    pub fact_check: FactCheckSummary,
}

/// Histogram entry of the final report; `histogram` is `None` when the
/// input was empty and a warning file was written instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramEntry {
    pub label: String,
    pub histogram: Option<LayerHistogram>,
}

/// Top-level machine-readable report of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub languages: Vec<String>,
    pub architectures: BTreeMap<Architecture, ArchSummary>,
    pub histograms: Vec<HistogramEntry>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// A run directory bound to its configuration.
pub struct Runner {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub config_hash: String,
    pub log: Vec<StageLog>,
}

impl Runner {
    pub fn new(dir: &Path, config: RunConfig) -> Result<Self> {
        config.validate()?;
        let config_hash = io::sha256_hex(config.canonical_json().as_bytes());
        Ok(Self { dir: dir.to_path_buf(), config, config_hash, log: Vec::new() })
    }

    pub fn stage_dir(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn arch_dir(&self, root: &str, arch: Architecture) -> PathBuf {
        self.dir.join(root).join(arch.tag())
    }

    /// Runs `body` for stage `name` in `rel`, or reuses the stage's outputs
    /// when its manifest still matches the configuration and inputs.
    fn stage(
        &mut self,
        name: &str,
        stage_dir: PathBuf,
        inputs: &[PathBuf],
        body: impl FnOnce(&Self, &Path) -> Result<Produced>,
    ) -> Result<Vec<PathBuf>> {
        for p in inputs {
            if !p.is_file() {
                return Err(missing_input(name, p));
            }
        }
        let input_digests = digests(&self.dir, inputs)?;
        if let Some(m) = StageManifest::load(&stage_dir) {
            if m.is_current(&self.dir, &self.config_hash, &input_digests) {
                log::info!("stage {name}: outputs verified, reusing");
                self.log.push(StageLog { stage: name.to_string(), status: m.status, reused: true });
                return Ok(m.output_paths(&self.dir));
            }
        }
        std::fs::create_dir_all(&stage_dir).map_err(|e| Error::io(&stage_dir, e))?;
        log::info!("stage {name}: running");
        let manifest = |status, outputs: Vec<_>, note, error| StageManifest {
            stage: name.to_string(),
            config_hash: self.config_hash.clone(),
            status,
            inputs: input_digests.clone(),
            outputs,
            note,
            error,
        };
        match body(self, &stage_dir) {
            Ok(produced) => {
                let status = if produced.skipped.is_some() { StageStatus::Skipped } else { StageStatus::Complete };
                manifest(status, digests(&self.dir, &produced.outputs)?, produced.skipped, None).write(&stage_dir)?;
                self.log.push(StageLog { stage: name.to_string(), status, reused: false });
                Ok(produced.outputs)
            }
            Err(e) => {
                let e = in_stage(name, e);
                manifest(StageStatus::Failed, Vec::new(), None, Some(e.to_string())).write(&stage_dir)?;
                self.log.push(StageLog { stage: name.to_string(), status: StageStatus::Failed, reused: false });
                Err(e)
            }
        }
    }

    fn corpus_files(&self) -> Vec<PathBuf> {
        Corpus::FILES.iter().map(|f| self.stage_dir(CORPUS_DIR).join(f)).collect()
    }

    fn load_corpus(&self) -> Result<Corpus> {
        Corpus::read(&self.stage_dir(CORPUS_DIR))
    }

    fn load_model(&self, arch: Architecture) -> Result<Transformer<f64>> {
        Ok(load_checkpoint(&self.arch_dir(TRAIN_DIR, arch).join(CHECKPOINT_FILE))?.to_f64())
    }

    fn load_sets(&self, arch: Architecture, file: &str) -> Result<Vec<KnowledgeNeuronSet>> {
        io::read_jsonl(&self.arch_dir(LOCATE_DIR, arch).join(file))
    }

    pub fn gen_corpus(&mut self) -> Result<()> {
        self.stage("gen-corpus", self.stage_dir(CORPUS_DIR), &[], |r, dir| {
            let cfg = &r.config;
            let langs = synthetic_languages(&cfg.corpus.languages, cfg.corpus.relations, cfg.sub_seed("languages"));
            let corpus = generate_corpus(&cfg.corpus_params(), &langs)?;
            corpus.write(dir)?;
            Ok(Produced::files(r.corpus_files()))
        })?;
        Ok(())
    }

    pub fn train(&mut self, arch: Architecture) -> Result<()> {
        let name = format!("train/{arch}");
        let inputs = self.corpus_files();
        self.stage(&name, self.arch_dir(TRAIN_DIR, arch), &inputs, |r, dir| {
            let corpus = r.load_corpus()?;
            let queries = corpus.queries_for(arch);
            let cfg = &r.config;
            let mcfg = cfg.model_config(arch, corpus.facts.vocab.len());
            let tcfg = cfg.train_config(arch);
            let ckpt = dir.join(CHECKPOINT_FILE);
            let log: TrainLog = match cfg.model.precision {
                Precision::F32 => {
                    let (m, log) = train::<f32>(&queries, mcfg, &tcfg)?;
                    save_checkpoint(&m, &ckpt)?;
                    log
                }
                Precision::F64 => {
                    let (m, log) = train::<f64>(&queries, mcfg, &tcfg)?;
                    save_checkpoint(&m, &ckpt)?;
                    log
                }
            };
            let log_path = dir.join(TRAIN_LOG_FILE);
            io::write_json(&log_path, &log)?;
            if log.final_accuracy < cfg.model.min_accuracy {
                return Err(Error::Stage {
                    stage: format!("train/{arch}"),
                    record: None,
                    message: format!(
                        "training accuracy {:.4} is below min_accuracy {:.4}",
                        log.final_accuracy, cfg.model.min_accuracy
                    ),
                });
            }
            Ok(Produced::files(vec![ckpt, log_path]))
        })?;
        Ok(())
    }

    pub fn locate(&mut self, arch: Architecture) -> Result<()> {
        let mut inputs = self.corpus_files();
        inputs.push(self.arch_dir(TRAIN_DIR, arch).join(CHECKPOINT_FILE));
        self.stage(&format!("locate/{arch}"), self.arch_dir(LOCATE_DIR, arch), &inputs, |r, dir| {
            let model = r.load_model(arch)?;
            let queries = r.load_corpus()?.queries_for(arch);
            let acfg = r.config.attribution_config();
            let (records, sets) = ops::locate(&model, &queries, &acfg)?;
            let mut outputs = vec![dir.join(ATTRIBUTIONS_FILE), dir.join(NEURON_SETS_FILE)];
            io::write_jsonl(&outputs[0], &records)?;
            io::write_jsonl(&outputs[1], &sets)?;
            if r.config.attribution.compare_zero_baseline && acfg.baseline_mode != BaselineMode::Zero {
                let zcfg = AttributionConfig { baseline_mode: BaselineMode::Zero, ..acfg };
                let (_, zero_sets) = ops::locate(&model, &queries, &zcfg)?;
                let path = dir.join(ZERO_NEURON_SETS_FILE);
                io::write_jsonl(&path, &zero_sets)?;
                outputs.push(path);
            }
            Ok(Produced::files(outputs))
        })?;
        Ok(())
    }

    pub fn likn(&mut self, arch: Architecture) -> Result<()> {
        let inputs = vec![self.arch_dir(LOCATE_DIR, arch).join(NEURON_SETS_FILE)];
        self.stage(&format!("likn/{arch}"), self.arch_dir(LIKN_DIR, arch), &inputs, |r, dir| {
            if !r.config.is_multilingual() {
                return Ok(Produced::skipped("language-independent neurons need at least two languages"));
            }
            let likn = ops::likn_sets(&r.load_sets(arch, NEURON_SETS_FILE)?)?;
            let path = dir.join(LIKN_FILE);
            io::write_jsonl(&path, &likn)?;
            Ok(Produced::files(vec![path]))
        })?;
        Ok(())
    }

    pub fn dkn(&mut self, arch: Architecture) -> Result<()> {
        let mut inputs = self.corpus_files();
        inputs.push(self.arch_dir(TRAIN_DIR, arch).join(CHECKPOINT_FILE));
        inputs.push(self.arch_dir(LOCATE_DIR, arch).join(NEURON_SETS_FILE));
        self.stage(&format!("dkn/{arch}"), self.arch_dir(DKN_DIR, arch), &inputs, |r, dir| {
            let cfg = &r.config;
            let model = r.load_model(arch)?;
            let corpus = r.load_corpus()?;
            let queries = corpus.queries_for(arch);
            let sets = ops::sets_by_query(&r.load_sets(arch, NEURON_SETS_FILE)?);
            let dkn = ops::dkn_sets(&model, &queries, &sets, &cfg.dkn_config())?;
            let (mining, checking) = ops::fact_split(&corpus, cfg.dkn.split_ratio, cfg.sub_seed("split"))?;
            let banks = ops::mine_banks(&model, &queries, &dkn, &mining, cfg.dkn.t_percent, cfg.evaluation.lambda)?;
            let split = FactSplit { ratio: cfg.dkn.split_ratio, mining, checking };
            let outputs = vec![dir.join(DKN_SETS_FILE), dir.join(SPLIT_FILE), dir.join(BANKS_FILE)];
            io::write_jsonl(&outputs[0], &dkn)?;
            io::write_json(&outputs[1], &split)?;
            io::write_json(&outputs[2], &banks)?;
            Ok(Produced::files(outputs))
        })?;
        Ok(())
    }

    pub fn edit_eval(&mut self, arch: Architecture) -> Result<()> {
        let mut inputs = self.corpus_files();
        inputs.push(self.arch_dir(TRAIN_DIR, arch).join(CHECKPOINT_FILE));
        inputs.push(self.arch_dir(LOCATE_DIR, arch).join(NEURON_SETS_FILE));
        let zero_path = self.arch_dir(LOCATE_DIR, arch).join(ZERO_NEURON_SETS_FILE);
        let with_zero = self.config.attribution.compare_zero_baseline
            && self.config.attribution.baseline_mode != BaselineMode::Zero;
        if with_zero {
            inputs.push(zero_path);
        }
        self.stage(&format!("edit-eval/{arch}"), self.arch_dir(EDIT_DIR, arch), &inputs, |r, dir| {
            let cfg = &r.config;
            let model = r.load_model(arch)?;
            let queries = r.load_corpus()?.queries_for(arch);
            let rule = cfg.exclusion_rule();
            let pairing = irrelevant_pairing(&queries, cfg.sub_seed("pairing"))?;
            let kn = r.load_sets(arch, NEURON_SETS_FILE)?;
            let sets = ops::sets_by_query(&kn);
            let (amig, mut trials) = editing_success_rate(&model, &queries, &sets, &pairing, &rule)?;
            let random_sets = random_control(
                &sets,
                model.n_layers(),
                model.ffn_dim(),
                cfg.sub_seed(&format!("random-control/{arch}")),
            )?;
            let (random, _) = editing_success_rate(&model, &queries, &random_sets, &pairing, &rule)?;
            let (zero_baseline, zero_size) = if with_zero {
                let zero = r.load_sets(arch, ZERO_NEURON_SETS_FILE)?;
                let (rep, _) = editing_success_rate(&model, &queries, &ops::sets_by_query(&zero), &pairing, &rule)?;
                (Some(rep), Some(mean(zero.iter().map(|s| s.neurons.len() as f64))))
            } else {
                (None, None)
            };
            trials.sort_by(|a, b| a.query_id.cmp(&b.query_id));
            let report = EditEvalReport {
                architecture: arch,
                amig,
                random,
                zero_baseline,
                mean_set_size: mean(kn.iter().map(|s| s.neurons.len() as f64)),
                mean_set_size_zero_baseline: zero_size,
            };
            let outputs = vec![dir.join(REPORT_JSON), dir.join(REPORT_MD), dir.join(TRIALS_FILE)];
            io::write_json(&outputs[0], &report)?;
            io::write_text(&outputs[1], &edit_table(&report))?;
            io::write_jsonl(&outputs[2], &trials)?;
            Ok(Produced::files(outputs))
        })?;
        Ok(())
    }

    pub fn xling_eval(&mut self, arch: Architecture) -> Result<()> {
        let mut inputs = self.corpus_files();
        inputs.push(self.arch_dir(TRAIN_DIR, arch).join(CHECKPOINT_FILE));
        inputs.push(self.arch_dir(LOCATE_DIR, arch).join(NEURON_SETS_FILE));
        let multilingual = self.config.is_multilingual();
        if multilingual {
            inputs.push(self.arch_dir(LIKN_DIR, arch).join(LIKN_FILE));
        }
        self.stage(&format!("xling-eval/{arch}"), self.arch_dir(XLING_DIR, arch), &inputs, |r, dir| {
            if !multilingual {
                return Ok(Produced::skipped("cross-lingual editing needs at least two languages"));
            }
            let cfg = &r.config;
            let model = r.load_model(arch)?;
            let queries = r.load_corpus()?.queries_for(arch);
            let rule = cfg.exclusion_rule();
            let pairing = irrelevant_pairing(&queries, cfg.sub_seed("pairing"))?;
            let per_language = ops::sets_by_fact_lang(&r.load_sets(arch, NEURON_SETS_FILE)?);
            let likn_sets: Vec<LiknSet> = io::read_jsonl(&r.arch_dir(LIKN_DIR, arch).join(LIKN_FILE))?;
            let likn = ops::likn_by_fact(&likn_sets);
            let mut protocols = Vec::new();
            let mut not_applicable = Vec::new();
            let mut trials: Vec<(Protocol, TrialResult)> = Vec::new();
            for protocol in Protocol::ALL {
                if protocol == Protocol::MonoKn && cfg.corpus.languages.len() != 2 {
                    not_applicable.push(protocol);
                    continue;
                }
                let (rep, t) =
                    cross_lingual_edit_experiment(&model, &queries, &per_language, &likn, &pairing, protocol, &rule)?;
                protocols.push(rep);
                trials.extend(t.into_iter().map(|t| (protocol, t)));
            }
            let report = XlingReport { architecture: arch, protocols, not_applicable };
            let outputs = vec![dir.join(REPORT_JSON), dir.join(REPORT_MD), dir.join(TRIALS_FILE)];
            io::write_json(&outputs[0], &report)?;
            io::write_text(&outputs[1], &xling_table(&report))?;
            let records: Vec<ProtocolTrial> =
                trials.iter().map(|(protocol, trial)| ProtocolTrial { protocol: *protocol, trial }).collect();
            io::write_jsonl(&outputs[2], &records)?;
            Ok(Produced::files(outputs))
        })?;
        Ok(())
    }

    pub fn fact_check(&mut self, arch: Architecture) -> Result<()> {
        let mut inputs = self.corpus_files();
        inputs.push(self.arch_dir(TRAIN_DIR, arch).join(CHECKPOINT_FILE));
        inputs.push(self.arch_dir(DKN_DIR, arch).join(BANKS_FILE));
        inputs.push(self.arch_dir(DKN_DIR, arch).join(SPLIT_FILE));
        self.stage(&format!("fact-check/{arch}"), self.arch_dir(FACT_CHECK_DIR, arch), &inputs, |r, dir| {
            let model = r.load_model(arch)?;
            let corpus = r.load_corpus()?;
            let queries = corpus.queries_for(arch);
            let banks: BTreeMap<String, DknBank> = io::read_json(&r.arch_dir(DKN_DIR, arch).join(BANKS_FILE))?;
            let split: FactSplit = io::read_json(&r.arch_dir(DKN_DIR, arch).join(SPLIT_FILE))?;
            let statements = ops::checking_statements(&corpus, &queries, &split.checking)?;
            let (with_dkn, without_dkn, with_j, without_j) = fact_check_experiment(&model, &banks, &statements)?;
            let summary =
                FactCheckSummary { architecture: arch, n_statements: statements.len(), with_dkn, without_dkn };
            let judgements: Vec<JudgementRecord> = with_j
                .iter()
                .map(|j| JudgementRecord { method: FactCheckMethod::WithDkn, judgement: j })
                .chain(without_j.iter().map(|j| JudgementRecord { method: FactCheckMethod::WithoutDkn, judgement: j }))
                .collect();
            let outputs = vec![dir.join(REPORT_JSON), dir.join(REPORT_MD), dir.join(JUDGEMENTS_FILE)];
            io::write_json(&outputs[0], &summary)?;
            io::write_text(&outputs[1], &fact_check_table(&summary))?;
            io::write_jsonl(&outputs[2], &judgements)?;
            Ok(Produced::files(outputs))
        })?;
        Ok(())
    }

    fn report_inputs(&self) -> Vec<PathBuf> {
        let mut inputs = Vec::new();
        for &arch in &self.config.model.architectures {
            inputs.push(self.arch_dir(TRAIN_DIR, arch).join(TRAIN_LOG_FILE));
            inputs.push(self.arch_dir(LOCATE_DIR, arch).join(NEURON_SETS_FILE));
            if self.config.is_multilingual() {
                inputs.push(self.arch_dir(LIKN_DIR, arch).join(LIKN_FILE));
                inputs.push(self.arch_dir(XLING_DIR, arch).join(REPORT_JSON));
            }
            inputs.push(self.arch_dir(DKN_DIR, arch).join(DKN_SETS_FILE));
            inputs.push(self.arch_dir(DKN_DIR, arch).join(BANKS_FILE));
            inputs.push(self.arch_dir(EDIT_DIR, arch).join(REPORT_JSON));
            inputs.push(self.arch_dir(FACT_CHECK_DIR, arch).join(REPORT_JSON));
        }
        inputs
    }

    pub fn report(&mut self) -> Result<()> {
        let inputs = self.report_inputs();
        self.stage("report", self.stage_dir(REPORT_DIR), &inputs, |r, dir| {
            let cfg = &r.config;
            let n_layers = cfg.model.layers;
            let mut architectures = BTreeMap::new();
            let mut histograms = Vec::new();
            let mut outputs = Vec::new();
            let hist_dir = dir.join("histograms");
            let mut emit = |label: String, neurons: Vec<crate::model::NeuronId>| -> Result<()> {
                let (h, paths) = write_layer_distribution(&hist_dir, neurons, n_layers, &label)?;
                outputs.extend(paths);
                histograms.push(HistogramEntry { label, histogram: h });
                Ok(())
            };
            for &arch in &cfg.model.architectures {
                let train_log: TrainLog = io::read_json(&r.arch_dir(TRAIN_DIR, arch).join(TRAIN_LOG_FILE))?;
                let kn = r.load_sets(arch, NEURON_SETS_FILE)?;
                let mut mean_kn_size = BTreeMap::new();
                for lang in &cfg.corpus.languages {
                    let of_lang: Vec<&KnowledgeNeuronSet> = kn.iter().filter(|s| &s.lang_id == lang).collect();
                    mean_kn_size.insert(lang.clone(), mean(of_lang.iter().map(|s| s.neurons.len() as f64)));
                    emit(
                        format!("{}-{lang}-KN", arch.tag().to_uppercase()),
                        of_lang.iter().flat_map(|s| s.neurons.iter().copied()).collect(),
                    )?;
                }
                let (likn, xling) = if cfg.is_multilingual() {
                    let sets: Vec<LiknSet> = io::read_jsonl(&r.arch_dir(LIKN_DIR, arch).join(LIKN_FILE))?;
                    emit(
                        format!("{}-LIKN", arch.tag().to_uppercase()),
                        sets.iter().flat_map(|s| s.neurons.iter().copied()).collect(),
                    )?;
                    let summary = LiknSummary {
                        n_facts: sets.len(),
                        n_empty: sets.iter().filter(|s| s.neurons.is_empty()).count(),
                        mean_size: mean(sets.iter().map(|s| s.neurons.len() as f64)),
                    };
                    let xling: XlingReport = io::read_json(&r.arch_dir(XLING_DIR, arch).join(REPORT_JSON))?;
                    (Some(summary), Some(xling))
                } else {
                    (None, None)
                };
                let dkn: Vec<DknSet> = io::read_jsonl(&r.arch_dir(DKN_DIR, arch).join(DKN_SETS_FILE))?;
                emit(format!("{}-DKN", arch.tag().to_uppercase()), dkn.iter().flat_map(|s| s.neurons()).collect())?;
                let banks: BTreeMap<String, DknBank> = io::read_json(&r.arch_dir(DKN_DIR, arch).join(BANKS_FILE))?;
                let dkn_summary = DknSummary {
                    n_queries: dkn.len(),
                    n_with_pairs: dkn.iter().filter(|s| !s.pairs.is_empty()).count(),
                    mean_pairs: mean(dkn.iter().map(|s| s.pairs.len() as f64)),
                    mean_candidates: mean(dkn.iter().map(|s| s.candidates.len() as f64)),
                    banks: banks
                        .iter()
                        .map(|(rel, b)| {
                            (
                                rel.clone(),
                                BankSummary {
                                    size: b.neurons.len(),
                                    cutoff: b.cutoff,
                                    n_mining_queries: b.n_mining_queries,
                                    lambda: b.lambda,
                                },
                            )
                        })
                        .collect(),
                };
                architectures.insert(
                    arch,
                    ArchSummary {
                        train_accuracy: train_log.final_accuracy,
                        mean_kn_size,
                        likn,
                        dkn: dkn_summary,
                        edit: io::read_json(&r.arch_dir(EDIT_DIR, arch).join(REPORT_JSON))?,
                        xling,
                        fact_check: io::read_json(&r.arch_dir(FACT_CHECK_DIR, arch).join(REPORT_JSON))?,
                    },
                );
            }
            let report = RunReport {
                config_hash: r.config_hash.clone(),
                seed: cfg.seed,
                languages: cfg.corpus.languages.clone(),
                architectures,
                histograms,
            };
            let json = dir.join(REPORT_JSON);
            let md = dir.join(REPORT_MD);
            io::write_json(&json, &report)?;
            io::write_text(&md, &render_report(&report))?;
            outputs.push(json);
            outputs.push(md);
            Ok(Produced::files(outputs))
        })?;
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn sr_row(label: &str, r: &SrReport) -> String {
    format!(
        "| {label} | {} | {} | {} | {:?} | {}/{} |\n",
        fmt_opt(r.sr_suppress.ratio),
        fmt_opt(r.sr_enhance.ratio),
        fmt_opt(r.sr_total),
        r.flag,
        r.n_included,
        r.n_trials
    )
}

const SR_HEADER: &str =
    "| neurons | SR suppress | SR enhance | SR total | flag | included/trials |\n|---|---|---|---|---|---|\n";

fn edit_table(r: &EditEvalReport) -> String {
    let mut s = format!("## Editing success rate ({})\n\n{SR_HEADER}", r.architecture);
    s += &sr_row("AMIG", &r.amig);
    s += &sr_row("random", &r.random);
    if let Some(z) = &r.zero_baseline {
        s += &sr_row("zero baseline", z);
    }
    s
}

fn xling_table(r: &XlingReport) -> String {
    let mut s = format!("## Cross-lingual editing ({})\n\n| protocol | language | SR suppress | SR enhance | SR total | flag | included/trials |\n|---|---|---|---|---|---|---|\n", r.architecture);
    for p in &r.protocols {
        for (lang, rep) in &p.per_language {
            s += &sr_row(&format!("{} | {lang}", p.protocol), rep);
        }
    }
    s
}

fn fact_check_table(r: &FactCheckSummary) -> String {
    let mut s = format!(
        "## Fact checking ({}, {} statements)\n\n| method | precision | recall | F1 |\n|---|---|---|---|\n",
        r.architecture, r.n_statements
    );
    for (label, f) in [("with DKN", &r.with_dkn), ("without DKN", &r.without_dkn)] {
        let _ = writeln!(s, "| {label} | {:.4} | {:.4} | {:.4} |", f.precision, f.recall, f.f1);
    }
    s
}

fn render_report(r: &RunReport) -> String {
    let mut s = format!(
        "# Knowledge-neuron lab report\n\nseed {} | languages {} | config {}\n\n",
        r.seed,
        r.languages.join(", "),
        &r.config_hash[..12]
    );
    for (arch, a) in &r.architectures {
        let _ = writeln!(s, "# Architecture {arch}\n");
        let _ = writeln!(s, "training accuracy {:.4}\n", a.train_accuracy);
        s += "| language | mean KN set size |\n|---|---|\n";
        for (lang, m) in &a.mean_kn_size {
            let _ = writeln!(s, "| {lang} | {m:.2} |");
        }
        s.push('\n');
        if let Some(l) = &a.likn {
            let _ = writeln!(s, "LIKN: {} facts, {} empty, mean size {:.2}\n", l.n_facts, l.n_empty, l.mean_size);
        }
        let _ = writeln!(
            s,
            "DKN: {} queries, {} with degenerate pairs, mean pairs {:.2}, mean candidates {:.2}\n",
            a.dkn.n_queries, a.dkn.n_with_pairs, a.dkn.mean_pairs, a.dkn.mean_candidates
        );
        s += "| relation | bank size | cutoff | mining queries | lambda |\n|---|---|---|---|---|\n";
        for (rel, b) in &a.dkn.banks {
            let _ = writeln!(s, "| {rel} | {} | {} | {} | {:.4} |", b.size, b.cutoff, b.n_mining_queries, b.lambda);
        }
        s.push('\n');
        s += &edit_table(&a.edit);
        s.push('\n');
        if let Some(x) = &a.xling {
            s += &xling_table(x);
            s.push('\n');
        }
        s += &fact_check_table(&a.fact_check);
        s.push('\n');
    }
    s += "# Layer distributions\n\n| label | per-layer % |\n|---|---|\n";
    for h in &r.histograms {
        let cells = h.histogram.as_ref().map_or_else(
            || "empty".to_string(),
            |h| h.percentages.iter().map(|p| format!("{p:.1}")).collect::<Vec<_>>().join(" / "),
        );
        let _ = writeln!(s, "| {} | {cells} |", h.label);
    }
    s
}

/// Checksum over every report file except the manifest, in path order.
pub fn report_checksum(run_dir: &Path) -> Result<String> {
    let m = StageManifest::load(&run_dir.join(REPORT_DIR)).ok_or_else(|| Error::Stage {
        stage: "report".into(),
        record: None,
        message: "no report manifest".into(),
    })?;
    let mut lines = String::new();
    for o in &m.outputs {
        let _ = writeln!(lines, "{} {}", o.sha256, o.path);
    }
    Ok(io::sha256_hex(lines.as_bytes()))
}

/// Loads the list of queries of one architecture from a run directory.
pub fn queries_of(run_dir: &Path, arch: Architecture) -> Result<Vec<ClozeQuery>> {
    Ok(Corpus::read(&run_dir.join(CORPUS_DIR))?.queries_for(arch))
}

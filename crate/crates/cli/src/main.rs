// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use knlab::analysis::DknSet;
use knlab::attribution::{BaselineMode, ClampMode, KnowledgeNeuronSet, RiemannCoefficient};
use knlab::corpus::{generate_corpus, synthetic_languages, Architecture, ClozeQuery, Corpus};
use knlab::evaluation::{
    cross_lingual_edit_experiment, editing_success_rate, fact_check_experiment, irrelevant_pairing, random_control,
    DknBank, Protocol,
};
use knlab::io;
use knlab::model::{load_checkpoint, save_checkpoint, train, Transformer};
use knlab::pipeline::{self, ops, FactSplit, Precision, RunConfig};

/// Knowledge-neuron lab: localize, analyze and edit the facts stored in
/// toy transformers.
#[derive(Parser, Debug)]
#[command(name = "knlab", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration (TOML). Defaults to the built-in reference setting.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every sub-seed derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Single worker and fixed ordering for bitwise-reproducible output.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multilingual fact corpus.
    GenCorpus {
        #[arg(long)]
        relations: Option<usize>,
        #[arg(long)]
        facts_per_relation: Option<usize>,
        /// Comma-separated language ids.
        #[arg(long, value_delimiter = ',')]
        languages: Option<Vec<String>>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train one architecture on a corpus.
    Train {
        /// Corpus directory written by gen-corpus.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_parser = parse_arch)]
        arch: Architecture,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        ffn_dim: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Checkpoint path; the training log is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Attribute every query and select its knowledge neurons.
    Locate {
        #[arg(long)]
        model: PathBuf,
        /// Queries file (line-delimited JSON); filtered to the model's architecture.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Threshold scale per language, as lang=value. Repeatable.
        #[arg(long, value_parser = parse_tau)]
        tau: Vec<(String, f64)>,
        #[arg(long)]
        baseline_mode: Option<BaselineMode>,
        #[arg(long)]
        riemann_coeff: Option<RiemannCoefficient>,
        #[arg(long)]
        clamp_mode: Option<ClampMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Intersect per-language knowledge neurons of each fact.
    Likn {
        #[arg(long)]
        neuron_sets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect degenerate knowledge neurons and mine per-relation banks.
    Dkn {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        neuron_sets: PathBuf,
        /// Corpus directory, for queries and the mining split.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        t_low: Option<f64>,
        #[arg(long)]
        t_high: Option<f64>,
        #[arg(long)]
        t_percent: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Editing success rate of knowledge neurons or a random control.
    EditEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        neurons: PathBuf,
        /// `kn` edits the given sets; `random` edits size-matched random neurons.
        #[arg(long, default_value = "kn", value_parser = ["kn", "random"])]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-lingual editing under one or more protocols.
    XlingEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        neurons: PathBuf,
        #[arg(long)]
        likn: PathBuf,
        /// likn, mono-kn or seq-kn. Repeatable; all when absent.
        #[arg(long)]
        protocol: Vec<Protocol>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Judge statements with DKN banks and with the plain model.
    FactCheck {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// banks.json written by the dkn command.
        #[arg(long)]
        dkn_bank: PathBuf,
        /// split.json written by the dkn command.
        #[arg(long)]
        split: PathBuf,
        /// Overrides every bank's calibrated threshold.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage into a run directory, reusing verified stages.
    Run {
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Rebuild the final report of a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn parse_arch(s: &str) -> Result<Architecture, String> {
    match s {
        "ae" => Ok(Architecture::AutoEncoding),
        "ar" => Ok(Architecture::AutoRegressive),
        _ => Err(format!("unknown architecture `{s}`, expected ae or ar")),
    }
}

fn parse_tau(s: &str) -> Result<(String, f64), String> {
    let (lang, v) = s.split_once('=').ok_or_else(|| format!("expected lang=value, got `{s}`"))?;
    let v: f64 = v.parse().map_err(|e| format!("bad tau value in `{s}`: {e}"))?;
    Ok((lang.to_string(), v))
}

fn base_config(g: &Global, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match g.config.as_deref().or(fallback) {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::reference(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(w) = g.workers {
        cfg.workers = Some(w);
    }
    cfg.deterministic |= g.deterministic;
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_model(path: &Path) -> Result<Transformer<f64>> {
    Ok(load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?.to_f64())
}

fn arch_queries(corpus: &Path, arch: Architecture) -> Result<(Corpus, Vec<ClozeQuery>)> {
    let c = Corpus::read(corpus)?;
    let q = c.queries_for(arch);
    if q.is_empty() {
        bail!("corpus {} has no {arch} queries", corpus.display());
    }
    Ok((c, q))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.global.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .init();
    let fallback = match &cli.command {
        Command::Report { run_dir } => Some(run_dir.join("config.toml")),
        _ => None,
    };
    let mut cfg = base_config(&cli.global, fallback.as_deref())?;
    let pool = pipeline::worker_pool(&cfg)?;
    pool.install(|| execute(cli.command, &mut cfg))
}

fn execute(command: Command, cfg: &mut RunConfig) -> Result<()> {
    match command {
        Command::GenCorpus { relations, facts_per_relation, languages, out_dir } => {
            if let Some(r) = relations {
                cfg.corpus.relations = r;
            }
            if let Some(f) = facts_per_relation {
                cfg.corpus.facts_per_relation = f;
            }
            if let Some(l) = languages {
                cfg.attribution.tau = l.iter().map(|x| (x.clone(), knlab::attribution::DEFAULT_TAU)).collect();
                cfg.corpus.languages = l;
            }
            cfg.validate()?;
            let langs = synthetic_languages(&cfg.corpus.languages, cfg.corpus.relations, cfg.sub_seed("languages"));
            let corpus = generate_corpus(&cfg.corpus_params(), &langs)?;
            corpus.write(&out_dir)?;
            println!("{} facts, {} queries -> {}", corpus.facts.facts.len(), corpus.queries.len(), out_dir.display());
        }
        Command::Train { corpus, arch, layers, dim, ffn_dim, heads, epochs, lr, out } => {
            let m = &mut cfg.model;
            set(&mut m.layers, layers);
            set(&mut m.dim, dim);
            set(&mut m.ffn_dim, ffn_dim);
            set(&mut m.heads, heads);
            set(&mut m.epochs, epochs);
            set(&mut m.learning_rate, lr);
            cfg.validate()?;
            let (c, queries) = arch_queries(&corpus, arch)?;
            let mcfg = cfg.model_config(arch, c.facts.vocab.len());
            let tcfg = cfg.train_config(arch);
            let log = match cfg.model.precision {
                Precision::F32 => {
                    let (model, log) = train::<f32>(&queries, mcfg, &tcfg)?;
                    save_checkpoint(&model, &out)?;
                    log
                }
                Precision::F64 => {
                    let (model, log) = train::<f64>(&queries, mcfg, &tcfg)?;
                    save_checkpoint(&model, &out)?;
                    log
                }
            };
            io::write_json(&out.with_extension("log.json"), &log)?;
            println!("final accuracy {:.4} -> {}", log.final_accuracy, out.display());
        }
        Command::Locate { model, queries, steps, tau, baseline_mode, riemann_coeff, clamp_mode, out } => {
            let a = &mut cfg.attribution;
            set(&mut a.steps, steps);
            set(&mut a.baseline_mode, baseline_mode);
            set(&mut a.riemann_coeff, riemann_coeff);
            set(&mut a.clamp_mode, clamp_mode);
            let m = load_model(&model)?;
            let arch = m.config.architecture;
            let qs: Vec<ClozeQuery> =
                io::read_jsonl::<ClozeQuery>(&queries)?.into_iter().filter(|q| q.architecture == arch).collect();
            let langs: Vec<String> =
                qs.iter().map(|q| q.lang_id.clone()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
            if !tau.is_empty() {
                a.tau = tau.into_iter().collect();
            }
            let acfg = cfg.attribution_config();
            acfg.validate(&langs)?;
            let (records, sets) = ops::locate(&m, &qs, &acfg)?;
            io::write_jsonl(&out.join(pipeline::ATTRIBUTIONS_FILE), &records)?;
            io::write_jsonl(&out.join(pipeline::NEURON_SETS_FILE), &sets)?;
            println!("{} queries located -> {}", sets.len(), out.display());
        }
        Command::Likn { neuron_sets, out } => {
            let sets: Vec<KnowledgeNeuronSet> = io::read_jsonl(&neuron_sets)?;
            let likn = ops::likn_sets(&sets)?;
            io::write_jsonl(&out.join(pipeline::LIKN_FILE), &likn)?;
            println!("{} facts -> {}", likn.len(), out.display());
        }
        Command::Dkn { model, neuron_sets, corpus, t_low, t_high, t_percent, lambda, out } => {
            let d = &mut cfg.dkn;
            set(&mut d.t_low, t_low);
            set(&mut d.t_high, t_high);
            set(&mut d.t_percent, t_percent);
            cfg.evaluation.lambda = lambda.or(cfg.evaluation.lambda);
            cfg.validate()?;
            let m = load_model(&model)?;
            let (c, queries) = arch_queries(&corpus, m.config.architecture)?;
            let sets = ops::sets_by_query(&io::read_jsonl(&neuron_sets)?);
            let dkn: Vec<DknSet> = ops::dkn_sets(&m, &queries, &sets, &cfg.dkn_config())?;
            let (mining, checking) = ops::fact_split(&c, cfg.dkn.split_ratio, cfg.sub_seed("split"))?;
            let banks = ops::mine_banks(&m, &queries, &dkn, &mining, cfg.dkn.t_percent, cfg.evaluation.lambda)?;
            io::write_jsonl(&out.join(pipeline::DKN_SETS_FILE), &dkn)?;
            io::write_json(
                &out.join(pipeline::SPLIT_FILE),
                &FactSplit { ratio: cfg.dkn.split_ratio, mining, checking },
            )?;
            io::write_json(&out.join(pipeline::BANKS_FILE), &banks)?;
            let with_pairs = dkn.iter().filter(|s| !s.pairs.is_empty()).count();
            println!("{with_pairs}/{} queries with degenerate pairs -> {}", dkn.len(), out.display());
        }
        Command::EditEval { model, corpus, neurons, mode, out } => {
            let m = load_model(&model)?;
            let arch = m.config.architecture;
            let (_, queries) = arch_queries(&corpus, arch)?;
            let mut sets = ops::sets_by_query(&io::read_jsonl(&neurons)?);
            if mode == "random" {
                sets =
                    random_control(&sets, m.n_layers(), m.ffn_dim(), cfg.sub_seed(&format!("random-control/{arch}")))?;
            }
            let pairing = irrelevant_pairing(&queries, cfg.sub_seed("pairing"))?;
            let (report, trials) = editing_success_rate(&m, &queries, &sets, &pairing, &cfg.exclusion_rule())?;
            io::write_json(&out.join(pipeline::REPORT_JSON), &report)?;
            io::write_jsonl(&out.join(pipeline::TRIALS_FILE), &trials)?;
            println!("SR total {:?} ({:?}) -> {}", report.sr_total, report.flag, out.display());
        }
        Command::XlingEval { model, corpus, neurons, likn, protocol, out } => {
            let m = load_model(&model)?;
            let (_, queries) = arch_queries(&corpus, m.config.architecture)?;
            let per_language = ops::sets_by_fact_lang(&io::read_jsonl(&neurons)?);
            let likn = ops::likn_by_fact(&io::read_jsonl(&likn)?);
            let pairing = irrelevant_pairing(&queries, cfg.sub_seed("pairing"))?;
            let protocols = if protocol.is_empty() { Protocol::ALL.to_vec() } else { protocol };
            let mut reports = BTreeMap::new();
            for p in protocols {
                let (rep, _) = cross_lingual_edit_experiment(
                    &m,
                    &queries,
                    &per_language,
                    &likn,
                    &pairing,
                    p,
                    &cfg.exclusion_rule(),
                )?;
                println!("{p}: mean SR total {:.4}", rep.mean_total());
                reports.insert(p.tag(), rep);
            }
            io::write_json(&out.join(pipeline::REPORT_JSON), &reports)?;
        }
        Command::FactCheck { model, corpus, dkn_bank, split, lambda, out } => {
            let m = load_model(&model)?;
            let (c, queries) = arch_queries(&corpus, m.config.architecture)?;
            let mut banks: BTreeMap<String, DknBank> = io::read_json(&dkn_bank)?;
            if let Some(l) = lambda {
                banks.values_mut().for_each(|b| b.lambda = l);
            }
            let split: FactSplit = io::read_json(&split)?;
            let statements = ops::checking_statements(&c, &queries, &split.checking)?;
            let (with, without, wj, _) = fact_check_experiment(&m, &banks, &statements)?;
            io::write_json(&out.join(pipeline::REPORT_JSON), &[&with, &without])?;
            io::write_jsonl(&out.join(pipeline::JUDGEMENTS_FILE), &wj)?;
            println!("F1 with DKN {:.4}, without {:.4}", with.f1, without.f1);
        }
        Command::Run { out_dir } => {
            let dir = out_dir.or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("runs/reference"));
            let summary = pipeline::run_pipeline(cfg, &dir)?;
            for s in &summary.stages {
                println!("{:<18} {:?}{}", s.stage, s.status, if s.reused { " (reused)" } else { "" });
            }
            println!("report checksum {}", summary.report_checksum);
        }
        Command::Report { run_dir } => {
            let mut runner = pipeline::Runner::new(&run_dir, cfg.clone())?;
            runner.report()?;
            println!("report checksum {}", pipeline::report_checksum(&run_dir)?);
        }
    }
    Ok(())
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end orchestration over a run directory.
//!
//! Every stage writes into its own numbered subdirectory together with a
//! `manifest.json` that records the configuration hash, the checksums of
//! the files it read, and the checksums of the files it wrote. Rerunning a
//! stage whose manifest still verifies reuses its outputs untouched.

mod config;
mod manifest;
pub mod ops;
mod stages;

use std::path::{Path, PathBuf};

pub use config::{
    AttributionSection, CorpusSection, DknSection, EvaluationSection, ModelSection, Precision, RunConfig,
    SCHEMA_VERSION,
};
pub use manifest::{FileDigest, StageManifest, StageStatus, MANIFEST_FILE};
pub use stages::*;

use crate::error::{Error, Result};

/// Outcome of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub report_checksum: String,
    pub stages: Vec<StageLog>,
}

/// Thread pool sized by the configuration.
pub fn worker_pool(config: &RunConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.effective_workers())
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Runs every stage in order inside `run_dir`, reusing verified outputs.
pub fn run_pipeline(config: &RunConfig, run_dir: &Path) -> Result<RunSummary> {
    let mut runner = Runner::new(run_dir, config.clone())?;
    io_config(&runner)?;
    let pool = worker_pool(config)?;
    pool.install(|| -> Result<()> {
        runner.gen_corpus()?;
        let archs = runner.config.model.architectures.clone();
        for &a in &archs {
            runner.train(a)?;
        }
        for &a in &archs {
            runner.locate(a)?;
        }
        for &a in &archs {
            runner.likn(a)?;
        }
        for &a in &archs {
            runner.dkn(a)?;
        }
        for &a in &archs {
            runner.edit_eval(a)?;
            runner.xling_eval(a)?;
            runner.fact_check(a)?;
        }
        runner.report()
    })?;
    Ok(RunSummary { run_dir: run_dir.to_path_buf(), report_checksum: report_checksum(run_dir)?, stages: runner.log })
}

fn io_config(runner: &Runner) -> Result<()> {
    crate::io::write_text(&runner.dir.join("config.toml"), &runner.config.to_toml())
}

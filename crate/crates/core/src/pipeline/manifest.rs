// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Complete,
    Failed,
    Skipped,
}

/// A file with its checksum, path relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(run_dir: &Path, path: &Path) -> Result<Self> {
        Ok(Self { path: relative(run_dir, path), sha256: io::sha256_file(path)? })
    }

    fn verifies(&self, run_dir: &Path) -> bool {
        io::sha256_file(&run_dir.join(&self.path)).is_ok_and(|h| h == self.sha256)
    }
}

fn relative(run_dir: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(run_dir).unwrap_or(path);
    rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/")
}

/// Record of one stage execution, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub status: StageStatus,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Free-form notes, for example why the stage was skipped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl StageManifest {
    pub fn path(stage_dir: &Path) -> PathBuf {
        stage_dir.join(MANIFEST_FILE)
    }

    pub fn load(stage_dir: &Path) -> Option<Self> {
        io::read_json(&Self::path(stage_dir)).ok()
    }

    pub fn write(&self, stage_dir: &Path) -> Result<()> {
        io::write_json(&Self::path(stage_dir), self)
    }

    /// Whether this manifest still describes `stage_dir` under `config_hash`
    /// and the current `inputs`: the stage finished, and every recorded
    /// input and output is unchanged on disk.
    pub fn is_current(&self, run_dir: &Path, config_hash: &str, inputs: &[FileDigest]) -> bool {
        matches!(self.status, StageStatus::Complete | StageStatus::Skipped)
            && self.config_hash == config_hash
            && self.inputs == inputs
            && self.outputs.iter().all(|o| o.verifies(run_dir))
    }

    pub fn output_paths(&self, run_dir: &Path) -> Vec<PathBuf> {
        self.outputs.iter().map(|o| run_dir.join(&o.path)).collect()
    }
}

pub fn digests(run_dir: &Path, paths: &[PathBuf]) -> Result<Vec<FileDigest>> {
    let mut out: Vec<FileDigest> = paths.iter().map(|p| FileDigest::of(run_dir, p)).collect::<Result<_>>()?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    out.dedup();
    Ok(out)
}

pub(crate) fn missing_input(stage: &str, path: &Path) -> Error {
    Error::Stage {
        stage: stage.to_string(),
        record: None,
        message: format!("input {} is missing; run the upstream stage first", path.display()),
    }
}

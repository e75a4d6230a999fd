//! Fixed layout of a run directory.
//!
//! ```text
//! config.json
//! graph/   graph.hgave, features.txt, report.{json,txt}
//! split/   manifest.json
//! model/   checkpoint.hgave, history.json, settings.json, timing.json
//! reports/ eval, sweep, predict, aggregate
//! ```
//!
//! Repeated runs put each seed's split, model and reports one level deeper,
//! under `seed-<n>/`.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
    tag: Option<String>,
}

impl RunDir {
    pub fn new(root: PathBuf) -> Self {
        Self { root, tag: None }
    }

    pub fn seeded(&self, seed: u64) -> Self {
        Self { root: self.root.clone(), tag: Some(format!("seed-{seed}")) }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn staged(&self, stage: &str, file: &str) -> PathBuf {
        let mut p = self.root.join(stage);
        if let Some(t) = &self.tag {
            p.push(t);
        }
        p.push(file);
        p
    }

    pub fn graph(&self) -> PathBuf {
        self.root.join("graph/graph.hgave")
    }

    pub fn features(&self) -> PathBuf {
        self.root.join("graph/features.txt")
    }

    pub fn build_report(&self) -> PathBuf {
        self.root.join("graph/report")
    }

    pub fn manifest(&self) -> PathBuf {
        self.staged("split", "manifest.json")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.staged("model", "checkpoint.hgave")
    }

    pub fn history(&self) -> PathBuf {
        self.staged("model", "history.json")
    }

    pub fn settings(&self) -> PathBuf {
        self.staged("model", "settings.json")
    }

    /// Wall-clock timings; the one artifact that differs between reruns.
    pub fn timing(&self) -> PathBuf {
        self.staged("model", "timing.json")
    }

    /// Stem of a report; `.json` and `.txt` are appended.
    pub fn report(&self, name: &str) -> PathBuf {
        self.staged("reports", name)
    }

    pub fn aggregate(&self) -> PathBuf {
        self.root.join("reports/aggregate")
    }
}

pub fn require(path: &Path, command: &str) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::missing(path, command))
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| CliError::at(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::at(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write(path, &bytes)
}

/// Writes `<stem>.json` and the human-readable `<stem>.txt`.
pub fn write_report<T: Serialize>(stem: &Path, value: &T, table: &str) -> CliResult<()> {
    write_json(&stem.with_extension("json"), value)?;
    write(&stem.with_extension("txt"), table.as_bytes())
}

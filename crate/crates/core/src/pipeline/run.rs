use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use super::DistillOutcome;
use crate::error::{Error, Result};

/// Environment variable overriding the run-directory root.
pub const RUNS_DIR_ENV: &str = "LTKD_RUNS_DIR";

pub fn runs_root() -> PathBuf {
    std::env::var_os(RUNS_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// `config.json`, `teacher.ckpt`, `student.ckpt`, `metrics.jsonl`,
/// `bias_trace.csv` and friends under one directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    pub fn create(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn teacher_ckpt(&self) -> PathBuf {
        self.file("teacher.ckpt")
    }

    pub fn student_ckpt(&self) -> PathBuf {
        self.file("student.ckpt")
    }

    pub fn write_text(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, contents).map_err(|e| Error::io(p, e))
    }

    pub fn write_config(&self, config: &impl Serialize) -> Result<()> {
        self.write_text("config.json", &(serde_json::to_string_pretty(config)? + "\n"))
    }

    /// One compact JSON object per line.
    pub fn write_metrics(&self, records: impl IntoIterator<Item = Value>) -> Result<()> {
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(&r)?);
            out.push('\n');
        }
        self.write_text("metrics.jsonl", &out)
    }

    /// Writes `metrics.jsonl`, `batch_stats.csv`, `eval.json` and
    /// `student.ckpt` for a finished distillation.
    pub fn record_distill(&self, outcome: &DistillOutcome) -> Result<()> {
        self.write_metrics(outcome.epochs.iter().map(|e| e.to_json()))?;
        self.write_text("batch_stats.csv", &outcome.batch_stats_csv())?;
        self.write_text("eval.json", &(serde_json::to_string_pretty(&outcome.report)? + "\n"))?;
        outcome.student.save(self.student_ckpt())
    }
}

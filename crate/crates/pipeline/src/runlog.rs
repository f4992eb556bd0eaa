//! Structured run log: one JSON record per line. Every training run writes
//! a start record (with the trainable-parameter audit), one record per
//! evaluation, and a final summary.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const RUN_LOG_NAME: &str = "run.log.jsonl";

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    RunStart {
        stage: String,
        seed: u64,
        n_train: usize,
        n_val: usize,
        trainable_params: Vec<String>,
        n_trainable_values: usize,
    },
    Eval {
        step: u64,
        lr: f64,
        metrics: BTreeMap<String, f64>,
    },
    Summary {
        best_step: u64,
        best_metric: f64,
        metric_name: String,
        stop_reason: String,
        optimizer_steps: u64,
        wall_s: f64,
    },
}

pub struct RunLogger {
    writer: BufWriter<fs::File>,
    path: PathBuf,
}

impl RunLogger {
    pub fn create(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir)?;
        let path = run_dir.join(RUN_LOG_NAME);
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        Ok(Self {
            writer: BufWriter::new(file),
            path,
        })
    }

    pub fn write(&mut self, record: &LogRecord) -> Result<()> {
        serde_json::to_writer(&mut self.writer, record)?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Parse a run log back into records (used by tests and `ablate`).
pub fn read_run_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

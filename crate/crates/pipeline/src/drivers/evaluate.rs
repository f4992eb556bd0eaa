//! `evaluate`: run a saved timing checkpoint over one corpus split and emit
//! the 4-column metrics table plus structured records.

use std::path::Path;

use anyhow::Result;
use valtime_core::metrics::{format_timing_table, MetricsReport};

use crate::corpus::load_corpus;
use crate::drivers::timing::{load_timing_checkpoint, timing_report};
use crate::manifest::Split;

pub struct EvaluateOutcome {
    pub report: MetricsReport,
    pub table: String,
}

pub fn evaluate_checkpoint(ckpt: &Path, corpus_dir: &Path, split: Split) -> Result<EvaluateOutcome> {
    let (ps, model, meta) = load_timing_checkpoint(ckpt)?;
    let corpus = load_corpus(corpus_dir)?;
    let report = timing_report(&ps, &model, &meta.encoder, &meta.fusion, meta.seed, corpus.split(split))?;
    let table = format_timing_table(&[(format!("{}/{split}", meta.fusion.strategy.name()), report.clone())]);
    Ok(EvaluateOutcome { report, table })
}

/// Write the evaluation artifacts into a directory (optional).
pub fn write_evaluation(out_dir: &Path, split: Split, out: &EvaluateOutcome) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join(format!("eval_{split}.txt")), &out.table)?;
    std::fs::write(
        out_dir.join(format!("eval_{split}.json")),
        serde_json::to_string_pretty(&out.report)?,
    )?;
    Ok(())
}

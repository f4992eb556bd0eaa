//! `ablate`: run the fusion-strategy grid and/or the per-branch
//! training-policy grid, each cell a full timing training run, and emit
//! comparison tables. Cells execute sequentially for determinism.

use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Result};
use valtime_core::fusion::{BranchPolicy, BranchSelect, FusionStrategy};
use valtime_core::metrics::{format_timing_table, MetricsReport};

use crate::config::RunConfig;
use crate::corpus::CorpusData;
use crate::drivers::timing::train_timing;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateGrid {
    Fusion,
    Policy,
    Branches,
    All,
}

impl FromStr for AblateGrid {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusion" => Ok(AblateGrid::Fusion),
            "policy" => Ok(AblateGrid::Policy),
            "branches" => Ok(AblateGrid::Branches),
            "all" => Ok(AblateGrid::All),
            other => bail!("unknown ablation grid '{other}' (expected fusion/policy/branches/all)"),
        }
    }
}

/// The six policy pairs of the training-strategy comparison, in table order.
pub const POLICY_GRID: [(BranchPolicy, BranchPolicy); 6] = [
    (BranchPolicy::Freeze, BranchPolicy::Freeze),
    (BranchPolicy::Finetune, BranchPolicy::Freeze),
    (BranchPolicy::Freeze, BranchPolicy::Finetune),
    (BranchPolicy::Lora, BranchPolicy::Finetune),
    (BranchPolicy::Finetune, BranchPolicy::Lora),
    (BranchPolicy::Finetune, BranchPolicy::Finetune),
];

pub struct AblateOutcome {
    /// (cell label, test report) rows in grid order, per grid.
    pub tables: Vec<(String, Vec<(String, MetricsReport)>)>,
}

pub fn ablate(
    corpus: &CorpusData,
    para_ckpt: &Path,
    emo_ckpt: &Path,
    cfg: &RunConfig,
    grid: AblateGrid,
    run_dir: &Path,
) -> Result<AblateOutcome> {
    std::fs::create_dir_all(run_dir)?;
    let mut tables = Vec::new();

    if matches!(grid, AblateGrid::Fusion | AblateGrid::All) {
        let mut rows = Vec::new();
        for strategy in FusionStrategy::ALL {
            let mut cell_cfg = cfg.clone();
            cell_cfg.timing.strategy = strategy;
            let cell_dir = run_dir.join(format!("fusion_{}", strategy.name()));
            let out = train_timing(corpus, Some(para_ckpt), Some(emo_ckpt), &cell_cfg, &cell_dir)?;
            rows.push((strategy.name().to_string(), out.test_report));
        }
        tables.push(("fusion".to_string(), rows));
    }

    if matches!(grid, AblateGrid::Policy | AblateGrid::All) {
        let mut rows = Vec::new();
        for (para, emo) in POLICY_GRID {
            let mut cell_cfg = cfg.clone();
            cell_cfg.timing.policy_para = para;
            cell_cfg.timing.policy_emo = emo;
            let label = format!("{}/{}", para.name(), emo.name());
            let cell_dir = run_dir.join(format!("policy_{}_{}", para.name(), emo.name()));
            let out = train_timing(corpus, Some(para_ckpt), Some(emo_ckpt), &cell_cfg, &cell_dir)?;
            rows.push((label, out.test_report));
        }
        tables.push(("policy".to_string(), rows));
    }

    if matches!(grid, AblateGrid::Branches | AblateGrid::All) {
        let mut rows = Vec::new();
        for (label, select) in [
            ("para_only", BranchSelect::ParaOnly),
            ("emo_only", BranchSelect::EmoOnly),
            ("fused", BranchSelect::Both),
        ] {
            let mut cell_cfg = cfg.clone();
            cell_cfg.timing.branches = select;
            let cell_dir = run_dir.join(format!("branches_{label}"));
            let para = matches!(select, BranchSelect::Both | BranchSelect::ParaOnly).then_some(para_ckpt);
            let emo = matches!(select, BranchSelect::Both | BranchSelect::EmoOnly).then_some(emo_ckpt);
            let out = train_timing(corpus, para, emo, &cell_cfg, &cell_dir)?;
            rows.push((label.to_string(), out.test_report));
        }
        tables.push(("branches".to_string(), rows));
    }

    // Emit comparison tables, aligned text plus JSONL records.
    let mut text = String::new();
    let mut records = String::new();
    for (name, rows) in &tables {
        text.push_str(&format!("== {name} grid (test split) ==\n"));
        text.push_str(&format_timing_table(rows));
        text.push('\n');
        for (label, report) in rows {
            records.push_str(&serde_json::to_string(&serde_json::json!({
                "grid": name,
                "cell": label,
                "report": report,
            }))?);
            records.push('\n');
        }
    }
    std::fs::write(run_dir.join("ablation.txt"), &text)?;
    std::fs::write(run_dir.join("ablation.jsonl"), &records)?;
    print!("{text}");

    Ok(AblateOutcome { tables })
}

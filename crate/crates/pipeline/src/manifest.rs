//! Corpus manifest: one JSON record per line, UTF-8, fixed field names.
//!
//! Fields: `id`, `path` (relative to the manifest), `emotion`, `emotion_id`,
//! `sentiment`, `sentiment_id`, `timing` ("validate"/"non_validate"),
//! `timing_id` (1/0), `split` ("train"/"val"/"test"), `speaker`,
//! `duration_s`, `n_samples`. The manifest is written to a temp file and
//! renamed into place, so a readable manifest implies complete audio.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => bail!("unknown split '{other}' (expected train/val/test)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub emotion: String,
    pub emotion_id: usize,
    pub sentiment: String,
    pub sentiment_id: usize,
    pub timing: String,
    /// 1 = validate, 0 = non-validate.
    pub timing_id: usize,
    pub split: Split,
    pub speaker: String,
    pub duration_s: f64,
    pub n_samples: usize,
}

/// Serialize entries as JSON lines, atomically (temp file + rename).
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        for e in entries {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.sync_all().ok();
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: bad manifest record", path.display(), i + 1))?;
        out.push(entry);
    }
    if out.is_empty() {
        bail!("{}: empty manifest", path.display());
    }
    Ok(out)
}

//! Output-directory layout and the run summary that links it together.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wsnad::config::RunConfig;
use wsnad::{Error, Result};

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const SUMMARY: &str = "run_summary.json";
pub const CORPUS: &str = "corpus";
pub const INGEST_STATS: &str = "ingest_stats.json";
pub const BACKBONE: &str = "backbone.json";
pub const PROMPT: &str = "prompt.json";
/// Backbone after head or full fine-tuning.
pub const FINETUNED: &str = "finetuned.json";
pub const PRETRAIN_LOG: &str = "pretrain_log.jsonl";
pub const FINETUNE_LOG: &str = "finetune_log.jsonl";
pub const DETECT: &str = "detect";
pub const BASELINE: &str = "baseline";
pub const EVAL: &str = "eval.json";
pub const ABLATION: &str = "ablation.jsonl";
pub const ABLATION_TABLE: &str = "ablation.txt";
pub const GRADCHECK: &str = "gradcheck.json";

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub last_command: String,
    pub seed: u64,
    pub config: String,
    /// Artifact name to path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

/// One run's output directory.
pub struct OutputDir {
    pub root: PathBuf,
}

impl OutputDir {
    /// Creates the directory and snapshots the resolved config into it.
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let root = cfg.output_dir.clone();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let out = Self { root };
        write_text(&out.path(RESOLVED_CONFIG), &cfg.to_toml()?)?;
        Ok(out)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Records `produced` in `run_summary.json`, keeping artifacts of
    /// earlier subcommands.
    pub fn summarize(&self, command: &str, cfg: &RunConfig, produced: &[(&str, &str)]) -> Result<()> {
        let path = self.path(SUMMARY);
        let mut summary = match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(_) => RunSummary::default(),
        };
        summary.last_command = command.into();
        summary.seed = cfg.seed;
        summary.config = RESOLVED_CONFIG.into();
        for (name, rel) in produced {
            summary.artifacts.insert((*name).into(), (*rel).into());
        }
        write_json(&path, &summary)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

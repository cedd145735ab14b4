//! TOML run configuration.
//!
//! Every key has a default and unknown keys are rejected. A minimal file:
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! n_nodes = 8
//! n_steps = 5000
//!
//! [[data.anomalies]]
//! type = "point"
//! rate = 0.005
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::inject::AnomalySpec;
use crate::data::synth::SynthConfig;
use crate::data::window::DEFAULT_EPSILON;
use crate::detect::ThresholdMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generate a synthetic corpus from `[data]` settings.
    #[default]
    Synth,
    /// Read a corpus directory written by `synth` or `inject`.
    Corpus,
    /// Ingest an IBRL reading file plus coordinates.
    Ibrl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Corpus directory or IBRL reading file.
    pub path: Option<PathBuf>,
    /// IBRL coordinate file.
    pub coordinates: Option<PathBuf>,
    pub n_nodes: usize,
    pub n_modalities: usize,
    pub n_steps: usize,
    /// Neighbours per node in the k-NN graph.
    pub knn: usize,
    pub synth: SynthConfig,
    pub anomalies: Vec<AnomalySpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            path: None,
            coordinates: None,
            n_nodes: 8,
            n_modalities: 3,
            n_steps: 5000,
            knn: 4,
            synth: SynthConfig::default(),
            anomalies: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    #[default]
    PerWindow,
    /// Statistics of the training split, per channel.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub size: usize,
    /// Stride of validation and test windows.
    pub stride: usize,
    pub normalization: NormalizationMode,
    pub epsilon: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            size: 300,
            stride: 1,
            normalization: NormalizationMode::PerWindow,
            epsilon: DEFAULT_EPSILON,
            train_fraction: 0.6,
            val_fraction: 0.2,
        }
    }
}

/// Pipeline stages that ablation schemes switch off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub pretrain: bool,
    pub prompt: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pretrain: true,
            prompt: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub window: WindowConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub threshold: ThresholdMode,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            window: WindowConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            threshold: ThresholdMode::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                what: "config file".into(),
            });
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key.path=value` overrides; values parse as TOML, falling back
    /// to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut doc, key.trim(), value)?;
        }
        let cfg: RunConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_nodes == 0 || d.n_modalities == 0 || d.n_steps == 0 {
            return Err(Error::Config(
                "data: n_nodes, n_modalities and n_steps must be positive".into(),
            ));
        }
        if d.source != DataSource::Synth && d.path.is_none() {
            return Err(Error::Config(
                "data: path is required for corpus and ibrl sources".into(),
            ));
        }
        d.synth.validate()?;
        for a in &d.anomalies {
            a.validate()?;
        }
        let w = &self.window;
        if w.size == 0 || w.stride == 0 {
            return Err(Error::Config("window: size and stride must be positive".into()));
        }
        let (tr, va) = (w.train_fraction, w.val_fraction);
        if !(tr > 0.0 && va > 0.0 && tr + va < 1.0) {
            return Err(Error::Config(format!(
                "window: train_fraction {tr} and val_fraction {va} must be positive and sum below 1"
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.threshold.validate()
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = doc;
    for p in parents {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        assert_eq!(c.train.batch_size, 16);
        assert_eq!(c.train.lr, 0.005);
        assert_eq!(c.window.size, 300);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 1"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[model]\nlatent = 3").is_err());
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&[
                "seed=9",
                "model.cross_attention=false",
                "threshold.mode=best_f1",
                "output_dir=out/x",
            ])
            .unwrap();
        assert_eq!(c.seed, 9);
        assert!(!c.model.cross_attention);
        assert_eq!(c.threshold, ThresholdMode::BestF1);
        assert_eq!(c.output_dir, PathBuf::from("out/x"));
        assert!(RunConfig::default().with_overrides(&["train.nope=1"]).is_err());
        assert!(RunConfig::default().with_overrides(&["seed"]).is_err());
    }

    #[test]
    fn anomalies_parse() {
        let c =
            RunConfig::from_toml("[[data.anomalies]]\ntype = \"collective\"\nrate = 0.01\nduration = 4\nseed = 3\n")
                .unwrap();
        assert_eq!(c.data.anomalies[0].duration, 4);
    }
}

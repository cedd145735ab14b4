//! JSON checkpoints of named parameter tensors.
//!
//! A checkpoint holds the model configuration, every parameter as
//! `{name, shape, data}` in store order, and optionally AdamW moments and an
//! RNG position. Floats are written in shortest round-trip form, so
//! save → load → save reproduces the file byte for byte. Files with a
//! different major `version` are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, PROMPT_PARAM};
use crate::optim::{AdamW, AdamWConfig, Moments};
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "wsnad-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Backbone,
    Prompt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedMoments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: Vec<NamedMoments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub n_modalities: usize,
    pub params: Vec<NamedTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng: Option<RngState>,
}

impl Checkpoint {
    fn empty(model: &Model, kind: CheckpointKind) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind,
            model: model.config.clone(),
            n_modalities: model.n_modalities,
            params: Vec::new(),
            optimizer: None,
            rng: None,
        }
    }

    /// Every parameter except the prompt. `optimizer` must have been created
    /// for `model.store`.
    pub fn backbone(model: &Model, optimizer: Option<&AdamW>, rng: Option<RngState>) -> Self {
        let mut ck = Self::empty(model, CheckpointKind::Backbone);
        for id in model.backbone_ids() {
            let p = model.store.get(id);
            ck.params.push(NamedTensor {
                name: p.name().to_string(),
                shape: p.value().shape().to_vec(),
                data: p.value().data().to_vec(),
            });
        }
        ck.optimizer = optimizer.map(|opt| OptimizerState {
            config: opt.config,
            step: opt.step,
            moments: model
                .store
                .iter()
                .zip(&opt.moments)
                .filter(|((id, _), _)| Some(*id) != model.prompt)
                .map(|((_, p), mo)| NamedMoments {
                    name: p.name().to_string(),
                    m: mo.m.clone(),
                    v: mo.v.clone(),
                })
                .collect(),
        });
        ck.rng = rng;
        ck
    }

    pub fn prompt(model: &Model) -> Result<Self> {
        let id = model
            .prompt
            .ok_or_else(|| Error::Checkpoint("model has no prompt to save".into()))?;
        let mut ck = Self::empty(model, CheckpointKind::Prompt);
        let v = model.store.value(id);
        ck.params.push(NamedTensor {
            name: PROMPT_PARAM.into(),
            shape: v.shape().to_vec(),
            data: v.data().to_vec(),
        });
        Ok(ck)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, what: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                what: what.into(),
            });
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Rebuilds the model recorded in a backbone checkpoint.
    pub fn restore(&self) -> Result<Model> {
        if self.kind != CheckpointKind::Backbone {
            return Err(Error::Checkpoint("expected a backbone checkpoint".into()));
        }
        let mut model = Model::new(self.model.clone(), self.n_modalities, 0)?;
        load_into(&mut model.store, &self.params)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        Ok(model)
    }

    /// Restores the AdamW state recorded with a backbone checkpoint.
    pub fn restore_optimizer(&self, model: &Model) -> Result<Option<AdamW>> {
        let Some(state) = &self.optimizer else {
            return Ok(None);
        };
        let mut opt = AdamW::new(state.config, &model.store)?;
        opt.step = state.step;
        for nm in &state.moments {
            let id = model
                .store
                .find(&nm.name)
                .ok_or_else(|| Error::Checkpoint(format!("moments for unknown tensor `{}`", nm.name)))?;
            opt.moments[id.index()] = Moments {
                m: nm.m.clone(),
                v: nm.v.clone(),
            };
        }
        Ok(Some(opt))
    }

    /// Installs the prompt of a prompt checkpoint into `model`, checking it
    /// against the deployment's node count.
    pub fn install_prompt(&self, model: &mut Model, n_nodes: usize) -> Result<()> {
        if self.kind != CheckpointKind::Prompt {
            return Err(Error::Checkpoint("expected a prompt checkpoint".into()));
        }
        let p = self
            .params
            .iter()
            .find(|p| p.name == PROMPT_PARAM)
            .ok_or_else(|| Error::Checkpoint("prompt tensor missing".into()))?;
        if p.shape.first() != Some(&n_nodes) {
            return Err(Error::NodeMismatch {
                what: "prompt checkpoint".into(),
                expected: n_nodes,
                found: p.shape.first().copied().unwrap_or(0),
            });
        }
        if p.shape != [n_nodes, model.config.latent_dim] {
            return Err(Error::Checkpoint(format!(
                "prompt shape {:?} does not fit the model",
                p.shape
            )));
        }
        let id = model.add_prompt(n_nodes);
        *model.store.get_mut(id).value_mut() = Tensor::new(&p.shape, p.data.clone())?;
        Ok(())
    }
}

fn load_into(store: &mut ParamStore, params: &[NamedTensor]) -> Result<()> {
    for nt in params {
        let id = store
            .find(&nt.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{}`", nt.name)))?;
        let cur = store.value(id);
        if cur.shape() != nt.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, model expects {:?}",
                nt.name,
                nt.shape,
                cur.shape()
            )));
        }
        *store.get_mut(id).value_mut() = Tensor::new(&nt.shape, nt.data.clone())?;
    }
    Ok(())
}

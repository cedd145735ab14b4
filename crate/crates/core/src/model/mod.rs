//! The backbone encoder and its heads.
//!
//! A batch of windows is laid out node-major: `x[R, M, W]` with
//! `R = windows × nodes`, paired with a block-diagonal normalized adjacency
//! `[R, R]`. Nothing mixes rows except graph propagation, so every window
//! is encoded independently.

pub mod attention;
pub mod layers;
pub mod msdconv;
pub mod ssm;
pub mod temporal;
pub mod vgcn;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use attention::CrossAttention;
pub use layers::{block_diag, Linear, Mlp};
pub use msdconv::MsdConv;
pub use ssm::SelectiveSsm;
pub use temporal::TemporalIntra;
pub use vgcn::{Noise, Vgcn, SIGMA_MAX, SIGMA_MIN};

pub const PROMPT_PARAM: &str = "prompt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dilations: Vec<usize>,
    pub kernel_len: usize,
    pub state_dim: usize,
    pub layers: usize,
    pub key_dim: usize,
    pub hidden: usize,
    pub latent_dim: usize,
    /// Initial VGCN scale `σ`.
    pub sigma_init: f64,
    pub exclude_self: bool,
    pub msdconv: bool,
    pub cross_attention: bool,
    pub vgcn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dilations: vec![1, 2, 4],
            kernel_len: 3,
            state_dim: 16,
            layers: 2,
            key_dim: 8,
            hidden: 32,
            latent_dim: 32,
            sigma_init: 1.0,
            exclude_self: false,
            msdconv: true,
            cross_attention: true,
            vgcn: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("model: {msg}")));
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return bad(format!(
                "dilations must be positive and non-empty, got {:?}",
                self.dilations
            ));
        }
        let distinct: BTreeSet<_> = self.dilations.iter().collect();
        if distinct.len() != self.dilations.len() {
            return bad(format!("dilations must be distinct, got {:?}", self.dilations));
        }
        for (name, v) in [
            ("kernel_len", self.kernel_len),
            ("state_dim", self.state_dim),
            ("layers", self.layers),
            ("key_dim", self.key_dim),
            ("hidden", self.hidden),
            ("latent_dim", self.latent_dim),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.sigma_init >= SIGMA_MIN && self.sigma_init <= SIGMA_MAX) {
            return bad(format!(
                "sigma_init must lie in [{SIGMA_MIN}, {SIGMA_MAX}], got {}",
                self.sigma_init
            ));
        }
        Ok(())
    }
}

/// Latent path after the fused temporal features.
#[derive(Debug, Clone)]
pub enum Spatial {
    Vgcn(Vgcn),
    /// Per-node affine resize `M -> d_z`, no graph mixing.
    Resize(Linear),
}

/// Intermediate tensors of one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct Encoding {
    /// `[R, W, M]`
    pub y: Var,
    /// `[R, W, M]`; zeros when cross-attention is disabled.
    pub o: Var,
    pub alpha: Option<Var>,
    /// `[R, W, M]`
    pub f: Var,
    /// `[R, W, d_z]`
    pub mu: Var,
    pub sigma: Option<Var>,
    pub z: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub n_modalities: usize,
    pub store: ParamStore,
    pub intra: TemporalIntra,
    pub attention: Option<CrossAttention>,
    pub fusion: Mlp,
    pub spatial: Spatial,
    pub projector: Mlp,
    pub predictor: Mlp,
    pub pred_head: Mlp,
    pub recon_head: Mlp,
    pub prompt: Option<ParamId>,
}

impl Model {
    /// Fresh parameters. Each component draws from its own sub-stream, so
    /// toggling one component leaves the others' initialization unchanged.
    pub fn new(config: ModelConfig, n_modalities: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_modalities == 0 {
            return Err(Error::InvalidArgument("model needs at least one modality".into()));
        }
        let c = &config;
        let m = n_modalities;
        let root = RngStream::new(seed).fork_named("init");
        let mut store = ParamStore::new();
        let intra = TemporalIntra::new(
            &mut store,
            c.layers,
            c.msdconv.then_some(&c.dilations[..]),
            c.kernel_len,
            c.state_dim,
            &mut root.fork_named("intra"),
        );
        let attention = c.cross_attention.then(|| {
            CrossAttention::new(
                &mut store,
                "attn",
                c.key_dim,
                c.exclude_self,
                &mut root.fork_named("attn"),
            )
        });
        let fusion = Mlp::new(&mut store, "fusion", 3 * m, c.hidden, m, &mut root.fork_named("fusion"));
        let spatial = if c.vgcn {
            Spatial::Vgcn(Vgcn::new(
                &mut store,
                m,
                c.hidden,
                c.latent_dim,
                c.sigma_init,
                &mut root.fork_named("vgcn"),
            ))
        } else {
            Spatial::Resize(Linear::new(
                &mut store,
                "resize",
                m,
                c.latent_dim,
                &mut root.fork_named("resize"),
            ))
        };
        let d = c.latent_dim;
        let projector = Mlp::new(
            &mut store,
            "projector",
            d,
            c.hidden,
            d,
            &mut root.fork_named("projector"),
        );
        let predictor = Mlp::new(
            &mut store,
            "predictor",
            d,
            c.hidden,
            d,
            &mut root.fork_named("predictor"),
        );
        let pred_head = Mlp::new(
            &mut store,
            "head.pred",
            2 * d,
            c.hidden,
            m,
            &mut root.fork_named("head.pred"),
        );
        let recon_head = Mlp::new(
            &mut store,
            "head.recon",
            d,
            c.hidden,
            m,
            &mut root.fork_named("head.recon"),
        );
        Ok(Self {
            config,
            n_modalities,
            store,
            intra,
            attention,
            fusion,
            spatial,
            projector,
            predictor,
            pred_head,
            recon_head,
            prompt: None,
        })
    }

    /// Runs the encoder on `x[R, M, W]` with `a_hat[R, R]`, reading
    /// parameters from `store` (the model's own or an EMA copy).
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var, a_hat: Var, noise: Noise<'_>) -> Encoding {
        let s = tape.shape(x).to_vec();
        assert_eq!(s.len(), 3, "encoder input must be [R, M, W]");
        assert_eq!(s[1], self.n_modalities, "modality count");
        let (r, m, w) = (s[0], s[1], s[2]);
        let y = self.intra.forward(tape, store, x);
        let (o, alpha) = match &self.attention {
            Some(a) => {
                let out = a.forward(tape, store, x);
                (out.o, Some(out.alpha))
            }
            None => (tape.constant(Tensor::zeros(&[r, w, m])), None),
        };
        let xt = tape.permute(x, &[0, 2, 1]);
        let cat = tape.concat(&[xt, y, o], 2);
        let f = self.fusion.forward(tape, store, cat);
        let (mu, sigma, z) = match &self.spatial {
            Spatial::Vgcn(g) => {
                let out = g.forward(tape, store, f, a_hat, noise);
                (out.mu, out.sigma, out.z)
            }
            Spatial::Resize(lin) => {
                let z = lin.forward(tape, store, f);
                (z, None, z)
            }
        };
        Encoding {
            y,
            o,
            alpha,
            f,
            mu,
            sigma,
            z,
        }
    }

    /// Projection head on the time-pooled embedding: `[R, W, d] -> [R, d]`.
    pub fn project(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        let pooled = tape.mean_axis(z, 1);
        self.projector.forward(tape, store, pooled)
    }

    /// Online-only predictor `q_φ`.
    pub fn predict_latent(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Var {
        self.predictor.forward(tape, store, h)
    }

    /// Next-step prediction from `[mean_t Z, Z_last]`: `[R, W, d] -> [R, M]`.
    pub fn predict_next(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        let w = tape.shape(z)[1];
        let pooled = tape.mean_axis(z, 1);
        let last = tape.narrow(z, 1, w - 1, 1);
        let last = tape.mean_axis(last, 1);
        let cat = tape.concat(&[pooled, last], 1);
        self.pred_head.forward(tape, store, cat)
    }

    /// Per-step reconstruction: `[R, W, d] -> [R, W, M]`.
    pub fn reconstruct(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        self.recon_head.forward(tape, store, z)
    }

    /// Adds a zero prompt for `n_nodes` nodes, replacing any existing one.
    pub fn add_prompt(&mut self, n_nodes: usize) -> ParamId {
        let value = Tensor::zeros(&[n_nodes, self.config.latent_dim]);
        match self.prompt {
            Some(id) => {
                *self.store.get_mut(id).value_mut() = value;
                id
            }
            None => {
                let id = self.store.add(PROMPT_PARAM, value, true);
                self.prompt = Some(id);
                id
            }
        }
    }

    /// Reads the prompt tiled over `windows` consecutive node blocks:
    /// `[windows · N, d]`.
    pub fn prompt_rows(&self, tape: &mut Tape, store: &ParamStore, windows: usize) -> Option<Var> {
        let p = tape.param(store, self.prompt?);
        Some(if windows == 1 {
            p
        } else {
            tape.concat(&vec![p; windows], 0)
        })
    }

    /// Parameter ids of the backbone and heads (everything but the prompt).
    pub fn backbone_ids(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| Some(id) != self.prompt).collect()
    }

    /// Ids of a component, for freezing and ablation checks.
    pub fn component_ids(&self, component: Component) -> Vec<ParamId> {
        match component {
            Component::Intra => self.intra.ids(),
            Component::Attention => self.attention.as_ref().map(CrossAttention::ids).unwrap_or_default(),
            Component::Fusion => self.fusion.ids(),
            Component::Spatial => match &self.spatial {
                Spatial::Vgcn(g) => g.ids(),
                Spatial::Resize(l) => l.ids().to_vec(),
            },
            Component::Projector => self.projector.ids(),
            Component::Predictor => self.predictor.ids(),
            Component::PredHead => self.pred_head.ids(),
            Component::ReconHead => self.recon_head.ids(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Intra,
    Attention,
    Fusion,
    Spatial,
    Projector,
    Predictor,
    PredHead,
    ReconHead,
}

/// `H*[r, t, :] = H[r, t, :] + P[r, :]`.
pub fn apply_prompt(tape: &mut Tape, z: Var, prompt: Var) -> Var {
    let zs = tape.shape(z).to_vec();
    let ps = tape.shape(prompt).to_vec();
    assert_eq!(
        ps,
        [zs[0], zs[2]],
        "prompt shape {ps:?} does not match embeddings {zs:?}"
    );
    let p = tape.reshape(prompt, &[zs[0], 1, zs[2]]);
    tape.add(z, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::graph::SensorGraph;

    fn toy(config: ModelConfig) -> Model {
        Model::new(config, 2, 11).unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            state_dim: 4,
            hidden: 8,
            latent_dim: 6,
            key_dim: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn shapes() {
        let model = toy(small());
        let mut tape = Tape::new();
        let x = tape.constant(RngStream::new(1).normal_tensor(&[3, 2, 10]));
        let g = SensorGraph::knn(&[[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]], 1).unwrap();
        let a = tape.constant(g.normalized_adjacency());
        let enc = model.encode(&mut tape, &model.store, x, a, Noise::Off);
        assert_eq!(tape.shape(enc.f), &[3, 10, 2]);
        assert_eq!(tape.shape(enc.z), &[3, 10, 6]);
        let y = model.predict_next(&mut tape, &model.store, enc.z);
        assert_eq!(tape.shape(y), &[3, 2]);
        let r = model.reconstruct(&mut tape, &model.store, enc.z);
        assert_eq!(tape.shape(r), &[3, 10, 2]);
        let h = model.project(&mut tape, &model.store, enc.z);
        assert_eq!(tape.shape(h), &[3, 6]);
    }

    #[test]
    fn toggles_remove_parameters() {
        let full = toy(small());
        let no_ca = toy(ModelConfig {
            cross_attention: false,
            ..small()
        });
        let ca = full.component_ids(Component::Attention);
        assert!(!ca.is_empty());
        assert!(no_ca.component_ids(Component::Attention).is_empty());
        let ca_count: usize = ca.iter().map(|&id| full.store.value(id).len()).sum();
        assert_eq!(full.store.total_count() - ca_count, no_ca.store.total_count());
        // other components keep their initialization
        let a = full.store.value(full.fusion.first.weight);
        let b = no_ca.store.value(no_ca.fusion.first.weight);
        assert!(a.bit_eq(b));
    }

    #[test]
    fn zero_prompt_is_identity() {
        let mut tape = Tape::new();
        let z = RngStream::new(2).normal_tensor(&[2, 3, 4]);
        let zv = tape.constant(z.clone());
        let p = tape.constant(Tensor::zeros(&[2, 4]));
        let out = apply_prompt(&mut tape, zv, p);
        assert!(tape.value(out).bit_eq(&z));
    }

    #[test]
    fn prompt_shifts_only_its_node() {
        let mut tape = Tape::new();
        let z = RngStream::new(3).normal_tensor(&[3, 2, 2]);
        let zv = tape.constant(z.clone());
        let mut pdata = vec![0.0; 6];
        pdata[2] = 1.5;
        pdata[3] = 1.5;
        let p = tape.constant(Tensor::from_parts(vec![3, 2], pdata));
        let out = apply_prompt(&mut tape, zv, p);
        let o = tape.value(out);
        for r in 0..3 {
            for t in 0..2 {
                for d in 0..2 {
                    let diff = o.at(&[r, t, d]) - z.at(&[r, t, d]);
                    let expect = if r == 1 { 1.5 } else { 0.0 };
                    assert!((diff - expect).abs() < 1e-12);
                }
            }
        }
    }
}

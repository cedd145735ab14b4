//! Self-supervised pretraining and prompt fine-tuning.

pub mod augment;
pub mod check;
pub mod finetune;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::graph::SensorGraph;
use crate::data::window::Window;
use crate::error::{Error, Result};
use crate::model::{block_diag, Model, Noise};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig, Augmented};
pub use finetune::{finetune, FinetuneMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Sum over cells, averaged over the windows of a batch.
    #[default]
    Sum,
    /// Mean over cells.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub finetune_lr: f64,
    pub weight_decay: f64,
    /// EMA momentum of the target network.
    pub momentum: f64,
    pub reduction: Reduction,
    /// Stride between consecutive training windows.
    pub stride: usize,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 30,
            finetune_epochs: 10,
            batch_size: 16,
            lr: 0.005,
            finetune_lr: 0.005,
            weight_decay: 0.01,
            momentum: 0.99,
            reduction: Reduction::Sum,
            stride: 1,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.stride == 0 {
            return Err(Error::Config("train: batch_size and stride must be positive".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || self.finetune_lr.is_nan() || self.finetune_lr <= 0.0 {
            return Err(Error::Config("train: learning rates must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train: momentum must lie in [0, 1], got {}",
                self.momentum
            )));
        }
        self.augment.validate()
    }

    pub fn adamw(&self, lr: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Windows stacked node-major for one forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    pub windows: usize,
    /// `[B·N, M, W]`
    pub x: Tensor,
    /// `[B·N, M]`, standardized.
    pub y: Tensor,
    /// `[B·N, B·N]`
    pub a_hat: Tensor,
}

impl Batch {
    pub fn new(windows: &[&Window], graph: &SensorGraph) -> Self {
        let a = graph.normalized_adjacency();
        Self::with_blocks(windows, &vec![a; windows.len()])
    }

    pub fn with_blocks(windows: &[&Window], blocks: &[Tensor]) -> Self {
        let s = windows[0].input.shape().to_vec();
        let (n, m, w) = (s[0], s[1], s[2]);
        let b = windows.len();
        let mut x = Vec::with_capacity(b * n * m * w);
        let mut y = Vec::with_capacity(b * n * m);
        for win in windows {
            x.extend_from_slice(win.input.data());
            y.extend_from_slice(win.target.data());
        }
        Self {
            windows: b,
            x: Tensor::from_parts(vec![b * n, m, w], x),
            y: Tensor::from_parts(vec![b * n, m], y),
            a_hat: block_diag(blocks),
        }
    }
}

/// The three pretraining losses and their unit-weight sum.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub cont: Var,
    pub pred: Var,
    pub recon: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    #[serde(rename = "L")]
    pub total: f64,
    #[serde(rename = "L_cont")]
    pub cont: f64,
    #[serde(rename = "L_pred")]
    pub pred: f64,
    #[serde(rename = "L_recon")]
    pub recon: f64,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> Losses {
        Losses {
            total: tape.value(self.total).item(),
            cont: tape.value(self.cont).item(),
            pred: tape.value(self.pred).item(),
            recon: tape.value(self.recon).item(),
        }
    }
}

/// `mean_i (2 − 2 cos(q_i, z'_i))` over rows; `z'` should be a constant.
pub fn byol_loss(tape: &mut Tape, q: Var, z_target: Var) -> Var {
    let cos = tape.cosine_rows(q, z_target);
    let mean = tape.mean(cos);
    let s = tape.scale(mean, -2.0);
    tape.add_scalar(s, 2.0)
}

/// Squared error between `a` and `b`, reduced per `reduction` over a batch
/// of `windows` windows.
pub fn reduced_sse(tape: &mut Tape, a: Var, b: Var, windows: usize, reduction: Reduction) -> Var {
    match reduction {
        Reduction::Sum => {
            let s = tape.sse(a, b);
            tape.scale(s, 1.0 / windows as f64)
        }
        Reduction::Mean => tape.mse(a, b),
    }
}

/// `ξ ← m ξ + (1 − m) θ`, elementwise over every tensor.
pub fn ema_update(target: &mut ParamStore, online: &ParamStore, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::InvalidArgument(format!(
            "EMA momentum must lie in [0, 1], got {m}"
        )));
    }
    if target.len() != online.len() {
        return Err(Error::Shape("target and online networks differ in structure".into()));
    }
    let ids: Vec<_> = target.ids().collect();
    for id in ids {
        let src = online.value(id).data();
        let dst = target.get_mut(id).value_mut().data_mut();
        if m == 1.0 {
            continue;
        }
        if m == 0.0 {
            dst.copy_from_slice(src);
            continue;
        }
        for (x, &t) in dst.iter_mut().zip(src) {
            *x = m * *x + (1.0 - m) * t;
        }
    }
    Ok(())
}

/// A frozen copy of `store` to serve as the EMA target.
pub fn target_network(store: &ParamStore) -> ParamStore {
    let mut t = store.clone();
    t.set_all_trainable(false);
    t.zero_grad();
    t
}

/// Noise for the online and target encoders.
pub struct PretrainNoise<'a> {
    pub online: Noise<'a>,
    pub target: Noise<'a>,
}

/// Records the joint pretraining loss of one batch on `tape`.
///
/// The online network encodes the clean batch; the target network (`target`
/// store) encodes the augmented batch `(x_aug, a_aug)`.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    tape: &mut Tape,
    model: &Model,
    online: &ParamStore,
    target: &ParamStore,
    batch: &Batch,
    x_aug: &Tensor,
    a_aug: &Tensor,
    noise: PretrainNoise<'_>,
    reduction: Reduction,
) -> LossVars {
    let x = tape.constant(batch.x.clone());
    let a = tape.constant(batch.a_hat.clone());
    let enc = model.encode(tape, online, x, a, noise.online);
    let h = model.project(tape, online, enc.z);
    let q = model.predict_latent(tape, online, h);

    let xa = tape.constant(x_aug.clone());
    let aa = tape.constant(a_aug.clone());
    let enc_t = model.encode(tape, target, xa, aa, noise.target);
    let z_t = model.project(tape, target, enc_t.z);
    // stop-gradient: only the value of z' enters the loss
    let z_t = tape.constant(tape.value(z_t).clone());
    let cont = byol_loss(tape, q, z_t);

    let y = tape.constant(batch.y.clone());
    let yhat = model.predict_next(tape, online, enc.z);
    let pred = reduced_sse(tape, yhat, y, batch.windows, reduction);

    let xhat = model.reconstruct(tape, online, enc.z);
    let xt = tape.permute(x, &[0, 2, 1]);
    let recon = reduced_sse(tape, xhat, xt, batch.windows, reduction);

    let s = tape.add(cont, pred);
    let total = tape.add(s, recon);
    LossVars {
        total,
        cont,
        pred,
        recon,
    }
}

/// One line of the pretraining run log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: Losses,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub trace: Vec<EpochRecord>,
    pub optimizer: AdamW,
}

/// Pretrains every parameter of `model` on the joint loss.
pub fn pretrain(
    model: &mut Model,
    windows: &[Window],
    graph: &SensorGraph,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    cfg.validate()?;
    model.store.set_all_trainable(true);
    let mut opt = AdamW::new(cfg.adamw(cfg.lr), &model.store)?;
    let mut target = target_network(&model.store);
    let a_hat = graph.normalized_adjacency();
    let root = RngStream::new(seed).fork_named("pretrain");
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut trace = Vec::with_capacity(cfg.pretrain_epochs);

    for epoch in 0..cfg.pretrain_epochs {
        let started = Instant::now();
        let mut erng = root.fork(epoch as u64);
        erng.shuffle(&mut order);
        let mut sums = [0.0; 4];
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let brng = erng.fork(bi as u64);
            let wins: Vec<&Window> = chunk.iter().map(|&k| &windows[k]).collect();
            let batch = Batch::with_blocks(&wins, &vec![a_hat.clone(); wins.len()]);
            let mut aug_rng = brng.fork_named("augment");
            let augs: Vec<Augmented> = wins
                .iter()
                .map(|w| augment(&w.input, graph, &cfg.augment, &mut aug_rng))
                .collect();
            let x_aug = stack_inputs(augs.iter().map(|a| &a.x));
            let a_aug = block_diag(&augs.iter().map(|a| a.graph.normalized_adjacency()).collect::<Vec<_>>());

            let mut online_rng = brng.fork_named("online");
            let mut target_rng = brng.fork_named("target");
            let mut tape = Tape::new();
            let losses = joint_loss(
                &mut tape,
                model,
                &model.store,
                &target,
                &batch,
                &x_aug,
                &a_aug,
                PretrainNoise {
                    online: Noise::Sample(&mut online_rng),
                    target: Noise::Sample(&mut target_rng),
                },
                cfg.reduction,
            );
            if tape.check_finite().is_err() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let v = losses.values(&tape);
            let grads = tape.backward(losses.total)?;
            model.store.zero_grad();
            model.store.accumulate(&grads);
            opt.step(&mut model.store)?;
            ema_update(&mut target, &model.store, cfg.momentum)?;
            for (s, x) in sums.iter_mut().zip([v.total, v.cont, v.pred, v.recon]) {
                *s += x;
            }
            batches += 1;
        }
        let k = batches.max(1) as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            losses: Losses {
                total: sums[0] / k,
                cont: sums[1] / k,
                pred: sums[2] / k,
                recon: sums[3] / k,
            },
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!(
            "pretrain epoch {}: L={:.4} cont={:.4} pred={:.4} recon={:.4}",
            rec.epoch,
            rec.losses.total,
            rec.losses.cont,
            rec.losses.pred,
            rec.losses.recon
        );
        trace.push(rec);
    }
    Ok(PretrainReport { trace, optimizer: opt })
}

pub(crate) fn stack_inputs<'a>(xs: impl Iterator<Item = &'a Tensor>) -> Tensor {
    let mut shape: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    let mut count = 0;
    for x in xs {
        shape.get_or_insert_with(|| x.shape().to_vec());
        data.extend_from_slice(x.data());
        count += 1;
    }
    let mut shape = shape.expect("no inputs to stack");
    shape[0] *= count;
    Tensor::from_parts(shape, data)
}

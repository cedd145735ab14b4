//! Downstream adaptation on the next-step prediction loss.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::graph::SensorGraph;
use crate::data::window::Window;
use crate::error::{Error, Result};
use crate::model::{apply_prompt, Component, Model, Noise};
use crate::optim::AdamW;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::train::{reduced_sse, stack_inputs, Batch, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// Backbone and heads frozen; only the node prompt learns.
    #[default]
    Prompt,
    /// No prompt; the prediction head learns on the frozen encoder.
    Head,
    /// Encoder and prediction head learn from scratch, no prompt.
    Full,
}

impl FinetuneMode {
    fn encoder_frozen(self) -> bool {
        !matches!(self, FinetuneMode::Full)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub epoch: usize,
    #[serde(rename = "L_pred")]
    pub pred: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub trace: Vec<FinetuneRecord>,
    /// Scalar parameters updated by the optimizer.
    pub trainable: usize,
}

/// Sets which parameters `mode` trains, adding a prompt when needed.
pub fn prepare(model: &mut Model, n_nodes: usize, mode: FinetuneMode) {
    model.store.set_all_trainable(false);
    match mode {
        FinetuneMode::Prompt => {
            let id = model.add_prompt(n_nodes);
            model.store.set_trainable(id, true);
        }
        FinetuneMode::Head => {
            for id in model.component_ids(Component::PredHead) {
                model.store.set_trainable(id, true);
            }
        }
        FinetuneMode::Full => {
            model.store.set_all_trainable(true);
            for c in [Component::Projector, Component::Predictor, Component::ReconHead] {
                for id in model.component_ids(c) {
                    model.store.set_trainable(id, false);
                }
            }
        }
    }
}

/// Eval-mode embeddings `Z` (`[N, W, d]`) of each window, before prompting.
pub fn embed_windows(model: &Model, windows: &[Window], graph: &SensorGraph, chunk: usize) -> Vec<Tensor> {
    let a_hat = graph.normalized_adjacency();
    let mut out = Vec::with_capacity(windows.len());
    for part in windows.chunks(chunk.max(1)) {
        let refs: Vec<&Window> = part.iter().collect();
        let batch = Batch::with_blocks(&refs, &vec![a_hat.clone(); refs.len()]);
        let mut tape = Tape::new();
        let x = tape.constant(batch.x);
        let a = tape.constant(batch.a_hat);
        let enc = model.encode(&mut tape, &model.store, x, a, Noise::Off);
        let z = tape.value(enc.z);
        let s = z.shape();
        let rows = s[0] / refs.len();
        let per = rows * s[1] * s[2];
        for k in 0..refs.len() {
            out.push(Tensor::from_parts(
                vec![rows, s[1], s[2]],
                z.data()[k * per..(k + 1) * per].to_vec(),
            ));
        }
    }
    out
}

/// Fine-tunes `model` in `mode`. The encoder runs in eval mode throughout;
/// when it is frozen its embeddings are computed once and reused.
pub fn finetune(
    model: &mut Model,
    windows: &[Window],
    graph: &SensorGraph,
    cfg: &TrainConfig,
    mode: FinetuneMode,
    seed: u64,
) -> Result<FinetuneReport> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::EmptyData("no fine-tuning windows".into()));
    }
    let n = graph.n_nodes();
    if windows[0].input.shape()[0] != n {
        return Err(Error::NodeMismatch {
            what: "fine-tuning windows".into(),
            expected: n,
            found: windows[0].input.shape()[0],
        });
    }
    prepare(model, n, mode);
    let trainable = model.store.trainable_count();
    let mut opt = AdamW::new(cfg.adamw(cfg.finetune_lr), &model.store)?;
    let cache = mode
        .encoder_frozen()
        .then(|| embed_windows(model, windows, graph, cfg.batch_size));
    let a_hat = graph.normalized_adjacency();
    let root = RngStream::new(seed).fork_named("finetune");
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut trace = Vec::with_capacity(cfg.finetune_epochs);

    for epoch in 0..cfg.finetune_epochs {
        let started = Instant::now();
        root.fork(epoch as u64).shuffle(&mut order);
        let mut sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let wins: Vec<&Window> = chunk.iter().map(|&k| &windows[k]).collect();
            let b = wins.len();
            let mut tape = Tape::new();
            let z = match &cache {
                Some(zs) => tape.constant(stack_inputs(chunk.iter().map(|&k| &zs[k]))),
                None => {
                    let batch = Batch::with_blocks(&wins, &vec![a_hat.clone(); b]);
                    let x = tape.constant(batch.x);
                    let a = tape.constant(batch.a_hat);
                    model.encode(&mut tape, &model.store, x, a, Noise::Off).z
                }
            };
            let z = match model.prompt_rows(&mut tape, &model.store, b) {
                Some(p) => apply_prompt(&mut tape, z, p),
                None => z,
            };
            let yhat = model.predict_next(&mut tape, &model.store, z);
            let y = tape.constant(stack_inputs(wins.iter().map(|w| &w.target)));
            let loss = reduced_sse(&mut tape, yhat, y, b, cfg.reduction);
            let v = tape.value(loss).item();
            if !v.is_finite() || tape.check_finite().is_err() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            let grads = tape.backward(loss)?;
            model.store.zero_grad();
            model.store.accumulate(&grads);
            opt.step(&mut model.store)?;
            sum += v;
            batches += 1;
        }
        let rec = FinetuneRecord {
            epoch: epoch + 1,
            pred: sum / batches.max(1) as f64,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        log::info!("finetune epoch {}: L_pred={:.4}", rec.epoch, rec.pred);
        trace.push(rec);
    }
    Ok(FinetuneReport { trace, trainable })
}

/// Eval-mode next-step predictions `[N, M]` (standardized) for each window,
/// with the prompt applied when the model has one.
pub fn predict_windows(model: &Model, windows: &[Window], graph: &SensorGraph, chunk: usize) -> Vec<Tensor> {
    let a_hat = graph.normalized_adjacency();
    let mut out = Vec::with_capacity(windows.len());
    for part in windows.chunks(chunk.max(1)) {
        let refs: Vec<&Window> = part.iter().collect();
        let b = refs.len();
        let batch = Batch::with_blocks(&refs, &vec![a_hat.clone(); b]);
        let mut tape = Tape::new();
        let x = tape.constant(batch.x);
        let a = tape.constant(batch.a_hat);
        let z = model.encode(&mut tape, &model.store, x, a, Noise::Off).z;
        let z = match model.prompt_rows(&mut tape, &model.store, b) {
            Some(p) => apply_prompt(&mut tape, z, p),
            None => z,
        };
        let yhat = model.predict_next(&mut tape, &model.store, z);
        let yhat = tape.value(yhat).clone();
        let s = yhat.shape().to_vec();
        let rows = s[0] / b;
        let per = rows * s[1];
        for k in 0..b {
            out.push(Tensor::from_parts(
                vec![rows, s[1]],
                yhat.data()[k * per..(k + 1) * per].to_vec(),
            ));
        }
    }
    out
}

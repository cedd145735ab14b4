//! Sliding windows and Z-score standardization.
//!
//! A window starting at `start` covers steps `[start, start + w)` and its
//! prediction target is step `start + w`. Every `(node, modality)` slice of
//! the window is standardized independently with population statistics,
//! `(x − μ) / (σ + ε)`, and the target step is mapped with the same `(μ, σ)`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::series::{Labels, SensorSeries};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub epsilon: f64,
}

impl Default for Standardizer {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Population mean and standard deviation of one slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceStats {
    pub mean: f64,
    pub std: f64,
}

impl SliceStats {
    pub fn of(x: &[f64]) -> Self {
        let n = x.len() as f64;
        let rough = x.iter().sum::<f64>() / n;
        // second pass: the residual sum corrects rounding in the first
        let mean = rough + x.iter().map(|v| v - rough).sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

impl Standardizer {
    pub fn new(epsilon: f64) -> Result<Self> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(Self { epsilon })
    }

    pub fn apply(&self, x: f64, stats: SliceStats) -> f64 {
        (x - stats.mean) / (stats.std + self.epsilon)
    }

    pub fn invert(&self, z: f64, stats: SliceStats) -> f64 {
        z * (stats.std + self.epsilon) + stats.mean
    }

    /// Standardizes `x` with its own statistics and returns them.
    pub fn standardize(&self, x: &[f64]) -> (Vec<f64>, SliceStats) {
        let stats = SliceStats::of(x);
        (x.iter().map(|&v| self.apply(v, stats)).collect(), stats)
    }

    pub fn destandardize(&self, z: &[f64], stats: SliceStats) -> Vec<f64> {
        z.iter().map(|&v| self.invert(v, stats)).collect()
    }
}

/// Where window statistics come from.
#[derive(Debug, Clone, PartialEq)]
pub enum Normalization {
    /// Statistics over the `w` in-window steps of each slice.
    PerWindow,
    /// Fixed statistics per `(node, modality)`, indexed `node * M + modality`.
    Global(Vec<SliceStats>),
}

impl Normalization {
    /// Global statistics fitted on `steps` of every channel.
    pub fn fit_global(series: &SensorSeries, steps: Range<usize>) -> Self {
        let mut stats = Vec::with_capacity(series.n_nodes() * series.n_modalities());
        for i in 0..series.n_nodes() {
            for c in 0..series.n_modalities() {
                stats.push(SliceStats::of(&series.channel(i, c)[steps.clone()]));
            }
        }
        Normalization::Global(stats)
    }
}

/// One standardized window and its next-step target.
#[derive(Debug, Clone)]
pub struct Window {
    pub start: usize,
    /// `[N, M, w]`, standardized.
    pub input: Tensor,
    /// `[N, M]`, standardized with the window statistics.
    pub target: Tensor,
    /// `[N, M]`, original scale.
    pub target_raw: Tensor,
    /// Per-slice `(μ, σ)`, indexed `node * M + modality`.
    pub stats: Vec<SliceStats>,
    /// `[N * M]` labels of the target step, when labels were supplied.
    pub labels: Option<Vec<u8>>,
}

impl Window {
    pub fn target_step(&self) -> usize {
        self.start + self.input.shape()[2]
    }
}

#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub window: usize,
    pub stride: usize,
    pub windows: Vec<Window>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn starts(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.start).collect()
    }
}

/// Number of windows over a length-`t` series: `⌊(t − 1 − w)/s⌋ + 1`.
pub fn window_count(t: usize, w: usize, s: usize) -> Result<usize> {
    validate(t, w, s)?;
    Ok((t - 1 - w) / s + 1)
}

fn validate(t: usize, w: usize, s: usize) -> Result<()> {
    if w == 0 || s == 0 {
        return Err(Error::InvalidArgument(format!(
            "window size and stride must be positive (w={w}, s={s})"
        )));
    }
    if w >= t {
        return Err(Error::InvalidArgument(format!(
            "window size {w} leaves no target step in a series of length {t}"
        )));
    }
    Ok(())
}

/// Window starts whose target step falls in `targets`, stepping by `s`
/// from the first admissible start.
pub fn window_starts(t: usize, w: usize, s: usize, targets: Range<usize>) -> Result<Vec<usize>> {
    validate(t, w, s)?;
    let lo = targets.start.max(w);
    let hi = targets.end.min(t);
    if lo >= hi {
        return Ok(Vec::new());
    }
    Ok((lo - w..hi - w).step_by(s).collect())
}

/// Windows over the whole series: starts `0, s, 2s, …` with `start + w < T`.
pub fn slide_windows(
    series: &SensorSeries,
    labels: Option<&Labels>,
    w: usize,
    s: usize,
    standardizer: Standardizer,
) -> Result<WindowBatch> {
    slide_windows_range(
        series,
        labels,
        w,
        s,
        0..series.n_steps(),
        &Normalization::PerWindow,
        standardizer,
    )
}

/// Windows whose target steps lie in `targets`.
pub fn slide_windows_range(
    series: &SensorSeries,
    labels: Option<&Labels>,
    w: usize,
    s: usize,
    targets: Range<usize>,
    normalization: &Normalization,
    standardizer: Standardizer,
) -> Result<WindowBatch> {
    let starts = window_starts(series.n_steps(), w, s, targets)?;
    let windows = starts
        .into_iter()
        .map(|start| build_window(series, labels, start, w, normalization, standardizer))
        .collect();
    Ok(WindowBatch {
        window: w,
        stride: s,
        windows,
    })
}

/// Builds the window starting at `start`.
pub fn build_window(
    series: &SensorSeries,
    labels: Option<&Labels>,
    start: usize,
    w: usize,
    normalization: &Normalization,
    standardizer: Standardizer,
) -> Window {
    let (n, m) = (series.n_nodes(), series.n_modalities());
    assert!(start + w < series.n_steps(), "window has no target");
    let mut input = Vec::with_capacity(n * m * w);
    let mut target = Vec::with_capacity(n * m);
    let mut target_raw = Vec::with_capacity(n * m);
    let mut stats = Vec::with_capacity(n * m);
    for i in 0..n {
        for c in 0..m {
            let ch = series.channel(i, c);
            let slice = &ch[start..start + w];
            let st = match normalization {
                Normalization::PerWindow => SliceStats::of(slice),
                Normalization::Global(g) => g[i * m + c],
            };
            input.extend(slice.iter().map(|&v| standardizer.apply(v, st)));
            let y = ch[start + w];
            target_raw.push(y);
            target.push(standardizer.apply(y, st));
            stats.push(st);
        }
    }
    let labels = labels.map(|l| {
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for c in 0..m {
                out.push(u8::from(l.get(i, c, start + w)));
            }
        }
        out
    });
    Window {
        start,
        input: Tensor::from_parts(vec![n, m, w], input),
        target: Tensor::from_parts(vec![n, m], target),
        target_raw: Tensor::from_parts(vec![n, m], target_raw),
        stats,
        labels,
    }
}

//! Graph augmentation: temporal masking and edge perturbation.

use serde::{Deserialize, Serialize};

use crate::data::graph::SensorGraph;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub temporal_mask_ratio: f64,
    pub mask_segment_len: usize,
    pub edge_drop_ratio: f64,
    pub edge_add_ratio: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            temporal_mask_ratio: 0.15,
            mask_segment_len: 10,
            edge_drop_ratio: 0.10,
            edge_add_ratio: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            temporal_mask_ratio: 0.0,
            mask_segment_len: 10,
            edge_drop_ratio: 0.0,
            edge_add_ratio: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("temporal_mask_ratio", self.temporal_mask_ratio),
            ("edge_drop_ratio", self.edge_drop_ratio),
            ("edge_add_ratio", self.edge_add_ratio),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("augment: {name} must lie in [0, 1), got {r}")));
            }
        }
        if self.mask_segment_len == 0 {
            return Err(Error::Config("augment: mask_segment_len must be positive".into()));
        }
        Ok(())
    }
}

/// A masked run of steps on one `(node, modality)` series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSegment {
    pub node: usize,
    pub modality: usize,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct Augmented {
    pub x: Tensor,
    pub graph: SensorGraph,
    pub masked: Vec<MaskedSegment>,
    pub dropped: Vec<(usize, usize)>,
    pub added: Vec<(usize, usize)>,
}

/// Masks (sets to zero) about `temporal_mask_ratio` of the steps of every
/// `(node, modality)` series of `x[N, M, W]` in non-overlapping segments,
/// drops a share of the edges and adds random non-edges.
pub fn augment(x: &Tensor, graph: &SensorGraph, cfg: &AugmentConfig, rng: &mut RngStream) -> Augmented {
    let s = x.shape();
    let (n, m, w) = (s[0], s[1], s[2]);
    let mut out = x.clone();
    let mut masked = Vec::new();
    let count = (cfg.temporal_mask_ratio * w as f64).round() as usize;
    if count > 0 {
        for node in 0..n {
            for modality in 0..m {
                for (start, len) in mask_segments(w, count, cfg.mask_segment_len, rng) {
                    let base = (node * m + modality) * w + start;
                    out.data_mut()[base..base + len].fill(0.0);
                    masked.push(MaskedSegment {
                        node,
                        modality,
                        start,
                        len,
                    });
                }
            }
        }
    }

    let edges = graph.edges();
    let mut g = graph.clone();
    let n_drop = (cfg.edge_drop_ratio * edges.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..edges.len()).collect();
    rng.shuffle(&mut order);
    let mut dropped: Vec<_> = order[..n_drop].iter().map(|&k| edges[k]).collect();
    dropped.sort_unstable();
    for &(i, j) in &dropped {
        g.set_edge(i, j, false);
    }

    let mut non_edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if !graph.has_edge(i, j) {
                non_edges.push((i, j));
            }
        }
    }
    let n_add = ((cfg.edge_add_ratio * edges.len() as f64).round() as usize).min(non_edges.len());
    rng.shuffle(&mut non_edges);
    let mut added = non_edges[..n_add].to_vec();
    added.sort_unstable();
    for &(i, j) in &added {
        g.set_edge(i, j, true);
    }

    Augmented {
        x: out,
        graph: g,
        masked,
        dropped,
        added,
    }
}

/// Non-overlapping segments of length `seg` (the last may be shorter)
/// covering exactly `count` of `w` steps, at uniformly random gaps.
fn mask_segments(w: usize, count: usize, seg: usize, rng: &mut RngStream) -> Vec<(usize, usize)> {
    let count = count.min(w);
    let k = count.div_ceil(seg);
    let free = w - count;
    let mut gaps: Vec<usize> = (0..k).map(|_| rng.below(free + 1)).collect();
    gaps.sort_unstable();
    let mut out = Vec::with_capacity(k);
    let mut covered = 0;
    for g in gaps {
        let len = seg.min(count - covered);
        out.push((g + covered, len));
        covered += len;
    }
    out
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multi-node, multi-modal time series stored as `[nodes, modalities, steps]`.
///
/// Each `(node, modality)` series is contiguous in memory, see
/// [`SensorSeries::channel`].
#[derive(Debug, Clone, PartialEq)]
pub struct SensorSeries {
    pub values: Tensor,
    pub node_ids: Vec<u32>,
    pub modality_names: Vec<String>,
    /// Seconds between consecutive steps.
    pub sample_interval: f64,
    /// Epoch number of step 0.
    pub start_epoch: u64,
}

impl SensorSeries {
    pub fn new(values: Tensor, node_ids: Vec<u32>, modality_names: Vec<String>, sample_interval: f64) -> Result<Self> {
        let s = values.shape();
        if s.len() != 3 {
            return Err(Error::Shape(format!("series must be [N, M, T], got {s:?}")));
        }
        if node_ids.len() != s[0] || modality_names.len() != s[1] {
            return Err(Error::Shape(format!(
                "metadata ({} nodes, {} modalities) does not match values {s:?}",
                node_ids.len(),
                modality_names.len()
            )));
        }
        if !values.all_finite() {
            return Err(Error::InvalidArgument("series contains non-finite values".into()));
        }
        Ok(Self {
            values,
            node_ids,
            modality_names,
            sample_interval,
            start_epoch: 0,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_modalities(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_steps(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn channel(&self, node: usize, modality: usize) -> &[f64] {
        let t = self.n_steps();
        let off = (node * self.n_modalities() + modality) * t;
        &self.values.data()[off..off + t]
    }

    pub fn channel_mut(&mut self, node: usize, modality: usize) -> &mut [f64] {
        let t = self.n_steps();
        let off = (node * self.n_modalities() + modality) * t;
        &mut self.values.data_mut()[off..off + t]
    }
}

/// Binary per-cell anomaly labels, shaped like a [`SensorSeries`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    n_nodes: usize,
    n_modalities: usize,
    n_steps: usize,
    data: Vec<u8>,
}

impl Labels {
    pub fn zeros(n_nodes: usize, n_modalities: usize, n_steps: usize) -> Self {
        Self {
            n_nodes,
            n_modalities,
            n_steps,
            data: vec![0; n_nodes * n_modalities * n_steps],
        }
    }

    pub fn for_series(series: &SensorSeries) -> Self {
        Self::zeros(series.n_nodes(), series.n_modalities(), series.n_steps())
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.n_nodes, self.n_modalities, self.n_steps]
    }

    fn offset(&self, node: usize, modality: usize, step: usize) -> usize {
        assert!(node < self.n_nodes && modality < self.n_modalities && step < self.n_steps);
        (node * self.n_modalities + modality) * self.n_steps + step
    }

    pub fn get(&self, node: usize, modality: usize, step: usize) -> bool {
        self.data[self.offset(node, modality, step)] != 0
    }

    pub fn set(&mut self, node: usize, modality: usize, step: usize, value: bool) {
        let off = self.offset(node, modality, step);
        self.data[off] = u8::from(value);
    }

    pub fn channel(&self, node: usize, modality: usize) -> &[u8] {
        let off = self.offset(node, modality, 0);
        &self.data[off..off + self.n_steps]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&x| x != 0).count()
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    /// Cellwise OR with `other`.
    pub fn merge(&mut self, other: &Labels) {
        assert_eq!(self.shape(), other.shape(), "label shapes differ");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }
}

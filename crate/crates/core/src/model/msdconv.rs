//! Multi-scale dilated convolution.

use crate::autodiff::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// One causal dilated kernel per rate; the ReLU outputs are stacked on a
/// new trailing feature axis.
#[derive(Debug, Clone)]
pub struct MsdConv {
    pub dilations: Vec<usize>,
    pub kernels: Vec<ParamId>,
    pub biases: Vec<ParamId>,
}

impl MsdConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dilations: &[usize],
        kernel_len: usize,
        rng: &mut RngStream,
    ) -> Self {
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for &d in dilations {
            kernels.push(store.add_uniform(format!("{name}.d{d}.kernel"), &[kernel_len], kernel_len, rng));
            biases.push(store.add(format!("{name}.d{d}.bias"), Tensor::zeros(&[1]), true));
        }
        Self {
            dilations: dilations.to_vec(),
            kernels,
            biases,
        }
    }

    pub fn width(&self) -> usize {
        self.dilations.len()
    }

    /// `x[R, W] -> [R, W, k]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let shape = tape.shape(x).to_vec();
        let mut parts = Vec::with_capacity(self.width());
        for ((&d, &k), &b) in self.dilations.iter().zip(&self.kernels).zip(&self.biases) {
            let kernel = tape.param(store, k);
            let bias = tape.param(store, b);
            let y = tape.conv1d_dilated(x, kernel, d);
            let y = tape.add(y, bias);
            let y = tape.relu(y);
            let mut s = shape.clone();
            s.push(1);
            parts.push(tape.reshape(y, &s));
        }
        tape.concat(&parts, shape.len())
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.kernels.iter().chain(&self.biases).copied().collect()
    }
}

//! Small building blocks shared by the encoder and the heads.

use crate::autodiff::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// `x @ W + b` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), true);
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.affine(x, w, b)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Two affine layers with a ReLU between them.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut RngStream,
    ) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), input, hidden, rng),
            second: Linear::new(store, &format!("{name}.1"), hidden, output, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.first.forward(tape, store, x);
        let h = tape.relu(h);
        self.second.forward(tape, store, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.first.ids().to_vec();
        v.extend(self.second.ids());
        v
    }
}

/// Block-diagonal matrix from square blocks.
pub fn block_diag(blocks: &[Tensor]) -> Tensor {
    let n: usize = blocks.iter().map(|b| b.shape()[0]).sum();
    let mut data = vec![0.0; n * n];
    let mut off = 0;
    for b in blocks {
        let k = b.shape()[0];
        for i in 0..k {
            for j in 0..k {
                data[(off + i) * n + off + j] = b.data()[i * k + j];
            }
        }
        off += k;
    }
    Tensor::from_parts(vec![n, n], data)
}

/// Left-multiplies `x[R, ..]` by `a[R, R]` along the first axis.
pub fn propagate(tape: &mut Tape, a: Var, x: Var) -> Var {
    let shape = tape.shape(x).to_vec();
    let rows = shape[0];
    let flat = tape.reshape(x, &[rows, shape[1..].iter().product()]);
    let mixed = tape.matmul(a, flat);
    tape.reshape(mixed, &shape)
}

//! Cross-modal attention.
//!
//! Each scalar step of modality `i` is embedded to a query, each step of
//! modality `j` to a key and a value, all with weights shared across
//! modalities. For every ordered pair `(i, j)` the attention matrix
//! `α_{i,j} = softmax(Q_i K_jᵀ / √d_k)` is normalized over the key steps of
//! `j`, and `O_i = Σ_j α_{i,j} V_j`. With `exclude_self` the `j = i` term is
//! dropped.

use crate::autodiff::{Tape, Var};
use crate::model::layers::Linear;
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub key_dim: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub exclude_self: bool,
}

/// Output of [`CrossAttention::forward`].
#[derive(Debug, Clone, Copy)]
pub struct AttentionOut {
    /// `[N, W, M]`
    pub o: Var,
    /// `[N, M, W, M, W]`: query modality, query step, key modality, key step.
    pub alpha: Var,
    /// `[N, M·W, 1]`
    pub v: Var,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, key_dim: usize, exclude_self: bool, rng: &mut RngStream) -> Self {
        Self {
            key_dim,
            query: Linear::new(store, &format!("{name}.q"), 1, key_dim, rng),
            key: Linear::new(store, &format!("{name}.k"), 1, key_dim, rng),
            value: Linear::new(store, &format!("{name}.v"), 1, 1, rng),
            exclude_self,
        }
    }

    /// `x[N, M, W] -> O[N, W, M]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> AttentionOut {
        let s = tape.shape(x).to_vec();
        let (n, m, w) = (s[0], s[1], s[2]);
        let flat = tape.reshape(x, &[n, m * w, 1]);
        let q = self.query.forward(tape, store, flat);
        let k = self.key.forward(tape, store, flat);
        let v = self.value.forward(tape, store, flat);

        let kt = tape.transpose(k);
        let logits = tape.batch_matmul(q, kt);
        let logits = tape.scale(logits, 1.0 / (self.key_dim as f64).sqrt());
        let logits = tape.reshape(logits, &[n, m, w, m, w]);
        let mut alpha = tape.softmax(logits);
        if self.exclude_self {
            let mask = tape.constant(off_diagonal_mask(m, w));
            alpha = tape.mul(alpha, mask);
        }
        let a = tape.reshape(alpha, &[n, m * w, m * w]);
        let o = tape.batch_matmul(a, v);
        let o = tape.reshape(o, &[n, m, w]);
        let o = tape.permute(o, &[0, 2, 1]);
        AttentionOut { o, alpha, v }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.query.ids().to_vec();
        v.extend(self.key.ids());
        v.extend(self.value.ids());
        v
    }
}

/// `[M, W, M, W]` with zeros where query and key modality coincide.
fn off_diagonal_mask(m: usize, w: usize) -> Tensor {
    let mut data = vec![1.0; m * w * m * w];
    for i in 0..m {
        for t in 0..w {
            let base = ((i * w + t) * m + i) * w;
            data[base..base + w].fill(0.0);
        }
    }
    Tensor::from_parts(vec![m, w, m, w], data)
}

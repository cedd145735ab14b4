//! Selective state-space recurrence with zero-order-hold discretization.
//!
//! Per step the features `z_t ∈ R^k` are projected to a gate `g_t ∈ R^d`, an
//! input matrix `B̃_t ∈ R^{d×k}`, a readout `C_t ∈ R^d` and a step size
//! `Δ_t`. The diagonal state matrix is `Ã_t = −exp(a_log) ⊙ softplus(g_t)`
//! and `Δ_t = softplus(·)`, so `Ā_t = exp(Δ_t Ã_t)` lies strictly in (0, 1).
//! With `B̄_t = Δ_t B̃_t`:
//!
//! ```text
//! h_t = Ā_t ⊙ h_{t−1} + B̄_t z_t,   h_0 = 0
//! y_t = C_t · h_t
//! ```

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::layers::Linear;
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Full zero-order hold: `ā = exp(Δa)`, `b̄ = (Δa)⁻¹(exp(Δa) − 1)·Δb`,
/// using the limit `b̄ = Δb` at `Δa = 0`.
pub fn zoh_full(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if delta < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "step size must be non-negative, got {delta}"
        )));
    }
    let x = delta * a;
    let bbar = if x == 0.0 {
        delta * b
    } else {
        x.exp_m1() / x * delta * b
    };
    Ok((x.exp(), bbar))
}

/// Simplified hold used by the model: `ā = exp(Δa)`, `b̄ = Δb`.
pub fn zoh_simplified(a: f64, b: f64, delta: f64) -> Result<(f64, f64)> {
    if delta < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "step size must be non-negative, got {delta}"
        )));
    }
    Ok(((delta * a).exp(), delta * b))
}

/// Scalar recurrence `h_t = ā h_{t−1} + b̄ z_t`, `y_t = c h_t`.
pub fn scalar_recurrence(abar: f64, bbar: f64, c: f64, z: &[f64]) -> Vec<f64> {
    let mut h = 0.0;
    z.iter()
        .map(|&zt| {
            h = abar * h + bbar * zt;
            c * h
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SelectiveSsm {
    pub input_dim: usize,
    pub state_dim: usize,
    pub proj: Linear,
    pub a_log: ParamId,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SsmTrace {
    /// `[R, W, d]`
    pub abar: Var,
    /// `[R, W, 1]`
    pub delta: Var,
    /// `[R, W, d]`
    pub h: Var,
    /// `[R, W]`
    pub y: Var,
}

impl SelectiveSsm {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, state_dim: usize, rng: &mut RngStream) -> Self {
        let out = Self::proj_width(input_dim, state_dim);
        Self {
            input_dim,
            state_dim,
            proj: Linear::new(store, &format!("{name}.proj"), input_dim, out, rng),
            a_log: store.add(format!("{name}.a_log"), Tensor::zeros(&[state_dim]), true),
        }
    }

    /// Projection layout: `[gate (d) | B̃ (d·k) | C (d) | Δ (1)]`.
    pub fn proj_width(k: usize, d: usize) -> usize {
        d + d * k + d + 1
    }

    /// `z[R, W, k] -> y[R, W]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        self.trace(tape, store, z).y
    }

    pub fn trace(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> SsmTrace {
        let (k, d) = (self.input_dim, self.state_dim);
        let s = tape.shape(z).to_vec();
        assert_eq!(s.len(), 3, "ssm input must be [R, W, k]");
        assert_eq!(s[2], k, "ssm input width");
        let (r, w) = (s[0], s[1]);

        let p = self.proj.forward(tape, store, z);
        let gate = tape.narrow(p, 2, 0, d);
        let b = tape.narrow(p, 2, d, d * k);
        let c = tape.narrow(p, 2, d + d * k, d);
        let delta_raw = tape.narrow(p, 2, 2 * d + d * k, 1);

        let delta = tape.softplus(delta_raw);
        let a_log = tape.param(store, self.a_log);
        let a_mag = tape.exp(a_log);
        let gate = tape.softplus(gate);
        let a_mag = tape.mul(gate, a_mag);
        let a = tape.neg(a_mag);
        let da = tape.mul(delta, a);
        let abar = tape.exp(da);

        // B̃_t z_t, then scaled by Δ_t
        let b = tape.reshape(b, &[r, w, d, k]);
        let zr = tape.reshape(z, &[r, w, 1, k]);
        let bz = tape.mul(b, zr);
        let bz = tape.sum_axis(bz, 3);
        let u = tape.mul(delta, bz);

        let h = tape.scan(abar, u);
        let ch = tape.mul(c, h);
        let y = tape.sum_axis(ch, 2);
        SsmTrace { abar, delta, h, y }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.proj.ids().to_vec();
        v.push(self.a_log);
        v
    }

    /// Sets the projection to constants so that every step uses the same
    /// `(a_gate, b, c, delta_raw)` pre-activations. Only for `k = d = 1`.
    pub fn set_constant(&self, store: &mut ParamStore, gate: f64, b: f64, c: f64, delta_raw: f64) {
        assert_eq!((self.input_dim, self.state_dim), (1, 1));
        store.get_mut(self.proj.weight).value_mut().data_mut().fill(0.0);
        store
            .get_mut(self.proj.bias)
            .value_mut()
            .data_mut()
            .copy_from_slice(&[gate, b, c, delta_raw]);
    }
}

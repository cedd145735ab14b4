//! Variational graph convolution, applied at every time step with shared
//! weights:
//!
//! ```text
//! H = ReLU(Â F W_t + b_t)
//! μ = Â H W_μ + b_μ,   log σ = Â H W_σ + b_σ
//! σ = exp(clamp(log σ, ln 1e-4, ln 10)),   Z = μ + σ ⊙ ε
//! ```

use crate::autodiff::{Tape, Var};
use crate::model::layers::{propagate, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub const SIGMA_MIN: f64 = 1e-4;
pub const SIGMA_MAX: f64 = 10.0;

/// Source of the reparameterization noise `ε`.
pub enum Noise<'a> {
    /// `ε = 0`, so `Z = μ` exactly.
    Off,
    Sample(&'a mut RngStream),
    Fixed(&'a Tensor),
}

#[derive(Debug, Clone, Copy)]
pub struct VgcnOut {
    pub mu: Var,
    pub sigma: Option<Var>,
    pub z: Var,
}

#[derive(Debug, Clone)]
pub struct Vgcn {
    pub trunk: Linear,
    pub mu: Linear,
    pub log_sigma: Linear,
}

impl Vgcn {
    /// `sigma_init` sets the log-scale bias to `ln(sigma_init)`; 1 leaves it at 0.
    pub fn new(
        store: &mut ParamStore,
        input: usize,
        hidden: usize,
        latent: usize,
        sigma_init: f64,
        rng: &mut RngStream,
    ) -> Self {
        let trunk = Linear::new(store, "vgcn.trunk", input, hidden, rng);
        let mu = Linear::new(store, "vgcn.mu", hidden, latent, rng);
        let log_sigma = Linear::new(store, "vgcn.log_sigma", hidden, latent, rng);
        store
            .get_mut(log_sigma.bias)
            .value_mut()
            .data_mut()
            .fill(sigma_init.ln());
        Self { trunk, mu, log_sigma }
    }

    /// `f[R, W, M]`, `a_hat[R, R]` -> `[R, W, d_z]` outputs.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f: Var, a_hat: Var, noise: Noise<'_>) -> VgcnOut {
        let af = propagate(tape, a_hat, f);
        let h = self.trunk.forward(tape, store, af);
        let h = tape.relu(h);
        let ah = propagate(tape, a_hat, h);
        let mu = self.mu.forward(tape, store, ah);
        let ls = self.log_sigma.forward(tape, store, ah);
        let ls = tape.clamp(ls, SIGMA_MIN.ln(), SIGMA_MAX.ln());
        let sigma = tape.exp(ls);
        let z = match noise {
            Noise::Off => mu,
            Noise::Sample(rng) => {
                let eps = rng.normal_tensor(tape.shape(mu));
                let eps = tape.constant(eps);
                let se = tape.mul(sigma, eps);
                tape.add(mu, se)
            }
            Noise::Fixed(eps) => {
                let eps = tape.constant(eps.clone());
                let se = tape.mul(sigma, eps);
                tape.add(mu, se)
            }
        };
        VgcnOut {
            mu,
            sigma: Some(sigma),
            z,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = self.trunk.ids().to_vec();
        v.extend(self.mu.ids());
        v.extend(self.log_sigma.ids());
        v
    }
}

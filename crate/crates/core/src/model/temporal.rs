//! Intra-modal temporal path: stacked (MSDConv → selective SSM) layers with
//! residual connections, run on every `(node, modality)` sequence with
//! weights shared across modalities.

use crate::autodiff::{Tape, Var};
use crate::model::msdconv::MsdConv;
use crate::model::ssm::SelectiveSsm;
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;

#[derive(Debug, Clone)]
pub struct IntraLayer {
    /// `None` feeds the raw sequence to the SSM as a width-1 feature.
    pub conv: Option<MsdConv>,
    pub ssm: SelectiveSsm,
}

#[derive(Debug, Clone)]
pub struct TemporalIntra {
    pub layers: Vec<IntraLayer>,
}

impl TemporalIntra {
    pub fn new(
        store: &mut ParamStore,
        layers: usize,
        dilations: Option<&[usize]>,
        kernel_len: usize,
        state_dim: usize,
        rng: &mut RngStream,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let conv = dilations.map(|d| MsdConv::new(store, &format!("intra.{l}.conv"), d, kernel_len, rng));
                let k = conv.as_ref().map_or(1, MsdConv::width);
                let ssm = SelectiveSsm::new(store, &format!("intra.{l}.ssm"), k, state_dim, rng);
                IntraLayer { conv, ssm }
            })
            .collect();
        Self { layers }
    }

    /// `x[N, M, W] -> Y[N, W, M]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let s = tape.shape(x).to_vec();
        let (n, m, w) = (s[0], s[1], s[2]);
        let mut h = tape.reshape(x, &[n * m, w]);
        for layer in &self.layers {
            let z = match &layer.conv {
                Some(conv) => conv.forward(tape, store, h),
                None => tape.reshape(h, &[n * m, w, 1]),
            };
            let y = layer.ssm.forward(tape, store, z);
            h = tape.add(h, y);
        }
        let h = tape.reshape(h, &[n, m, w]);
        tape.permute(h, &[0, 2, 1])
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for layer in &self.layers {
            if let Some(c) = &layer.conv {
                v.extend(c.ids());
            }
            v.extend(layer.ssm.ids());
        }
        v
    }
}

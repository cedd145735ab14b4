//! Gradient verification of the whole backbone under the joint loss.

use crate::autodiff::Tape;
use crate::data::graph::SensorGraph;
use crate::data::synth::{synth_coordinates, synth_generate, SynthConfig};
use crate::data::window::{slide_windows, Standardizer, Window};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::model::{block_diag, Model, ModelConfig, Noise};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::train::{augment, joint_loss, stack_inputs, target_network, AugmentConfig, Batch, PretrainNoise, Reduction};

/// Toy sizes: nodes, modalities, window length, latent width.
pub const TOY_SHAPE: (usize, usize, usize, usize) = (4, 2, 16, 4);

/// Hidden layers are wide enough that no toy row has every ReLU dead, which
/// would put the cosine term on its zero-norm kink.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        state_dim: 3,
        hidden: 12,
        latent_dim: TOY_SHAPE.3,
        key_dim: 3,
        layers: 1,
        ..ModelConfig::default()
    }
}

/// Checks every backbone gradient of the joint loss on a two-window toy
/// batch. Noise draws and the augmented view are fixed up front so the
/// loss is a deterministic function of the online parameters.
pub fn joint_loss_gradcheck(config: &ModelConfig, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (n, m, w, _) = TOY_SHAPE;
    let graph = SensorGraph::knn(&synth_coordinates(n, seed), 2)?;
    let series = synth_generate(n, m, 3 * w, &graph, seed, &SynthConfig::default())?;
    let windows = slide_windows(&series, None, w, w / 2, Standardizer::default())?.windows;
    let wins: Vec<&Window> = windows.iter().take(2).collect();
    let a_hat = graph.normalized_adjacency();
    let batch = Batch::with_blocks(&wins, &vec![a_hat; wins.len()]);

    let mut model = Model::new(config.clone(), m, seed)?;
    model.store.set_all_trainable(true);
    let mut target = target_network(&model.store);
    // a target that differs from the online network exercises the cosine term
    for id in target.ids().collect::<Vec<_>>() {
        for v in target.get_mut(id).value_mut().data_mut() {
            *v *= 0.9;
        }
    }

    let mut rng = RngStream::new(seed).fork_named("gradcheck");
    let aug_cfg = AugmentConfig::default();
    let augs: Vec<_> = wins
        .iter()
        .map(|w| augment(&w.input, &graph, &aug_cfg, &mut rng))
        .collect();
    let x_aug = stack_inputs(augs.iter().map(|a| &a.x));
    let a_aug = block_diag(&augs.iter().map(|a| a.graph.normalized_adjacency()).collect::<Vec<_>>());

    let z_shape = {
        let mut tape = Tape::new();
        let x = tape.constant(batch.x.clone());
        let a = tape.constant(batch.a_hat.clone());
        let enc = model.encode(&mut tape, &model.store, x, a, Noise::Off);
        tape.value(enc.z).shape().to_vec()
    };
    let eps_online = rng.normal_tensor(&z_shape);
    let eps_target = rng.normal_tensor(&z_shape);

    let f = |tape: &mut Tape, store: &ParamStore| {
        let losses = joint_loss(
            tape,
            &model,
            store,
            &target,
            &batch,
            &x_aug,
            &a_aug,
            PretrainNoise {
                online: Noise::Fixed(&eps_online),
                target: Noise::Fixed(&eps_target),
            },
            Reduction::Sum,
        );
        Ok(losses.total)
    };
    let mut store = model.store.clone();
    grad_check(&mut store, f, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_backbone_passes() {
        let rep = joint_loss_gradcheck(&toy_model_config(), 3, GradCheckOptions::default()).unwrap();
        assert!(rep.passed, "max rel error {} at {:?}", rep.max_rel_error, rep.worst);
        assert!(rep.coords_checked > 100);
    }
}

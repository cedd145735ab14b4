//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any fails. Pass criterion numbers as arguments to run a
//! subset: `cargo test -p wsnad-cli --test acceptance -- 2 7`.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use serde_json::Value;
use wsnad::checkpoint::Checkpoint;
use wsnad::config::RunConfig;
use wsnad::data::window::{window_count, window_starts, DEFAULT_EPSILON};
use wsnad::data::{AnomalySpec, SensorGraph, Standardizer, Window};
use wsnad::detect::{apply_threshold, best_f1, Confusion};
use wsnad::gradcheck::{grad_check, GradCheckOptions};
use wsnad::model::ssm::{zoh_full, zoh_simplified};
use wsnad::model::{Component, CrossAttention, Mlp, Model, MsdConv, Noise, SelectiveSsm, TemporalIntra, Vgcn};
use wsnad::pipeline::{ablate, baseline_stage, finetune_stage, load_corpus, pretrain_stage, split_windows, Scheme};
use wsnad::train::check::{joint_loss_gradcheck, toy_model_config, TOY_SHAPE};
use wsnad::train::finetune::predict_windows;
use wsnad::train::{byol_loss, ema_update, joint_loss, Batch, PretrainNoise, Reduction};
use wsnad::{ParamStore, RngStream, Tape, Tensor, Var};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

type Criterion = (&'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    ("gradient correctness", gradients),
    ("SSM closed form", ssm_closed_form),
    ("attention invariants", attention_invariants),
    ("BYOL mechanics", byol_mechanics),
    ("freeze and prompt", freeze_and_prompt),
    ("preprocessing", preprocessing),
    ("metric oracle", metric_oracle),
    ("desk-scale detection", desk_scale_detection),
    ("ablation direction", ablation_direction),
    ("determinism", determinism),
];

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    for (i, (name, check)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail} [{secs:.1} s]"),
            Err(detail) => {
                println!("FAIL criterion {n} ({name}): {detail} [{secs:.1} s]");
                failed.push(n);
            }
        }
    }
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}

// ---- 1 -------------------------------------------------------------------

/// `Σ y ⊙ w` for a fixed random `w`, so no output coordinate is weighted
/// symmetrically with another.
fn weighted_sum(tape: &mut Tape, y: Var, w: &Tensor) -> Var {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w);
    tape.sum(p)
}

fn output_weights<F>(store: &ParamStore, f: &F, rng: &mut RngStream) -> Tensor
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let mut tape = Tape::new();
    let y = f(&mut tape, store);
    rng.normal_tensor(tape.shape(y))
}

/// Max relative error of the weighted output of `f` over every trainable
/// parameter in `store`.
fn block_error<F>(store: &mut ParamStore, f: F, rng: &mut RngStream) -> Result<f64, String>
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let w = output_weights(store, &f, rng);
    let report = grad_check(
        store,
        |tape, s| {
            let y = f(tape, s);
            Ok(weighted_sum(tape, y, &w))
        },
        GradCheckOptions::default(),
    )
    .map_err(fail)?;
    Ok(report.max_rel_error)
}

fn primitive_error(
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
    rng: &mut RngStream,
) -> Result<f64, String> {
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("in{i}"), t, true))
        .collect();
    block_error(
        &mut store,
        |tape, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
            f(tape, &vars)
        },
        rng,
    )
}

fn uniform(rng: &mut RngStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

type Primitive = (&'static str, Vec<Vec<usize>>, bool, fn(&mut Tape, &[Var]) -> Var);

fn primitives() -> Vec<Primitive> {
    // (name, input shapes, inputs strictly positive, op)
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], false, |t, v| t.add(v[0], v[1])),
        ("add broadcast", vec![vec![3, 4], vec![4]], false, |t, v| {
            t.add(v[0], v[1])
        }),
        ("sub", vec![vec![2, 3], vec![2, 1]], false, |t, v| t.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3, 4], vec![2, 3, 1]], false, |t, v| {
            t.mul(v[0], v[1])
        }),
        ("div", vec![vec![3, 4], vec![3, 4]], true, |t, v| t.div(v[0], v[1])),
        ("scale", vec![vec![5]], false, |t, v| t.scale(v[0], 1.7)),
        ("neg", vec![vec![5]], false, |t, v| t.neg(v[0])),
        ("add_scalar", vec![vec![5]], false, |t, v| t.add_scalar(v[0], 0.3)),
        ("exp", vec![vec![6]], false, |t, v| t.exp(v[0])),
        ("ln", vec![vec![6]], true, |t, v| t.ln(v[0])),
        ("relu", vec![vec![6]], false, |t, v| t.relu(v[0])),
        ("tanh", vec![vec![6]], false, |t, v| t.tanh(v[0])),
        ("sigmoid", vec![vec![6]], false, |t, v| t.sigmoid(v[0])),
        ("softplus", vec![vec![6]], false, |t, v| t.softplus(v[0])),
        ("square", vec![vec![6]], false, |t, v| t.square(v[0])),
        ("sqrt", vec![vec![6]], true, |t, v| t.sqrt(v[0])),
        ("clamp", vec![vec![8]], false, |t, v| t.clamp(v[0], -0.5, 0.5)),
        ("matmul", vec![vec![3, 4], vec![4, 2]], false, |t, v| {
            t.matmul(v[0], v[1])
        }),
        ("batch_matmul", vec![vec![2, 3, 4], vec![2, 4, 2]], false, |t, v| {
            t.batch_matmul(v[0], v[1])
        }),
        ("affine", vec![vec![2, 3, 4], vec![4, 5], vec![5]], false, |t, v| {
            t.affine(v[0], v[1], v[2])
        }),
        ("permute", vec![vec![2, 3, 4]], false, |t, v| {
            t.permute(v[0], &[2, 0, 1])
        }),
        ("transpose", vec![vec![2, 3, 4]], false, |t, v| t.transpose(v[0])),
        ("reshape", vec![vec![3, 4]], false, |t, v| t.reshape(v[0], &[2, 6])),
        ("concat", vec![vec![2, 3], vec![2, 2]], false, |t, v| {
            t.concat(&[v[0], v[1]], 1)
        }),
        ("narrow", vec![vec![3, 5]], false, |t, v| t.narrow(v[0], 1, 1, 3)),
        ("sum", vec![vec![3, 4]], false, |t, v| t.sum(v[0])),
        ("mean", vec![vec![3, 4]], false, |t, v| t.mean(v[0])),
        ("sum_axis", vec![vec![2, 3, 4]], false, |t, v| t.sum_axis(v[0], 1)),
        ("mean_axis", vec![vec![2, 3, 4]], false, |t, v| t.mean_axis(v[0], 0)),
        ("softmax", vec![vec![3, 5]], false, |t, v| t.softmax(v[0])),
        ("conv1d_dilated", vec![vec![3, 10], vec![3]], false, |t, v| {
            t.conv1d_dilated(v[0], v[1], 2)
        }),
        ("cosine_rows", vec![vec![4, 5], vec![4, 5]], false, |t, v| {
            t.cosine_rows(v[0], v[1])
        }),
        ("mse", vec![vec![3, 4], vec![3, 4]], false, |t, v| t.mse(v[0], v[1])),
        ("sse", vec![vec![3, 4], vec![3, 4]], false, |t, v| t.sse(v[0], v[1])),
    ]
}

fn gradients() -> Outcome {
    let started = Instant::now();
    let tol = GradCheckOptions::default().tol;
    let mut rng = RngStream::new(2024);
    let mut worst = (0.0f64, String::new());
    let mut record = |name: &str, err: f64| {
        if err > worst.0 {
            worst = (err, name.to_string());
        }
        ensure(err <= tol, || format!("{name}: max relative error {err:.3e}"))
    };

    let prims = primitives();
    for (name, shapes, positive, op) in &prims {
        let inputs = shapes
            .iter()
            .map(|s| {
                if *positive {
                    uniform(&mut rng, s, 0.5, 2.0)
                } else {
                    rng.normal_tensor(s)
                }
            })
            .collect();
        let err = primitive_error(inputs, op, &mut rng)?;
        record(name, err)?;
    }
    let a = uniform(&mut rng, &[2, 6, 3], 0.1, 0.9);
    let u = rng.normal_tensor(&[2, 6, 3]);
    record(
        "scan",
        primitive_error(vec![a, u], |t, v| t.scan(v[0], v[1]), &mut rng)?,
    )?;

    let (n, m, w, d) = TOY_SHAPE;
    let coords: Vec<[f64; 2]> = (0..n).map(|i| [i as f64, (i * i) as f64 * 0.3]).collect();
    let a_hat = SensorGraph::knn(&coords, 2).map_err(fail)?.normalized_adjacency();
    let x = rng.normal_tensor(&[n, m, w]);

    let mut store = ParamStore::new();
    let conv = MsdConv::new(&mut store, "conv", &[1, 2, 4], 3, &mut rng);
    let rows = x.clone().reshape(&[n * m, w]).map_err(fail)?;
    let err = block_error(
        &mut store,
        |t, s| {
            let x = t.constant(rows.clone());
            conv.forward(t, s, x)
        },
        &mut rng,
    )?;
    record("MSDConv", err)?;

    let mut store = ParamStore::new();
    let ssm = SelectiveSsm::new(&mut store, "ssm", 3, 4, &mut rng);
    let z = rng.normal_tensor(&[2, w, 3]);
    let err = block_error(
        &mut store,
        |t, s| {
            let z = t.constant(z.clone());
            ssm.forward(t, s, z)
        },
        &mut rng,
    )?;
    record("selective SSM", err)?;

    let mut store = ParamStore::new();
    let intra = TemporalIntra::new(&mut store, 2, Some(&[1, 2]), 3, 3, &mut rng);
    let err = block_error(
        &mut store,
        |t, s| {
            let x = t.constant(x.clone());
            intra.forward(t, s, x)
        },
        &mut rng,
    )?;
    record("intra-modal stack", err)?;

    let mut store = ParamStore::new();
    let ca = CrossAttention::new(&mut store, "ca", 3, false, &mut rng);
    let err = block_error(
        &mut store,
        |t, s| {
            let x = t.constant(x.clone());
            ca.forward(t, s, x).o
        },
        &mut rng,
    )?;
    record("cross-attention", err)?;

    let mut store = ParamStore::new();
    let fusion = Mlp::new(&mut store, "fusion", 3 * m, 8, m, &mut rng);
    let f = rng.normal_tensor(&[n, w, 3 * m]);
    let err = block_error(
        &mut store,
        |t, s| {
            let f = t.constant(f.clone());
            fusion.forward(t, s, f)
        },
        &mut rng,
    )?;
    record("fusion MLP", err)?;

    let mut store = ParamStore::new();
    let vgcn = Vgcn::new(&mut store, m, 8, d, 1.0, &mut rng);
    let f = rng.normal_tensor(&[n, w, m]);
    let eps = rng.normal_tensor(&[n, w, d]);
    let err = block_error(
        &mut store,
        |t, s| {
            let f = t.constant(f.clone());
            let a = t.constant(a_hat.clone());
            vgcn.forward(t, s, f, a, Noise::Fixed(&eps)).z
        },
        &mut rng,
    )?;
    record("VGCN", err)?;

    let mut model = Model::new(toy_model_config(), m, 5).map_err(fail)?;
    model.store.set_all_trainable(false);
    for c in [
        Component::Projector,
        Component::Predictor,
        Component::PredHead,
        Component::ReconHead,
    ] {
        for id in model.component_ids(c) {
            model.store.set_trainable(id, true);
        }
    }
    let z = rng.normal_tensor(&[n, w, d]);
    let mut store = model.store.clone();
    let err = block_error(
        &mut store,
        |t, s| {
            let z = t.constant(z.clone());
            let h = model.project(t, s, z);
            let q = model.predict_latent(t, s, h);
            let y = model.predict_next(t, s, z);
            let r = model.reconstruct(t, s, z);
            let parts: Vec<Var> = [q, y, r]
                .into_iter()
                .map(|v| {
                    let len = t.value(v).len();
                    t.reshape(v, &[len])
                })
                .collect();
            t.concat(&parts, 0)
        },
        &mut rng,
    )?;
    record("heads", err)?;

    let report = joint_loss_gradcheck(&toy_model_config(), 0, GradCheckOptions::default()).map_err(fail)?;
    record("backbone + joint loss", report.max_rel_error)?;

    let secs = started.elapsed().as_secs_f64();
    ensure(secs <= 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "{} primitives, 7 blocks, joint loss over {} coordinates; worst {:.2e} ({})",
        prims.len() + 1,
        report.coords_checked,
        worst.0,
        worst.1
    ))
}

// ---- 2 -------------------------------------------------------------------

fn softplus(x: f64) -> f64 {
    x.exp().ln_1p()
}

fn ssm_closed_form() -> Outcome {
    let steps = 1000;
    let mut rng = RngStream::new(7);
    let mut max_err = 0.0f64;
    for case in 0..5 {
        let mut store = ParamStore::new();
        let ssm = SelectiveSsm::new(&mut store, "ssm", 1, 1, &mut rng);
        let (gate, b, c, delta_raw) = (
            rng.uniform(-1.0, 1.0),
            rng.uniform(-1.5, 1.5),
            rng.uniform(-1.5, 1.5),
            rng.uniform(-2.0, 0.5),
        );
        ssm.set_constant(&mut store, gate, b, c, delta_raw);
        let delta = softplus(delta_raw);
        let abar = (-delta * softplus(gate)).exp();
        let bbar = delta * b;

        // random input: direct convolution sum
        let z: Vec<f64> = (0..steps).map(|_| rng.normal()).collect();
        let mut tape = Tape::new();
        let zv = tape.constant(Tensor::new(&[1, steps, 1], z.clone()).map_err(fail)?);
        let y = ssm.forward(&mut tape, &store, zv);
        let y = tape.value(y).data();
        let mut powers = vec![1.0; steps];
        for k in 1..steps {
            powers[k] = powers[k - 1] * abar;
        }
        for t in 0..steps {
            let direct: f64 = (0..=t).map(|k| powers[t - k] * z[k]).sum::<f64>() * c * bbar;
            max_err = max_err.max((y[t] - direct).abs());
        }

        // constant input: geometric series
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::ones(&[1, steps, 1]));
        let y = ssm.forward(&mut tape, &store, ones);
        let y = tape.value(y).data();
        for (t, &yt) in y.iter().enumerate() {
            let closed = c * bbar * (1.0 - abar.powi(t as i32 + 1)) / (1.0 - abar);
            max_err = max_err.max((yt - closed).abs());
        }
        ensure(max_err <= 1e-10, || format!("case {case}: error {max_err:.3e}"))?;
    }

    for (a, b) in [(-0.8, 1.3), (-2.0, -0.4), (-0.05, 3.0)] {
        for f in [zoh_full, zoh_simplified] {
            let hold = f(a, b, 0.0).map_err(fail)?;
            ensure(hold == (1.0, 0.0), || format!("Δ = 0 gave {hold:?}"))?;
        }
    }
    let mut worst_ratio = 0.0f64;
    for (a, b) in [(-0.8, 1.3), (-2.0, -0.4), (-0.05, 3.0), (-5.0, 0.7)] {
        for delta in [1e-2, 1e-4, 1e-6] {
            let (_, exact) = zoh_full(a, b, delta).map_err(fail)?;
            let (_, simple) = zoh_simplified(a, b, delta).map_err(fail)?;
            let dev = (simple / exact - 1.0).abs();
            ensure(dev <= delta * a.abs(), || {
                format!("a={a}, Δ={delta}: |ratio − 1| = {dev:.3e}")
            })?;
            worst_ratio = worst_ratio.max(dev / (delta * a.abs()));
        }
    }
    Ok(format!(
        "max error {max_err:.2e} over {steps} steps; Δ=0 holds exactly; ratio bound used up to {:.0}%",
        worst_ratio * 100.0
    ))
}

// ---- 3 -------------------------------------------------------------------

fn attention_invariants() -> Outcome {
    let mut rng = RngStream::new(11);
    let (mut row_dev, mut uniform_dev, mut recompute_dev) = (0.0f64, 0.0f64, 0.0f64);
    for inst in 0..100 {
        let (n, m, w) = (1 + rng.below(3), 2 + rng.below(3), 3 + rng.below(10));
        let key_dim = 1 + rng.below(4);
        let mut store = ParamStore::new();
        let ca = CrossAttention::new(&mut store, "ca", key_dim, false, &mut rng);
        let scale = rng.uniform(0.1, 5.0);
        let x = rng.normal_tensor(&[n, m, w]).map(|v| v * scale);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = ca.forward(&mut tape, &store, xv);
        let alpha = tape.value(out.alpha).data();
        let v = tape.value(out.v).data();
        let o = tape.value(out.o);
        for row in alpha.chunks(w) {
            row_dev = row_dev.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        for b in 0..n {
            for i in 0..m {
                for t in 0..w {
                    let mut total = 0.0;
                    for j in 0..m {
                        let base = (((b * m + i) * w + t) * m + j) * w;
                        let vj = &v[(b * m + j) * w..(b * m + j + 1) * w];
                        let term: f64 = (0..w).map(|s| alpha[base + s] * vj[s]).sum();
                        let lo = vj.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = vj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
                        ensure(term >= lo - slack && term <= hi + slack, || {
                            format!("instance {inst}: term {term} outside [{lo}, {hi}]")
                        })?;
                        total += term;
                    }
                    recompute_dev = recompute_dev.max((o.at(&[b, t, i]) - total).abs());
                }
            }
        }
        ensure(row_dev <= 1e-12, || {
            format!("instance {inst}: row sum off by {row_dev:.3e}")
        })?;
        ensure(recompute_dev <= 1e-12, || {
            format!("instance {inst}: O off by {recompute_dev:.3e}")
        })?;

        // identical keys: zero key weights leave every key equal to the bias
        let mut flat = store.clone();
        flat.get_mut(ca.key.weight).value_mut().data_mut().fill(0.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = ca.forward(&mut tape, &flat, xv);
        for &a in tape.value(out.alpha).data() {
            uniform_dev = uniform_dev.max((a - 1.0 / w as f64).abs());
        }
        ensure(uniform_dev <= 1e-12, || {
            format!("instance {inst}: constant keys off uniform by {uniform_dev:.3e}")
        })?;
    }
    Ok(format!(
        "100 instances; row sums {row_dev:.1e}, uniform rows {uniform_dev:.1e}, O recomputed {recompute_dev:.1e}"
    ))
}

// ---- 4 -------------------------------------------------------------------

fn toy_corpus_windows(seed: u64) -> Result<(wsnad::data::Corpus, Vec<Window>), String> {
    let (n, m, w, _) = TOY_SHAPE;
    let corpus = wsnad::data::Corpus::synthetic(n, m, 6 * w, 2, seed, &Default::default()).map_err(fail)?;
    let windows = wsnad::data::slide_windows(&corpus.series, None, w, w / 2, Standardizer::default())
        .map_err(fail)?
        .windows;
    Ok((corpus, windows))
}

fn byol_mechanics() -> Outcome {
    let mut rng = RngStream::new(13);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let (rows, d) = (1 + rng.below(6), 1 + rng.below(8));
        let scale = 10f64.powf(rng.uniform(-3.0, 3.0));
        let q = rng.normal_tensor(&[rows, d]).map(|v| v * scale);
        let z = rng.normal_tensor(&[rows, d]);
        let mut tape = Tape::new();
        let (qv, zv) = (tape.constant(q), tape.constant(z));
        let l = byol_loss(&mut tape, qv, zv);
        let l = tape.value(l).item();
        ensure((0.0..=4.0).contains(&l), || format!("L_cont = {l}"))?;
        lo = lo.min(l);
        hi = hi.max(l);

        let same = byol_loss(&mut tape, qv, qv);
        let neg = tape.neg(qv);
        let opposite = byol_loss(&mut tape, qv, neg);
        let (s, o) = (tape.value(same).item(), tape.value(opposite).item());
        ensure(s.abs() <= 1e-12 && (o - 4.0).abs() <= 1e-12, || {
            format!("q = z' gave {s}, q = −z' gave {o}")
        })?;
    }

    // target gradients: freeze the online copy and expose the target copy
    let (corpus, windows) = toy_corpus_windows(3)?;
    let model = Model::new(toy_model_config(), TOY_SHAPE.1, 3).map_err(fail)?;
    let mut online = model.store.clone();
    online.set_all_trainable(false);
    let mut target = model.store.clone();
    target.set_all_trainable(true);
    for id in target.ids().collect::<Vec<_>>() {
        for v in target.get_mut(id).value_mut().data_mut() {
            *v *= 0.9;
        }
    }
    let a_hat = corpus.graph.normalized_adjacency();
    let mut nonzero = 0usize;
    let mut backwards = 0usize;
    for pair in windows.chunks(2) {
        let wins: Vec<&Window> = pair.iter().collect();
        let batch = Batch::with_blocks(&wins, &vec![a_hat.clone(); wins.len()]);
        let x_aug = batch.x.map(|v| v * 0.8);
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let mut noise_rng = rng.fork(backwards as u64);
            let mut target_rng = noise_rng.fork_named("target");
            let mut tape = Tape::new();
            let losses = joint_loss(
                &mut tape,
                &model,
                &online,
                &target,
                &batch,
                &x_aug,
                &batch.a_hat,
                PretrainNoise {
                    online: Noise::Sample(&mut noise_rng),
                    target: Noise::Sample(&mut target_rng),
                },
                reduction,
            );
            let grads = tape.backward(losses.total).map_err(fail)?;
            nonzero += grads.iter().flat_map(|(_, g)| g.data()).filter(|&&g| g != 0.0).count();
            backwards += 1;
        }
    }
    ensure(nonzero == 0, || format!("{nonzero} non-zero target gradient entries"))?;

    let mut store = ParamStore::new();
    let p = store.add("p", rng.normal_tensor(&[7, 3]), true);
    let q = store.add("q", rng.normal_tensor(&[5]), true);
    let mut target = store.clone();
    for id in [p, q] {
        *target.get_mut(id).value_mut() = rng.normal_tensor(target.value(id).shape());
    }
    let before = target.clone();
    ema_update(&mut target, &store, 1.0).map_err(fail)?;
    ensure(
        [p, q].iter().all(|&id| target.value(id).bit_eq(before.value(id))),
        || "m = 1 moved the target".into(),
    )?;
    ema_update(&mut target, &store, 0.0).map_err(fail)?;
    ensure(
        [p, q].iter().all(|&id| target.value(id).bit_eq(store.value(id))),
        || "m = 0 did not copy the online weights".into(),
    )?;

    Ok(format!(
        "L_cont within [{lo:.3}, {hi:.3}] on 1000 draws; target gradients zero over {backwards} backward passes; EMA end points exact"
    ))
}

// ---- 5 -------------------------------------------------------------------

const SMALL: &str = r#"
seed = 4
[data]
n_nodes = 5
n_modalities = 2
n_steps = 400
knn = 2
[[data.anomalies]]
type = "point"
rate = 0.01
seed = 3
[window]
size = 16
stride = 2
[model]
state_dim = 2
hidden = 8
latent_dim = 6
key_dim = 2
layers = 1
[train]
pretrain_epochs = 2
finetune_epochs = 3
batch_size = 8
stride = 8
[threshold]
mode = "best_f1"
"#;

fn freeze_and_prompt() -> Outcome {
    let cfg = RunConfig::from_toml(SMALL).map_err(fail)?;
    let corpus = load_corpus(&cfg.data, cfg.seed).map_err(fail)?;
    let data = split_windows(&corpus, &cfg).map_err(fail)?;
    let (mut model, _) = pretrain_stage(&corpus, &data, &cfg).map_err(fail)?;
    let backbone = Checkpoint::backbone(&model, None, None).to_json().map_err(fail)?;
    let pretrained = predict_windows(&model, &data.test, &corpus.graph, 64);

    let mut zero = model.clone();
    zero.add_prompt(cfg.data.n_nodes);
    let prompted = predict_windows(&zero, &data.test, &corpus.graph, 64);
    ensure(pretrained.iter().zip(&prompted).all(|(a, b)| a.bit_eq(b)), || {
        "a zero prompt changed the predictions".into()
    })?;

    let report = finetune_stage(&mut model, &corpus, &data, &cfg).map_err(fail)?;
    let expected = cfg.data.n_nodes * cfg.model.latent_dim;
    ensure(report.trainable == expected, || {
        format!("{} trainable parameters, expected N·d_z = {expected}", report.trainable)
    })?;
    let after = Checkpoint::backbone(&model, None, None).to_json().map_err(fail)?;
    ensure(after == backbone, || {
        "backbone checkpoint changed during fine-tuning".into()
    })?;
    let prompt = model.store.value(model.prompt.ok_or("no prompt after fine-tuning")?);
    ensure(prompt.data().iter().any(|&v| v != 0.0), || {
        "the prompt never moved".into()
    })?;

    Ok(format!(
        "backbone JSON identical ({} bytes); {expected} trainable; zero prompt bit-exact on {} windows",
        backbone.len(),
        pretrained.len()
    ))
}

// ---- 6 -------------------------------------------------------------------

fn preprocessing() -> Outcome {
    let mut rng = RngStream::new(17);
    let std = Standardizer::new(DEFAULT_EPSILON).map_err(fail)?;
    let (mut mean_dev, mut std_dev, mut trip_dev) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let len = 2 + rng.below(300);
        let offset = rng.uniform(-1e3, 1e3);
        let scale = 10f64.powf(rng.uniform(-1.0, 2.0));
        let x: Vec<f64> = (0..len).map(|_| offset + scale * rng.normal()).collect();
        let (z, stats) = std.standardize(&x);
        let n = len as f64;
        let mean = z.iter().sum::<f64>() / n;
        let sd = (z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        mean_dev = mean_dev.max(mean.abs());
        std_dev = std_dev.max((sd - 1.0).abs());
        let back = std.destandardize(&z, stats);
        for (a, b) in x.iter().zip(&back) {
            trip_dev = trip_dev.max((a - b).abs());
        }
    }
    ensure(mean_dev <= 1e-12, || format!("mean off by {mean_dev:.3e}"))?;
    ensure(std_dev <= 1e-6, || format!("std off by {std_dev:.3e}"))?;
    ensure(trip_dev <= 1e-9, || format!("round trip off by {trip_dev:.3e}"))?;

    for _ in 0..1000 {
        let t = 1 + rng.below(500);
        let w = 1 + rng.below(t + 5);
        let s = 1 + rng.below(50);
        let brute = (0..t).step_by(s).filter(|&start| start + w < t).count();
        match window_count(t, w, s) {
            Ok(c) => {
                ensure(c == brute, || {
                    format!("(T={t}, w={w}, s={s}): {c} windows, enumeration gives {brute}")
                })?;
                let starts = window_starts(t, w, s, 0..t).map_err(fail)?;
                ensure(starts.len() == brute, || {
                    format!("(T={t}, w={w}, s={s}): {} starts", starts.len())
                })?;
            }
            Err(_) => ensure(brute == 0, || {
                format!("(T={t}, w={w}, s={s}) rejected, enumeration gives {brute}")
            })?,
        }
    }
    Ok(format!(
        "1000 windows: mean {mean_dev:.1e}, std {std_dev:.1e}, round trip {trip_dev:.1e}; 1000 counts match enumeration"
    ))
}

// ---- 7 -------------------------------------------------------------------

fn recount(pred: &[u8], truth: &[u8]) -> (usize, usize, usize, usize, f64, f64, f64) {
    let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == 1 && t == 1).count();
    let fp = pred.iter().zip(truth).filter(|&(&p, &t)| p == 1 && t == 0).count();
    let fn_ = pred.iter().zip(truth).filter(|&(&p, &t)| p == 0 && t == 1).count();
    let tn = pred.len() - tp - fp - fn_;
    let pre = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let rec = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if pre + rec == 0.0 {
        0.0
    } else {
        2.0 * pre * rec / (pre + rec)
    };
    (tp, fp, fn_, tn, pre, rec, f1)
}

fn metric_oracle() -> Outcome {
    let mut rng = RngStream::new(19);
    for case in 0..1000 {
        let len = 1 + rng.below(200);
        let (pp, pt) = (rng.unit(), rng.unit());
        let pred: Vec<u8> = (0..len).map(|_| u8::from(rng.coin(pp))).collect();
        let truth: Vec<u8> = (0..len).map(|_| u8::from(rng.coin(pt))).collect();
        let c = Confusion::count(&pred, &truth).map_err(fail)?;
        let m = c.metrics();
        let (tp, fp, fn_, tn, pre, rec, f1) = recount(&pred, &truth);
        ensure((c.tp, c.fp, c.fn_, c.tn) == (tp, fp, fn_, tn), || {
            format!("case {case}: counts {c:?}")
        })?;
        ensure(m.pre == pre && m.rec == rec && m.f1 == f1, || {
            format!("case {case}: metrics {m:?}")
        })?;
    }

    for case in 0..200 {
        let len = 1 + rng.below(300);
        let levels = 1 + rng.below(40);
        let truth: Vec<u8> = (0..len).map(|_| u8::from(rng.coin(0.2))).collect();
        let scores: Vec<f64> = truth
            .iter()
            .map(|&t| (rng.below(levels) as f64 + f64::from(t) * rng.uniform(0.0, 10.0)) / 4.0)
            .collect();
        let mut candidates = scores.clone();
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();
        let mut sweep = (f64::NAN, -1.0);
        for &tau in &candidates {
            let f1 = recount(&apply_threshold(&scores, tau), &truth).6;
            if f1 > sweep.1 {
                sweep = (tau, f1);
            }
        }
        let got = best_f1(&scores, &truth).map_err(fail)?;
        ensure(got == sweep, || {
            format!("case {case}: best_f1 {got:?}, sweep {sweep:?}")
        })?;
    }
    Ok("1000 label pairs recounted exactly; best_f1 equals the sweep on 200 score sets".into())
}

// ---- 8 -------------------------------------------------------------------

const DESK: &str = r#"
seed = 7
[data]
n_nodes = 8
n_modalities = 3
n_steps = 5000
knn = 4
[[data.anomalies]]
type = "point"
rate = 0.005
seed = 11
[[data.anomalies]]
type = "contextual"
rate = 0.005
seed = 12
[[data.anomalies]]
type = "collective"
rate = 0.005
duration = 4
seed = 13
[[data.anomalies]]
type = "correlation"
rate = 0.005
duration = 4
seed = 14
[window]
size = 32
stride = 1
normalization = "global"
[model]
state_dim = 8
hidden = 16
latent_dim = 16
[train]
pretrain_epochs = 30
finetune_epochs = 10
stride = 8
reduction = "mean"
[threshold]
mode = "best_f1"
"#;

fn scheme(id: u8) -> Scheme {
    Scheme::by_id(id).expect("known scheme")
}

fn desk_scale_detection() -> Outcome {
    let started = Instant::now();
    let cfg = RunConfig::from_toml(DESK).map_err(fail)?;
    let corpus = load_corpus(&cfg.data, cfg.seed).map_err(fail)?;
    let rows = ablate(&corpus, &cfg, &[scheme(7), scheme(5)]).map_err(fail)?;
    let data = split_windows(&corpus, &cfg).map_err(fail)?;
    let baseline = baseline_stage(&corpus, &data, &cfg).map_err(fail)?;
    let base_f1 = baseline.metrics.unwrap_or_default().f1;
    let (full, no_pretrain) = (rows[0].f1, rows[1].f1);
    let secs = started.elapsed().as_secs_f64();
    let detail = format!(
        "F1 full {full:.3} (Pre {:.3}, Rec {:.3}), scheme 5 {no_pretrain:.3}, persistence {base_f1:.3}",
        rows[0].pre, rows[0].rec
    );
    ensure(full >= 0.80, || format!("{detail}; full model below 0.80"))?;
    ensure(full > no_pretrain, || format!("{detail}; not above scheme 5"))?;
    ensure(full > base_f1, || format!("{detail}; not above persistence"))?;
    ensure(secs <= 900.0, || format!("{detail}; took {secs:.0} s"))?;
    Ok(detail)
}

// ---- 9 -------------------------------------------------------------------

const CORRELATION: &str = r#"
[data]
n_nodes = 8
n_modalities = 3
n_steps = 3000
knn = 4
[[data.anomalies]]
type = "correlation"
rate = 0.01
duration = 8
seed = 21
[window]
size = 32
stride = 1
normalization = "global"
[model]
state_dim = 8
hidden = 16
latent_dim = 16
[train]
pretrain_epochs = 10
finetune_epochs = 10
stride = 8
reduction = "mean"
[threshold]
mode = "best_f1"
"#;

fn ablation_direction() -> Outcome {
    let base = RunConfig::from_toml(CORRELATION).map_err(fail)?;
    let (mut ca_wins, mut vgcn_wins) = (0, 0);
    let mut lines = Vec::new();
    for seed in 1..=3u64 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.data.anomalies = base
            .data
            .anomalies
            .iter()
            .map(|a| AnomalySpec {
                seed: a.seed + seed,
                ..a.clone()
            })
            .collect();
        let corpus = load_corpus(&cfg.data, cfg.seed).map_err(fail)?;
        let rows = ablate(&corpus, &cfg, &[scheme(7), scheme(2), scheme(3)]).map_err(fail)?;
        let (full, no_ca, no_vgcn) = (rows[0].f1, rows[1].f1, rows[2].f1);
        ca_wins += usize::from(no_ca < full);
        vgcn_wins += usize::from(no_vgcn < full);
        lines.push(format!(
            "seed {seed}: full {full:.3}, no CA {no_ca:.3}, no VGCN {no_vgcn:.3}"
        ));
    }
    let detail = format!(
        "{}; CA off lower on {ca_wins}/3, VGCN off lower on {vgcn_wins}/3",
        lines.join("; ")
    );
    ensure(ca_wins >= 2 && vgcn_wins >= 2, || detail.clone())?;
    Ok(detail)
}

// ---- 10 ------------------------------------------------------------------

const TINY: &str = r#"
seed = 3
[data]
n_nodes = 4
n_modalities = 2
n_steps = 320
knn = 2
[[data.anomalies]]
type = "point"
rate = 0.01
seed = 1
[[data.anomalies]]
type = "correlation"
rate = 0.01
duration = 4
seed = 2
[window]
size = 16
stride = 4
[model]
state_dim = 2
hidden = 6
latent_dim = 4
key_dim = 2
layers = 1
[train]
pretrain_epochs = 2
finetune_epochs = 2
batch_size = 8
stride = 8
[threshold]
mode = "best_f1"
"#;

/// Readings for four motes in the lab telemetry line format.
fn lab_readings() -> String {
    let mut s = String::new();
    for epoch in 1..=240u32 {
        for mote in 1..=4u32 {
            if (epoch + mote) % 37 == 0 {
                continue;
            }
            let phase = f64::from(epoch) / 20.0 + f64::from(mote);
            s.push_str(&format!(
                "2004-02-28 00:00:00 {epoch} {mote} {:.3} {:.3} {:.2} {:.4}\n",
                20.0 + 2.0 * phase.sin(),
                40.0 - 3.0 * phase.sin(),
                100.0 + 20.0 * (phase * 0.5).cos(),
                2.7 - 0.0002 * f64::from(epoch),
            ));
        }
    }
    s
}

fn run_cli(args: &[&str], cfg: &Path, out: &Path) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_wsnad"))
        .args(args)
        .arg("--config")
        .arg(cfg)
        .arg("--output-dir")
        .arg(out)
        .env_remove("OUTPUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .map_err(fail)?;
    ensure(o.status.success(), || {
        format!(
            "wsnad {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&o.stderr).trim()
        )
    })
}

/// Every file under `dir` with its contents; loss logs lose `wall_ms`.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let name = p.strip_prefix(dir).unwrap().display().to_string();
            let mut bytes = fs::read(&p).unwrap();
            if name.ends_with("_log.jsonl") {
                let lines: Vec<Value> = String::from_utf8(bytes)
                    .unwrap()
                    .lines()
                    .map(|l| {
                        let mut v: Value = serde_json::from_str(l).unwrap();
                        v.as_object_mut().unwrap().remove("wall_ms");
                        v
                    })
                    .collect();
                bytes = serde_json::to_vec(&lines).unwrap();
            }
            out.push((name, bytes));
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(fail)?;
    let root = dir.path();
    let run_cfg = root.join("run.toml");
    fs::write(&run_cfg, TINY).map_err(fail)?;
    fs::write(root.join("readings.txt"), lab_readings()).map_err(fail)?;
    fs::write(root.join("coords.txt"), "1 0.0 0.0\n2 5.0 0.0\n3 0.0 5.0\n4 5.0 5.0\n").map_err(fail)?;
    let lab_cfg = root.join("lab.toml");
    fs::write(
        &lab_cfg,
        TINY.replace(
            "[data]\n",
            &format!(
                "[data]\nsource = \"ibrl\"\npath = {:?}\ncoordinates = {:?}\n",
                root.join("readings.txt"),
                root.join("coords.txt")
            ),
        ),
    )
    .map_err(fail)?;

    let stages: [(&[&str], &Path); 9] = [
        (&["synth"], &run_cfg),
        (&["inject"], &run_cfg),
        (&["ingest"], &lab_cfg),
        (&["pretrain"], &run_cfg),
        (&["finetune"], &run_cfg),
        (&["detect"], &run_cfg),
        (&["eval"], &run_cfg),
        (&["ablate", "--schemes", "2,5,7"], &run_cfg),
        (&["gradcheck"], &run_cfg),
    ];
    let (first, second) = (root.join("first"), root.join("second"));
    let mut checked = Vec::new();
    for (args, cfg) in stages {
        // identical paths on both runs: the output directory shows up in
        // the resolved config and the run summary
        let out = root.join("out");
        if out.exists() {
            fs::remove_dir_all(&out).map_err(fail)?;
        }
        for keep in [&first, &second] {
            if keep.exists() {
                fs::remove_dir_all(keep).map_err(fail)?;
            }
        }
        // the staged commands read earlier artifacts, so replay the chain
        let idx = checked.len();
        let prefix: Vec<(&[&str], &Path)> = stages[..idx]
            .iter()
            .copied()
            .filter(|(a, _)| matches!(a[0], "pretrain" | "finetune"))
            .collect();
        for attempt in [&first, &second] {
            if out.exists() {
                fs::remove_dir_all(&out).map_err(fail)?;
            }
            for (a, c) in &prefix {
                run_cli(a, c, &out)?;
            }
            run_cli(args, cfg, &out)?;
            fs::rename(&out, attempt).map_err(fail)?;
        }
        let (a, b) = (snapshot(&first), snapshot(&second));
        ensure(a == b, || {
            let diff: Vec<_> = a
                .iter()
                .zip(&b)
                .filter(|(x, y)| x != y)
                .map(|(x, _)| x.0.clone())
                .collect();
            format!("wsnad {} differs on rerun: {diff:?}", args.join(" "))
        })?;
        checked.push(args.join(" "));
    }
    Ok(format!("{} subcommands rerun byte-identically", checked.len()))
}

use approx::assert_abs_diff_eq;
use proptest::prelude::*;

use wsnad::config::RunConfig;
use wsnad::data::synth::synth_coordinates;
use wsnad::data::window::{window_count, window_starts};
use wsnad::data::{inject_anomalies, AnomalyKind, AnomalySpec, SensorGraph, Standardizer, SynthConfig};
use wsnad::detect::{apply_threshold, best_f1, quantile, Confusion};
use wsnad::train::{byol_loss, ema_update};
use wsnad::{ParamStore, Tape, Tensor};

fn labels(len: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..2, len)
}

proptest! {
    #[test]
    fn window_count_matches_enumeration(t in 1usize..400, w in 1usize..420, s in 1usize..40) {
        let brute = (0..t).step_by(s).filter(|&start| start + w < t).count();
        match window_count(t, w, s) {
            Ok(c) => {
                prop_assert_eq!(c, brute);
                let starts = window_starts(t, w, s, 0..t).unwrap();
                prop_assert!(starts.iter().all(|&st| st + w < t));
                prop_assert_eq!(starts.len(), c);
            }
            Err(_) => prop_assert_eq!(brute, 0),
        }
    }

    #[test]
    fn standardize_centres_scales_and_inverts(
        x in prop::collection::vec(-1e3f64..1e3, 2..200),
    ) {
        let spread = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - x.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(spread > 1e-3);
        let std = Standardizer::default();
        let (z, stats) = std.standardize(&x);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() < 1e-12, "mean {}", mean);
        prop_assert!((sd - 1.0).abs() < 1e-6, "std {}", sd);
        for (a, b) in x.iter().zip(std.destandardize(&z, stats)) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn confusion_partitions_and_metrics_are_ratios(
        (pred, truth) in (1usize..300).prop_flat_map(|n| (labels(n), labels(n))),
    ) {
        let c = Confusion::count(&pred, &truth).unwrap();
        prop_assert_eq!(c.tp + c.fp + c.fn_ + c.tn, pred.len());
        let m = c.metrics();
        for v in [m.pre, m.rec, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(m.f1 <= m.pre.max(m.rec) + 1e-15);
        prop_assert!(m.f1 + 1e-15 >= m.pre.min(m.rec) || m.f1 == 0.0);
    }

    #[test]
    fn best_f1_dominates_every_candidate(
        (scores, truth) in (1usize..200).prop_flat_map(|n| (prop::collection::vec(0u32..50, n), labels(n))),
    ) {
        let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
        let (tau, f1) = best_f1(&scores, &truth).unwrap();
        prop_assert!(scores.contains(&tau));
        for &cand in &scores {
            let other = Confusion::count(&apply_threshold(&scores, cand), &truth).unwrap().metrics().f1;
            prop_assert!(other <= f1);
            if other == f1 {
                prop_assert!(tau <= cand);
            }
        }
    }

    #[test]
    fn quantile_is_a_monotone_order_statistic(
        scores in prop::collection::vec(-100f64..100.0, 1..100),
        q1 in 0f64..=1.0,
        q2 in 0f64..=1.0,
    ) {
        let (lo, hi) = (q1.min(q2), q1.max(q2));
        let (a, b) = (quantile(&scores, lo).unwrap(), quantile(&scores, hi).unwrap());
        prop_assert!(a <= b);
        prop_assert!(scores.contains(&a) && scores.contains(&b));
    }

    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..9,
        seed in any::<u64>(),
        scale in 0.01f64..50.0,
    ) {
        let x = wsnad::RngStream::new(seed).normal_tensor(&[rows, cols]).map(|v| v * scale);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv);
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn byol_loss_stays_in_range(
        rows in 1usize..6,
        d in 1usize..8,
        seed in any::<u64>(),
    ) {
        let mut rng = wsnad::RngStream::new(seed);
        let mut tape = Tape::new();
        let q = tape.constant(rng.normal_tensor(&[rows, d]));
        let z = tape.constant(rng.normal_tensor(&[rows, d]));
        let l = byol_loss(&mut tape, q, z);
        let l = tape.value(l).item();
        prop_assert!((0.0..=4.0).contains(&l));
    }

    #[test]
    fn ema_moves_between_target_and_online(
        a in prop::collection::vec(-10f64..10.0, 1..20),
        m in 0f64..=1.0,
    ) {
        let mut online = ParamStore::new();
        let id = online.add("p", Tensor::from_vec(a.clone()), true);
        let mut target = online.clone();
        let start: Vec<f64> = a.iter().map(|v| -v + 1.0).collect();
        target.get_mut(id).value_mut().data_mut().copy_from_slice(&start);
        ema_update(&mut target, &online, m).unwrap();
        for ((&t, &o), &s) in target.value(id).data().iter().zip(&a).zip(&start) {
            prop_assert!(t >= o.min(s) - 1e-12 && t <= o.max(s) + 1e-12);
            assert_abs_diff_eq!(t, m * s + (1.0 - m) * o, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalized_adjacency_is_symmetric_and_bounded(n in 2usize..12, k in 1usize..4, seed in any::<u64>()) {
        let g = SensorGraph::knn(&synth_coordinates(n, seed), k.min(n - 1)).unwrap();
        let a = g.normalized_adjacency();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(a.at(&[i, j]), a.at(&[j, i]));
                prop_assert!((0.0..=1.0).contains(&a.at(&[i, j])));
            }
            prop_assert!(a.at(&[i, i]) > 0.0);
        }
    }

    #[test]
    fn tensor_permute_round_trips(seed in any::<u64>(), a in 1usize..4, b in 1usize..4, c in 1usize..4) {
        let x = wsnad::RngStream::new(seed).normal_tensor(&[a, b, c]);
        let p = x.permute(&[2, 0, 1]);
        prop_assert_eq!(p.shape(), &[c, a, b]);
        prop_assert!(p.permute(&[1, 2, 0]).bit_eq(&x));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn injection_labels_match_events(seed in 0u64..1000, kind in 0usize..4, rate in 0.002f64..0.02) {
        let graph = SensorGraph::knn(&synth_coordinates(4, seed), 2).unwrap();
        let series = wsnad::data::synth_generate(4, 2, 600, &graph, seed, &SynthConfig::default()).unwrap();
        let spec = AnomalySpec::new(AnomalyKind::ALL[kind], rate, 5.0, 4, seed);
        let out = inject_anomalies(&series, &[spec]).unwrap();
        let cells: usize = out.injections.iter().map(|i| i.len()).sum();
        prop_assert_eq!(out.labels.count(), cells);
        for inj in &out.injections {
            let ch = out.series.channel(inj.node, inj.modality);
            prop_assert_eq!(&ch[inj.start..inj.start + inj.len()], inj.injected.as_slice());
            let clean = series.channel(inj.node, inj.modality);
            prop_assert_eq!(&clean[inj.start..inj.start + inj.len()], inj.original.as_slice());
        }
        let untouched = (0..4).all(|node| (0..2).all(|m| {
            let (a, b) = (series.channel(node, m), out.series.channel(node, m));
            (0..600).all(|t| out.labels.get(node, m, t) || a[t] == b[t])
        }));
        prop_assert!(untouched);
    }

    #[test]
    fn config_round_trips_through_toml(seed in 0u64..(i64::MAX as u64), lr in 1e-5f64..1.0, w in 2usize..500) {
        let cfg = RunConfig::default()
            .with_overrides(&[format!("seed={seed}"), format!("train.lr={lr}"), format!("window.size={w}")])
            .unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

//! Synthetic multi-node telemetry with a known coupling structure.
//!
//! Per node, modality 0 is a diurnal sinusoid plus AR(1) noise, modality 1
//! is a negatively coupled copy of modality 0 plus its own AR(1) noise, and
//! any further modality is a slow drift (shared across nodes up to a phase
//! offset) plus AR(1) noise. A single neighborhood mixing pass then
//! correlates adjacent nodes.

use serde::{Deserialize, Serialize};

use crate::data::graph::SensorGraph;
use crate::data::series::SensorSeries;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Steps per diurnal cycle.
    pub period: f64,
    pub amplitude: [f64; 2],
    pub base: [f64; 2],
    /// Per-node phase offsets are drawn from `[-phase_spread, phase_spread]`.
    pub phase_spread: f64,
    pub ar_phi: f64,
    pub ar_sigma: f64,
    /// Modality 1 is `-coupling * modality 0 + offset + noise`.
    pub coupling: f64,
    pub offset: [f64; 2],
    pub drift_amplitude: f64,
    /// Drift period range of modality 2; modality `c` uses `c − 1` times it.
    pub drift_period: [f64; 2],
    pub other_level: [f64; 2],
    pub other_sigma: f64,
    /// Weight of the neighbor mean in the mixing pass.
    pub mixing: f64,
    pub sample_interval: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            period: 96.0,
            amplitude: [4.0, 6.0],
            base: [18.0, 24.0],
            phase_spread: 0.3,
            ar_phi: 0.9,
            ar_sigma: 0.15,
            coupling: 1.5,
            offset: [70.0, 80.0],
            drift_amplitude: 1.0,
            drift_period: [150.0, 200.0],
            other_level: [2.0, 3.0],
            other_sigma: 0.05,
            mixing: 0.3,
            sample_interval: 31.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("synth: {msg}")));
        if self.period.is_nan() || self.period <= 0.0 {
            return bad("period must be positive");
        }
        if !(-1.0 < self.ar_phi && self.ar_phi < 1.0) {
            return bad("ar_phi must lie in (-1, 1)");
        }
        if !(0.0..=1.0).contains(&self.mixing) {
            return bad("mixing must lie in [0, 1]");
        }
        if self.ar_sigma < 0.0 || self.other_sigma < 0.0 {
            return bad("noise scales must be non-negative");
        }
        for r in [
            self.amplitude,
            self.base,
            self.offset,
            self.drift_period,
            self.other_level,
        ] {
            if r[0] > r[1] {
                return bad("ranges must be ordered [lo, hi]");
            }
        }
        if self.drift_period[0] <= 0.0 {
            return bad("drift_period must be positive");
        }
        Ok(())
    }
}

/// Default modality names for `m` channels.
pub fn modality_names(m: usize) -> Vec<String> {
    const NAMES: [&str; 4] = ["temperature", "humidity", "light", "voltage"];
    (0..m)
        .map(|c| NAMES.get(c).map_or_else(|| format!("modality{c}"), |s| s.to_string()))
        .collect()
}

fn ar1(rng: &mut RngStream, t: usize, phi: f64, sigma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(t);
    // start from the stationary distribution
    let mut e = rng.normal() * sigma / (1.0 - phi * phi).sqrt();
    for _ in 0..t {
        out.push(e);
        e = phi * e + sigma * rng.normal();
    }
    out
}

/// Generates an `[n, m, t]` series over `graph`.
pub fn synth_generate(
    n: usize,
    m: usize,
    t: usize,
    graph: &SensorGraph,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<SensorSeries> {
    cfg.validate()?;
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs at least 2 modalities, got {m}"
        )));
    }
    if n == 0 || t == 0 {
        return Err(Error::InvalidArgument("synthetic series must be non-empty".into()));
    }
    if graph.n_nodes() != n {
        return Err(Error::NodeMismatch {
            what: "synthetic graph".into(),
            expected: n,
            found: graph.n_nodes(),
        });
    }
    let root = RngStream::new(seed);
    // drift shape shared by all nodes, per modality
    let mut drift_rng = root.fork_named("drift");
    let drifts: Vec<(f64, f64)> = (2..m)
        .map(|c| {
            let period = (c - 1) as f64 * drift_rng.uniform(cfg.drift_period[0], cfg.drift_period[1]);
            (period, drift_rng.uniform(0.0, std::f64::consts::TAU))
        })
        .collect();
    let mut raw = vec![0.0; n * m * t];
    for i in 0..n {
        let mut rng = root.fork(i as u64);
        let base = rng.uniform(cfg.base[0], cfg.base[1]);
        let amp = rng.uniform(cfg.amplitude[0], cfg.amplitude[1]);
        let phase = rng.uniform(-cfg.phase_spread, cfg.phase_spread);
        let offset = rng.uniform(cfg.offset[0], cfg.offset[1]);
        let noise0 = ar1(&mut rng, t, cfg.ar_phi, cfg.ar_sigma);
        let noise1 = ar1(&mut rng, t, cfg.ar_phi, cfg.ar_sigma);
        let row = &mut raw[i * m * t..(i + 1) * m * t];
        for s in 0..t {
            let angle = std::f64::consts::TAU * s as f64 / cfg.period + phase;
            let temp = base + amp * angle.sin() + noise0[s];
            row[s] = temp;
            row[t + s] = -cfg.coupling * temp + offset + noise1[s];
        }
        for c in 2..m {
            let level = rng.uniform(cfg.other_level[0], cfg.other_level[1]);
            let (drift_period, drift_phase) = drifts[c - 2];
            let drift_phase = drift_phase + rng.uniform(-cfg.phase_spread, cfg.phase_spread);
            let noise = ar1(&mut rng, t, cfg.ar_phi, cfg.other_sigma);
            for s in 0..t {
                let angle = std::f64::consts::TAU * s as f64 / drift_period + drift_phase;
                row[c * t + s] = level + cfg.drift_amplitude * angle.sin() + noise[s];
            }
        }
    }
    let mixed = if cfg.mixing > 0.0 {
        mix(&raw, graph, m * t, cfg.mixing)
    } else {
        raw
    };
    SensorSeries::new(
        Tensor::from_parts(vec![n, m, t], mixed),
        (0..n as u32).collect(),
        modality_names(m),
        cfg.sample_interval,
    )
}

/// `x_i <- (1 - λ) x_i + λ mean_{j ∈ N(i)} x_j`; isolated nodes are unchanged.
fn mix(raw: &[f64], graph: &SensorGraph, row: usize, lambda: f64) -> Vec<f64> {
    let n = graph.n_nodes();
    let mut out = raw.to_vec();
    for i in 0..n {
        let nb: Vec<usize> = graph.neighbors(i).collect();
        if nb.is_empty() {
            continue;
        }
        let w = lambda / nb.len() as f64;
        let dst = &mut out[i * row..(i + 1) * row];
        for v in dst.iter_mut() {
            *v *= 1.0 - lambda;
        }
        for &j in &nb {
            for (d, s) in dst.iter_mut().zip(&raw[j * row..(j + 1) * row]) {
                *d += w * s;
            }
        }
    }
    out
}

/// Node positions on a jittered grid, about 5 m apart.
pub fn synth_coordinates(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = RngStream::new(seed).fork_named("coordinates");
    let cols = (n as f64).sqrt().ceil() as usize;
    (0..n)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            [
                5.0 * c as f64 + rng.uniform(-1.0, 1.0),
                5.0 * r as f64 + rng.uniform(-1.0, 1.0),
            ]
        })
        .collect()
}

/// Pearson correlation; 0 when either input is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, seed: u64) -> SensorGraph {
        SensorGraph::knn(&synth_coordinates(n, seed), 2).unwrap()
    }

    #[test]
    fn shape_and_determinism() {
        let g = graph(5, 1);
        let cfg = SynthConfig::default();
        let a = synth_generate(5, 3, 200, &g, 9, &cfg).unwrap();
        let b = synth_generate(5, 3, 200, &g, 9, &cfg).unwrap();
        let c = synth_generate(5, 3, 200, &g, 10, &cfg).unwrap();
        assert_eq!(a.values.shape(), &[5, 3, 200]);
        assert!(a.values.bit_eq(&b.values));
        assert!(!a.values.bit_eq(&c.values));
    }

    #[test]
    fn temperature_humidity_anticorrelated() {
        let cfg = SynthConfig::default();
        for seed in 0..10 {
            let g = graph(8, seed);
            let s = synth_generate(8, 3, 2000, &g, seed, &cfg).unwrap();
            for i in 0..8 {
                let r = pearson(s.channel(i, 0), s.channel(i, 1));
                assert!(r < -0.5, "seed {seed} node {i}: {r}");
            }
        }
    }

    #[test]
    fn neighbors_correlate_more() {
        let cfg = SynthConfig {
            phase_spread: 1.0,
            ..SynthConfig::default()
        };
        let g = graph(9, 3);
        let s = synth_generate(9, 2, 3000, &g, 3, &cfg).unwrap();
        let (mut adj, mut non) = (Vec::new(), Vec::new());
        for i in 0..9 {
            for j in i + 1..9 {
                let r = pearson(s.channel(i, 0), s.channel(j, 0));
                if g.has_edge(i, j) {
                    adj.push(r)
                } else {
                    non.push(r)
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&adj) > mean(&non), "{} vs {}", mean(&adj), mean(&non));
    }

    #[test]
    fn no_coupling_no_mixing_is_independent() {
        let cfg = SynthConfig {
            coupling: 0.0,
            mixing: 0.0,
            ..SynthConfig::default()
        };
        let g = graph(4, 2);
        let s = synth_generate(4, 4, 3000, &g, 2, &cfg).unwrap();
        for i in 0..4 {
            for a in 0..4 {
                for b in a + 1..4 {
                    let r = pearson(s.channel(i, a), s.channel(i, b));
                    assert!(r.abs() < 0.2, "node {i} ({a},{b}): {r}");
                }
            }
        }
    }

    #[test]
    fn one_modality_rejected() {
        let g = graph(3, 0);
        assert!(synth_generate(3, 1, 10, &g, 0, &SynthConfig::default()).is_err());
    }
}

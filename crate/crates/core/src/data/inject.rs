//! Labeled anomaly injection.
//!
//! Every perturbation is computed from the clean input: the local level and
//! scale of a cell come from the original channel within
//! [`LOCAL_RADIUS`] steps of the perturbed segment.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::series::{Labels, SensorSeries};
use crate::data::window::SliceStats;
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Half-width of the neighborhood used for local statistics.
pub const LOCAL_RADIUS: usize = 24;
/// Minimum number of clean steps kept between two injected segments.
pub const GUARD: usize = 2;
const MAX_ATTEMPTS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Point,
    Contextual,
    Collective,
    Correlation,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 4] = [
        AnomalyKind::Point,
        AnomalyKind::Contextual,
        AnomalyKind::Collective,
        AnomalyKind::Correlation,
    ];

    fn is_segment(self) -> bool {
        matches!(self, AnomalyKind::Collective | AnomalyKind::Correlation)
    }
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnomalyKind::Point => "point",
            AnomalyKind::Contextual => "contextual",
            AnomalyKind::Collective => "collective",
            AnomalyKind::Correlation => "correlation",
        })
    }
}

impl FromStr for AnomalyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point" => Ok(AnomalyKind::Point),
            "contextual" => Ok(AnomalyKind::Contextual),
            "collective" => Ok(AnomalyKind::Collective),
            "correlation" => Ok(AnomalyKind::Correlation),
            _ => Err(Error::InvalidArgument(format!("unknown anomaly type `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    #[serde(rename = "type")]
    pub kind: AnomalyKind,
    /// Fraction of all `N * M * T` cells to perturb.
    pub rate: f64,
    /// Multiple of the local standard deviation.
    #[serde(default = "default_magnitude")]
    pub magnitude: f64,
    /// Segment length for collective and correlation anomalies.
    #[serde(default = "default_duration")]
    pub duration: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_magnitude() -> f64 {
    5.0
}

fn default_duration() -> usize {
    1
}

impl AnomalySpec {
    pub fn new(kind: AnomalyKind, rate: f64, magnitude: f64, duration: usize, seed: u64) -> Self {
        Self {
            kind,
            rate,
            magnitude,
            duration,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rate) {
            return Err(Error::InvalidArgument(format!(
                "anomaly rate must lie in [0, 1), got {}",
                self.rate
            )));
        }
        if self.duration == 0 {
            return Err(Error::InvalidArgument("anomaly duration must be at least 1".into()));
        }
        if !self.magnitude.is_finite() || self.magnitude < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "anomaly magnitude must be finite and non-negative, got {}",
                self.magnitude
            )));
        }
        Ok(())
    }

    /// Steps covered by one injected event.
    pub fn event_len(&self) -> usize {
        if self.kind.is_segment() {
            self.duration
        } else {
            1
        }
    }
}

/// One injected event, with the values before and after.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    #[serde(rename = "type")]
    pub kind: AnomalyKind,
    pub node: usize,
    pub modality: usize,
    pub start: usize,
    pub original: Vec<f64>,
    pub injected: Vec<f64>,
}

impl Injection {
    pub fn len(&self) -> usize {
        self.original.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct Injected {
    pub series: SensorSeries,
    pub labels: Labels,
    pub injections: Vec<Injection>,
}

/// Applies `specs` in order. Events never overlap (nor come within
/// [`GUARD`] steps of each other) on the same `(node, modality)`.
pub fn inject_anomalies(series: &SensorSeries, specs: &[AnomalySpec]) -> Result<Injected> {
    let (n, m, t) = (series.n_nodes(), series.n_modalities(), series.n_steps());
    let mut out = series.clone();
    let mut labels = Labels::for_series(series);
    let mut busy = vec![false; n * m * t];
    let mut injections = Vec::new();

    let channel_stats: Vec<ChannelStats> = (0..n * m)
        .map(|k| ChannelStats::of(series.channel(k / m, k % m)))
        .collect();

    for (index, spec) in specs.iter().enumerate() {
        spec.validate()?;
        let len = spec.event_len();
        if len > t {
            return Err(Error::Infeasible(format!(
                "{} duration {len} exceeds series length {t}",
                spec.kind
            )));
        }
        let modalities: Vec<usize> = match spec.kind {
            AnomalyKind::Correlation if m < 2 => {
                return Err(Error::Infeasible(
                    "correlation anomalies need two coupled modalities".into(),
                ))
            }
            AnomalyKind::Correlation => vec![0, 1],
            _ => (0..m).collect(),
        };
        let cells = (spec.rate * (n * m * t) as f64).round() as usize;
        let events = cells.div_ceil(len);
        if events == 0 {
            continue;
        }
        let capacity = n * modalities.len() * (t / (len + GUARD)).max(1);
        if events > capacity {
            return Err(Error::Infeasible(format!(
                "{events} {} events of length {len} cannot fit without overlap",
                spec.kind
            )));
        }
        let mut rng = RngStream::new(spec.seed).fork(index as u64);
        for _ in 0..events {
            let (node, modality, start) = place(&mut rng, &busy, n, &modalities, m, t, len).ok_or_else(|| {
                Error::Infeasible(format!(
                    "could not place a non-overlapping {} anomaly after {MAX_ATTEMPTS} attempts",
                    spec.kind
                ))
            })?;
            let k = node * m + modality;
            let clean = series.channel(node, modality);
            let local = local_stats(clean, start, len, channel_stats[k].std);
            let original = clean[start..start + len].to_vec();
            let injected = perturb(spec, &mut rng, &original, local, &channel_stats[k]);
            let dst = out.channel_mut(node, modality);
            dst[start..start + len].copy_from_slice(&injected);
            for s in start..start + len {
                busy[k * t + s] = true;
                labels.set(node, modality, s, true);
            }
            injections.push(Injection {
                kind: spec.kind,
                node,
                modality,
                start,
                original,
                injected,
            });
        }
    }
    Ok(Injected {
        series: out,
        labels,
        injections,
    })
}

fn place(
    rng: &mut RngStream,
    busy: &[bool],
    n: usize,
    modalities: &[usize],
    m: usize,
    t: usize,
    len: usize,
) -> Option<(usize, usize, usize)> {
    for _ in 0..MAX_ATTEMPTS {
        let node = rng.below(n);
        let modality = modalities[rng.below(modalities.len())];
        let start = rng.below(t - len + 1);
        let row = &busy[(node * m + modality) * t..(node * m + modality + 1) * t];
        let lo = start.saturating_sub(GUARD);
        let hi = (start + len + GUARD).min(t);
        if row[lo..hi].iter().all(|b| !b) {
            return Some((node, modality, start));
        }
    }
    None
}

struct ChannelStats {
    std: f64,
    q05: f64,
    q95: f64,
    min: f64,
    max: f64,
}

impl ChannelStats {
    fn of(x: &[f64]) -> Self {
        let mut sorted = x.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q = |p: f64| sorted[((sorted.len() - 1) as f64 * p).round() as usize];
        Self {
            std: SliceStats::of(x).std,
            q05: q(0.05),
            q95: q(0.95),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
        }
    }
}

/// Level and scale of the clean channel around `[start, start + len)`.
/// A flat neighborhood borrows the channel scale, or 1 if that is flat too.
fn local_stats(clean: &[f64], start: usize, len: usize, channel_std: f64) -> SliceStats {
    let lo = start.saturating_sub(LOCAL_RADIUS);
    let hi = (start + len + LOCAL_RADIUS).min(clean.len());
    let mut s = SliceStats::of(&clean[lo..hi]);
    if s.std <= 1e-12 {
        s.std = if channel_std > 1e-12 { channel_std } else { 1.0 };
    }
    s
}

fn perturb(
    spec: &AnomalySpec,
    rng: &mut RngStream,
    original: &[f64],
    local: SliceStats,
    channel: &ChannelStats,
) -> Vec<f64> {
    let sign = if rng.coin(0.5) { 1.0 } else { -1.0 };
    let shift = sign * spec.magnitude * local.std;
    match spec.kind {
        AnomalyKind::Point => original.iter().map(|x| x + shift).collect(),
        AnomalyKind::Contextual => {
            // the global extreme that is least typical of the neighborhood
            let v = if (channel.q05 - local.mean).abs() >= (channel.q95 - local.mean).abs() {
                channel.q05
            } else {
                channel.q95
            };
            vec![v; original.len()]
        }
        AnomalyKind::Collective => vec![local.mean + shift; original.len()],
        AnomalyKind::Correlation => original
            .iter()
            .map(|x| (2.0 * local.mean - x).clamp(channel.min, channel.max))
            .collect(),
    }
}

//! Anomaly scores, thresholds, labels and detection metrics.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::window::Window;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_QUANTILE: f64 = 0.995;

/// Per-cell squared error `(ŷ − y)²`.
pub fn score(yhat: &Tensor, y: &Tensor) -> Result<Tensor> {
    if yhat.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ",
            yhat.shape(),
            y.shape()
        )));
    }
    let data = yhat
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    Tensor::new(yhat.shape(), data)
}

/// Sum of the per-cell scores of one step.
pub fn score_total(scores: &Tensor) -> f64 {
    scores.sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ThresholdMode {
    Fixed { tau: f64 },
    Quantile { q: f64 },
    BestF1,
}

impl Default for ThresholdMode {
    fn default() -> Self {
        ThresholdMode::Quantile { q: DEFAULT_QUANTILE }
    }
}

impl fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdMode::Fixed { .. } => f.write_str("fixed"),
            ThresholdMode::Quantile { .. } => f.write_str("quantile"),
            ThresholdMode::BestF1 => f.write_str("best_f1"),
        }
    }
}

impl ThresholdMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdMode::Quantile { q } if !(0.0..=1.0).contains(&q) => Err(Error::Config(format!(
                "threshold: quantile must lie in [0, 1], got {q}"
            ))),
            ThresholdMode::Fixed { tau } if tau.is_nan() => Err(Error::Config("threshold: tau is NaN".into())),
            _ => Ok(()),
        }
    }
}

/// Nearest-rank quantile: the `⌈q·n⌉`-th smallest score.
pub fn quantile(scores: &[f64], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyData("no scores to take a quantile of".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = (q * s.len() as f64).ceil() as usize;
    Ok(s[rank.clamp(1, s.len()) - 1])
}

pub fn select_threshold(scores: &[f64], labels: Option<&[u8]>, mode: ThresholdMode) -> Result<f64> {
    mode.validate()?;
    match mode {
        ThresholdMode::Fixed { tau } => Ok(tau),
        ThresholdMode::Quantile { q } => quantile(scores, q),
        ThresholdMode::BestF1 => {
            let labels = labels
                .ok_or_else(|| Error::InvalidArgument("best_f1 threshold needs labelled validation data".into()))?;
            best_f1(scores, labels).map(|(tau, _)| tau)
        }
    }
}

/// The distinct score maximizing F1 when used as `τ` (smallest on ties),
/// with that F1.
pub fn best_f1(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::EmptyData("no scores to choose a threshold from".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = labels.iter().filter(|&&l| l != 0).count();
    // Walk candidates upwards; everything strictly above the candidate is flagged.
    let (mut below_tp, mut below_all) = (0usize, 0usize);
    let mut best = (scores[idx[0]], -1.0);
    let mut k = 0;
    while k < idx.len() {
        let v = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == v {
            below_tp += usize::from(labels[idx[k]] != 0);
            below_all += 1;
            k += 1;
        }
        let tp = positives - below_tp;
        let flagged = idx.len() - below_all;
        let c = Confusion {
            tp,
            fp: flagged - tp,
            fn_: below_tp,
            tn: below_all - below_tp,
        };
        let f1 = c.metrics().f1;
        if f1 > best.1 {
            best = (v, f1);
        }
    }
    Ok(best)
}

/// `1` where `score > τ`.
pub fn apply_threshold(scores: &[f64], tau: f64) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(s > tau)).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    #[serde(rename = "TP")]
    pub tp: usize,
    #[serde(rename = "FP")]
    pub fp: usize,
    #[serde(rename = "FN")]
    pub fn_: usize,
    #[serde(rename = "TN")]
    pub tn: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "Pre")]
    pub pre: f64,
    #[serde(rename = "Rec")]
    pub rec: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Confusion {
    pub fn count(pred: &[u8], truth: &[u8]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "{} predictions but {} labels",
                pred.len(),
                truth.len()
            )));
        }
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p != 0, t != 0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn metrics(&self) -> Metrics {
        let pre = ratio(self.tp, self.tp + self.fp);
        let rec = ratio(self.tp, self.tp + self.fn_);
        let f1 = if pre + rec == 0.0 {
            0.0
        } else {
            2.0 * pre * rec / (pre + rec)
        };
        Metrics { pre, rec, f1 }
    }
}

pub fn metrics(pred: &[u8], truth: &[u8]) -> Result<Metrics> {
    Ok(Confusion::count(pred, truth)?.metrics())
}

/// Scores of a sequence of windows flattened window-major, then node, then
/// modality.
pub fn score_windows(preds: &[Tensor], windows: &[Window]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (p, w) in preds.iter().zip(windows) {
        out.extend_from_slice(score(p, &w.target)?.data());
    }
    Ok(out)
}

/// Ground-truth labels of the windows' target steps, flattened like
/// [`score_windows`].
pub fn window_labels(windows: &[Window]) -> Option<Vec<u8>> {
    let mut out = Vec::new();
    for w in windows {
        out.extend_from_slice(w.labels.as_ref()?);
    }
    Some(out)
}

/// Last-value persistence: predicts every channel to repeat its final
/// window value.
pub fn persistence_predictions(windows: &[Window]) -> Vec<Tensor> {
    windows
        .iter()
        .map(|w| {
            let s = w.input.shape();
            let (n, m, len) = (s[0], s[1], s[2]);
            let data = w.input.data().chunks(len).map(|c| c[len - 1]).collect();
            Tensor::from_parts(vec![n, m], data)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub tau: f64,
    pub mode: String,
    #[serde(flatten)]
    pub metrics: Option<Metrics>,
    #[serde(flatten)]
    pub confusion: Option<Confusion>,
    pub n_windows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub tau: f64,
    pub mode: ThresholdMode,
    pub window_starts: Vec<usize>,
    pub node_ids: Vec<u32>,
    pub modalities: Vec<String>,
    /// `[B · N · M]`, window-major.
    pub scores: Vec<f64>,
    pub labels_pred: Vec<u8>,
    pub labels_true: Option<Vec<u8>>,
    pub confusion: Option<Confusion>,
    pub metrics: Option<Metrics>,
}

impl DetectionReport {
    pub fn new(
        windows: &[Window],
        scores: Vec<f64>,
        tau: f64,
        mode: ThresholdMode,
        node_ids: Vec<u32>,
        modalities: Vec<String>,
    ) -> Result<Self> {
        let cells = node_ids.len() * modalities.len();
        if scores.len() != windows.len() * cells {
            return Err(Error::Shape(format!(
                "{} scores for {} windows of {cells} cells",
                scores.len(),
                windows.len()
            )));
        }
        let labels_pred = apply_threshold(&scores, tau);
        let labels_true = window_labels(windows);
        let confusion = labels_true
            .as_deref()
            .map(|t| Confusion::count(&labels_pred, t))
            .transpose()?;
        Ok(Self {
            tau,
            mode,
            window_starts: windows.iter().map(|w| w.start).collect(),
            node_ids,
            modalities,
            scores,
            labels_pred,
            labels_true,
            metrics: confusion.map(|c| c.metrics()),
            confusion,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.window_starts.len()
    }

    pub fn metrics_file(&self) -> MetricsFile {
        MetricsFile {
            tau: self.tau,
            mode: self.mode.to_string(),
            metrics: self.metrics,
            confusion: self.confusion,
            n_windows: self.n_windows(),
        }
    }

    pub fn write_scores_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "window_start",
            "node_id",
            "modality",
            "score",
            "label_pred",
            "label_true",
        ])?;
        let (n, m) = (self.node_ids.len(), self.modalities.len());
        for (k, &start) in self.window_starts.iter().enumerate() {
            for i in 0..n {
                for c in 0..m {
                    let cell = (k * n + i) * m + c;
                    let truth = self
                        .labels_true
                        .as_ref()
                        .map(|t| t[cell].to_string())
                        .unwrap_or_default();
                    w.write_record([
                        start.to_string(),
                        self.node_ids[i].to_string(),
                        self.modalities[c].clone(),
                        self.scores[cell].to_string(),
                        self.labels_pred[cell].to_string(),
                        truth,
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io("scores.csv", e))?;
        Ok(())
    }

    /// Writes `scores.csv` and `metrics.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("scores.csv");
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        self.write_scores_csv(std::io::BufWriter::new(file))?;
        let path = dir.join("metrics.json");
        let text = serde_json::to_string_pretty(&self.metrics_file())? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

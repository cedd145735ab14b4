//! End-to-end runs: corpus → windows → pretrain → fine-tune → detect, and
//! the seven-scheme ablation.

use std::fs;
use std::io::{BufReader, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, DataSource, NormalizationMode, RunConfig};
use crate::data::corpus::Corpus;
use crate::data::ibrl::{ingest, IbrlOptions, IngestStats};
use crate::data::window::{slide_windows_range, Normalization, Standardizer, Window};
use crate::detect::{persistence_predictions, score_windows, select_threshold, window_labels, DetectionReport};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::train::finetune::{finetune, predict_windows, FinetuneMode, FinetuneReport};
use crate::train::{pretrain, EpochRecord};

/// Builds or loads the corpus described by `data` without injecting anything.
pub fn base_corpus(data: &DataConfig, seed: u64) -> Result<Corpus> {
    match data.source {
        DataSource::Synth => Corpus::synthetic(
            data.n_nodes,
            data.n_modalities,
            data.n_steps,
            data.knn,
            seed,
            &data.synth,
        ),
        DataSource::Corpus => Corpus::read(required(&data.path, "corpus directory")?),
        DataSource::Ibrl => {
            let (corpus, stats) = ingest_corpus(data)?;
            log::info!(
                "ingested {} nodes over {} steps: {stats:?}",
                corpus.series.n_nodes(),
                corpus.series.n_steps()
            );
            Ok(corpus)
        }
    }
}

/// Reads the IBRL files named in `data`.
pub fn ingest_corpus(data: &DataConfig) -> Result<(Corpus, IngestStats)> {
    let path = required(&data.path, "IBRL reading file")?;
    let coords = required(&data.coordinates, "IBRL coordinate file")?;
    let (series, graph, stats) = ingest(open(path)?, open(coords)?, data.knn, IbrlOptions::default())?;
    Ok((Corpus::new(series, graph)?, stats))
}

/// The corpus a run trains and evaluates on: the base corpus with the
/// configured anomalies injected. A stored corpus directory is used as is,
/// since it was written with its anomalies already in place.
pub fn load_corpus(data: &DataConfig, seed: u64) -> Result<Corpus> {
    let corpus = base_corpus(data, seed)?;
    if data.anomalies.is_empty() || data.source == DataSource::Corpus {
        Ok(corpus)
    } else {
        corpus.with_anomalies(&data.anomalies)
    }
}

fn required<'a>(p: &'a Option<std::path::PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("data: {what} path is not set")))
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            what: "input file".into(),
        });
    }
    Ok(BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?))
}

/// Chronological target-step ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn new(t: usize, train_fraction: f64, val_fraction: f64) -> Self {
        let a = (t as f64 * train_fraction).floor() as usize;
        let b = (t as f64 * (train_fraction + val_fraction)).floor() as usize;
        Self {
            train: 0..a,
            val: a..b,
            test: b..t,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitWindows {
    pub splits: Splits,
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
}

pub fn split_windows(corpus: &Corpus, cfg: &RunConfig) -> Result<SplitWindows> {
    let w = &cfg.window;
    let s = &corpus.series;
    let splits = Splits::new(s.n_steps(), w.train_fraction, w.val_fraction);
    let norm = match w.normalization {
        NormalizationMode::PerWindow => Normalization::PerWindow,
        NormalizationMode::Global => Normalization::fit_global(s, splits.train.clone()),
    };
    let std = Standardizer::new(w.epsilon)?;
    let labels = Some(&corpus.labels);
    let build = |range: Range<usize>, stride: usize| {
        slide_windows_range(s, labels, w.size, stride, range, &norm, std).map(|b| b.windows)
    };
    let out = SplitWindows {
        train: build(splits.train.clone(), cfg.train.stride)?,
        val: build(splits.val.clone(), w.stride)?,
        test: build(splits.test.clone(), w.stride)?,
        splits,
    };
    for (name, v) in [("train", &out.train), ("validation", &out.val), ("test", &out.test)] {
        if v.is_empty() {
            return Err(Error::EmptyData(format!(
                "the {name} split holds no complete window of size {}",
                w.size
            )));
        }
    }
    Ok(out)
}

pub fn finetune_mode(cfg: &RunConfig) -> FinetuneMode {
    match (cfg.pipeline.pretrain, cfg.pipeline.prompt) {
        (false, _) => FinetuneMode::Full,
        (true, true) => FinetuneMode::Prompt,
        (true, false) => FinetuneMode::Head,
    }
}

/// A fresh model, pretrained when the pipeline asks for it.
pub fn pretrain_stage(corpus: &Corpus, data: &SplitWindows, cfg: &RunConfig) -> Result<(Model, Vec<EpochRecord>)> {
    let mut model = Model::new(cfg.model.clone(), corpus.series.n_modalities(), cfg.seed)?;
    let trace = if cfg.pipeline.pretrain {
        pretrain(&mut model, &data.train, &corpus.graph, &cfg.train, cfg.seed)?.trace
    } else {
        Vec::new()
    };
    Ok((model, trace))
}

pub fn finetune_stage(
    model: &mut Model,
    corpus: &Corpus,
    data: &SplitWindows,
    cfg: &RunConfig,
) -> Result<FinetuneReport> {
    finetune(
        model,
        &data.train,
        &corpus.graph,
        &cfg.train,
        finetune_mode(cfg),
        cfg.seed,
    )
}

/// Selects `τ` on the validation windows and scores the test windows.
pub fn detect_stage(model: &Model, corpus: &Corpus, data: &SplitWindows, cfg: &RunConfig) -> Result<DetectionReport> {
    let n = corpus.series.n_nodes();
    if let Some(p) = model.prompt {
        let rows = model.store.value(p).shape()[0];
        if rows != n {
            return Err(Error::NodeMismatch {
                what: "prompt".into(),
                expected: n,
                found: rows,
            });
        }
    }
    if model.n_modalities != corpus.series.n_modalities() {
        return Err(Error::InvalidArgument(format!(
            "model expects {} modalities, corpus has {}",
            model.n_modalities,
            corpus.series.n_modalities()
        )));
    }
    let chunk = cfg.train.batch_size;
    let predict = |w: &[Window]| predict_windows(model, w, &corpus.graph, chunk);
    report(corpus, data, cfg, predict)
}

/// The same protocol with last-value persistence in place of the model.
pub fn baseline_stage(corpus: &Corpus, data: &SplitWindows, cfg: &RunConfig) -> Result<DetectionReport> {
    report(corpus, data, cfg, persistence_predictions)
}

fn report(
    corpus: &Corpus,
    data: &SplitWindows,
    cfg: &RunConfig,
    predict: impl Fn(&[Window]) -> Vec<crate::tensor::Tensor>,
) -> Result<DetectionReport> {
    let val_scores = score_windows(&predict(&data.val), &data.val)?;
    let val_labels = window_labels(&data.val);
    let tau = select_threshold(&val_scores, val_labels.as_deref(), cfg.threshold)?;
    let test_scores = score_windows(&predict(&data.test), &data.test)?;
    DetectionReport::new(
        &data.test,
        test_scores,
        tau,
        cfg.threshold,
        corpus.series.node_ids.clone(),
        corpus.series.modality_names.clone(),
    )
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub model: Model,
    pub pretrain_trace: Vec<EpochRecord>,
    pub finetune: FinetuneReport,
    pub report: DetectionReport,
}

/// Pretrain (if enabled), fine-tune, and detect.
pub fn run(corpus: &Corpus, cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let data = split_windows(corpus, cfg)?;
    run_on(corpus, &data, cfg)
}

pub fn run_on(corpus: &Corpus, data: &SplitWindows, cfg: &RunConfig) -> Result<RunOutcome> {
    let (mut model, pretrain_trace) = pretrain_stage(corpus, data, cfg)?;
    let finetune = finetune_stage(&mut model, corpus, data, cfg)?;
    let report = detect_stage(&model, corpus, data, cfg)?;
    Ok(RunOutcome {
        model,
        pretrain_trace,
        finetune,
        report,
    })
}

/// One row of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scheme {
    pub id: u8,
    pub name: &'static str,
    pub msdconv: bool,
    pub cross_attention: bool,
    pub vgcn: bool,
    pub pretrain: bool,
    pub prompt: bool,
}

const fn scheme(id: u8, name: &'static str, toggles: [bool; 5]) -> Scheme {
    let [msdconv, cross_attention, vgcn, pretrain, prompt] = toggles;
    Scheme {
        id,
        name,
        msdconv,
        cross_attention,
        vgcn,
        pretrain,
        prompt,
    }
}

pub const SCHEMES: [Scheme; 7] = [
    scheme(1, "plain SSM, no cross-attention", [false, false, true, true, true]),
    scheme(2, "no cross-attention", [true, false, true, true, true]),
    scheme(3, "no VGCN", [true, true, false, true, true]),
    scheme(4, "no cross-attention, no VGCN", [true, false, false, true, true]),
    scheme(5, "no pretraining, no prompt", [true, true, true, false, false]),
    scheme(6, "no prompt", [true, true, true, true, false]),
    scheme(7, "full model", [true, true, true, true, true]),
];

impl Scheme {
    pub fn by_id(id: u8) -> Option<Scheme> {
        SCHEMES.iter().copied().find(|s| s.id == id)
    }

    /// `cfg` with this scheme's toggles.
    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        c.model.msdconv = self.msdconv;
        c.model.cross_attention = self.cross_attention;
        c.model.vgcn = self.vgcn;
        c.pipeline.pretrain = self.pretrain;
        c.pipeline.prompt = self.prompt;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub scheme: u8,
    pub name: String,
    #[serde(rename = "MSDConv")]
    pub msdconv: bool,
    #[serde(rename = "CA")]
    pub cross_attention: bool,
    #[serde(rename = "VGCN")]
    pub vgcn: bool,
    pub pretrain: bool,
    #[serde(rename = "GPL")]
    pub prompt: bool,
    pub tau: f64,
    #[serde(rename = "Pre")]
    pub pre: f64,
    #[serde(rename = "Rec")]
    pub rec: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
}

pub fn ablation_row(s: &Scheme, report: &DetectionReport) -> AblationRow {
    let m = report.metrics.unwrap_or_default();
    AblationRow {
        scheme: s.id,
        name: s.name.to_string(),
        msdconv: s.msdconv,
        cross_attention: s.cross_attention,
        vgcn: s.vgcn,
        pretrain: s.pretrain,
        prompt: s.prompt,
        tau: report.tau,
        pre: m.pre,
        rec: m.rec,
        f1: m.f1,
    }
}

/// Runs `schemes` on the same corpus and windows.
pub fn ablate(corpus: &Corpus, cfg: &RunConfig, schemes: &[Scheme]) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let data = split_windows(corpus, cfg)?;
    schemes
        .iter()
        .map(|s| {
            log::info!("ablation scheme {}: {}", s.id, s.name);
            let out = run_on(corpus, &data, &s.apply(cfg))?;
            Ok(ablation_row(s, &out.report))
        })
        .collect()
}

/// Renders ablation rows as a fixed-width table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mark = |b: bool| if b { "yes" } else { "no" };
    let mut out = String::from("scheme  MSDConv  CA   VGCN  pretrain  GPL  Pre     Rec     F1\n");
    for r in rows {
        out.push_str(&format!(
            "{:<6}  {:<7}  {:<3}  {:<4}  {:<8}  {:<3}  {:.4}  {:.4}  {:.4}\n",
            r.scheme,
            mark(r.msdconv),
            mark(r.cross_attention),
            mark(r.vgcn),
            mark(r.pretrain),
            mark(r.prompt),
            r.pre,
            r.rec,
            r.f1
        ));
    }
    out
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

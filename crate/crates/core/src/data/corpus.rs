//! On-disk corpus: per-modality value and label CSVs plus a JSON manifest.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/values_<modality>.csv   epoch,<node id>,<node id>,...
//! <dir>/labels_<modality>.csv   same layout, 0/1 cells
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::graph::SensorGraph;
use crate::data::inject::{inject_anomalies, AnomalySpec, Injection};
use crate::data::series::{Labels, SensorSeries};
use crate::data::synth::{synth_coordinates, synth_generate, SynthConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub specs: Vec<AnomalySpec>,
    pub node_ids: Vec<u32>,
    pub modalities: Vec<String>,
    pub n_steps: usize,
    pub start_epoch: u64,
    pub sample_interval: f64,
    pub graph: SensorGraph,
    #[serde(default)]
    pub injections: Vec<Injection>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub series: SensorSeries,
    pub labels: Labels,
    pub graph: SensorGraph,
    pub seed: Option<u64>,
    pub synth: Option<SynthConfig>,
    pub specs: Vec<AnomalySpec>,
    pub injections: Vec<Injection>,
}

impl Corpus {
    /// An unlabeled corpus.
    pub fn new(series: SensorSeries, graph: SensorGraph) -> Result<Self> {
        if graph.n_nodes() != series.n_nodes() {
            return Err(Error::NodeMismatch {
                what: "graph".into(),
                expected: series.n_nodes(),
                found: graph.n_nodes(),
            });
        }
        Ok(Self {
            labels: Labels::for_series(&series),
            series,
            graph,
            seed: None,
            synth: None,
            specs: Vec::new(),
            injections: Vec::new(),
        })
    }

    /// A clean synthetic corpus over a k-NN graph of jittered grid positions.
    pub fn synthetic(n: usize, m: usize, t: usize, knn: usize, seed: u64, cfg: &SynthConfig) -> Result<Self> {
        let graph = SensorGraph::knn(&synth_coordinates(n, seed), knn)?;
        let series = synth_generate(n, m, t, &graph, seed, cfg)?;
        let mut c = Self::new(series, graph)?;
        c.seed = Some(seed);
        c.synth = Some(cfg.clone());
        Ok(c)
    }

    /// Injects `specs` on top of the current values and labels.
    pub fn with_anomalies(mut self, specs: &[AnomalySpec]) -> Result<Self> {
        let inj = inject_anomalies(&self.series, specs)?;
        self.labels.merge(&inj.labels);
        self.series = inj.series;
        self.specs.extend_from_slice(specs);
        self.injections.extend(inj.injections);
        Ok(self)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: CORPUS_FORMAT_VERSION,
            seed: self.seed,
            synth: self.synth.clone(),
            specs: self.specs.clone(),
            node_ids: self.series.node_ids.clone(),
            modalities: self.series.modality_names.clone(),
            n_steps: self.series.n_steps(),
            start_epoch: self.series.start_epoch,
            sample_interval: self.series.sample_interval,
            graph: self.graph.clone(),
            injections: self.injections.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let s = &self.series;
        for (c, name) in s.modality_names.iter().enumerate() {
            write_grid(&dir.join(format!("values_{name}.csv")), s, |i, t| {
                s.channel(i, c)[t].to_string()
            })?;
            write_grid(&dir.join(format!("labels_{name}.csv")), s, |i, t| {
                self.labels.channel(i, c)[t].to_string()
            })?;
        }
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path,
                what: "corpus manifest".into(),
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != CORPUS_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "corpus format version {} is not supported (expected {CORPUS_FORMAT_VERSION})",
                manifest.format_version
            )));
        }
        let (n, m, t) = (manifest.node_ids.len(), manifest.modalities.len(), manifest.n_steps);
        let mut values = vec![0.0; n * m * t];
        let mut labels = Labels::zeros(n, m, t);
        for (c, name) in manifest.modalities.iter().enumerate() {
            let grid = read_grid(&dir.join(format!("values_{name}.csv")), &manifest)?;
            for i in 0..n {
                values[(i * m + c) * t..(i * m + c + 1) * t].copy_from_slice(&grid[i]);
            }
            let lpath = dir.join(format!("labels_{name}.csv"));
            if lpath.exists() {
                let grid = read_grid(&lpath, &manifest)?;
                for (i, row) in grid.iter().enumerate() {
                    for (s, &v) in row.iter().enumerate() {
                        labels.set(i, c, s, v != 0.0);
                    }
                }
            }
        }
        let mut series = SensorSeries::new(
            Tensor::new(&[n, m, t], values)?,
            manifest.node_ids.clone(),
            manifest.modalities.clone(),
            manifest.sample_interval,
        )?;
        series.start_epoch = manifest.start_epoch;
        if manifest.graph.n_nodes() != n {
            return Err(Error::NodeMismatch {
                what: "manifest graph".into(),
                expected: n,
                found: manifest.graph.n_nodes(),
            });
        }
        Ok(Self {
            series,
            labels,
            graph: manifest.graph,
            seed: manifest.seed,
            synth: manifest.synth,
            specs: manifest.specs,
            injections: manifest.injections,
        })
    }
}

fn write_grid(path: &Path, s: &SensorSeries, cell: impl Fn(usize, usize) -> String) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["epoch".to_string()];
    header.extend(s.node_ids.iter().map(u32::to_string));
    w.write_record(&header)?;
    for t in 0..s.n_steps() {
        let mut row = vec![(s.start_epoch + t as u64).to_string()];
        row.extend((0..s.n_nodes()).map(|i| cell(i, t)));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads one CSV into per-node rows, checking it against the manifest.
fn read_grid(path: &Path, manifest: &Manifest) -> Result<Vec<Vec<f64>>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            what: "corpus values file".into(),
        });
    }
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let ids: Vec<String> = manifest.node_ids.iter().map(u32::to_string).collect();
    if header.len() != ids.len() + 1 || header[1..] != ids[..] {
        return Err(Error::NodeMismatch {
            what: path.display().to_string(),
            expected: ids.len(),
            found: header.len().saturating_sub(1),
        });
    }
    let mut rows = vec![Vec::with_capacity(manifest.n_steps); ids.len()];
    for (line, record) in r.records().enumerate() {
        let record = record?;
        for (i, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line: line + 2,
                msg: format!("{}: bad number `{field}`", path.display()),
            })?;
            rows[i].push(v);
        }
    }
    if rows.iter().any(|r| r.len() != manifest.n_steps) {
        return Err(Error::Shape(format!(
            "{} does not have {} rows",
            path.display(),
            manifest.n_steps
        )));
    }
    Ok(rows)
}

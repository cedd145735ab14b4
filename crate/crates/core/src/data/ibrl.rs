//! Reader and writer for the Intel Berkeley lab telemetry format.
//!
//! Readings are whitespace-separated lines
//! `date time epoch moteid temperature humidity light voltage`; positions
//! come from a separate `moteid x y` file.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::Serialize;

use crate::data::graph::SensorGraph;
use crate::data::series::SensorSeries;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IBRL_MODALITIES: [&str; 4] = ["temperature", "humidity", "light", "voltage"];
pub const IBRL_SAMPLE_INTERVAL: f64 = 31.0;

/// Unix time of 2004-02-28 00:00:00 UTC, the first day of the lab
/// deployment; only used to render the date/time columns on write.
const BASE_UNIX_TIME: i64 = 1_077_926_400;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IbrlOptions {
    /// Gaps up to this many steps are forward-filled; longer ones are
    /// linearly interpolated.
    pub ffill_limit: usize,
    /// Nodes without a reading in more than this fraction of epochs are dropped.
    pub max_missing_fraction: f64,
    /// Parsing fails when more than this fraction of lines is malformed.
    pub max_malformed_fraction: f64,
    pub sample_interval: f64,
}

impl Default for IbrlOptions {
    fn default() -> Self {
        Self {
            ffill_limit: 10,
            max_missing_fraction: 0.4,
            max_malformed_fraction: 0.05,
            sample_interval: IBRL_SAMPLE_INTERVAL,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestStats {
    pub lines: usize,
    pub malformed: usize,
    pub duplicates: usize,
    pub out_of_range: usize,
    pub dropped_nodes: Vec<u32>,
    pub forward_filled: usize,
    pub interpolated: usize,
}

/// One parsed reading line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reading {
    pub epoch: u64,
    pub mote: u32,
    pub values: [f64; 4],
}

/// Splits one reading line. Returns `None` for a malformed line.
pub fn parse_line(line: &str) -> Option<Reading> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 8 {
        return None;
    }
    let epoch = fields[2].parse().ok()?;
    let mote = fields[3].parse().ok()?;
    let mut values = [0.0f64; 4];
    for (v, f) in values.iter_mut().zip(&fields[4..]) {
        *v = f.parse().ok()?;
        if !v.is_finite() {
            return None;
        }
    }
    Some(Reading { epoch, mote, values })
}

fn physically_possible(modality: usize, v: f64) -> bool {
    match modality {
        1 => (-10.0..=110.0).contains(&v),
        3 => v > 0.0 && v <= 5.0,
        _ => true,
    }
}

/// Parses a reading stream onto a uniform epoch grid.
pub fn parse_ibrl(reader: impl BufRead, opts: IbrlOptions) -> Result<(SensorSeries, IngestStats)> {
    let mut stats = IngestStats::default();
    // mote -> epoch -> per-modality value (None when physically impossible)
    let mut rows: BTreeMap<u32, BTreeMap<u64, [Option<f64>; 4]>> = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        stats.lines += 1;
        let Some(r) = parse_line(&line) else {
            stats.malformed += 1;
            continue;
        };
        let slot = rows.entry(r.mote).or_default();
        if slot.contains_key(&r.epoch) {
            stats.duplicates += 1;
            continue;
        }
        let mut cell = [None; 4];
        for (c, &v) in r.values.iter().enumerate() {
            if physically_possible(c, v) {
                cell[c] = Some(v);
            } else {
                stats.out_of_range += 1;
            }
        }
        slot.insert(r.epoch, cell);
    }
    if stats.lines > 0 && stats.malformed as f64 > opts.max_malformed_fraction * stats.lines as f64 {
        return Err(Error::TooManyMalformed {
            bad: stats.malformed,
            total: stats.lines,
        });
    }
    let (Some(first), Some(last)) = (
        rows.values().filter_map(|m| m.keys().next()).min().copied(),
        rows.values().filter_map(|m| m.keys().next_back()).max().copied(),
    ) else {
        return Err(Error::EmptyData("no valid readings".into()));
    };
    let t_len = (last - first + 1) as usize;

    let mut node_ids = Vec::new();
    let mut values = Vec::new();
    for (&mote, readings) in &rows {
        let missing = t_len - readings.len();
        if missing as f64 > opts.max_missing_fraction * t_len as f64 {
            log::warn!("dropping mote {mote}: {missing} of {t_len} epochs missing");
            stats.dropped_nodes.push(mote);
            continue;
        }
        let mut channels = Vec::with_capacity(4 * t_len);
        let mut usable = true;
        for c in 0..4 {
            let mut raw = vec![None; t_len];
            for (&e, cell) in readings {
                raw[(e - first) as usize] = cell[c];
            }
            match fill_gaps(&raw, opts.ffill_limit, &mut stats) {
                Some(filled) => channels.extend(filled),
                None => {
                    usable = false;
                    break;
                }
            }
        }
        if !usable {
            log::warn!("dropping mote {mote}: a modality has no valid reading");
            stats.dropped_nodes.push(mote);
            continue;
        }
        node_ids.push(mote);
        values.extend(channels);
    }
    if node_ids.is_empty() {
        return Err(Error::EmptyData("every node was dropped".into()));
    }
    let n = node_ids.len();
    let mut series = SensorSeries::new(
        Tensor::from_parts(vec![n, 4, t_len], values),
        node_ids,
        IBRL_MODALITIES.iter().map(|s| s.to_string()).collect(),
        opts.sample_interval,
    )?;
    series.start_epoch = first;
    Ok((series, stats))
}

/// Leading gaps take the first valid value, trailing gaps the last; interior
/// gaps are forward-filled up to `limit` steps and interpolated beyond.
fn fill_gaps(raw: &[Option<f64>], limit: usize, stats: &mut IngestStats) -> Option<Vec<f64>> {
    let first_valid = raw.iter().position(Option::is_some)?;
    let mut out = vec![0.0; raw.len()];
    let v0 = raw[first_valid].unwrap();
    out[..=first_valid].fill(v0);
    stats.forward_filled += first_valid;
    let mut prev = first_valid;
    for t in first_valid + 1..=raw.len() {
        if t < raw.len() && raw[t].is_none() {
            continue;
        }
        let gap = t - prev - 1;
        let a = raw[prev].unwrap();
        if t == raw.len() || gap <= limit {
            for o in out.iter_mut().take(t).skip(prev + 1) {
                *o = a;
            }
            stats.forward_filled += gap;
        } else {
            let b = raw[t].unwrap();
            for (k, o) in out.iter_mut().enumerate().take(t).skip(prev + 1) {
                let frac = (k - prev) as f64 / (t - prev) as f64;
                *o = a + (b - a) * frac;
            }
            stats.interpolated += gap;
        }
        if t < raw.len() {
            out[t] = raw[t].unwrap();
            prev = t;
        }
    }
    Some(out)
}

/// Parses `moteid x y` lines.
pub fn parse_coordinates(reader: impl BufRead) -> Result<BTreeMap<u32, [f64; 2]>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let bad = || Error::Parse {
            line: lineno + 1,
            msg: format!("expected `moteid x y`, got `{line}`"),
        };
        if fields.len() != 3 {
            return Err(bad());
        }
        let id: u32 = fields[0].parse().map_err(|_| bad())?;
        let x: f64 = fields[1].parse().map_err(|_| bad())?;
        let y: f64 = fields[2].parse().map_err(|_| bad())?;
        out.insert(id, [x, y]);
    }
    Ok(out)
}

/// Builds the k-NN graph for the nodes of `series` from a coordinate table.
pub fn graph_for(series: &SensorSeries, coords: &BTreeMap<u32, [f64; 2]>, k: usize) -> Result<SensorGraph> {
    let positions = series
        .node_ids
        .iter()
        .map(|id| {
            coords
                .get(id)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("no coordinates for mote {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    SensorGraph::knn(&positions, k)
}

/// Parses readings and coordinates and builds the graph.
pub fn ingest(
    readings: impl BufRead,
    coordinates: impl BufRead,
    k: usize,
    opts: IbrlOptions,
) -> Result<(SensorSeries, SensorGraph, IngestStats)> {
    let (series, stats) = parse_ibrl(readings, opts)?;
    let coords = parse_coordinates(coordinates)?;
    let graph = graph_for(&series, &coords, k)?;
    Ok((series, graph, stats))
}

/// Writes `series` back in reading format, one line per `(epoch, node)`.
/// Requires the four IBRL modalities.
pub fn write_ibrl(series: &SensorSeries, mut out: impl Write) -> Result<()> {
    if series.n_modalities() != 4 {
        return Err(Error::InvalidArgument(format!(
            "reading format needs 4 modalities, series has {}",
            series.n_modalities()
        )));
    }
    let io = |e| Error::io("<ibrl writer>", e);
    for t in 0..series.n_steps() {
        let epoch = series.start_epoch + t as u64;
        let (date, time) = render_timestamp(epoch, series.sample_interval);
        for (i, id) in series.node_ids.iter().enumerate() {
            write!(out, "{date} {time} {epoch} {id}").map_err(io)?;
            for c in 0..4 {
                write!(out, " {}", series.channel(i, c)[t]).map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
    }
    Ok(())
}

fn render_timestamp(epoch: u64, interval: f64) -> (String, String) {
    let secs = BASE_UNIX_TIME + (epoch as f64 * interval).round() as i64;
    let dt = chrono::DateTime::from_timestamp(secs, 0).unwrap_or_default();
    (dt.format("%Y-%m-%d").to_string(), dt.format("%H:%M:%S").to_string())
}

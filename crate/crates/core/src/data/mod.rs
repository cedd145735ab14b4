//! Ingestion, synthesis, anomaly injection and windowing.

pub mod corpus;
pub mod graph;
pub mod ibrl;
pub mod inject;
pub mod series;
pub mod synth;
pub mod window;

pub use corpus::Corpus;
pub use graph::SensorGraph;
pub use inject::{inject_anomalies, AnomalyKind, AnomalySpec, Injection};
pub use series::{Labels, SensorSeries};
pub use synth::{synth_generate, SynthConfig};
pub use window::{slide_windows, Standardizer, Window, WindowBatch};

//! Graph-prompted, self-supervised anomaly detection for wireless sensor
//! network telemetry.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod detect;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use rng::RngStream;
pub use tensor::Tensor;

//! Vision-enhanced zero-shot time-series anomaly detection.

pub mod alignment;
pub mod autograd;
pub mod contrast;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod imaging;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod series;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};

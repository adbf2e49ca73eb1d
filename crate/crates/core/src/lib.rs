//! Dataset handling, density-map ground truth, splitting, metrics, models
//! and training for dot-annotated cell counting.

pub mod annotations;
pub mod dataset;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod splitting;
pub mod synthgen;
pub mod training;

pub use error::{Error, ErrorKind, Result};

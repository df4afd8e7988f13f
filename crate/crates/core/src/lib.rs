//! Multivariate time-series anomaly detection with periodic graph structure
//! learning.
//!
//! The pipeline detects the dominant period of the training data, learns one
//! sensor graph per phase bin of that period, trains a graph-attention plus
//! dilated-convolution forecaster, and flags timestamps whose normalized
//! forecast deviation exceeds a threshold.

pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod experiments;
pub mod graph;
pub mod model;
pub mod scoring;
pub mod spectral;
pub mod train;

pub use error::{PgmaError, Result};

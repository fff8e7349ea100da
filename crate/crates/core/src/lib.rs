//! PD-SOVNet: physics-driven second-order vibration operator network for
//! estimating 1st-40th order wheel polygonal roughness from four-channel
//! single-revolution axle-box vibration.
//!
//! The crate is organized around the processing chain:
//!
//! - [`dtensor`] — dense f64 tensors with reverse-mode autodiff
//! - [`preprocess`] — speed filtering, angle-domain resampling, order labels
//! - [`synth`] — physics-based synthetic data oracle
//! - [`frontend`] — order frontend and local order mixing
//! - [`physbranch`] — shared second-order kernels, MIMO coupling, modal summation
//! - [`adaptive`] — context-gated structured physical correction
//! - [`temporal`] — selective state-space (or linear) time-domain branch
//! - [`model`] — full forward pass, fusion, dB head, checkpoints
//! - [`train`] — AdamW loop, MAE/R^2 metrics, checkpoint policies
//! - [`harness`] — dataset bundles, experiment suites, CLI

pub mod adaptive;
pub mod dtensor;
pub mod frontend;
pub mod harness;
pub mod model;
mod nninit;
pub mod physbranch;
pub mod preprocess;
pub mod synth;
pub mod temporal;
pub mod train;

use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// usage errors exit 1, data/config/protocol errors exit 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] dtensor::DtError),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            _ => 2,
        }
    }
}

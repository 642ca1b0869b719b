//! Cross-layer UAV authentication from fused RF and MEMS fingerprints.
//!
//! The crate is `no_std` and only needs `alloc`. It covers the whole
//! algorithmic path:
//!
//! - [`signal`]: CSI phase-error extraction, telemetry field selection,
//!   outlier removal and cross-modal alignment into fixed-length samples.
//! - [`fusion`]: the two-branch CNN/BiLSTM feature extractor, multi-head
//!   attention fusion and the unit-norm metric embedding, with hand-written
//!   reverse-mode gradients.
//! - [`metric`]: multi-similarity loss, class-balanced batching and the
//!   Adam training loop.
//! - [`ocsvm`]: per-device one-class SVMs and the registry used for
//!   authentication and identification.
//! - [`harness`]: synthetic fleet generation, dataset splits, metrics and
//!   experiment orchestration.
//!
//! IO, file formats and the command line live in the `securelink` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod error;
pub mod fusion;
pub mod harness;
pub mod math;
pub mod matrix;
pub mod metric;
pub mod ocsvm;
pub mod signal;

pub use error::{Error, Result};
pub use matrix::Matrix;

//! Verification and training harness: run configuration, synthetic data,
//! toy training, gradient checks, parity checks and statistics export.

pub mod config;
pub mod gradcheck;
pub mod parity;
pub mod stats;
pub mod synth;
pub mod train;

pub use config::RunConfig;

//! Quantile-regression toolkit for uncertainty-aware reconstruction and
//! anomaly detection: a small f64 neural-network engine, pinball/ELBO
//! losses, mean-variance and quantile-regression VAEs, split-conformal
//! calibration, FDR-controlled anomaly detection, multi-rater binary
//! quantile segmentation, synthetic data generators, and a CLI driver.

pub mod anomaly;
pub mod bqr;
pub mod cli;
pub mod config;
pub mod conformal;
pub mod container;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pgm;
pub mod rng;
pub mod simdata;
pub mod tensor;
pub mod vae;

pub use error::{Error, Result};
pub use tensor::Tensor;

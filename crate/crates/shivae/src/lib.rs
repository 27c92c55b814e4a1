//! Shi-VAE: a sequential variational autoencoder for heterogeneous
//! multivariate time series with bursty missing data.
//!
//! The crate covers the full experimental loop: synthetic benchmark
//! generation, burst-mask protocols, model training, imputation (with
//! Mean and LOCF reference baselines behind a common [`impute::Imputer`]
//! trait), and evaluation via range-normalized error and burst
//! cross-correlation metrics.

pub mod data;
pub mod error;
pub mod impute;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod physionet;
pub mod pipeline;
pub mod preprocess;
pub mod synth;
pub mod tape;
pub mod train;

pub use error::{Result, ShivaeError};

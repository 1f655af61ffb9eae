//! Unrolled k-space reconstruction with wavelet-guided selective-scan blocks.
//!
//! The crate implements the full pipeline for accelerated 2D reconstruction:
//! retrospective Cartesian undersampling ([`kspace`]), a redundant Haar
//! frequency split ([`wavelet`]), a conditioned selective-scan sequence model
//! ([`scan`], [`ssm`]), the image blocks and unrolled network built from them
//! ([`blocks`], [`network`]), reverse-mode differentiation ([`autodiff`]),
//! quality metrics ([`metrics`]), and a deterministic training loop
//! ([`training`]) over synthetic or externally ingested data ([`data`]).
//!
//! Heavy kernels run data-parallel through the `parallel` feature (enabled
//! by default); disabling it yields a single-threaded build with identical
//! results.

pub mod autodiff;
pub mod blocks;
pub mod config;
pub mod data;
pub mod error;
pub mod fft;
mod hdf5;
pub mod kspace;
pub mod metrics;
pub mod network;
pub mod parallel;
pub mod scan;
pub mod ssm;
pub mod tensor;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;

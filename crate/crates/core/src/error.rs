//! Error taxonomy shared by the whole crate.
//!
//! Variants are grouped by what the caller can do about them: configuration
//! problems are recoverable by editing inputs, I/O problems by fixing paths,
//! and numeric failures usually mean a run must be aborted and inspected.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Min-max normalization is undefined when every pixel has the same value.
    #[error("constant image: min == max, normalization undefined")]
    ConstantImage,

    /// The requested center fraction does not fit inside the sampling budget.
    #[error("infeasible mask: {0}")]
    InfeasibleMask(String),

    /// Single-level wavelet analysis halves each axis, so both must be even.
    #[error("odd dimension for wavelet transform: {0}")]
    OddDimension(String),

    /// Strided refinement halves the spatial grid, so both axes must be even.
    #[error("odd spatial dims for strided refinement: {0}")]
    OddSpatialDim(String),

    /// Operands disagree on shape.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// The scan recurrence requires strictly positive step sizes.
    #[error("non-positive delta entering the scan recurrence")]
    NonPositiveDelta,

    /// Structural similarity needs at least one full comparison window.
    #[error("image too small for ssim: {0}")]
    ImageTooSmall(String),

    /// Normalized error is undefined against an all-zero reference.
    #[error("zero reference: nmse undefined")]
    ZeroReference,

    /// Spatial dims must be divisible by the patch size.
    #[error("indivisible shape: {0}")]
    IndivisibleShape(String),

    /// Dataset directory or volume file absent.
    #[error("missing dataset: {0}")]
    MissingDataset(String),

    /// A file exists but cannot be decoded.
    #[error("corrupt file: {0}")]
    CorruptFile(String),

    /// A volume contained no usable slices.
    #[error("empty volume: {0}")]
    EmptyVolume(String),

    /// Loss became NaN/inf; diagnostics are dumped before aborting.
    #[error("non-finite loss at step {step} (diagnostics: {diagnostics})")]
    NonFiniteLoss { step: usize, diagnostics: PathBuf },

    /// Checkpoint does not match the requested model or fails its checksum.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// Invalid or inconsistent configuration.
    #[error("config: {0}")]
    Config(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for command-line front ends: 2 for configuration
    /// errors, 3 for I/O errors, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InfeasibleMask(_)
            | Error::OddDimension(_)
            | Error::OddSpatialDim(_)
            | Error::ShapeMismatch(_)
            | Error::IndivisibleShape(_)
            | Error::ImageTooSmall(_)
            | Error::Config(_) => 2,
            Error::MissingDataset(_)
            | Error::CorruptFile(_)
            | Error::EmptyVolume(_)
            | Error::CheckpointMismatch(_)
            | Error::Io(_) => 3,
            Error::ConstantImage
            | Error::NonPositiveDelta
            | Error::ZeroReference
            | Error::NonFiniteLoss { .. } => 4,
        }
    }
}

use alloc::string::String;

use crate::volume::Dims;

/// Errors produced by the registration engine.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimMismatch(Dims, Dims),

    #[error("invalid dimensions {dims:?}: {reason}")]
    InvalidDims { dims: Dims, reason: &'static str },

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("insufficient foreground: {available} voxels available, {requested} requested")]
    InsufficientForeground { available: usize, requested: usize },

    #[error("degenerate input: {0}")]
    Degenerate(&'static str),

    #[error("non-finite loss at level {level}, iteration {iteration}")]
    NonFiniteLoss { level: usize, iteration: usize },

    #[error("the dns metric requires trained network parameters")]
    MissingNetwork,

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("could not draw a fold-free deformation after {0} attempts")]
    RejectionFailed(usize),

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("empty corpus")]
    EmptyCorpus,
}

pub type Result<T> = core::result::Result<T, Error>;

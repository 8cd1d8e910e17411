//! Error type shared by every kernel in the crate.

use alloc::string::String;
use core::fmt;

/// Convenience alias used throughout the crate.
pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by tensor ops, pooling, convolution and the detection
/// testbed.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shapes disagree with an op's contract (products, inner dimensions,
    /// channel counts, ...). The message names the op and the offending
    /// extents.
    ShapeMismatch(String),
    /// A tensor had the wrong rank for the requested op.
    RankMismatch { expected: usize, got: usize },
    /// A hyperparameter is outside its admissible range (stride 0, empty
    /// window, eps out of bounds, ...).
    InvalidHyperparam(String),
    /// A pooling window exceeds the extent of the axis it pools.
    WindowTooLarge {
        axis: usize,
        window: usize,
        extent: usize,
    },
    /// Dimensionality reduction was asked to remove an axis of extent != 1.
    NonUnitLiftedAxis { extent: usize },
    /// A pool function with this name is already registered.
    DuplicateName(String),
    /// No pool function with this name is registered.
    UnknownPoolFn(String),
    /// A voxel feature set with zero point features per voxel.
    EmptyVoxel,
    /// A region of interest with non-positive width or height.
    DegenerateRoi { w: f64, h: f64 },
    /// A folded kernel cache is stale: parameters changed after `fold()`.
    StaleFold,
    /// Two forward passes over identical input disagreed bit-for-bit.
    NonDeterministicLayer(String),
    /// A scene specification violates its documented bounds.
    InvalidSpec(String),
    /// Training loss became non-finite.
    DivergedLoss { epoch: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::RankMismatch { expected, got } => {
                write!(f, "rank mismatch: expected rank {expected}, got {got}")
            }
            Error::InvalidHyperparam(msg) => write!(f, "invalid hyperparameter: {msg}"),
            Error::WindowTooLarge {
                axis,
                window,
                extent,
            } => write!(
                f,
                "window {window} exceeds extent {extent} on axis {axis}"
            ),
            Error::NonUnitLiftedAxis { extent } => {
                write!(f, "lifted axis has extent {extent}, expected 1")
            }
            Error::DuplicateName(name) => write!(f, "pool function {name:?} already registered"),
            Error::UnknownPoolFn(name) => write!(f, "unknown pool function {name:?}"),
            Error::EmptyVoxel => write!(f, "voxel feature set has zero features per voxel"),
            Error::DegenerateRoi { w, h } => {
                write!(f, "degenerate ROI: w = {w}, h = {h} (both must be > 0)")
            }
            Error::StaleFold => write!(f, "folded kernel is stale: parameters changed after fold"),
            Error::NonDeterministicLayer(name) => {
                write!(f, "layer {name:?} is not deterministic")
            }
            Error::InvalidSpec(msg) => write!(f, "invalid scene spec: {msg}"),
            Error::DivergedLoss { epoch } => {
                write!(f, "training loss became non-finite at epoch {epoch}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

//! Dense tensor kernels for convolutional feature extraction, with an
//! emphasis on three mechanisms:
//!
//! - **Replaceable pooling** ([`pool`]): a lift → pool → drop pipeline over
//!   voxel feature tensors and 2D maps whose reduction operator is a named,
//!   user-registrable function, plus the legacy rotation-pooling baseline it
//!   replaces and operation-count instrumentation comparing the two.
//! - **Composed-kernel convolution** ([`dacconv`]): a convolution whose
//!   kernel is the per-channel product of a channel-based factor and a
//!   feature-map-based factor. The composed kernel folds into a standard
//!   kernel at inference, so the extra learning dimensions cost nothing at
//!   reasoning time.
//! - **Multi-scale extended receptive field extraction** ([`mefem`]):
//!   deformable convolution with learned fractional offsets, region-of-
//!   interest pooling with a replaceable reduction, pyramid level
//!   assignment, and multi-scale fusion.
//!
//! [`detect`] adds a synthetic occluded-scene generator and a miniature
//! dense detector so the convergence and occlusion behaviour of the layers
//! can be measured end to end on a desktop CPU.
//!
//! Everything is `f64`, row-major, and pure: identical inputs produce
//! bit-identical outputs. The crate is `no_std`-compatible (`alloc`
//! required; enable the `libm` feature when `std` is off).

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(all(not(feature = "std"), not(feature = "libm")))]
compile_error!("convkit-core requires either the `std` or the `libm` feature");

pub mod count;
pub mod dacconv;
pub mod detect;
pub mod error;
pub(crate) mod fmath;
pub mod layer;
pub mod mefem;
pub mod pool;
pub mod tensor;

pub use count::{AllocTracker, OpCounter, Profiler};
pub use error::{Error, Result};
pub use layer::{grad_check, DiffLayer, GradCheckReport, LayerGrad};
pub use tensor::Tensor;

//! Dense row-major `f64` tensor and the primitive math used by every layer.
//!
//! Data is a flat row-major sequence (last axis fastest), so reshaping is a
//! metadata-only operation: the one property the lift/drop pooling pipeline
//! depends on.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::count::Profiler;
use crate::error::{Error, Result};

/// Dense N-dimensional value container with shape metadata.
///
/// Invariants: `product(shape) == data.len()` at all times, and every op is
/// pure (identical inputs produce bit-identical outputs). A leading extent of
/// zero is permitted for empty results (e.g. pooling an empty ROI list);
/// every other extent is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor from a shape and a flat row-major value sequence.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {numel} elements but {} values were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Tensor filled with a constant.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Tensor whose values come from a function of the flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    /// Reinterpret the data under a new shape. Metadata-only: the value
    /// sequence is preserved bit-exactly and nothing is copied.
    pub fn reshape(mut self, new_shape: &[usize]) -> Result<Self> {
        let new_numel: usize = new_shape.iter().product();
        if new_numel != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {new_shape:?} ({new_numel} elements)",
                self.shape,
                self.data.len()
            )));
        }
        self.shape.clear();
        self.shape.extend_from_slice(new_shape);
        Ok(self)
    }

    /// Element at a multi-dimensional index.
    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let flat = self.flat_index(index);
        self.data[flat] = value;
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (axis, &i) in index.iter().enumerate() {
            debug_assert!(i < self.shape[axis], "index out of bounds on axis {axis}");
            flat = flat * self.shape[axis] + i;
        }
        flat
    }

    /// Bitwise equality, the determinism notion used by `grad_check`.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Largest absolute element-wise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .fold(0.0, |acc, (a, b)| {
                let d = crate::fmath::abs(a - b);
                if d > acc {
                    d
                } else {
                    acc
                }
            })
    }

    /// Debug-mode guard: all values finite.
    pub(crate) fn debug_check_finite(&self, context: &str) {
        if cfg!(debug_assertions) {
            for (i, v) in self.data.iter().enumerate() {
                debug_assert!(
                    v.is_finite(),
                    "{context} produced non-finite value {v} at flat index {i}"
                );
            }
        }
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for axis in (0..shape.len().saturating_sub(1)).rev() {
        strides[axis] = strides[axis + 1] * shape[axis + 1];
    }
    strides
}

fn rank2(t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::RankMismatch {
            expected: 2,
            got: t.rank(),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// Standard matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = rank2(a)?;
    let (kb, n) = rank2(b)?;
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dimensions disagree: {m}x{ka} vs {kb}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..ka {
                acc += a.data[i * ka + k] * b.data[k * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    let t = Tensor::new(&[m, n], out)?;
    t.debug_check_finite("matmul");
    Ok(t)
}

/// Hyperparameters shared by the 2D convolution family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dCfg {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dCfg {
    pub fn new(stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidHyperparam(String::from(
                "conv2d stride must be >= 1",
            )));
        }
        Ok(Conv2dCfg { stride, padding })
    }

    /// Output extent along one axis: `(in + 2p - k) / stride + 1`.
    pub fn out_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if kernel > padded {
            return Err(Error::ShapeMismatch(format!(
                "kernel extent {kernel} exceeds padded input extent {padded}"
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

/// Direct 2D cross-correlation ("convolution" in the deep-learning sense).
///
/// `input` is `[C_in, H, W]`, `kernel` is `[C_out, C_in, Kh, Kw]`; padding is
/// zero-valued. Summation order is fixed (`c_in`, then `ky`, then `kx`) so
/// repeated calls are bit-identical and alternative paths that preserve this
/// order can be compared exactly.
pub fn conv2d(input: &Tensor, kernel: &Tensor, cfg: Conv2dCfg) -> Result<Tensor> {
    let mut profiler = Profiler::new();
    conv2d_profiled(input, kernel, cfg, &mut profiler)
}

/// [`conv2d`] variant that tallies multiplies/adds/moves into `profiler`.
pub fn conv2d_profiled(
    input: &Tensor,
    kernel: &Tensor,
    cfg: Conv2dCfg,
    profiler: &mut Profiler,
) -> Result<Tensor> {
    let (c_in, h, w, c_out, kh, kw) = conv_dims(input, kernel, cfg)?;
    let out_h = cfg.out_extent(h, kh)?;
    let out_w = cfg.out_extent(w, kw)?;

    let mut out = vec![0.0; c_out * out_h * out_w];
    profiler.alloc.alloc(out.len());
    let in_d = input.data();
    let k_d = kernel.data();
    for co in 0..c_out {
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..kh {
                        let iy = (oy * cfg.stride + ky) as isize - cfg.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * cfg.stride + kx) as isize - cfg.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let iv = in_d[(ci * h + iy as usize) * w + ix as usize];
                            let kv = k_d[((co * c_in + ci) * kh + ky) * kw + kx];
                            acc += iv * kv;
                            profiler.ops.multiplies += 1;
                            profiler.ops.adds += 1;
                        }
                    }
                }
                out[(co * out_h + oy) * out_w + ox] = acc;
                profiler.ops.moves += 1;
            }
        }
    }
    let t = Tensor::new(&[c_out, out_h, out_w], out)?;
    t.debug_check_finite("conv2d");
    Ok(t)
}

fn conv_dims(
    input: &Tensor,
    kernel: &Tensor,
    cfg: Conv2dCfg,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if input.rank() != 3 {
        return Err(Error::RankMismatch {
            expected: 3,
            got: input.rank(),
        });
    }
    if kernel.rank() != 4 {
        return Err(Error::RankMismatch {
            expected: 4,
            got: kernel.rank(),
        });
    }
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, kc_in, kh, kw) = (
        kernel.shape[0],
        kernel.shape[1],
        kernel.shape[2],
        kernel.shape[3],
    );
    if kc_in != c_in {
        return Err(Error::ShapeMismatch(format!(
            "conv2d input has {c_in} channels but kernel expects {kc_in}"
        )));
    }
    cfg.out_extent(h, kh)?;
    cfg.out_extent(w, kw)?;
    Ok((c_in, h, w, c_out, kh, kw))
}

/// Reverse-mode gradients of [`conv2d`].
///
/// Returns `(d_input, d_kernel)` for the given upstream gradient of shape
/// `[C_out, H', W']`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    cfg: Conv2dCfg,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c_in, h, w, c_out, kh, kw) = conv_dims(input, kernel, cfg)?;
    let out_h = cfg.out_extent(h, kh)?;
    let out_w = cfg.out_extent(w, kw)?;
    if upstream.shape() != [c_out, out_h, out_w] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d upstream gradient has shape {:?}, expected [{c_out}, {out_h}, {out_w}]",
            upstream.shape()
        )));
    }

    let mut d_input = Tensor::zeros(&[c_in, h, w]);
    let mut d_kernel = Tensor::zeros(kernel.shape());
    let in_d = input.data();
    let k_d = kernel.data();
    let up = upstream.data();
    {
        let di = d_input.data_mut();
        // d_kernel and d_input share the same loop so the scatter order is
        // fixed and deterministic.
        let dk = d_kernel.data_mut();
        for co in 0..c_out {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let g = up[(co * out_h + oy) * out_w + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ci in 0..c_in {
                        for ky in 0..kh {
                            let iy = (oy * cfg.stride + ky) as isize - cfg.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * cfg.stride + kx) as isize - cfg.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let in_idx = (ci * h + iy as usize) * w + ix as usize;
                                let k_idx = ((co * c_in + ci) * kh + ky) * kw + kx;
                                dk[k_idx] += g * in_d[in_idx];
                                di[in_idx] += g * k_d[k_idx];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((d_input, d_kernel))
}

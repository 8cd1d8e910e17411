//! The forward/backward layer contract and finite-difference checking.

use alloc::borrow::ToOwned;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_backward, matmul, Conv2dCfg, Tensor};

/// Gradients of a scalar loss with respect to a layer's input and
/// parameters. Shapes mirror the forward input and parameter tensors
/// exactly, in the same order as [`DiffLayer::params`].
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub d_input: Tensor,
    pub d_params: Vec<Tensor>,
}

impl LayerGrad {
    pub fn zeros_like(input: &Tensor, params: &[&Tensor]) -> Self {
        LayerGrad {
            d_input: Tensor::zeros(input.shape()),
            d_params: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// A deterministic differentiable layer.
///
/// `backward` receives the same input the forward pass saw plus the upstream
/// gradient of the loss with respect to the layer output, and returns the
/// full [`LayerGrad`]. Layers are pure: two forward calls on the same input
/// must agree bit-for-bit (enforced by [`grad_check`]).
pub trait DiffLayer {
    fn name(&self) -> &str;
    fn forward(&self, input: &Tensor) -> Result<Tensor>;
    fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<LayerGrad>;
    /// Parameter tensors, in a fixed order matching `LayerGrad::d_params`.
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    fn param_names(&self) -> Vec<String> {
        (0..self.params().len())
            .map(|i| alloc::format!("param{i}"))
            .collect()
    }
}

/// Result of a finite-difference check for a single tensor.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
}

/// Per-tensor maximum relative errors between analytic and central
/// finite-difference gradients of the sum-of-squares loss.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub layer: String,
    pub tolerance: f64,
    pub checks: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.checks.iter().fold(0.0, |m, c| m.max(c.max_rel_err))
    }

    pub fn pass(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

fn sum_of_squares(t: &Tensor) -> f64 {
    t.data().iter().map(|v| v * v).sum()
}

/// Relative error with a magnitude floor, so roundoff noise on near-zero
/// gradients does not register as failure.
fn rel_err(fd: f64, analytic: f64) -> f64 {
    let scale = crate::fmath::abs(fd).max(crate::fmath::abs(analytic)).max(1e-2);
    crate::fmath::abs(fd - analytic) / scale
}

/// Central finite-difference check of a layer's backward pass.
///
/// The scalar loss is the sum of squares of the layer output, which touches
/// every output element; its analytic upstream gradient is `2 * output`.
/// Every element of the input and of every parameter tensor is perturbed by
/// `±eps` and `(f(x+eps) - f(x-eps)) / (2 eps)` is compared against the
/// analytic gradient.
pub fn grad_check(
    layer: &mut dyn DiffLayer,
    input: &Tensor,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidHyperparam(alloc::format!(
            "grad_check eps must be in (0, 1e-2], got {eps}"
        )));
    }

    let out_a = layer.forward(input)?;
    let out_b = layer.forward(input)?;
    if !out_a.bit_eq(&out_b) {
        return Err(Error::NonDeterministicLayer(layer.name().to_owned()));
    }

    let upstream = Tensor::from_fn(out_a.shape(), |i| 2.0 * out_a.data()[i]);
    let analytic = layer.backward(input, &upstream)?;

    let mut checks = Vec::new();

    // Input gradient.
    {
        let mut x = input.clone();
        let mut max_err = 0.0f64;
        for i in 0..x.numel() {
            let orig = x.data()[i];
            x.data_mut()[i] = orig + eps;
            let plus = sum_of_squares(&layer.forward(&x)?);
            x.data_mut()[i] = orig - eps;
            let minus = sum_of_squares(&layer.forward(&x)?);
            x.data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            max_err = max_err.max(rel_err(fd, analytic.d_input.data()[i]));
        }
        checks.push(TensorCheck {
            name: String::from("input"),
            max_rel_err: max_err,
        });
    }

    // Parameter gradients.
    let names = layer.param_names();
    let n_params = layer.params().len();
    for p in 0..n_params {
        let numel = layer.params()[p].numel();
        let mut max_err = 0.0f64;
        for i in 0..numel {
            let orig = layer.params()[p].data()[i];
            layer.params_mut()[p].data_mut()[i] = orig + eps;
            let plus = sum_of_squares(&layer.forward(input)?);
            layer.params_mut()[p].data_mut()[i] = orig - eps;
            let minus = sum_of_squares(&layer.forward(input)?);
            layer.params_mut()[p].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            max_err = max_err.max(rel_err(fd, analytic.d_params[p].data()[i]));
        }
        checks.push(TensorCheck {
            name: names.get(p).cloned().unwrap_or_default(),
            max_rel_err: max_err,
        });
    }

    Ok(GradCheckReport {
        layer: layer.name().to_owned(),
        tolerance: tol,
        checks,
    })
}

/// Fully connected layer `y = W x` over a rank-1 input.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Tensor, // [out, in]
}

impl DiffLayer for LinearLayer {
    fn name(&self) -> &str {
        "linear"
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let n = input.numel();
        let x = input.clone().reshape(&[n, 1])?;
        let y = matmul(&self.weight, &x)?;
        let m = y.numel();
        y.reshape(&[m])
    }

    fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<LayerGrad> {
        let (out_n, in_n) = (self.weight.shape()[0], self.weight.shape()[1]);
        let up = upstream.clone().reshape(&[out_n, 1])?;
        let x_row = input.clone().reshape(&[1, in_n])?;
        let d_w = matmul(&up, &x_row)?;
        // d_x = W^T up
        let mut d_x = Tensor::zeros(&[in_n]);
        for i in 0..in_n {
            let mut acc = 0.0;
            for o in 0..out_n {
                acc += self.weight.data()[o * in_n + i] * up.data()[o];
            }
            d_x.data_mut()[i] = acc;
        }
        Ok(LayerGrad {
            d_input: d_x,
            d_params: alloc::vec![d_w],
        })
    }

    fn params(&self) -> Vec<&Tensor> {
        alloc::vec![&self.weight]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        alloc::vec![&mut self.weight]
    }

    fn param_names(&self) -> Vec<String> {
        alloc::vec![String::from("weight")]
    }
}

/// Plain 2D convolution layer (no bias) over `[C_in, H, W]`.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: Tensor, // [C_out, C_in, Kh, Kw]
    pub cfg: Conv2dCfg,
}

impl ConvLayer {
    pub fn new(kernel: Tensor, stride: usize, padding: usize) -> Result<Self> {
        Ok(ConvLayer {
            kernel,
            cfg: Conv2dCfg::new(stride, padding)?,
        })
    }
}

impl DiffLayer for ConvLayer {
    fn name(&self) -> &str {
        "conv2d"
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        conv2d(input, &self.kernel, self.cfg)
    }

    fn backward(&self, input: &Tensor, upstream: &Tensor) -> Result<LayerGrad> {
        let (d_input, d_kernel) = conv2d_backward(input, &self.kernel, self.cfg, upstream)?;
        Ok(LayerGrad {
            d_input,
            d_params: alloc::vec![d_kernel],
        })
    }

    fn params(&self) -> Vec<&Tensor> {
        alloc::vec![&self.kernel]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        alloc::vec![&mut self.kernel]
    }

    fn param_names(&self) -> Vec<String> {
        alloc::vec![String::from("kernel")]
    }
}

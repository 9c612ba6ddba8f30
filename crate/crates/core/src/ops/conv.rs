//! Spatio-temporal convolution (cross-correlation) via im2col + GEMM.
//!
//! A 2D convolution is the `kT = 1`, `T = 1` special case; kernels with four
//! axes `(outC, inC, kH, kW)` are accepted wherever `spec.kernel[0] == 1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gemm::sgemm;
use super::{window_geometry, AxisGeometry, Padding};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    /// `(kT, kH, kW)`.
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [Padding; 3],
    pub use_bias: bool,
}

impl ConvSpec {
    pub fn new(kernel: [usize; 3], stride: [usize; 3], padding: Padding) -> Self {
        ConvSpec {
            kernel,
            stride,
            padding: [padding; 3],
            use_bias: false,
        }
    }

    /// A 2D `kH × kW` convolution expressed with a unit temporal extent.
    pub fn planar(kernel: [usize; 2], stride: usize, padding: Padding) -> Self {
        Self::new([1, kernel[0], kernel[1]], [1, stride, stride], padding)
    }

    pub fn with_bias(mut self, use_bias: bool) -> Self {
        self.use_bias = use_bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::invalid(
                "conv",
                format!(
                    "kernel {:?} and stride {:?} must be positive",
                    self.kernel, self.stride
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn geometry(&self, input: [usize; 3]) -> Result<[AxisGeometry; 3]> {
        window_geometry(input, self.kernel, self.stride, self.padding)
    }

    /// Output `(T, H, W)` for the given input extents.
    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let g = self.geometry(input)?;
        Ok([g[0].output, g[1].output, g[2].output])
    }
}

/// Kernel dims as `(outC, inC, kT, kH, kW)`, promoting planar kernels.
fn kernel_dims(kernel: &Tensor, spec: &ConvSpec) -> Result<[usize; 5]> {
    let dims = match kernel.shape() {
        &[o, i, kt, kh, kw] => [o, i, kt, kh, kw],
        &[o, i, kh, kw] => [o, i, 1, kh, kw],
        other => {
            return Err(Error::invalid(
                "conv3d",
                format!("kernel must have 4 or 5 axes, got {other:?}"),
            ))
        }
    };
    if dims[2..] != spec.kernel {
        return Err(Error::shape(
            "conv3d kernel",
            &[
                dims[0],
                dims[1],
                spec.kernel[0],
                spec.kernel[1],
                spec.kernel[2],
            ],
            kernel.shape(),
        ));
    }
    Ok(dims)
}

struct Plan {
    batch: usize,
    in_c: usize,
    input: [usize; 3],
    out_c: usize,
    kernel: [usize; 3],
    stride: [usize; 3],
    geom: [AxisGeometry; 3],
}

impl Plan {
    fn new(input: &Tensor, kernel: &Tensor, spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        let [n, c, t, h, w] = input.dims5("conv3d")?;
        let kd = kernel_dims(kernel, spec)?;
        if kd[1] != c {
            return Err(Error::shape(
                "conv3d channels",
                &[kd[0], c, kd[2], kd[3], kd[4]],
                kernel.shape(),
            ));
        }
        Ok(Plan {
            batch: n,
            in_c: c,
            input: [t, h, w],
            out_c: kd[0],
            kernel: spec.kernel,
            stride: spec.stride,
            geom: spec.geometry([t, h, w])?,
        })
    }

    fn in_len(&self) -> usize {
        self.in_c * self.input.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.geom.iter().map(|g| g.output).product()
    }

    fn rows(&self) -> usize {
        self.in_c * self.kernel.iter().product::<usize>()
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.out_c,
            self.geom[0].output,
            self.geom[1].output,
            self.geom[2].output,
        ]
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1]
    }

    /// Range of output indices along one axis whose input index
    /// `o * stride + k - pad` falls inside `[0, extent)`.
    fn valid_range(&self, axis: usize, k: usize) -> (usize, usize) {
        let s = self.stride[axis];
        let pad = self.geom[axis].pad_before;
        let extent = self.input[axis];
        let out = self.geom[axis].output;
        let lo = pad.saturating_sub(k).div_ceil(s);
        // o * s + k - pad <= extent - 1
        let hi = if extent + pad < k + 1 {
            0
        } else {
            ((extent - 1 + pad - k) / s + 1).min(out)
        };
        (lo.min(hi), hi)
    }

    /// Walk every (row, output position) pair with its input offset.
    /// `visit(row_slice_index, input_index)` is called for in-bounds taps only.
    fn for_each_tap(&self, mut visit: impl FnMut(usize, usize)) {
        let [t, h, w] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.geom.map(|g| g.output);
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.geom.map(|g| g.pad_before);
        let p = ot * oh * ow;
        for c in 0..self.in_c {
            for a in 0..kt {
                let (t_lo, t_hi) = self.valid_range(0, a);
                for b in 0..kh {
                    let (h_lo, h_hi) = self.valid_range(1, b);
                    for d in 0..kw {
                        let (w_lo, w_hi) = self.valid_range(2, d);
                        let row = ((c * kt + a) * kh + b) * kw + d;
                        for o_t in t_lo..t_hi {
                            let it = o_t * st + a - pt;
                            for o_h in h_lo..h_hi {
                                let ih = o_h * sh + b - ph;
                                let src = ((c * t + it) * h + ih) * w;
                                let dst = row * p + (o_t * oh + o_h) * ow;
                                for o_w in w_lo..w_hi {
                                    visit(dst + o_w, src + o_w * sw + d - pw);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        cols.iter_mut().for_each(|v| *v = 0.0);
        self.for_each_tap(|dst, src| cols[dst] = x[src]);
    }

    fn col2im(&self, cols: &[f32], gx: &mut [f32]) {
        self.for_each_tap(|dst, src| gx[src] += cols[dst]);
    }
}

/// Direct correlation of `input (N, C, T, H, W)` with `kernel`.
pub fn conv3d_forward(input: &Tensor, kernel: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    input.check_finite("conv3d input")?;
    let plan = Plan::new(input, kernel, spec)?;
    let p = plan.positions();
    let rows = plan.rows();
    let mut out = Tensor::zeros(plan.output_shape());
    let w = kernel.data();
    out.data_mut()
        .par_chunks_mut(plan.out_c * p)
        .zip(input.data().par_chunks(plan.in_len()))
        .for_each(|(y, x)| {
            if plan.pointwise() {
                sgemm(plan.out_c, rows, p, w, false, x, false, y, 0.0);
            } else {
                let mut cols = vec![0.0; rows * p];
                plan.im2col(x, &mut cols);
                sgemm(plan.out_c, rows, p, w, false, &cols, false, y, 0.0);
            }
        });
    Ok(out)
}

/// Adjoint of [`conv3d_forward`]: returns `(grad_input, grad_kernel)`.
/// `grad_kernel` has the same shape as `kernel` (4 or 5 axes).
pub fn conv3d_backward(
    grad_out: &Tensor,
    input: &Tensor,
    kernel: &Tensor,
    spec: &ConvSpec,
) -> Result<(Tensor, Tensor)> {
    let (gx, gw) = conv3d_backward_impl(grad_out, input, kernel, spec, true)?;
    Ok((gx.expect("input gradient requested"), gw))
}

pub(crate) fn conv3d_backward_impl(
    grad_out: &Tensor,
    input: &Tensor,
    kernel: &Tensor,
    spec: &ConvSpec,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let plan = Plan::new(input, kernel, spec)?;
    grad_out.expect_shape("conv3d_backward grad_out", &plan.output_shape())?;
    let p = plan.positions();
    let rows = plan.rows();
    let w = kernel.data();
    let in_len = plan.in_len();

    let partials: Vec<(Option<Vec<f32>>, Vec<f32>)> = grad_out
        .data()
        .par_chunks(plan.out_c * p)
        .zip(input.data().par_chunks(in_len))
        .map(|(gy, x)| {
            let mut gw = vec![0.0; plan.out_c * rows];
            let gx = if plan.pointwise() {
                sgemm(plan.out_c, p, rows, gy, false, x, true, &mut gw, 0.0);
                need_input_grad.then(|| {
                    let mut gx = vec![0.0; in_len];
                    sgemm(rows, plan.out_c, p, w, true, gy, false, &mut gx, 0.0);
                    gx
                })
            } else {
                let mut cols = vec![0.0; rows * p];
                plan.im2col(x, &mut cols);
                sgemm(plan.out_c, p, rows, gy, false, &cols, true, &mut gw, 0.0);
                need_input_grad.then(|| {
                    sgemm(rows, plan.out_c, p, w, true, gy, false, &mut cols, 0.0);
                    let mut gx = vec![0.0; in_len];
                    plan.col2im(&cols, &mut gx);
                    gx
                })
            };
            (gx, gw)
        })
        .collect();

    let mut grad_kernel = Tensor::zeros(kernel.shape().to_vec());
    let mut grad_input = need_input_grad.then(|| Vec::with_capacity(input.len()));
    for (gx, gw) in partials {
        grad_kernel
            .data_mut()
            .iter_mut()
            .zip(&gw)
            .for_each(|(a, b)| *a += b);
        if let (Some(acc), Some(gx)) = (grad_input.as_mut(), gx) {
            acc.extend_from_slice(&gx);
        }
    }
    let grad_input = grad_input
        .map(|data| Tensor::new(input.shape().to_vec(), data))
        .transpose()?;
    Ok((grad_input, grad_kernel))
}

/// 2D convolution of `input (N, C, H, W)` with `kernel (outC, inC, kH, kW)`.
pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
) -> Result<Tensor> {
    let &[n, c, h, w] = input.shape() else {
        return Err(Error::invalid("conv2d", "input must be (N, C, H, W)"));
    };
    let &[_, _, kh, kw] = kernel.shape() else {
        return Err(Error::invalid(
            "conv2d",
            "kernel must be (outC, inC, kH, kW)",
        ));
    };
    let spec = ConvSpec::planar([kh, kw], stride, padding);
    let x = input.clone().reshape(vec![n, c, 1, h, w])?;
    let y = conv3d_forward(&x, kernel, &spec)?;
    let s = y.shape().to_vec();
    y.reshape(vec![s[0], s[1], s[3], s[4]])
}

/// Adds `bias[c]` to every element of channel `c` of an `(N, C, ...)` tensor.
pub fn add_channel_bias(x: &mut Tensor, bias: &Tensor) -> Result<()> {
    let n = x.shape()[0];
    let c = *x
        .shape()
        .get(1)
        .ok_or_else(|| Error::invalid("bias", "rank < 2"))?;
    bias.expect_shape("bias", &[c])?;
    let inner = x.len() / (n * c).max(1);
    for (i, chunk) in x.data_mut().chunks_mut(inner).enumerate() {
        let b = bias.data()[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
    Ok(())
}

/// Gradient of [`add_channel_bias`] with respect to the bias.
pub fn channel_bias_grad(grad_out: &Tensor) -> Tensor {
    let n = grad_out.shape()[0];
    let c = grad_out.shape()[1];
    let inner = grad_out.len() / (n * c).max(1);
    let mut g = Tensor::zeros(vec![c]);
    for (i, chunk) in grad_out.data().chunks(inner).enumerate() {
        g.data_mut()[i % c] += chunk.iter().sum::<f32>();
    }
    g
}

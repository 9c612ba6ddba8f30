//! Max and average pooling over `(T, H, W)` windows.
//!
//! Padding positions never participate: max pooling takes the maximum of the
//! in-bounds elements and average pooling divides by their count, so a
//! constant input stays constant right up to the borders.

use serde::{Deserialize, Serialize};

use super::{window_geometry, AxisGeometry, Padding};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [Padding; 3],
}

impl PoolSpec {
    pub fn new(kind: PoolKind, kernel: [usize; 3], stride: [usize; 3], padding: Padding) -> Self {
        PoolSpec {
            kind,
            kernel,
            stride,
            padding: [padding; 3],
        }
    }

    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let g = window_geometry(input, self.kernel, self.stride, self.padding)?;
        for (axis, geom) in g.iter().enumerate() {
            window_bounds(geom, self.kernel[axis], self.stride[axis], input[axis])?;
        }
        Ok(g.map(|a| a.output))
    }
}

/// Flat input indices (within the whole tensor) selected by max pooling.
#[derive(Clone, Debug, Default)]
pub struct PoolCache {
    argmax: Vec<usize>,
}

/// In-bounds `[lo, hi)` input ranges for every output index along one axis.
fn window_bounds(
    geom: &AxisGeometry,
    kernel: usize,
    stride: usize,
    extent: usize,
) -> Result<Vec<(usize, usize)>> {
    (0..geom.output)
        .map(|o| {
            let start = (o * stride) as isize - geom.pad_before as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + kernel as isize).max(0) as usize).min(extent);
            if lo >= hi {
                Err(Error::invalid(
                    "pool3d",
                    format!("window {o} covers only padding (kernel {kernel}, stride {stride})"),
                ))
            } else {
                Ok((lo, hi))
            }
        })
        .collect()
}

struct Windows {
    dims: [usize; 5],
    out: [usize; 3],
    bounds: [Vec<(usize, usize)>; 3],
}

impl Windows {
    fn new(shape: &[usize], spec: &PoolSpec) -> Result<Self> {
        let &[n, c, t, h, w] = shape else {
            return Err(Error::invalid("pool3d", "input must be (N, C, T, H, W)"));
        };
        let input = [t, h, w];
        let g = window_geometry(input, spec.kernel, spec.stride, spec.padding)?;
        let bounds = [
            window_bounds(&g[0], spec.kernel[0], spec.stride[0], t)?,
            window_bounds(&g[1], spec.kernel[1], spec.stride[1], h)?,
            window_bounds(&g[2], spec.kernel[2], spec.stride[2], w)?,
        ];
        Ok(Windows {
            dims: [n, c, t, h, w],
            out: g.map(|a| a.output),
            bounds,
        })
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![
            self.dims[0],
            self.dims[1],
            self.out[0],
            self.out[1],
            self.out[2],
        ]
    }

    /// Calls `visit(output_index, window)` where `window` lists flat input
    /// indices in row-major order.
    fn for_each(&self, mut visit: impl FnMut(usize, &[usize])) {
        let [n, c, t, h, w] = self.dims;
        let mut window = Vec::new();
        let mut o = 0;
        for plane in 0..n * c {
            let base = plane * t * h * w;
            for &(t0, t1) in &self.bounds[0] {
                for &(h0, h1) in &self.bounds[1] {
                    for &(w0, w1) in &self.bounds[2] {
                        window.clear();
                        for it in t0..t1 {
                            for ih in h0..h1 {
                                let row = base + (it * h + ih) * w;
                                window.extend(w0 + row..w1 + row);
                            }
                        }
                        visit(o, &window);
                        o += 1;
                    }
                }
            }
        }
    }
}

pub fn pool3d_forward(input: &Tensor, spec: &PoolSpec) -> Result<(Tensor, PoolCache)> {
    input.check_finite("pool3d input")?;
    let windows = Windows::new(input.shape(), spec)?;
    let mut out = Tensor::zeros(windows.output_shape());
    let x = input.data();
    let mut cache = PoolCache::default();
    let y = out.data_mut();
    match spec.kind {
        PoolKind::Max => {
            cache.argmax = vec![0; y.len()];
            windows.for_each(|o, win| {
                let mut best = win[0];
                for &i in &win[1..] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                y[o] = x[best];
                cache.argmax[o] = best;
            });
        }
        PoolKind::Avg => windows.for_each(|o, win| {
            y[o] = win.iter().map(|&i| x[i]).sum::<f32>() / win.len() as f32;
        }),
    }
    Ok((out, cache))
}

pub fn pool3d_backward(
    grad_out: &Tensor,
    input_shape: &[usize],
    spec: &PoolSpec,
    cache: &PoolCache,
) -> Result<Tensor> {
    let windows = Windows::new(input_shape, spec)?;
    grad_out.expect_shape("pool3d_backward", &windows.output_shape())?;
    let mut grad = Tensor::zeros(input_shape.to_vec());
    let g = grad.data_mut();
    let gy = grad_out.data();
    match spec.kind {
        PoolKind::Max => {
            if cache.argmax.len() != gy.len() {
                return Err(Error::invalid(
                    "pool3d_backward",
                    "max-pool cache does not match grad_out",
                ));
            }
            for (o, &i) in cache.argmax.iter().enumerate() {
                g[i] += gy[o];
            }
        }
        PoolKind::Avg => windows.for_each(|o, win| {
            let share = gy[o] / win.len() as f32;
            for &i in win {
                g[i] += share;
            }
        }),
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_is_preserved() {
        let x = Tensor::full(vec![1, 2, 3, 5, 5], 0.7);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let spec = PoolSpec::new(kind, [3, 3, 3], [2, 2, 2], Padding::Same);
            let (y, _) = pool3d_forward(&x, &spec).unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-6), "{kind:?}");
        }
    }

    #[test]
    fn max_ties_route_to_first_element() {
        let x = Tensor::full(vec![1, 1, 1, 2, 2], 1.0);
        let spec = PoolSpec::new(PoolKind::Max, [1, 2, 2], [1, 2, 2], Padding::Valid);
        let (y, cache) = pool3d_forward(&x, &spec).unwrap();
        let g = pool3d_backward(
            &Tensor::full(y.shape().to_vec(), 1.0),
            x.shape(),
            &spec,
            &cache,
        )
        .unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn avg_excludes_padding() {
        let x = Tensor::new(vec![1, 1, 1, 1, 3], vec![3.0, 6.0, 9.0]).unwrap();
        let spec = PoolSpec::new(PoolKind::Avg, [1, 1, 3], [1, 1, 1], Padding::Same);
        let (y, _) = pool3d_forward(&x, &spec).unwrap();
        assert_eq!(y.data(), &[4.5, 6.0, 7.5]);
    }

    #[test]
    fn oversized_window_is_rejected() {
        let spec = PoolSpec::new(PoolKind::Avg, [1, 5, 5], [1, 1, 1], Padding::Valid);
        assert!(pool3d_forward(&Tensor::zeros(vec![1, 1, 1, 3, 3]), &spec).is_err());
    }

    #[test]
    fn stride_beyond_kernel_can_leave_padding_only_windows() {
        // A window with no in-bounds element must fail at build time.
        let spec = PoolSpec {
            kind: PoolKind::Avg,
            kernel: [1, 1, 1],
            stride: [1, 1, 1],
            padding: [Padding::Same; 3],
        };
        assert!(spec.output_extent([1, 1, 1]).is_ok());
        let geom = AxisGeometry {
            output: 3,
            pad_before: 2,
        };
        assert!(window_bounds(&geom, 1, 1, 4).is_err());
    }
}

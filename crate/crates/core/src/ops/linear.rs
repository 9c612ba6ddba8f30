use super::gemm::sgemm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn features(input: &Tensor) -> (usize, usize) {
    let n = input.shape()[0];
    (n, input.len() / n.max(1))
}

/// `y = x · Wᵀ + b` with `x` flattened to `(N, F)` and `weight (out, F)`.
/// Returns `(N, out)`.
pub fn linear_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    input.check_finite("linear input")?;
    let (n, f) = features(input);
    let [out, wf] = weight.dims2("linear")?;
    if wf != f {
        return Err(Error::shape("linear weight", &[out, f], weight.shape()));
    }
    let mut y = vec![0.0f32; n * out];
    sgemm(
        n,
        f,
        out,
        input.data(),
        false,
        weight.data(),
        true,
        &mut y,
        0.0,
    );
    if let Some(b) = bias {
        b.expect_shape("linear bias", &[out])?;
        for row in y.chunks_mut(out) {
            row.iter_mut().zip(b.data()).for_each(|(v, b)| *v += b);
        }
    }
    Tensor::new(vec![n, out], y)
}

/// Returns `(grad_input, grad_weight, grad_bias)`; `grad_input` has the
/// shape of `input`.
pub fn linear_backward(
    grad_out: &Tensor,
    input: &Tensor,
    weight: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, f) = features(input);
    let [out, _] = weight.dims2("linear_backward")?;
    grad_out.expect_shape("linear_backward grad_out", &[n, out])?;
    let mut gx = vec![0.0f32; n * f];
    sgemm(
        n,
        out,
        f,
        grad_out.data(),
        false,
        weight.data(),
        false,
        &mut gx,
        0.0,
    );
    let mut gw = vec![0.0f32; out * f];
    sgemm(
        out,
        n,
        f,
        grad_out.data(),
        true,
        input.data(),
        false,
        &mut gw,
        0.0,
    );
    let mut gb = vec![0.0f32; out];
    for row in grad_out.data().chunks(out) {
        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(vec![out, f], gw)?,
        Tensor::new(vec![out], gb)?,
    ))
}

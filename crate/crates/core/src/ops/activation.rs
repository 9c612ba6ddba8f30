use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given the forward *input*.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape("relu_backward", input.shape())?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// `(N, K, positions)` view of a class-score tensor.
fn class_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid(op, "expected (N, K, ...) scores"));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Softmax over axis 1, independently at every other position.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    x.check_finite("softmax input")?;
    let (n, k, p) = class_layout(x.shape(), "softmax")?;
    let src = x.data();
    let mut out = vec![0.0f32; src.len()];
    for b in 0..n {
        for pos in 0..p {
            let idx = |c: usize| (b * k + c) * p + pos;
            let max = (0..k)
                .map(|c| src[idx(c)])
                .fold(f32::NEG_INFINITY, f32::max);
            let mut total = 0.0f64;
            for c in 0..k {
                let e = (src[idx(c)] - max).exp();
                out[idx(c)] = e;
                total += e as f64;
            }
            for c in 0..k {
                out[idx(c)] = (out[idx(c)] as f64 / total) as f32;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Gradient of [`softmax_channels`] given its *output* probabilities.
pub fn softmax_channels_backward(grad_out: &Tensor, probs: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape("softmax_backward", probs.shape())?;
    let (n, k, p) = class_layout(probs.shape(), "softmax_backward")?;
    let (g, y) = (grad_out.data(), probs.data());
    let mut dx = vec![0.0f32; y.len()];
    for b in 0..n {
        for pos in 0..p {
            let idx = |c: usize| (b * k + c) * p + pos;
            let dot: f32 = (0..k).map(|c| g[idx(c)] * y[idx(c)]).sum();
            for c in 0..k {
                dx[idx(c)] = y[idx(c)] * (g[idx(c)] - dot);
            }
        }
    }
    Tensor::new(probs.shape().to_vec(), dx)
}

fn check_labels(labels: &[usize], n: usize, k: usize, op: &'static str) -> Result<()> {
    if labels.len() != n {
        return Err(Error::invalid(
            op,
            format!("{} labels for a batch of {n}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(
            op,
            format!("label {bad} out of range for {k} classes"),
        ));
    }
    Ok(())
}

/// Mean cross-entropy of `logits (N, K, ...)` against one label per batch
/// item. Trailing positions (e.g. time steps) each contribute a term.
/// Returns `(loss, probabilities)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let (n, k, p) = class_layout(logits.shape(), "softmax_cross_entropy")?;
    check_labels(labels, n, k, "softmax_cross_entropy")?;
    let probs = softmax_channels(logits)?;
    let x = logits.data();
    let mut loss = 0.0f64;
    for (b, &label) in labels.iter().enumerate() {
        for pos in 0..p {
            let idx = |c: usize| (b * k + c) * p + pos;
            let max = (0..k).map(|c| x[idx(c)]).fold(f32::NEG_INFINITY, f32::max);
            let lse = (0..k)
                .map(|c| ((x[idx(c)] - max) as f64).exp())
                .sum::<f64>()
                .ln()
                + max as f64;
            loss += lse - x[idx(label)] as f64;
        }
    }
    Ok(((loss / (n * p) as f64) as f32, probs))
}

pub fn softmax_cross_entropy_backward(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k, p) = class_layout(probs.shape(), "softmax_cross_entropy_backward")?;
    check_labels(labels, n, k, "softmax_cross_entropy_backward")?;
    let scale = 1.0 / (n * p) as f32;
    let mut g = probs.scale(scale);
    let d = g.data_mut();
    for (b, &label) in labels.iter().enumerate() {
        for pos in 0..p {
            d[(b * k + label) * p + pos] -= scale;
        }
    }
    Ok(g)
}

const PROB_FLOOR: f32 = 1e-12;

/// Mean negative log-likelihood of probabilities `(N, K, ...)`.
pub fn nll_loss(probs: &Tensor, labels: &[usize]) -> Result<f32> {
    let (n, k, p) = class_layout(probs.shape(), "nll_loss")?;
    check_labels(labels, n, k, "nll_loss")?;
    let y = probs.data();
    let mut loss = 0.0f64;
    for (b, &label) in labels.iter().enumerate() {
        for pos in 0..p {
            loss -= (y[(b * k + label) * p + pos].max(PROB_FLOOR) as f64).ln();
        }
    }
    Ok((loss / (n * p) as f64) as f32)
}

pub fn nll_loss_backward(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k, p) = class_layout(probs.shape(), "nll_loss_backward")?;
    check_labels(labels, n, k, "nll_loss_backward")?;
    let mut g = Tensor::zeros(probs.shape().to_vec());
    let scale = 1.0 / (n * p) as f32;
    for (b, &label) in labels.iter().enumerate() {
        for pos in 0..p {
            let i = (b * k + label) * p + pos;
            g.data_mut()[i] = -scale / probs.data()[i].max(PROB_FLOOR);
        }
    }
    Ok(g)
}

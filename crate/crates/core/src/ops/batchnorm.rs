//! Batch normalization over the channel axis (axis 1) of any `(N, C, ...)`
//! tensor. Statistics pool every other axis.

use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f32 = 1e-3;
pub const DEFAULT_DECAY: f32 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
    /// Weight of the old running statistic in each update.
    pub decay: f32,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: DEFAULT_EPSILON,
            decay: DEFAULT_DECAY,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::invalid(
                "batchnorm",
                "gamma, beta and running statistics must share one length",
            ));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("batchnorm", "running variance is negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BatchNormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    mode: Mode,
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::invalid("batchnorm", "input needs a channel axis"));
    }
    let n = shape[0];
    let c = shape[1];
    let inner = shape[2..].iter().product();
    Ok((n, c, inner))
}

pub fn batchnorm_forward(
    input: &Tensor,
    state: &mut BatchNormState,
    mode: Mode,
) -> Result<(Tensor, BatchNormCache)> {
    state.validate()?;
    let (n, c, inner) = layout(input.shape())?;
    if c != state.channels() {
        return Err(Error::shape(
            "batchnorm channels",
            &[state.channels()],
            &[c],
        ));
    }
    let x = input.data();
    let count = (n * inner) as f64;

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for b in 0..n {
                for ch in 0..c {
                    let s = &x[(b * c + ch) * inner..][..inner];
                    mean[ch] += s.iter().map(|&v| v as f64).sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            for b in 0..n {
                for ch in 0..c {
                    let s = &x[(b * c + ch) * inner..][..inner];
                    var[ch] += s
                        .iter()
                        .map(|&v| (v as f64 - mean[ch]).powi(2))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count);
            let bessel = if count > 1.0 {
                count / (count - 1.0)
            } else {
                1.0
            };
            let d = state.decay;
            for ch in 0..c {
                state.running_mean[ch] = d * state.running_mean[ch] + (1.0 - d) * mean[ch] as f32;
                state.running_var[ch] =
                    d * state.running_var[ch] + (1.0 - d) * (var[ch] * bessel) as f32;
            }
            (
                mean.into_iter().map(|v| v as f32).collect::<Vec<_>>(),
                var.into_iter().map(|v| v as f32).collect::<Vec<_>>(),
            )
        }
        Mode::Infer => (state.running_mean.clone(), state.running_var.clone()),
    };

    let inv_std: Vec<f32> = var
        .iter()
        .map(|&v| 1.0 / (v + state.epsilon).sqrt())
        .collect();
    let mut xhat = vec![0.0f32; x.len()];
    let mut y = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            let (m, s, g, be) = (mean[ch], inv_std[ch], state.gamma[ch], state.beta[ch]);
            for i in off..off + inner {
                let h = (x[i] - m) * s;
                xhat[i] = h;
                y[i] = g * h + be;
            }
        }
    }
    let out = Tensor::new(input.shape().to_vec(), y)?;
    out.check_finite("batchnorm output")?;
    Ok((
        out,
        BatchNormCache {
            xhat,
            inv_std,
            mode,
        },
    ))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward(
    grad_out: &Tensor,
    cache: &BatchNormCache,
    gamma: &[f32],
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let (n, c, inner) = layout(grad_out.shape())?;
    if c != gamma.len() || grad_out.len() != cache.xhat.len() {
        return Err(Error::invalid(
            "batchnorm_backward",
            "grad_out does not match the forward pass",
        ));
    }
    let dy = grad_out.data();
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            for i in off..off + inner {
                sum_dy[ch] += dy[i] as f64;
                sum_dy_xhat[ch] += (dy[i] * cache.xhat[i]) as f64;
            }
        }
    }
    let m = (n * inner) as f32;
    let mut dx = vec![0.0f32; dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * inner;
            let k = gamma[ch] * cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    let (sd, sdx) = (sum_dy[ch] as f32 / m, sum_dy_xhat[ch] as f32 / m);
                    for i in off..off + inner {
                        dx[i] = k * (dy[i] - sd - cache.xhat[i] * sdx);
                    }
                }
                Mode::Infer => {
                    for i in off..off + inner {
                        dx[i] = k * dy[i];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape().to_vec(), dx)?,
        sum_dy_xhat.into_iter().map(|v| v as f32).collect(),
        sum_dy.into_iter().map(|v| v as f32).collect(),
    ))
}

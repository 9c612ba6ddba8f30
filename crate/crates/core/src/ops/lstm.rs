//! LSTM with batch-normalized input-to-hidden and hidden-to-hidden
//! pre-activations:
//!
//! ```text
//! a_t = BN_x(W_x x_t) + BN_h(W_h h_{t-1}) + b
//! i, f, o = sigmoid(a_i), sigmoid(a_f), sigmoid(a_o);  g = tanh(a_g)
//! c_t = f * c_{t-1} + i * g;   h_t = o * tanh(c_t)
//! ```
//!
//! Over a whole sequence `BN_x` pools its statistics across batch and time
//! (all `W_x x_t` are known up front). `BN_h` can only see one step at a
//! time, so its batch statistics are per step; both share a single set of
//! affine parameters and running statistics across steps. Gate columns are
//! ordered `i, f, g, o`.

use super::batchnorm::{batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormState};
use super::gemm::sgemm;
use super::Mode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `(4H, F)`
    pub w_input: Tensor,
    /// `(4H, H)`
    pub w_hidden: Tensor,
    /// `(4H)`
    pub bias: Tensor,
    pub bn_input: BatchNormState,
    pub bn_hidden: BatchNormState,
}

impl LstmParams {
    pub fn zeros(input_size: usize, hidden: usize) -> Self {
        let mut bn_input = BatchNormState::new(4 * hidden);
        let mut bn_hidden = BatchNormState::new(4 * hidden);
        bn_input.gamma.fill(0.0);
        bn_hidden.gamma.fill(0.0);
        LstmParams {
            w_input: Tensor::zeros(vec![4 * hidden, input_size]),
            w_hidden: Tensor::zeros(vec![4 * hidden, hidden]),
            bias: Tensor::zeros(vec![4 * hidden]),
            bn_input,
            bn_hidden,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hidden.shape()[1]
    }

    pub fn input_size(&self) -> usize {
        self.w_input.shape()[1]
    }

    fn validate(&self) -> Result<()> {
        let h = self.hidden();
        self.w_input
            .expect_shape("lstm w_input", &[4 * h, self.input_size()])?;
        self.w_hidden.expect_shape("lstm w_hidden", &[4 * h, h])?;
        self.bias.expect_shape("lstm bias", &[4 * h])?;
        if self.bn_input.channels() != 4 * h || self.bn_hidden.channels() != 4 * h {
            return Err(Error::invalid(
                "lstm",
                "batch-norm width must be 4 * hidden",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmGrads {
    pub w_input: Tensor,
    pub w_hidden: Tensor,
    pub bias: Tensor,
    pub gamma_input: Vec<f32>,
    pub beta_input: Vec<f32>,
    pub gamma_hidden: Vec<f32>,
    pub beta_hidden: Vec<f32>,
}

impl LstmGrads {
    fn zeros(p: &LstmParams) -> Self {
        let g = 4 * p.hidden();
        LstmGrads {
            w_input: Tensor::zeros(p.w_input.shape().to_vec()),
            w_hidden: Tensor::zeros(p.w_hidden.shape().to_vec()),
            bias: Tensor::zeros(vec![g]),
            gamma_input: vec![0.0; g],
            beta_input: vec![0.0; g],
            gamma_hidden: vec![0.0; g],
            beta_hidden: vec![0.0; g],
        }
    }
}

#[derive(Clone, Debug)]
pub struct LstmStepCache {
    h_prev: Vec<f32>,
    c_prev: Vec<f32>,
    /// Activated gates `i, f, g, o`, `(N, 4H)`.
    gates: Vec<f32>,
    tanh_c: Vec<f32>,
    bn_hidden: BatchNormCache,
}

#[derive(Clone, Debug)]
pub struct LstmCache {
    batch: usize,
    steps: usize,
    /// Inputs as `(T·N, F)` rows, row `t·N + b`.
    x_rows: Vec<f32>,
    bn_input: BatchNormCache,
    step_caches: Vec<LstmStepCache>,
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// One recurrent step given the already-normalized input projection
/// `ax (N, 4H)`.
fn step_forward(
    ax: &[f32],
    h_prev: &[f32],
    c_prev: &[f32],
    params: &mut LstmParams,
    mode: Mode,
    n: usize,
) -> Result<(Vec<f32>, Vec<f32>, LstmStepCache)> {
    let hd = params.hidden();
    let g4 = 4 * hd;
    let mut ah = vec![0.0f32; n * g4];
    sgemm(
        n,
        hd,
        g4,
        h_prev,
        false,
        params.w_hidden.data(),
        true,
        &mut ah,
        0.0,
    );
    let ah = Tensor::new(vec![n, g4], ah)?;
    let (ah, bn_cache) = batchnorm_forward(&ah, &mut params.bn_hidden, mode)?;
    let bias = params.bias.data();
    let mut gates = vec![0.0f32; n * g4];
    let mut c = vec![0.0f32; n * hd];
    let mut h = vec![0.0f32; n * hd];
    let mut tanh_c = vec![0.0f32; n * hd];
    for b in 0..n {
        let row = b * g4;
        for j in 0..g4 {
            let a = ax[row + j] + ah.data()[row + j] + bias[j];
            gates[row + j] = if (2 * hd..3 * hd).contains(&j) {
                a.tanh()
            } else {
                sigmoid(a)
            };
        }
        for j in 0..hd {
            let (i, f, g, o) = (
                gates[row + j],
                gates[row + hd + j],
                gates[row + 2 * hd + j],
                gates[row + 3 * hd + j],
            );
            let k = b * hd + j;
            c[k] = f * c_prev[k] + i * g;
            tanh_c[k] = c[k].tanh();
            h[k] = o * tanh_c[k];
        }
    }
    let cache = LstmStepCache {
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        gates,
        tanh_c,
        bn_hidden: bn_cache,
    };
    Ok((h, c, cache))
}

/// Backward through one step. Accumulates hidden-path gradients into
/// `grads` and returns `(d_ax, dh_prev, dc_prev)`.
fn step_backward(
    dh: &[f32],
    dc_next: &[f32],
    cache: &LstmStepCache,
    params: &LstmParams,
    grads: &mut LstmGrads,
    n: usize,
) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    let hd = params.hidden();
    let g4 = 4 * hd;
    let mut da = vec![0.0f32; n * g4];
    let mut dc_prev = vec![0.0f32; n * hd];
    for b in 0..n {
        let row = b * g4;
        for j in 0..hd {
            let k = b * hd + j;
            let (i, f, g, o) = (
                cache.gates[row + j],
                cache.gates[row + hd + j],
                cache.gates[row + 2 * hd + j],
                cache.gates[row + 3 * hd + j],
            );
            let tc = cache.tanh_c[k];
            let dc = dc_next[k] + dh[k] * o * (1.0 - tc * tc);
            da[row + j] = dc * g * i * (1.0 - i);
            da[row + hd + j] = dc * cache.c_prev[k] * f * (1.0 - f);
            da[row + 2 * hd + j] = dc * i * (1.0 - g * g);
            da[row + 3 * hd + j] = dh[k] * tc * o * (1.0 - o);
            dc_prev[k] = dc * f;
        }
    }
    for r in da.chunks(g4) {
        grads
            .bias
            .data_mut()
            .iter_mut()
            .zip(r)
            .for_each(|(a, b)| *a += b);
    }
    let da_t = Tensor::new(vec![n, g4], da.clone())?;
    let (dah, dgamma, dbeta) =
        batchnorm_backward(&da_t, &cache.bn_hidden, &params.bn_hidden.gamma)?;
    add_into(&mut grads.gamma_hidden, &dgamma);
    add_into(&mut grads.beta_hidden, &dbeta);
    // dW_h += dahᵀ · h_prev ; dh_prev = dah · W_h
    sgemm(
        g4,
        n,
        hd,
        dah.data(),
        true,
        &cache.h_prev,
        false,
        grads.w_hidden.data_mut(),
        1.0,
    );
    let mut dh_prev = vec![0.0f32; n * hd];
    sgemm(
        n,
        g4,
        hd,
        dah.data(),
        false,
        params.w_hidden.data(),
        false,
        &mut dh_prev,
        0.0,
    );
    Ok((da, dh_prev, dc_prev))
}

fn add_into(acc: &mut [f32], v: &[f32]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

fn check_state(t: &Tensor, n: usize, hd: usize, what: &'static str) -> Result<()> {
    t.expect_shape(what, &[n, hd])
}

/// A single step on `x_t (N, F)`; `BN_x` uses this batch's statistics.
/// Returns `(h_t, c_t, cache)` with states shaped `(N, H)`.
pub fn lstm_cell_bn(
    x_t: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    params: &mut LstmParams,
    mode: Mode,
) -> Result<(Tensor, Tensor, LstmCache)> {
    let [n, f] = x_t.dims2("lstm_cell_bn")?;
    let x = Tensor::new(vec![n, f, 1], x_t.data().to_vec())?;
    let (h, c, cache) = lstm_run(&x, h_prev, c_prev, params, mode)?;
    let hd = params.hidden();
    Ok((
        Tensor::new(vec![n, hd], h.into_data())?,
        Tensor::new(vec![n, hd], c)?,
        cache,
    ))
}

/// Gradient of [`lstm_cell_bn`]. Returns `(dx, dh_prev, dc_prev, grads)`.
pub fn lstm_cell_bn_backward(
    dh: &Tensor,
    dc: &Tensor,
    cache: &LstmCache,
    params: &LstmParams,
) -> Result<(Tensor, Tensor, Tensor, LstmGrads)> {
    let n = cache.batch;
    let hd = params.hidden();
    let dhs = Tensor::new(vec![n, hd, 1], dh.data().to_vec())?;
    let (dx, dh0, dc0, grads) = lstm_backward_impl(&dhs, Some(dc.data()), cache, params)?;
    let f = params.input_size();
    Ok((
        Tensor::new(vec![n, f], dx.into_data())?,
        Tensor::new(vec![n, hd], dh0)?,
        Tensor::new(vec![n, hd], dc0)?,
        grads,
    ))
}

/// Runs the recurrence over `xs (N, F, T)` from zero state and returns the
/// hidden states `(N, H, T)`.
pub fn lstm_sequence_forward(
    xs: &Tensor,
    params: &mut LstmParams,
    mode: Mode,
) -> Result<(Tensor, LstmCache)> {
    let &[n, _, _] = xs.shape() else {
        return Err(Error::invalid("lstm", "sequence input must be (N, F, T)"));
    };
    let hd = params.hidden();
    let zeros = Tensor::zeros(vec![n, hd]);
    let (hs, _, cache) = lstm_run(xs, &zeros, &zeros, params, mode)?;
    Ok((hs, cache))
}

/// Gradient of [`lstm_sequence_forward`] given `dhs (N, H, T)`.
/// Returns `(dxs (N, F, T), grads)`.
pub fn lstm_sequence_backward(
    dhs: &Tensor,
    cache: &LstmCache,
    params: &LstmParams,
) -> Result<(Tensor, LstmGrads)> {
    let (dx, _, _, grads) = lstm_backward_impl(dhs, None, cache, params)?;
    Ok((dx, grads))
}

fn lstm_run(
    xs: &Tensor,
    h0: &Tensor,
    c0: &Tensor,
    params: &mut LstmParams,
    mode: Mode,
) -> Result<(Tensor, Vec<f32>, LstmCache)> {
    params.validate()?;
    xs.check_finite("lstm input")?;
    let &[n, f, t] = xs.shape() else {
        return Err(Error::invalid("lstm", "sequence input must be (N, F, T)"));
    };
    if t == 0 {
        return Err(Error::invalid("lstm", "sequence length is zero"));
    }
    if f != params.input_size() {
        return Err(Error::shape(
            "lstm input",
            &[n, params.input_size(), t],
            xs.shape(),
        ));
    }
    let hd = params.hidden();
    let g4 = 4 * hd;
    check_state(h0, n, hd, "lstm h_prev")?;
    check_state(c0, n, hd, "lstm c_prev")?;

    let x = xs.data();
    let mut x_rows = vec![0.0f32; t * n * f];
    for b in 0..n {
        for k in 0..f {
            for s in 0..t {
                x_rows[(s * n + b) * f + k] = x[(b * f + k) * t + s];
            }
        }
    }
    let mut ax = vec![0.0f32; t * n * g4];
    sgemm(
        t * n,
        f,
        g4,
        &x_rows,
        false,
        params.w_input.data(),
        true,
        &mut ax,
        0.0,
    );
    let ax = Tensor::new(vec![t * n, g4], ax)?;
    let (ax, bn_input) = batchnorm_forward(&ax, &mut params.bn_input, mode)?;

    let mut hs = vec![0.0f32; n * hd * t];
    let mut h = h0.data().to_vec();
    let mut c = c0.data().to_vec();
    let mut step_caches = Vec::with_capacity(t);
    for s in 0..t {
        let ax_t = &ax.data()[s * n * g4..(s + 1) * n * g4];
        let (h_new, c_new, sc) = step_forward(ax_t, &h, &c, params, mode, n)?;
        for b in 0..n {
            for j in 0..hd {
                hs[(b * hd + j) * t + s] = h_new[b * hd + j];
            }
        }
        h = h_new;
        c = c_new;
        step_caches.push(sc);
    }
    let out = Tensor::new(vec![n, hd, t], hs)?;
    out.check_finite("lstm output")?;
    Ok((
        out,
        c,
        LstmCache {
            batch: n,
            steps: t,
            x_rows,
            bn_input,
            step_caches,
        },
    ))
}

#[allow(clippy::type_complexity)]
fn lstm_backward_impl(
    dhs: &Tensor,
    dc_last: Option<&[f32]>,
    cache: &LstmCache,
    params: &LstmParams,
) -> Result<(Tensor, Vec<f32>, Vec<f32>, LstmGrads)> {
    let (n, t) = (cache.batch, cache.steps);
    let hd = params.hidden();
    let g4 = 4 * hd;
    let f = params.input_size();
    dhs.expect_shape("lstm_backward", &[n, hd, t])?;
    let mut grads = LstmGrads::zeros(params);
    let mut dax = vec![0.0f32; t * n * g4];
    let mut dh_next = vec![0.0f32; n * hd];
    let mut dc_next = dc_last.map_or_else(|| vec![0.0f32; n * hd], <[f32]>::to_vec);
    for s in (0..t).rev() {
        let mut dh = dh_next;
        for b in 0..n {
            for j in 0..hd {
                dh[b * hd + j] += dhs.data()[(b * hd + j) * t + s];
            }
        }
        let (da, dh_prev, dc_prev) =
            step_backward(&dh, &dc_next, &cache.step_caches[s], params, &mut grads, n)?;
        dax[s * n * g4..(s + 1) * n * g4].copy_from_slice(&da);
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    let dax = Tensor::new(vec![t * n, g4], dax)?;
    let (dax_raw, dgamma, dbeta) =
        batchnorm_backward(&dax, &cache.bn_input, &params.bn_input.gamma)?;
    grads.gamma_input = dgamma;
    grads.beta_input = dbeta;
    sgemm(
        g4,
        t * n,
        f,
        dax_raw.data(),
        true,
        &cache.x_rows,
        false,
        grads.w_input.data_mut(),
        0.0,
    );
    let mut dx_rows = vec![0.0f32; t * n * f];
    sgemm(
        t * n,
        g4,
        f,
        dax_raw.data(),
        false,
        params.w_input.data(),
        false,
        &mut dx_rows,
        0.0,
    );
    let mut dx = vec![0.0f32; n * f * t];
    for b in 0..n {
        for k in 0..f {
            for s in 0..t {
                dx[(b * f + k) * t + s] = dx_rows[(s * n + b) * f + k];
            }
        }
    }
    Ok((Tensor::new(vec![n, f, t], dx)?, dh_next, dc_next, grads))
}

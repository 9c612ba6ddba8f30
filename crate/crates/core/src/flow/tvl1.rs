//! Duality-based TV-L1 optical flow on a coarse-to-fine pyramid.
//!
//! Per pyramid level and warp, the data term is linearized around the
//! current flow; each inner iteration applies the pointwise thresholding
//! step and one projected dual ascent step of the TV denoiser on `u` and
//! `v`. Intensities are scaled to `[0, 255]` internally so the usual
//! parameter values apply to `[0, 1]` frames.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const INTENSITY_SCALE: f32 = 255.0;
const GRAD_IS_ZERO: f32 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct TvL1Params {
    /// Weight of the data term.
    pub lambda: f32,
    /// Coupling between the flow and its auxiliary variable.
    pub theta: f32,
    /// Dual step size (at most 0.25).
    pub tau: f32,
    pub warps: usize,
    pub inner_iterations: usize,
    /// Resolution ratio between consecutive pyramid levels.
    pub scale: f32,
    /// Maximum number of levels; the pyramid also stops before a side
    /// drops below `min_size`.
    pub levels: usize,
    pub min_size: usize,
    /// Final flow is clamped to `[-clamp, clamp]` pixels.
    pub clamp: f32,
}

impl Default for TvL1Params {
    fn default() -> Self {
        TvL1Params {
            lambda: 0.15,
            theta: 0.3,
            tau: 0.25,
            warps: 5,
            inner_iterations: 30,
            scale: 0.5,
            levels: 32,
            min_size: 16,
            clamp: 20.0,
        }
    }
}

impl TvL1Params {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("tvl1", r.to_string()));
        if !(self.tau > 0.0 && self.tau <= 0.25) {
            return bad("tau must lie in (0, 0.25]");
        }
        if !(self.scale > 0.0 && self.scale < 1.0) {
            return bad("pyramid scale must lie in (0, 1)");
        }
        if !(self.lambda > 0.0 && self.theta > 0.0 && self.clamp > 0.0) {
            return bad("lambda, theta and clamp must be positive");
        }
        if self.warps == 0 || self.inner_iterations == 0 || self.levels == 0 || self.min_size == 0 {
            return bad("warps, iterations, levels and min_size must be at least 1");
        }
        Ok(())
    }
}

/// Per-pixel displacement `(u, v)` in pixels, row-major `H × W` planes.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.u
            .iter()
            .chain(&self.v)
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Flow plus the TV-L1 energy after each warp at the finest level.
#[derive(Clone, Debug)]
pub struct FlowResult {
    pub flow: FlowField,
    pub energies: Vec<f64>,
}

#[derive(Clone)]
struct Image {
    w: usize,
    h: usize,
    data: Vec<f32>,
}

impl Image {
    fn at(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.w as isize - 1) as usize;
        let y = y.clamp(0, self.h as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    /// Bilinear sample with border clamping.
    fn sample(&self, x: f32, y: f32) -> f32 {
        let x = x.clamp(0.0, (self.w - 1) as f32);
        let y = y.clamp(0.0, (self.h - 1) as f32);
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (x0, y0) = (x0 as isize, y0 as isize);
        let a = self.at(x0, y0) * (1.0 - fx) + self.at(x0 + 1, y0) * fx;
        let b = self.at(x0, y0 + 1) * (1.0 - fx) + self.at(x0 + 1, y0 + 1) * fx;
        a * (1.0 - fy) + b * fy
    }

    /// Central-difference gradient with replicated borders.
    fn gradient(&self) -> (Image, Image) {
        let mut gx = vec![0.0; self.data.len()];
        let mut gy = vec![0.0; self.data.len()];
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                let i = y as usize * self.w + x as usize;
                gx[i] = 0.5 * (self.at(x + 1, y) - self.at(x - 1, y));
                gy[i] = 0.5 * (self.at(x, y + 1) - self.at(x, y - 1));
            }
        }
        (self.with(gx), self.with(gy))
    }

    fn with(&self, data: Vec<f32>) -> Image {
        Image {
            w: self.w,
            h: self.h,
            data,
        }
    }

    fn gaussian_blur(&self, sigma: f32) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut k: Vec<f32> = (-radius..=radius)
            .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f32 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= total);
        let mut tmp = vec![0.0; self.data.len()];
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                tmp[y as usize * self.w + x as usize] = (-radius..=radius)
                    .map(|d| k[(d + radius) as usize] * self.at(x + d, y))
                    .sum();
            }
        }
        let tmp = self.with(tmp);
        let mut out = vec![0.0; self.data.len()];
        for y in 0..self.h as isize {
            for x in 0..self.w as isize {
                out[y as usize * self.w + x as usize] = (-radius..=radius)
                    .map(|d| k[(d + radius) as usize] * tmp.at(x, y + d))
                    .sum();
            }
        }
        self.with(out)
    }

    /// Bilinear resampling to `w × h` with pixel-centre alignment.
    fn resize(&self, w: usize, h: usize) -> Image {
        let (sx, sy) = (self.w as f32 / w as f32, self.h as f32 / h as f32);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(self.sample((x as f32 + 0.5) * sx - 0.5, (y as f32 + 0.5) * sy - 0.5));
            }
        }
        Image { w, h, data }
    }

    /// Blur against aliasing, then resample.
    fn downsample(&self, scale: f32, w: usize, h: usize) -> Image {
        let sigma = 0.6 * (1.0 / (scale * scale) - 1.0).sqrt();
        self.gaussian_blur(sigma).resize(w, h)
    }
}

fn to_image(frame: &Tensor, what: &'static str) -> Result<Image> {
    let [h, w] = frame.dims2(what)?;
    frame.check_finite(what)?;
    Ok(Image {
        w,
        h,
        data: frame.data().iter().map(|v| v * INTENSITY_SCALE).collect(),
    })
}

/// Forward-difference gradient of a flow component, zero at the far
/// border.
fn forward_gradient(u: &[f32], w: usize, h: usize, gx: &mut [f32], gy: &mut [f32]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            gx[i] = if x + 1 < w { u[i + 1] - u[i] } else { 0.0 };
            gy[i] = if y + 1 < h { u[i + w] - u[i] } else { 0.0 };
        }
    }
}

/// Negative adjoint of [`forward_gradient`].
fn divergence(px: &[f32], py: &[f32], w: usize, h: usize, out: &mut [f32]) {
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let dx = match x {
                0 => px[i],
                _ if x + 1 == w => -px[i - 1],
                _ => px[i] - px[i - 1],
            };
            let dy = match y {
                0 => py[i],
                _ if y + 1 == h => -py[i - w],
                _ => py[i] - py[i - w],
            };
            out[i] = dx + dy;
        }
    }
}

fn warp(img: &Image, u: &[f32], v: &[f32]) -> Vec<f32> {
    (0..img.h)
        .into_par_iter()
        .flat_map_iter(|y| {
            (0..img.w).map(move |x| {
                let i = y * img.w + x;
                img.sample(x as f32 + u[i], y as f32 + v[i])
            })
        })
        .collect()
}

/// `Σ |∇u| + |∇v| + λ |I1(x + w) − I0(x)|` on the scaled intensities.
fn energy(i0: &Image, i1: &Image, u: &[f32], v: &[f32], lambda: f32) -> f64 {
    let (w, h) = (i0.w, i0.h);
    let n = w * h;
    let (mut gx, mut gy) = (vec![0.0; n], vec![0.0; n]);
    let mut total = 0.0f64;
    for c in [u, v] {
        forward_gradient(c, w, h, &mut gx, &mut gy);
        total += gx
            .iter()
            .zip(&gy)
            .map(|(a, b)| ((a * a + b * b) as f64).sqrt())
            .sum::<f64>();
    }
    let warped = warp(i1, u, v);
    total
        + lambda as f64
            * warped
                .iter()
                .zip(&i0.data)
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
}

struct LevelOutput {
    energies: Vec<f64>,
}

/// Refines `(u, v)` in place on one level.
fn solve_level(
    i0: &Image,
    i1: &Image,
    u: &mut [f32],
    v: &mut [f32],
    p: &TvL1Params,
    track_energy: bool,
) -> LevelOutput {
    let (w, h) = (i0.w, i0.h);
    let n = w * h;
    let (i1x, i1y) = i1.gradient();
    let (mut p11, mut p12, mut p21, mut p22) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (mut gx, mut gy, mut div) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let (mut v1, mut v2) = (vec![0.0f32; n], vec![0.0f32; n]);
    let lt = p.lambda * p.theta;
    let taut = p.tau / p.theta;
    let mut energies = Vec::new();
    let mut current = if track_energy {
        Some(energy(i0, i1, u, v, p.lambda))
    } else {
        None
    };

    for _ in 0..p.warps {
        let (u_prev, v_prev) = (u.to_vec(), v.to_vec());
        let i1w = warp(i1, u, v);
        let i1wx = warp(&i1x, u, v);
        let i1wy = warp(&i1y, u, v);
        let grad: Vec<f32> = i1wx.iter().zip(&i1wy).map(|(a, b)| a * a + b * b).collect();
        let rho_c: Vec<f32> = (0..n)
            .map(|i| i1w[i] - i1wx[i] * u[i] - i1wy[i] * v[i] - i0.data[i])
            .collect();

        for _ in 0..p.inner_iterations {
            for i in 0..n {
                let rho = rho_c[i] + i1wx[i] * u[i] + i1wy[i] * v[i];
                let (mut d1, mut d2) = (0.0, 0.0);
                if rho < -lt * grad[i] {
                    d1 = lt * i1wx[i];
                    d2 = lt * i1wy[i];
                } else if rho > lt * grad[i] {
                    d1 = -lt * i1wx[i];
                    d2 = -lt * i1wy[i];
                } else if grad[i] > GRAD_IS_ZERO {
                    let f = -rho / grad[i];
                    d1 = f * i1wx[i];
                    d2 = f * i1wy[i];
                }
                v1[i] = u[i] + d1;
                v2[i] = v[i] + d2;
            }
            divergence(&p11, &p12, w, h, &mut div);
            for i in 0..n {
                u[i] = v1[i] + p.theta * div[i];
            }
            divergence(&p21, &p22, w, h, &mut div);
            for i in 0..n {
                v[i] = v2[i] + p.theta * div[i];
            }
            for (c, (px, py)) in [(&*u, (&mut p11, &mut p12)), (&*v, (&mut p21, &mut p22))] {
                forward_gradient(c, w, h, &mut gx, &mut gy);
                for i in 0..n {
                    let norm = 1.0 + taut * (gx[i] * gx[i] + gy[i] * gy[i]).sqrt();
                    px[i] = (px[i] + taut * gx[i]) / norm;
                    py[i] = (py[i] + taut * gy[i]) / norm;
                }
            }
        }

        if let Some(before) = current {
            let after = energy(i0, i1, u, v, p.lambda);
            if after > before {
                // The linearization overshot: keep the previous flow and
                // stop warping on this level.
                u.copy_from_slice(&u_prev);
                v.copy_from_slice(&v_prev);
                energies.push(before);
                break;
            }
            energies.push(after);
            current = Some(after);
        }
    }
    LevelOutput { energies }
}

/// Flow from `frame_a` to `frame_b` (grayscale `H × W` in `[0, 1]`):
/// `frame_b(x + u, y + v) ≈ frame_a(x, y)`.
pub fn tvl1(frame_a: &Tensor, frame_b: &Tensor, params: &TvL1Params) -> Result<FlowField> {
    Ok(tvl1_with_energy(frame_a, frame_b, params)?.flow)
}

pub fn tvl1_with_energy(
    frame_a: &Tensor,
    frame_b: &Tensor,
    params: &TvL1Params,
) -> Result<FlowResult> {
    params.validate()?;
    if frame_a.shape() != frame_b.shape() {
        return Err(Error::shape("tvl1", frame_a.shape(), frame_b.shape()));
    }
    let i0 = to_image(frame_a, "tvl1 frame_a")?;
    let i1 = to_image(frame_b, "tvl1 frame_b")?;
    if i0.w < params.min_size || i0.h < params.min_size {
        return Err(Error::invalid(
            "tvl1",
            format!(
                "frames are {}x{}, below the {} px minimum",
                i0.w, i0.h, params.min_size
            ),
        ));
    }

    let mut pyramid = vec![(i0, i1)];
    while pyramid.len() < params.levels {
        let (a, b) = pyramid.last().unwrap();
        let w = (a.w as f32 * params.scale).round() as usize;
        let h = (a.h as f32 * params.scale).round() as usize;
        if w < params.min_size || h < params.min_size {
            break;
        }
        let next = (
            a.downsample(params.scale, w, h),
            b.downsample(params.scale, w, h),
        );
        pyramid.push(next);
    }

    let (cw, ch) = {
        let top = &pyramid.last().unwrap().0;
        (top.w, top.h)
    };
    let mut u = vec![0.0f32; cw * ch];
    let mut v = vec![0.0f32; cw * ch];
    let mut energies = Vec::new();
    for level in (0..pyramid.len()).rev() {
        let (a, b) = &pyramid[level];
        if u.len() != a.w * a.h {
            let (pw, ph) = {
                let prev = &pyramid[level + 1].0;
                (prev.w, prev.h)
            };
            let up = |c: &[f32], factor: f32| -> Vec<f32> {
                let img = Image {
                    w: pw,
                    h: ph,
                    data: c.to_vec(),
                };
                img.resize(a.w, a.h)
                    .data
                    .into_iter()
                    .map(|x| x * factor)
                    .collect()
            };
            u = up(&u, a.w as f32 / pw as f32);
            v = up(&v, a.h as f32 / ph as f32);
        }
        let out = solve_level(a, b, &mut u, &mut v, params, level == 0);
        if level == 0 {
            energies = out.energies;
        }
    }
    let c = params.clamp;
    u.iter_mut()
        .chain(v.iter_mut())
        .for_each(|x| *x = x.clamp(-c, c));
    let (w, h) = (pyramid[0].0.w, pyramid[0].0.h);
    Ok(FlowResult {
        flow: FlowField {
            width: w,
            height: h,
            u,
            v,
        },
        energies,
    })
}

/// ITU-R 601 luma of a `(3, H, W)` frame, as `(H, W)`.
pub fn rgb_to_gray(frame: &Tensor) -> Result<Tensor> {
    let &[3, h, w] = frame.shape() else {
        return Err(Error::invalid(
            "rgb_to_gray",
            format!("expected (3, H, W), got {:?}", frame.shape()),
        ));
    };
    let n = h * w;
    let d = frame.data();
    let gray = (0..n)
        .map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i])
        .collect();
    Tensor::new(vec![h, w], gray)
}

/// Flows between consecutive frames, stacked as `(2(T−1), H, W)` with
/// channels `u1, v1, u2, v2, ...` divided by the clamp bound so values lie
/// in `[−1, 1]`.
pub fn flow_stack(frames: &[Tensor], params: &TvL1Params) -> Result<Tensor> {
    if frames.len() < 2 {
        return Err(Error::invalid("flow_stack", "need at least two frames"));
    }
    let [h, w] = frames[0].dims2("flow_stack")?;
    let flows: Vec<FlowField> = frames
        .par_windows(2)
        .map(|pair| tvl1(&pair[0], &pair[1], params))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(2 * flows.len() * h * w);
    for f in &flows {
        data.extend(f.u.iter().map(|x| x / params.clamp));
        data.extend(f.v.iter().map(|x| x / params.clamp));
    }
    Tensor::new(vec![2 * flows.len(), h, w], data)
}

//! Independent reference implementations used as test oracles. Nothing here
//! calls into the optimized code paths under test.
#![allow(dead_code)]

use inflate3d_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smooth random texture in `[0, 1]`, periodic so circular shifts are exact.
pub fn texture(h: usize, w: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    let mut img: Vec<f32> = (0..h * w).map(|_| r.random::<f32>()).collect();
    for _ in 0..2 {
        let src = img.clone();
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in [h - 1, 0, 1] {
                    for dx in [w - 1, 0, 1] {
                        s += src[((y + dy) % h) * w + (x + dx) % w];
                    }
                }
                img[y * w + x] = s / 9.0;
            }
        }
    }
    let (lo, hi) = img
        .iter()
        .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    img.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// `out(x, y) = img(x − dx, y − dy)` with wraparound, so the flow from
/// `img` to `out` is `(dx, dy)`.
pub fn circular_shift(img: &[f32], h: usize, w: usize, dx: isize, dy: isize) -> Vec<f32> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
            let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
            out[y * w + x] = img[sy * w + sx];
        }
    }
    out
}

/// Indices of the central `frac` region of an `h × w` grid.
pub fn central_region(h: usize, w: usize, frac: f32) -> impl Iterator<Item = usize> {
    let my = ((1.0 - frac) / 2.0 * h as f32).round() as usize;
    let mx = ((1.0 - frac) / 2.0 * w as f32).round() as usize;
    (my..h - my).flat_map(move |y| (mx..w - mx).map(move |x| y * w + x))
}

pub fn tensor(shape: &[usize], data: Vec<f32>) -> Tensor {
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_tensor(shape: &[usize], r: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    tensor(
        shape,
        (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect(),
    )
}

use inflate3d_core::graph::{infer_shapes, nominal_input_shapes, GraphSpec, Op};
use inflate3d_core::ops::{conv3d_forward, pool3d_forward, ConvSpec, Padding, PoolKind, PoolSpec};

/// `(output, pad_before)` for one axis, written out from the padding rules.
fn axis(input: usize, k: usize, s: usize, pad: Padding) -> (usize, usize) {
    match pad {
        Padding::Same => {
            let out = input.div_ceil(s);
            let total = ((out - 1) * s + k).saturating_sub(input);
            (out, total / 2)
        }
        Padding::Valid => ((input - k) / s + 1, 0),
    }
}

/// Direct six-loop correlation; kernels may be 4D when `kT = 1`.
pub fn naive_conv3d(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Tensor {
    let s = x.shape();
    let (n, c, t, h, wd) = (s[0], s[1], s[2], s[3], s[4]);
    let ws = w.shape();
    let (o, kt, kh, kw) = if ws.len() == 5 {
        (ws[0], ws[2], ws[3], ws[4])
    } else {
        (ws[0], 1, ws[2], ws[3])
    };
    let (ot, pt) = axis(t, kt, spec.stride[0], spec.padding[0]);
    let (oh, ph) = axis(h, kh, spec.stride[1], spec.padding[1]);
    let (ow, pw) = axis(wd, kw, spec.stride[2], spec.padding[2]);
    let xd = x.data();
    let wdata = w.data();
    let mut out = vec![0.0f32; n * o * ot * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for zt in 0..ot {
                for zy in 0..oh {
                    for zx in 0..ow {
                        let mut acc = 0.0f64;
                        for ic in 0..c {
                            for dt in 0..kt {
                                let it = (zt * spec.stride[0] + dt) as isize - pt as isize;
                                if it < 0 || it >= t as isize {
                                    continue;
                                }
                                for dy in 0..kh {
                                    let iy = (zy * spec.stride[1] + dy) as isize - ph as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for dx in 0..kw {
                                        let ix = (zx * spec.stride[2] + dx) as isize - pw as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xv = xd[(((b * c + ic) * t + it as usize) * h
                                            + iy as usize)
                                            * wd
                                            + ix as usize];
                                        let wv =
                                            wdata[(((oc * c + ic) * kt + dt) * kh + dy) * kw + dx];
                                        acc += xv as f64 * wv as f64;
                                    }
                                }
                            }
                        }
                        out[(((b * o + oc) * ot + zt) * oh + zy) * ow + zx] = acc as f32;
                    }
                }
            }
        }
    }
    tensor(&[n, o, ot, oh, ow], out)
}

/// Direct pooling over in-bounds window elements only.
pub fn naive_pool3d(x: &Tensor, spec: &PoolSpec) -> Tensor {
    let s = x.shape();
    let (n, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let [kt, kh, kw] = spec.kernel;
    let (ot, pt) = axis(t, kt, spec.stride[0], spec.padding[0]);
    let (oh, ph) = axis(h, kh, spec.stride[1], spec.padding[1]);
    let (ow, pw) = axis(w, kw, spec.stride[2], spec.padding[2]);
    let mut out = Vec::with_capacity(n * c * ot * oh * ow);
    for nc in 0..n * c {
        for zt in 0..ot {
            for zy in 0..oh {
                for zx in 0..ow {
                    let mut vals = Vec::new();
                    for dt in 0..kt {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let it = (zt * spec.stride[0] + dt) as isize - pt as isize;
                                let iy = (zy * spec.stride[1] + dy) as isize - ph as isize;
                                let ix = (zx * spec.stride[2] + dx) as isize - pw as isize;
                                if (0..t as isize).contains(&it)
                                    && (0..h as isize).contains(&iy)
                                    && (0..w as isize).contains(&ix)
                                {
                                    vals.push(
                                        x.data()[((nc * t + it as usize) * h + iy as usize) * w
                                            + ix as usize],
                                    );
                                }
                            }
                        }
                    }
                    out.push(match spec.kind {
                        PoolKind::Max => vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
                        PoolKind::Avg => {
                            (vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64) as f32
                        }
                    });
                }
            }
        }
    }
    tensor(&[n, c, ot, oh, ow], out)
}

/// Central-difference directional derivative of `f` at `x` along `dir`.
pub fn directional_fd(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, dir: &Tensor, eps: f32) -> f64 {
    let shifted = |sign: f32| -> Tensor {
        let data = x
            .data()
            .iter()
            .zip(dir.data())
            .map(|(a, d)| a + sign * eps * d)
            .collect();
        tensor(x.shape(), data)
    };
    let central = |h: f32| (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * (h * eps) as f64);
    // Richardson extrapolation cancels the O(eps^2) term
    (4.0 * central(0.5) - central(1.0)) / 3.0
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// `Σ r ⊙ y` in double precision.
pub fn weighted_sum(y: &Tensor, r: &Tensor) -> f64 {
    y.data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum()
}

/// Values spaced at least 0.05 apart in random order, so small
/// perturbations never change which element of a window is largest.
pub fn separated_tensor(shape: &[usize], r: &mut impl Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f32> = (0..n)
        .map(|i| (i as f32 - n as f32 / 2.0 + 0.5) * 0.05)
        .collect();
    v.shuffle(r);
    tensor(shape, v)
}

/// Measured receptive field of a node along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbedField {
    pub extent: usize,
    pub stride: usize,
}

/// Runs a one-channel copy of `graph` on a delta input: every conv becomes
/// an all-ones kernel of the same geometry, pools become max pools,
/// merges take the elementwise maximum, and layers that pool globally
/// become windows spanning their nominal input extent. Activations are
/// clamped to `{0, 1}` so the output marks exactly the positions the
/// delta can reach. Returns one `(T, H, W)` mask per node, or `None` for
/// nodes no input reaches.
pub fn reach_masks(graph: &GraphSpec, input: [usize; 3], delta: [usize; 3]) -> Vec<Option<Tensor>> {
    let nominal = infer_shapes(graph, &nominal_input_shapes(graph)).unwrap();
    let binarize = |t: Tensor| t.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let mut masks: Vec<Option<Tensor>> = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let ins: Vec<&Tensor> = node
            .inputs
            .iter()
            .filter_map(|&j| masks[j].as_ref())
            .collect();
        let m = match &node.op {
            Op::Input { .. } => {
                let [t, h, w] = input;
                let mut x = Tensor::zeros(vec![1, 1, t, h, w]);
                x.data_mut()[(delta[0] * h + delta[1]) * w + delta[2]] = 1.0;
                Some(x)
            }
            _ if ins.is_empty() => None,
            Op::Conv { spec, .. } => {
                let k = Tensor::full(
                    vec![1, 1, spec.kernel[0], spec.kernel[1], spec.kernel[2]],
                    1.0,
                );
                let spec = ConvSpec {
                    use_bias: false,
                    ..*spec
                };
                Some(binarize(conv3d_forward(ins[0], &k, &spec).unwrap()))
            }
            Op::Pool(spec) => {
                let spec = PoolSpec {
                    kind: PoolKind::Max,
                    ..*spec
                };
                Some(pool3d_forward(ins[0], &spec).unwrap().0)
            }
            Op::Concat | Op::Add | Op::Average => {
                let mut acc = ins[0].clone();
                for other in &ins[1..] {
                    acc.data_mut()
                        .iter_mut()
                        .zip(other.data())
                        .for_each(|(a, b)| *a = a.max(*b));
                }
                Some(acc)
            }
            Op::Mean | Op::Linear { .. } | Op::Lstm { .. } => {
                let src = nominal[node.inputs[0]];
                let k = match node.op {
                    Op::Lstm { .. } => [src[1], 1, 1],
                    _ => [src[1], src[2], src[3]],
                };
                let spec = PoolSpec::new(PoolKind::Max, k, k, Padding::Valid);
                Some(pool3d_forward(ins[0], &spec).unwrap().0)
            }
            _ => Some(ins[0].clone()),
        };
        masks.push(m);
    }
    masks
}

/// Extent and cumulative stride of every node along `axis` (0 = time,
/// 1 = height, 2 = width), probed with deltas at `scan` consecutive
/// positions around the middle of an input of extents `input`.
pub fn probe_fields(
    graph: &GraphSpec,
    input: [usize; 3],
    axis: usize,
    scan: usize,
) -> Vec<Option<ProbedField>> {
    let centre = [input[0] / 2, input[1] / 2, input[2] / 2];
    let start = centre[axis] - scan / 2;
    // per node, per delta position: (position, reached output indices on the axis)
    let mut hits: Vec<Vec<(usize, Vec<usize>)>> = vec![Vec::new(); graph.nodes.len()];
    for p in start..start + scan {
        let mut delta = centre;
        delta[axis] = p;
        for (i, m) in reach_masks(graph, input, delta).into_iter().enumerate() {
            let Some(m) = m else { continue };
            let s = m.shape();
            let (t, h, w) = (s[2], s[3], s[4]);
            let mut reached = std::collections::BTreeSet::new();
            for zt in 0..t {
                for zy in 0..h {
                    for zx in 0..w {
                        if m.data()[(zt * h + zy) * w + zx] > 0.0 {
                            reached.insert([zt, zy, zx][axis]);
                        }
                    }
                }
            }
            hits[i].push((p, reached.into_iter().collect()));
        }
    }
    hits.into_iter()
        .map(|h| {
            if h.is_empty() || h.iter().any(|(_, r)| r.is_empty()) {
                return None;
            }
            // the last reached index advances once every `stride` positions
            let steps: Vec<usize> = h
                .windows(2)
                .filter(|w| w[1].1.last() != w[0].1.last())
                .map(|w| w[1].0)
                .collect();
            let stride = match steps.as_slice() {
                [a, b, ..] => b - a,
                _ => scan,
            };
            let offsets: Vec<isize> = h
                .iter()
                .flat_map(|(p, r)| r.iter().map(move |&o| *p as isize - (o * stride) as isize))
                .collect();
            let extent =
                (offsets.iter().max().unwrap() - offsets.iter().min().unwrap() + 1) as usize;
            Some(ProbedField { extent, stride })
        })
        .collect()
}

/// Gives every batch-norm layer non-trivial scale, offset and running
/// statistics so inference-mode checks exercise them.
pub fn randomize_batchnorm(ckpt: &mut inflate3d_core::Checkpoint, r: &mut impl Rng) {
    let names: Vec<String> = ckpt.names().map(str::to_string).collect();
    for name in names {
        let range = if name.ends_with("/gamma") {
            0.5..1.5
        } else if name.ends_with("/beta") || name.ends_with("/running_mean") {
            -0.2..0.2
        } else if name.ends_with("/running_var") {
            0.5..2.0
        } else {
            continue;
        };
        for v in ckpt.get_mut(&name).unwrap().data_mut() {
            *v = r.random_range(range.clone());
        }
    }
}

/// Parses `.flo` bytes by hand, independently of the library reader.
pub fn parse_flo(bytes: &[u8]) -> (usize, usize, Vec<(f32, f32)>) {
    assert_eq!(
        f32::from_le_bytes(bytes[..4].try_into().unwrap()),
        202021.25
    );
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let vals: Vec<f32> = bytes[12..]
        .chunks(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(vals.len(), 2 * w * h);
    (w, h, vals.chunks(2).map(|p| (p[0], p[1])).collect())
}

pub mod checks;

//! 2D → 3D inflation: filter bootstrapping, graph conversion and the
//! boring-video fixed-point check.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::analysis::{nominal_input_shapes, shape_of};
use crate::graph::{forward, receptive_field, Family, GraphSpec, NodeShape, Op};
use crate::ops::{axis_geometry, Mode, Padding, PoolKind};
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f32 = 1e-4;

/// How each 2D window gains a temporal axis.
#[derive(Clone, Debug, PartialEq)]
pub struct InflationRule {
    /// Temporal kernel extent; `None` copies the spatial extent.
    pub extent: Option<usize>,
    /// Temporal stride; `None` copies the spatial stride.
    pub stride: Option<usize>,
    /// Per-layer `(extent, stride)`; a key matches a layer id exactly or as
    /// its last path components (`pool1` matches `rgb/pool1`).
    pub overrides: BTreeMap<String, (usize, usize)>,
    /// Temporal padding of inflated convolutions and max pools.
    pub padding: Padding,
    /// Frames declared on the inflated input nodes.
    pub frames: usize,
}

impl InflationRule {
    /// `N × N → N × N × N` with matching strides, except that the first two
    /// max pools do not pool in time and the final average pool spans two
    /// frames.
    pub fn i3d(frames: usize) -> Self {
        let overrides = [("pool1", (1, 1)), ("pool2", (1, 1)), ("avgpool", (2, 1))]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        InflationRule {
            extent: None,
            stride: None,
            overrides,
            padding: Padding::Same,
            frames,
        }
    }

    /// Unit temporal extent and stride everywhere: a 3D graph that applies
    /// the 2D network to every frame independently.
    pub fn degenerate(frames: usize) -> Self {
        InflationRule {
            extent: Some(1),
            stride: Some(1),
            overrides: BTreeMap::new(),
            padding: Padding::Same,
            frames,
        }
    }

    fn lookup(&self, id: &str) -> Option<(usize, usize)> {
        self.overrides
            .iter()
            .find(|(k, _)| id == k.as_str() || id.ends_with(&format!("/{k}")))
            .map(|(_, v)| *v)
    }

    fn temporal(
        &self,
        id: &str,
        spatial_extent: usize,
        spatial_stride: usize,
    ) -> Result<(usize, usize)> {
        let (n, s) = self.lookup(id).unwrap_or((
            self.extent.unwrap_or(spatial_extent),
            self.stride.unwrap_or(spatial_stride),
        ));
        if n == 0 || s == 0 {
            return Err(Error::invalid(
                "inflate",
                format!("layer `{id}`: temporal extent and stride must be at least 1"),
            ));
        }
        Ok((n, s))
    }

    /// Parses flat `key = value` lines. Keys: `preset` (`i3d` or
    /// `degenerate`, applied first), `extent`, `stride` (a number or
    /// `spatial`), `padding` (`same`/`valid`), `frames`, and
    /// `override.<layer> = <extent>,<stride>`. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, reason: String| {
            Error::invalid("inflation rule", format!("line {line}: {reason}"))
        };
        let pairs = parse_key_values(text).map_err(|(l, r)| bad(l, r))?;
        let mut rule = InflationRule::i3d(64);
        if let Some((line, preset)) = pairs
            .iter()
            .find(|(_, k, _)| k == "preset")
            .map(|(l, _, v)| (*l, v))
        {
            let frames = rule.frames;
            rule = match preset.as_str() {
                "i3d" => InflationRule::i3d(frames),
                "degenerate" => InflationRule::degenerate(frames),
                other => return Err(bad(line, format!("unknown preset `{other}`"))),
            };
        }
        let num = |line: usize, v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| bad(line, format!("`{v}` is not a count")))
        };
        let spatial_or = |line: usize, v: &str| -> Result<Option<usize>> {
            if v == "spatial" {
                Ok(None)
            } else {
                num(line, v).map(Some)
            }
        };
        for (line, key, value) in &pairs {
            let line = *line;
            match key.as_str() {
                "preset" => {}
                "extent" => rule.extent = spatial_or(line, value)?,
                "stride" => rule.stride = spatial_or(line, value)?,
                "frames" => rule.frames = num(line, value)?,
                "padding" => {
                    rule.padding = match value.as_str() {
                        "same" => Padding::Same,
                        "valid" => Padding::Valid,
                        _ => return Err(bad(line, format!("unknown padding `{value}`"))),
                    }
                }
                k if k.starts_with("override.") => {
                    let layer = &k["override.".len()..];
                    let (n, s) = value
                        .split_once(',')
                        .ok_or_else(|| bad(line, "override needs `extent,stride`".into()))?;
                    let v = (num(line, n.trim())?, num(line, s.trim())?);
                    rule.overrides.insert(layer.to_string(), v);
                }
                other => return Err(bad(line, format!("unknown key `{other}`"))),
            }
        }
        if rule.extent == Some(0) || rule.stride == Some(0) || rule.frames == 0 {
            return Err(Error::invalid(
                "inflation rule",
                "extent, stride and frames must be at least 1",
            ));
        }
        Ok(rule)
    }
}

/// `(line number, key, value)` for every non-empty, non-comment line.
pub(crate) fn parse_key_values(
    text: &str,
) -> std::result::Result<Vec<(usize, String, String)>, (usize, String)> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| (i + 1, format!("expected `key = value`, got `{line}`")))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Repeats a `(oC, iC, kH, kW)` kernel `n` times along a new temporal axis
/// and divides by `n`, giving `(oC, iC, n, kH, kW)`.
pub fn inflate_kernel(kernel2d: &Tensor, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid(
            "inflate_kernel",
            "temporal extent must be at least 1",
        ));
    }
    let &[o, i, kh, kw] = kernel2d.shape() else {
        return Err(Error::invalid(
            "inflate_kernel",
            format!(
                "expected a (oC, iC, kH, kW) kernel, got {:?}",
                kernel2d.shape()
            ),
        ));
    };
    let plane = kh * kw;
    let mut data = Vec::with_capacity(kernel2d.len() * n);
    for slab in kernel2d.data().chunks(plane) {
        for _ in 0..n {
            data.extend(slab.iter().map(|&v| v / n as f32));
        }
    }
    Tensor::new(vec![o, i, n, kh, kw], data)
}

/// Turns an image `(C, H, W)` into a clip `(1, C, T, H, W)` of `t` copies.
pub fn make_boring_video(image: &Tensor, t: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::invalid(
            "make_boring_video",
            "image must be (C, H, W)",
        ));
    };
    if t == 0 {
        return Err(Error::invalid(
            "make_boring_video",
            "need at least one frame",
        ));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(image.len() * t);
    for ch in image.data().chunks(plane) {
        for _ in 0..t {
            data.extend_from_slice(ch);
        }
    }
    Tensor::new(vec![1, c, t, h, w], data)
}

/// Replaces the input-channel axis of a first-layer kernel with
/// `new_in_channels` copies of its channel mean, scaled by
/// `old / new` so inputs with identical channels give the same response.
pub fn adapt_input_conv(kernel: &Tensor, new_in_channels: usize) -> Result<Tensor> {
    if new_in_channels == 0 {
        return Err(Error::invalid(
            "adapt_input_conv",
            "need at least one input channel",
        ));
    }
    let s = kernel.shape();
    if s.len() < 3 {
        return Err(Error::invalid(
            "adapt_input_conv",
            "kernel needs (oC, iC, ...) axes",
        ));
    }
    let (o, i) = (s[0], s[1]);
    let inner: usize = s[2..].iter().product();
    let scale = i as f32 / new_in_channels as f32;
    let mut data = Vec::with_capacity(o * new_in_channels * inner);
    for filt in kernel.data().chunks(i * inner) {
        let mean: Vec<f32> = (0..inner)
            .map(|k| (0..i).map(|c| filt[c * inner + k]).sum::<f32>() / i as f32)
            .collect();
        for _ in 0..new_in_channels {
            data.extend(mean.iter().map(|&m| m * scale));
        }
    }
    let mut shape = s.to_vec();
    shape[1] = new_in_channels;
    Tensor::new(shape, data)
}

/// Converts a 2D graph and weights into their inflated 3D counterparts.
/// Convolutions are inflated with [`inflate_kernel`]; everything else is
/// copied.
pub fn inflate_graph(
    graph2d: &GraphSpec,
    weights2d: &Checkpoint,
    rule: &InflationRule,
) -> Result<(GraphSpec, Checkpoint)> {
    if rule.frames == 0 {
        return Err(Error::invalid("inflate", "rule declares zero frames"));
    }
    let mut g = graph2d.clone();
    if g.family == Family::Inception2d {
        g.family = Family::I3d;
    }
    for node in &mut g.nodes {
        let id = node.id.clone();
        match &mut node.op {
            Op::Input { frames, .. } => *frames = rule.frames,
            Op::Conv { spec, planar, .. } => {
                if spec.kernel[0] != 1 || spec.stride[0] != 1 {
                    return Err(Error::invalid(
                        "inflate",
                        format!("layer `{id}` already has a temporal extent"),
                    ));
                }
                let (n, s) = rule.temporal(&id, spec.kernel[1], spec.stride[1])?;
                spec.kernel[0] = n;
                spec.stride[0] = s;
                spec.padding[0] = rule.padding;
                *planar = false;
            }
            Op::Pool(spec) => {
                let (n, s) = rule.temporal(&id, spec.kernel[1], spec.stride[1])?;
                spec.kernel[0] = n;
                spec.stride[0] = s;
                spec.padding[0] = if spec.padding[1] == Padding::Valid {
                    Padding::Valid
                } else {
                    rule.padding
                };
            }
            Op::Lstm { .. } => {
                return Err(Error::invalid(
                    "inflate",
                    format!("layer `{id}` is an LSTM, which cannot be inflated"),
                ))
            }
            _ => {}
        }
    }
    clamp_valid_avg_pools(&mut g)?;
    g.validate()?;

    let mut w = Checkpoint::new(g.family.name());
    w.meta = weights2d.meta.clone();
    w.set_graph(&g);
    for node in &g.nodes {
        for p in crate::graph::node_params(node) {
            let src = weights2d.get(&p.name)?;
            let t = match &node.op {
                Op::Conv { spec, .. } if p.name.ends_with("/weight") => {
                    let src = match src.shape() {
                        &[o, i, 1, kh, kw] => src.clone().reshape(vec![o, i, kh, kw])?,
                        _ => src.clone(),
                    };
                    inflate_kernel(&src, spec.kernel[0])
                        .map_err(|e| Error::at_layer(&node.id, e))?
                }
                _ => src.clone(),
            };
            if t.shape() != p.shape.as_slice() {
                return Err(Error::shape("inflate weights", &p.shape, t.shape()));
            }
            w.insert(p.name, t);
        }
    }
    Ok((g, w))
}

/// Shrinks valid-padded average-pool kernels to the extent of their input
/// at the graph's nominal geometry.
pub(crate) fn clamp_valid_avg_pools(g: &mut GraphSpec) -> Result<()> {
    let inputs = nominal_input_shapes(g);
    let mut shapes: Vec<NodeShape> = Vec::with_capacity(g.nodes.len());
    for i in 0..g.nodes.len() {
        if let Op::Pool(spec) = &g.nodes[i].op {
            if spec.kind == PoolKind::Avg {
                let src = shapes[g.nodes[i].inputs[0]];
                let mut spec = *spec;
                for a in 0..3 {
                    if spec.padding[a] == Padding::Valid {
                        spec.kernel[a] = spec.kernel[a].min(src[a + 1]);
                    }
                }
                g.nodes[i].op = Op::Pool(spec);
            }
        }
        let s = shape_of(g, i, &shapes, &inputs)?;
        shapes.push(s);
    }
    Ok(())
}

/// Half-open range of output time indices whose temporal receptive field
/// lies entirely inside the clip, per node. `None` where no position is
/// free of temporal padding.
pub fn valid_time_ranges(
    graph: &GraphSpec,
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Vec<Option<(usize, usize)>>> {
    let inputs: Vec<NodeShape> = nominal_input_shapes(graph)
        .into_iter()
        .map(|s| [s[0], frames, height, width])
        .collect();
    let mut shapes: Vec<NodeShape> = Vec::with_capacity(graph.nodes.len());
    let mut ranges: Vec<Option<(usize, usize)>> = Vec::with_capacity(graph.nodes.len());
    for (i, node) in graph.nodes.iter().enumerate() {
        let shape = shape_of(graph, i, &shapes, &inputs)?;
        let src = node.inputs.first().map(|&j| (shapes[j][1], ranges[j]));
        let window = |k: usize, s: usize, pad: Padding| -> Result<Option<(usize, usize)>> {
            let (t_in, r) = src.unwrap();
            let Some((lo, hi)) = r else { return Ok(None) };
            let p = axis_geometry(t_in, k, s, pad)?.pad_before;
            // output o reads [o*s - p, o*s - p + k)
            let first = (lo + p).div_ceil(s);
            if hi + p < k {
                return Ok(None);
            }
            let last = ((hi + p - k) / s + 1).min(shape[1]);
            Ok((first < last).then_some((first, last)))
        };
        let range = match &node.op {
            Op::Input { .. } => Some((0, shape[1])),
            Op::Conv { spec, .. } => window(spec.kernel[0], spec.stride[0], spec.padding[0])?,
            Op::Pool(spec) => window(spec.kernel[0], spec.stride[0], spec.padding[0])?,
            Op::Concat | Op::Add | Op::Average => {
                node.inputs
                    .iter()
                    .try_fold(Some((0, shape[1])), |acc, &j| {
                        Ok::<_, Error>(match (acc, ranges[j]) {
                            (Some((a, b)), Some((c, d))) if a.max(c) < b.min(d) => {
                                Some((a.max(c), b.min(d)))
                            }
                            _ => None,
                        })
                    })?
            }
            Op::Mean | Op::Linear { .. } | Op::Lstm { .. } => {
                let (t_in, r) = src.unwrap();
                (r == Some((0, t_in))).then_some((0, shape[1]))
            }
            _ => src.unwrap().1,
        };
        shapes.push(shape);
        ranges.push(range);
    }
    Ok(ranges)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDeviation {
    pub layer: String,
    /// Clip length used.
    pub frames: usize,
    /// Number of temporal positions compared.
    pub positions: usize,
    pub max_deviation: f32,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedPointReport {
    pub layers: Vec<LayerDeviation>,
    pub tolerance: f32,
}

impl FixedPointReport {
    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.passed)
    }

    pub fn max_deviation(&self) -> f32 {
        self.layers
            .iter()
            .map(|l| l.max_deviation)
            .fold(0.0, f32::max)
    }

    pub fn layer(&self, id: &str) -> Option<&LayerDeviation> {
        self.layers.iter().find(|l| l.layer == id)
    }

    pub fn to_table(&self) -> String {
        let w = self
            .layers
            .iter()
            .map(|l| l.layer.len())
            .max()
            .unwrap_or(5)
            .max(5);
        let mut out = format!(
            "{:<w$}  {:>5}  {:>13}  result\n",
            "layer", "T", "max deviation"
        );
        for l in &self.layers {
            let verdict = if l.passed { "pass" } else { "FAIL" };
            writeln!(
                out,
                "{:<w$}  {:>5}  {:>13.3e}  {verdict}",
                l.layer, l.frames, l.max_deviation
            )
            .unwrap();
        }
        let overall = if self.passed() { "pass" } else { "FAIL" };
        writeln!(
            out,
            "overall: {overall} (max {:.3e}, tolerance {:.1e})",
            self.max_deviation(),
            self.tolerance
        )
        .unwrap();
        out
    }
}

/// Layers compared by [`verify_fixed_point`]: every node present in both
/// graphs, except inputs and anything at or after a global temporal
/// reduction (whose output necessarily mixes in clip boundaries).
fn compared_layers(graph2d: &GraphSpec, graph3d: &GraphSpec) -> Vec<usize> {
    let mut global: BTreeSet<usize> = BTreeSet::new();
    for (i, n) in graph3d.nodes.iter().enumerate() {
        if matches!(n.op, Op::Mean | Op::Linear { .. } | Op::Lstm { .. })
            || n.inputs.iter().any(|j| global.contains(j))
        {
            global.insert(i);
        }
    }
    graph3d
        .nodes
        .iter()
        .enumerate()
        .filter(|(i, n)| {
            !global.contains(i)
                && !matches!(n.op, Op::Input { .. })
                && graph2d.node_index(&n.id).is_ok()
        })
        .map(|(i, _)| i)
        .collect()
}

/// Shortest clip for which every compared layer has a padding-free
/// temporal position.
pub fn required_frames(
    graph2d: &GraphSpec,
    graph3d: &GraphSpec,
    height: usize,
    width: usize,
) -> Result<usize> {
    let layers = compared_layers(graph2d, graph3d);
    // clips too short to pass through valid windows count as failures
    let ok = |t: usize| -> Result<bool> {
        Ok(valid_time_ranges(graph3d, t, height, width)
            .is_ok_and(|r| layers.iter().all(|&i| r[i].is_some())))
    };
    let mut hi = 1;
    while !ok(hi)? {
        hi *= 2;
        if hi > 1 << 16 {
            return Err(Error::invalid(
                "verify_fixed_point",
                "no clip length reaches every layer",
            ));
        }
    }
    let mut lo = hi / 2;
    while lo + 1 < hi {
        let mid = (lo + hi) / 2;
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Twice the temporal receptive field of `layer`, the clip length used
/// for fixed-point checks by default.
pub fn default_check_frames(graph3d: &GraphSpec, layer: &str) -> Result<usize> {
    Ok(2 * receptive_field(graph3d, layer)?.extent[0])
}

/// Runs the 2D network on `image` and the 3D network on a boring video
/// of `frames` copies (batch norm in inference mode), and compares every
/// shared layer at each temporal position unaffected by temporal padding.
pub fn verify_fixed_point(
    graph2d: &GraphSpec,
    weights2d: &Checkpoint,
    graph3d: &GraphSpec,
    weights3d: &Checkpoint,
    image: &Tensor,
    frames: usize,
    tolerance: f32,
) -> Result<FixedPointReport> {
    let &[_, h, w] = image.shape() else {
        return Err(Error::invalid(
            "verify_fixed_point",
            "image must be (C, H, W)",
        ));
    };
    if graph2d.inputs.len() != 1 || graph3d.inputs.len() != 1 {
        return Err(Error::invalid(
            "verify_fixed_point",
            "graphs must have a single input",
        ));
    }
    let required = required_frames(graph2d, graph3d, h, w)?;
    if frames < required {
        return Err(Error::invalid(
            "verify_fixed_point",
            format!("a boring video of {frames} frames is too short; the compared layers need at least {required}"),
        ));
    }
    let ranges = valid_time_ranges(graph3d, frames, h, w)?;
    let still = make_boring_video(image, 1)?;
    let video = make_boring_video(image, frames)?;
    let a2 = forward(graph2d, weights2d, &[still], Mode::Infer)?.into_values();
    let a3 = forward(graph3d, weights3d, &[video], Mode::Infer)?.into_values();

    let mut layers = Vec::new();
    for i in compared_layers(graph2d, graph3d) {
        let id = &graph3d.nodes[i].id;
        let x2 = &a2[graph2d.node_index(id)?];
        let x3 = &a3[i];
        let [n, c, t2, hh, ww] = x2.dims5("verify_fixed_point")?;
        let d3 = x3.dims5("verify_fixed_point")?;
        if t2 != 1 || [d3[0], d3[1], d3[3], d3[4]] != [n, c, hh, ww] {
            return Err(Error::shape("verify_fixed_point", x2.shape(), x3.shape()));
        }
        let (lo, hi) = ranges[i].expect("required_frames guarantees a range");
        let plane = hh * ww;
        let mut dev = 0.0f32;
        for b in 0..n * c {
            let src = &x2.data()[b * plane..(b + 1) * plane];
            for t in lo..hi {
                let off = (b * d3[2] + t) * plane;
                for (a, bb) in src.iter().zip(&x3.data()[off..off + plane]) {
                    dev = dev.max((a - bb).abs());
                }
            }
        }
        layers.push(LayerDeviation {
            layer: id.clone(),
            frames,
            positions: hi - lo,
            max_deviation: dev,
            passed: dev <= tolerance,
        });
    }
    Ok(FixedPointReport { layers, tolerance })
}

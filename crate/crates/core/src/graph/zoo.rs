//! Builders for the video architecture families and the 2D Inception-V1
//! they start from.

use serde::{Deserialize, Serialize};

use super::spec::{Family, GraphSpec, Head, Node, Op};
use crate::error::{Error, Result};
use crate::ops::{ConvSpec, Padding, PoolKind, PoolSpec};

/// Which towers an I3D graph carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Streams {
    Rgb,
    Flow,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub family: Family,
    pub num_classes: usize,
    /// Scales every hidden channel count; 1.0 is full size.
    pub width_multiplier: f64,
    /// Frames fed to the network (per stream for two-tower families; the
    /// number of time steps for per-frame families).
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Optical-flow frames stacked on the channel axis of 2D flow towers.
    pub flow_frames: usize,
    /// Source-video frames between consecutive network frames.
    pub frame_stride: usize,
    pub fps: f64,
    pub streams: Streams,
}

impl ArchConfig {
    /// The training-time geometry each family was designed for.
    pub fn full_scale(family: Family, num_classes: usize) -> Self {
        let (frames, size, flow_frames, frame_stride, streams) = match family {
            Family::Lstm => (25, 224, 0, 5, Streams::Rgb),
            Family::C3d => (16, 112, 0, 1, Streams::Rgb),
            Family::TwoStream => (1, 224, 10, 1, Streams::Both),
            Family::Fused3d => (5, 224, 10, 10, Streams::Both),
            Family::I3d => (64, 224, 0, 1, Streams::Both),
            Family::Inception2d => (1, 224, 0, 1, Streams::Rgb),
        };
        ArchConfig {
            family,
            num_classes,
            width_multiplier: 1.0,
            frames,
            height: size,
            width: size,
            channels: 3,
            flow_frames,
            frame_stride,
            fps: 25.0,
            streams,
        }
    }

    /// A reduced-width, reduced-geometry variant for desk-scale runs.
    pub fn toy(
        family: Family,
        num_classes: usize,
        width_multiplier: f64,
        frames: usize,
        size: usize,
    ) -> Self {
        let mut cfg = Self::full_scale(family, num_classes);
        cfg.width_multiplier = width_multiplier;
        cfg.frames = frames;
        cfg.height = size;
        cfg.width = size;
        if family == Family::I3d {
            cfg.streams = Streams::Rgb;
        }
        cfg
    }

    pub fn scale(&self, channels: usize) -> usize {
        scale_channels(channels, self.width_multiplier)
    }

    /// Seconds of source video spanned by one training input.
    pub fn footprint(&self) -> f64 {
        let frames = match self.family {
            Family::TwoStream => self.flow_frames.max(self.frames),
            _ => self.frames,
        };
        temporal_footprint(frames, self.frame_stride, self.fps)
    }

    /// Frames read per clip at test time and their source stride: the
    /// longest input (flow for two-stream, rgb otherwise) covers the clip.
    pub fn test_frames(&self) -> (usize, usize) {
        match self.family {
            Family::Lstm => (50, self.frame_stride),
            Family::C3d => (240, 1),
            Family::TwoStream | Family::Fused3d | Family::I3d => (250, 1),
            Family::Inception2d => (self.frames, self.frame_stride),
        }
    }

    /// Seconds of source video seen per clip at test time.
    pub fn test_footprint(&self) -> f64 {
        let (frames, stride) = self.test_frames();
        temporal_footprint(frames, stride, self.fps)
    }

    fn validate(&self) -> Result<()> {
        let w = self.width_multiplier;
        if !(w > 0.0 && w <= 1.0) {
            return Err(Error::invalid(
                "build",
                format!("width multiplier {w} outside (0, 1]"),
            ));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("build", "need at least one class"));
        }
        if self.frames == 0 {
            return Err(Error::invalid("build", "no input frames"));
        }
        if self.channels == 0 {
            return Err(Error::invalid("build", "no input channels"));
        }
        Ok(())
    }

    fn is_full_scale(&self) -> bool {
        self.width_multiplier == 1.0
    }
}

/// `max(1, ceil(w · c))`, with a small slack so exact products do not round
/// up.
pub fn scale_channels(channels: usize, width_multiplier: f64) -> usize {
    ((channels as f64 * width_multiplier - 1e-9).ceil() as usize).max(1)
}

/// `frames × stride / fps` seconds.
pub fn temporal_footprint(frames: usize, stride: usize, fps: f64) -> f64 {
    (frames * stride) as f64 / fps
}

/// Incremental graph construction with static extent tracking.
pub(crate) struct Builder {
    nodes: Vec<Node>,
    channels: Vec<usize>,
    extents: Vec<[usize; 3]>,
    inputs: Vec<usize>,
}

impl Builder {
    pub(crate) fn new() -> Self {
        Builder {
            nodes: Vec::new(),
            channels: Vec::new(),
            extents: Vec::new(),
            inputs: Vec::new(),
        }
    }

    pub(crate) fn extent(&self, node: usize) -> [usize; 3] {
        self.extents[node]
    }

    fn push(
        &mut self,
        id: String,
        op: Op,
        inputs: Vec<usize>,
        channels: usize,
        extent: [usize; 3],
    ) -> usize {
        self.nodes.push(Node { id, op, inputs });
        self.channels.push(channels);
        self.extents.push(extent);
        self.nodes.len() - 1
    }

    pub(crate) fn input(
        &mut self,
        id: &str,
        channels: usize,
        frames: usize,
        height: usize,
        width: usize,
    ) -> usize {
        let op = Op::Input {
            channels,
            frames,
            height,
            width,
        };
        let i = self.push(id.into(), op, vec![], channels, [frames, height, width]);
        self.inputs.push(i);
        i
    }

    pub(crate) fn conv(
        &mut self,
        id: &str,
        x: usize,
        out_channels: usize,
        spec: ConvSpec,
        planar: bool,
        init_std: Option<f32>,
    ) -> Result<usize> {
        let extent = spec.output_extent(self.extents[x]).map_err(|e| at(id, e))?;
        let op = Op::Conv {
            in_channels: self.channels[x],
            out_channels,
            spec,
            planar,
            init_std,
        };
        Ok(self.push(id.into(), op, vec![x], out_channels, extent))
    }

    /// Conv without bias, then batch norm and ReLU (`id`, `id/bn`,
    /// `id/relu`).
    pub(crate) fn unit(
        &mut self,
        id: &str,
        x: usize,
        out_channels: usize,
        spec: ConvSpec,
        planar: bool,
    ) -> Result<usize> {
        let c = self.conv(id, x, out_channels, spec, planar, None)?;
        self.bn_relu(id, c)
    }

    pub(crate) fn bn_relu(&mut self, id: &str, x: usize) -> Result<usize> {
        let (c, e) = (self.channels[x], self.extents[x]);
        let bn = self.push(
            format!("{id}/bn"),
            Op::BatchNorm { channels: c },
            vec![x],
            c,
            e,
        );
        Ok(self.push(format!("{id}/relu"), Op::Relu, vec![bn], c, e))
    }

    /// Valid-padded average pools have their kernel clamped to the
    /// incoming extent so reduced geometries still build.
    pub(crate) fn pool(&mut self, id: &str, x: usize, mut spec: PoolSpec) -> Result<usize> {
        let ext = self.extents[x];
        for a in 0..3 {
            if spec.kind == PoolKind::Avg && spec.padding[a] == Padding::Valid {
                spec.kernel[a] = spec.kernel[a].min(ext[a]);
            }
        }
        let extent = spec.output_extent(ext).map_err(|e| at(id, e))?;
        let c = self.channels[x];
        Ok(self.push(id.into(), Op::Pool(spec), vec![x], c, extent))
    }

    pub(crate) fn concat(&mut self, id: &str, xs: Vec<usize>) -> Result<usize> {
        let e = self.extents[xs[0]];
        if xs.iter().any(|&i| self.extents[i] != e) {
            return Err(Error::Graph(format!(
                "`{id}` concatenates maps of different extents"
            )));
        }
        let c = xs.iter().map(|&i| self.channels[i]).sum();
        Ok(self.push(id.into(), Op::Concat, xs, c, e))
    }

    pub(crate) fn average(&mut self, id: &str, xs: Vec<usize>) -> usize {
        let (c, e) = (self.channels[xs[0]], self.extents[xs[0]]);
        self.push(id.into(), Op::Average, xs, c, e)
    }

    pub(crate) fn mean(&mut self, id: &str, x: usize) -> usize {
        let c = self.channels[x];
        self.push(id.into(), Op::Mean, vec![x], c, [1, 1, 1])
    }

    pub(crate) fn softmax(&mut self, id: &str, x: usize) -> usize {
        let (c, e) = (self.channels[x], self.extents[x]);
        self.push(id.into(), Op::Softmax, vec![x], c, e)
    }

    pub(crate) fn linear(
        &mut self,
        id: &str,
        x: usize,
        out: usize,
        init_std: Option<f32>,
    ) -> usize {
        let [t, h, w] = self.extents[x];
        let op = Op::Linear {
            in_features: self.channels[x] * t * h * w,
            out_features: out,
            init_std,
        };
        self.push(id.into(), op, vec![x], out, [1, 1, 1])
    }

    pub(crate) fn lstm(&mut self, id: &str, x: usize, hidden: usize) -> Result<usize> {
        let [t, h, w] = self.extents[x];
        if h != 1 || w != 1 {
            return Err(Error::Graph(format!(
                "`{id}` needs pooled (T, 1, 1) features, got {:?}",
                [t, h, w]
            )));
        }
        let op = Op::Lstm {
            input_size: self.channels[x],
            hidden,
        };
        Ok(self.push(id.into(), op, vec![x], hidden, [t, 1, 1]))
    }

    pub(crate) fn finish(self, family: Family, output: usize, head: Head) -> Result<GraphSpec> {
        let g = GraphSpec {
            family,
            nodes: self.nodes,
            inputs: self.inputs,
            output,
            head,
        };
        g.validate()?;
        Ok(g)
    }
}

fn at(id: &str, e: Error) -> Error {
    Error::Graph(format!("layer `{id}`: {e}"))
}

/// `(name, input, 1×1, 3×3 reduce, 3×3, second reduce, second 3×3, pool proj)`.
pub const INCEPTION_TABLE: [(&str, usize, usize, usize, usize, usize, usize, usize); 9] = [
    ("3a", 192, 64, 96, 128, 16, 32, 32),
    ("3b", 256, 128, 128, 192, 32, 96, 64),
    ("4a", 480, 192, 96, 208, 16, 48, 64),
    ("4b", 512, 160, 112, 224, 24, 64, 64),
    ("4c", 512, 128, 128, 256, 24, 64, 64),
    ("4d", 512, 112, 144, 288, 32, 64, 64),
    ("4e", 528, 256, 160, 320, 32, 128, 128),
    ("5a", 832, 256, 160, 320, 32, 128, 128),
    ("5b", 832, 384, 192, 384, 48, 128, 128),
];

/// Whether an Inception tower uses 2D (`1×k×k`) or inflated (`k×k×k`)
/// windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Dims {
    Planar,
    Inflated,
}

impl Dims {
    fn conv(self, k: usize, stride: usize) -> ConvSpec {
        match self {
            Dims::Planar => ConvSpec::planar([k, k], stride, Padding::Same),
            Dims::Inflated => ConvSpec::new([k; 3], [stride; 3], Padding::Same),
        }
    }

    fn max_pool(self, k: usize, stride: usize, temporal: bool) -> PoolSpec {
        let (kt, st) = match (self, temporal) {
            (Dims::Inflated, true) => (k, stride),
            _ => (1, 1),
        };
        PoolSpec::new(
            PoolKind::Max,
            [kt, k, k],
            [st, stride, stride],
            Padding::Same,
        )
    }

    fn planar(self) -> bool {
        self == Dims::Planar
    }
}

fn p(prefix: &str, id: &str) -> String {
    format!("{prefix}{id}")
}

fn mixed(b: &mut Builder, prefix: &str, x: usize, row: usize, w: f64, dims: Dims) -> Result<usize> {
    let (name, _, c0, c1r, c1, c2r, c2, c3) = INCEPTION_TABLE[row];
    let m = p(prefix, &format!("mixed_{name}"));
    let s = |c| scale_channels(c, w);
    let b0 = b.unit(&format!("{m}/b0"), x, s(c0), dims.conv(1, 1), dims.planar())?;
    let b1 = b.unit(
        &format!("{m}/b1a"),
        x,
        s(c1r),
        dims.conv(1, 1),
        dims.planar(),
    )?;
    let b1 = b.unit(
        &format!("{m}/b1b"),
        b1,
        s(c1),
        dims.conv(3, 1),
        dims.planar(),
    )?;
    let b2 = b.unit(
        &format!("{m}/b2a"),
        x,
        s(c2r),
        dims.conv(1, 1),
        dims.planar(),
    )?;
    let b2 = b.unit(
        &format!("{m}/b2b"),
        b2,
        s(c2),
        dims.conv(3, 1),
        dims.planar(),
    )?;
    let b3 = b.pool(&format!("{m}/b3a"), x, dims.max_pool(3, 1, true))?;
    let b3 = b.unit(
        &format!("{m}/b3b"),
        b3,
        s(c3),
        dims.conv(1, 1),
        dims.planar(),
    )?;
    b.concat(&m, vec![b0, b1, b2, b3])
}

/// Inception-V1 from the stem to the last inception block. Returns the
/// index of its output node.
pub(crate) fn inception_tower(
    b: &mut Builder,
    prefix: &str,
    x: usize,
    w: f64,
    dims: Dims,
) -> Result<usize> {
    let [_, h, wd] = b.extent(x);
    if h < 32 || wd < 32 {
        return Err(Error::Graph(format!(
            "input {h}x{wd} is smaller than the 32x total spatial downsampling"
        )));
    }
    let s = |c| scale_channels(c, w);
    let mut y = b.unit(
        &p(prefix, "conv1"),
        x,
        s(64),
        dims.conv(7, 2),
        dims.planar(),
    )?;
    y = b.pool(&p(prefix, "pool1"), y, dims.max_pool(3, 2, false))?;
    y = b.unit(
        &p(prefix, "conv2"),
        y,
        s(64),
        dims.conv(1, 1),
        dims.planar(),
    )?;
    y = b.unit(
        &p(prefix, "conv3"),
        y,
        s(192),
        dims.conv(3, 1),
        dims.planar(),
    )?;
    y = b.pool(&p(prefix, "pool2"), y, dims.max_pool(3, 2, false))?;
    for row in 0..2 {
        y = mixed(b, prefix, y, row, w, dims)?;
    }
    y = b.pool(&p(prefix, "pool3"), y, dims.max_pool(3, 2, true))?;
    for row in 2..7 {
        y = mixed(b, prefix, y, row, w, dims)?;
    }
    y = b.pool(&p(prefix, "pool4"), y, dims.max_pool(2, 2, true))?;
    for row in 7..9 {
        y = mixed(b, prefix, y, row, w, dims)?;
    }
    Ok(y)
}

/// Average pool, per-position 1×1 classifier, then the spatio-temporal
/// mean of the class scores.
fn classifier_head(
    b: &mut Builder,
    prefix: &str,
    x: usize,
    classes: usize,
    dims: Dims,
) -> Result<usize> {
    let kt = if dims == Dims::Inflated { 2 } else { 1 };
    let pool = PoolSpec::new(PoolKind::Avg, [kt, 7, 7], [1, 1, 1], Padding::Valid);
    let y = b.pool(&p(prefix, "avgpool"), x, pool)?;
    let spec = dims.conv(1, 1).with_bias(true);
    let y = b.conv(
        &p(prefix, "logits"),
        y,
        classes,
        spec,
        dims.planar(),
        Some(0.01),
    )?;
    Ok(b.mean(&p(prefix, "mean"), y))
}

pub fn build(cfg: &ArchConfig) -> Result<GraphSpec> {
    cfg.validate()?;
    match cfg.family {
        Family::Inception2d => build_inception_v1_2d(cfg),
        Family::I3d => build_i3d(cfg),
        Family::C3d => build_c3d_like(cfg),
        Family::TwoStream => build_two_stream(cfg),
        Family::Fused3d => build_3d_fused(cfg),
        Family::Lstm => build_lstm(cfg),
    }
}

fn expect_family(cfg: &ArchConfig, family: Family) -> Result<()> {
    cfg.validate()?;
    if cfg.family != family {
        return Err(Error::invalid(
            "build",
            format!("config is for {} but {} was requested", cfg.family, family),
        ));
    }
    Ok(())
}

/// 2D Inception-V1 with batch norm applied per frame: with `frames > 1`
/// each frame is classified independently and the scores averaged.
pub fn build_inception_v1_2d(cfg: &ArchConfig) -> Result<GraphSpec> {
    expect_family(cfg, Family::Inception2d)?;
    let mut b = Builder::new();
    let x = b.input("input", cfg.channels, cfg.frames, cfg.height, cfg.width);
    let y = inception_tower(&mut b, "", x, cfg.width_multiplier, Dims::Planar)?;
    let out = classifier_head(&mut b, "", y, cfg.num_classes, Dims::Planar)?;
    b.finish(Family::Inception2d, out, Head::Logits)
}

/// Inflated Inception-V1: one tower for RGB or flow input, or both with
/// their softmax outputs averaged.
pub fn build_i3d(cfg: &ArchConfig) -> Result<GraphSpec> {
    expect_family(cfg, Family::I3d)?;
    let mut b = Builder::new();
    let tower = |b: &mut Builder, prefix: &str, channels: usize| -> Result<usize> {
        let x = b.input(
            &format!("{prefix}input"),
            channels,
            cfg.frames,
            cfg.height,
            cfg.width,
        );
        let y = inception_tower(b, prefix, x, cfg.width_multiplier, Dims::Inflated)?;
        classifier_head(b, prefix, y, cfg.num_classes, Dims::Inflated)
    };
    let (out, head) = match cfg.streams {
        Streams::Rgb => (tower(&mut b, "", cfg.channels)?, Head::Logits),
        Streams::Flow => (tower(&mut b, "", 2)?, Head::Logits),
        Streams::Both => {
            let rgb = tower(&mut b, "rgb/", cfg.channels)?;
            let flow = tower(&mut b, "flow/", 2)?;
            let rgb = b.softmax("rgb/softmax", rgb);
            let flow = b.softmax("flow/softmax", flow);
            (b.average("average", vec![rgb, flow]), Head::Probabilities)
        }
    };
    b.finish(Family::I3d, out, head)
}

/// Eight 3×3×3 convolutions, five max pools (the first with temporal
/// stride 2), two hidden fully connected layers and a linear classifier.
pub fn build_c3d_like(cfg: &ArchConfig) -> Result<GraphSpec> {
    expect_family(cfg, Family::C3d)?;
    if cfg.is_full_scale() && (cfg.frames, cfg.height, cfg.width) != (16, 112, 112) {
        return Err(Error::invalid(
            "build",
            format!(
                "full-width C3D expects 16x112x112 input, got {}x{}x{}",
                cfg.frames, cfg.height, cfg.width
            ),
        ));
    }
    if cfg.height < 16 || cfg.width < 16 {
        return Err(Error::Graph("C3D input must be at least 16x16".into()));
    }
    let mut b = Builder::new();
    let s = |c| cfg.scale(c);
    let conv = ConvSpec::new([3; 3], [1; 3], Padding::Same);
    let pool = PoolSpec::new(PoolKind::Max, [2; 3], [2; 3], Padding::Same);
    let mut y = b.input("input", cfg.channels, cfg.frames, cfg.height, cfg.width);
    let stages: [(&[&str], usize); 5] = [
        (&["conv1a"], 64),
        (&["conv2a"], 128),
        (&["conv3a", "conv3b"], 256),
        (&["conv4a", "conv4b"], 512),
        (&["conv5a", "conv5b"], 512),
    ];
    for (i, (ids, c)) in stages.iter().enumerate() {
        for id in ids.iter() {
            y = b.unit(id, y, s(*c), conv, false)?;
        }
        y = b.pool(&format!("pool{}", i + 1), y, pool)?;
    }
    for id in ["fc6", "fc7"] {
        y = b.linear(id, y, s(4096), None);
        y = b.bn_relu(id, y)?;
    }
    let out = b.linear("logits", y, cfg.num_classes, Some(0.01));
    b.finish(Family::C3d, out, Head::Logits)
}

/// RGB tower on one frame and flow tower on a stack of `flow_frames`
/// (u, v) pairs; the prediction is the mean of the two softmaxes.
pub fn build_two_stream(cfg: &ArchConfig) -> Result<GraphSpec> {
    expect_family(cfg, Family::TwoStream)?;
    if cfg.flow_frames == 0 {
        return Err(Error::invalid(
            "build",
            "two-stream needs at least one flow frame",
        ));
    }
    let mut b = Builder::new();
    let w = cfg.width_multiplier;
    let mut heads = Vec::new();
    for (prefix, channels) in [("rgb/", cfg.channels), ("flow/", 2 * cfg.flow_frames)] {
        let x = b.input(
            &format!("{prefix}input"),
            channels,
            cfg.frames,
            cfg.height,
            cfg.width,
        );
        let y = inception_tower(&mut b, prefix, x, w, Dims::Planar)?;
        let y = classifier_head(&mut b, prefix, y, cfg.num_classes, Dims::Planar)?;
        heads.push(b.softmax(&format!("{prefix}softmax"), y));
    }
    let out = b.average("average", heads);
    b.finish(Family::TwoStream, out, Head::Probabilities)
}

/// Per-frame 2D towers over `frames` RGB frames and flow stacks, fused
/// after the last inception block by a 3×3×3 conv, a 3×3×3 max pool and a
/// per-position classifier whose scores are averaged.
pub fn build_3d_fused(cfg: &ArchConfig) -> Result<GraphSpec> {
    expect_family(cfg, Family::Fused3d)?;
    if cfg.flow_frames == 0 {
        return Err(Error::invalid(
            "build",
            "3D-fused needs at least one flow frame",
        ));
    }
    let mut b = Builder::new();
    let w = cfg.width_multiplier;
    let mut towers = Vec::new();
    for (prefix, channels) in [("rgb/", cfg.channels), ("flow/", 2 * cfg.flow_frames)] {
        let x = b.input(
            &format!("{prefix}input"),
            channels,
            cfg.frames,
            cfg.height,
            cfg.width,
        );
        towers.push(inception_tower(&mut b, prefix, x, w, Dims::Planar)?);
    }
    let grid = b.extent(towers[0]);
    if cfg.is_full_scale() && grid != [5, 7, 7] {
        return Err(Error::Graph(format!(
            "full-width 3D-fused expects a 5x7x7 tower feature grid, got {grid:?}"
        )));
    }
    let y = b.concat("fusion/concat", towers)?;
    let conv = ConvSpec::new([3; 3], [1; 3], Padding::Same);
    let y = b.conv("fusion/conv", y, cfg.scale(512), conv, false, Some(0.01))?;
    let y = b.bn_relu("fusion/conv", y)?;
    let pool = PoolSpec::new(PoolKind::Max, [3; 3], [2; 3], Padding::Same);
    let y = b.pool("fusion/pool", y, pool)?;
    let head = ConvSpec::new([1; 3], [1; 3], Padding::Same).with_bias(true);
    let y = b.conv("fusion/logits", y, cfg.num_classes, head, false, Some(0.01))?;
    let out = b.mean("fusion/mean", y);
    b.finish(Family::Fused3d, out, Head::Logits)
}

/// Per-frame Inception-V1 features, a batch-normalized LSTM and a class
/// score at every step.
pub fn build_lstm(cfg: &ArchConfig) -> Result<GraphSpec> {
    expect_family(cfg, Family::Lstm)?;
    let mut b = Builder::new();
    let x = b.input("input", cfg.channels, cfg.frames, cfg.height, cfg.width);
    let y = inception_tower(&mut b, "", x, cfg.width_multiplier, Dims::Planar)?;
    let pool = PoolSpec::new(PoolKind::Avg, [1, 7, 7], [1, 1, 1], Padding::Valid);
    let y = b.pool("avgpool", y, pool)?;
    let y = b.lstm("lstm", y, cfg.scale(512))?;
    let head = ConvSpec::new([1; 3], [1; 3], Padding::Same).with_bias(true);
    let out = b.conv("logits", y, cfg.num_classes, head, false, Some(0.01))?;
    b.finish(Family::Lstm, out, Head::PerStepLogits)
}

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A frame sequence `(T, C, H, W)` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Tensor,
    pub fps: f32,
    pub label: Option<usize>,
}

impl VideoClip {
    pub fn new(frames: Tensor, fps: f32, label: Option<usize>) -> Result<Self> {
        let &[t, c, h, w] = frames.shape() else {
            return Err(Error::invalid(
                "VideoClip",
                format!("frames must be (T, C, H, W), got {:?}", frames.shape()),
            ));
        };
        if t == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("VideoClip", "empty clip"));
        }
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::invalid(
                "VideoClip",
                format!("fps must be positive, got {fps}"),
            ));
        }
        Ok(VideoClip { frames, fps, label })
    }

    /// Builds a clip from `(C, H, W)` frames of equal shape.
    pub fn from_frames(frames: &[Tensor], fps: f32, label: Option<usize>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::invalid("VideoClip", "empty clip"))?;
        let mut shape = vec![frames.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(shape.iter().product());
        for f in frames {
            f.expect_shape("VideoClip", first.shape())?;
            data.extend_from_slice(f.data());
        }
        VideoClip::new(Tensor::new(shape, data)?, fps, label)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    /// `[T, C, H, W]`.
    pub fn dims(&self) -> [usize; 4] {
        let s = self.frames.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn len(&self) -> usize {
        self.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frame_len(&self) -> usize {
        let [_, c, h, w] = self.dims();
        c * h * w
    }

    /// Frame `t` as `(C, H, W)`.
    pub fn frame(&self, t: usize) -> Tensor {
        let [_, c, h, w] = self.dims();
        let n = self.frame_len();
        Tensor::new(
            vec![c, h, w],
            self.frames.data()[t * n..(t + 1) * n].to_vec(),
        )
        .unwrap()
    }

    /// Duration in seconds.
    pub fn footprint(&self) -> f32 {
        self.len() as f32 / self.fps
    }

    /// Picks frames by index, keeping fps and label.
    pub fn select(&self, indices: &[usize]) -> Result<VideoClip> {
        let n = self.frame_len();
        let [t, c, h, w] = self.dims();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= t {
                return Err(Error::invalid(
                    "select",
                    format!("frame {i} out of range for {t} frames"),
                ));
            }
            data.extend_from_slice(&self.frames.data()[i * n..(i + 1) * n]);
        }
        VideoClip::new(
            Tensor::new(vec![indices.len(), c, h, w], data)?,
            self.fps,
            self.label,
        )
    }

    pub fn reversed(&self) -> VideoClip {
        let idx: Vec<usize> = (0..self.len()).rev().collect();
        self.select(&idx).unwrap()
    }

    /// Same frames in a random order; destroys temporal structure while
    /// keeping every per-frame statistic.
    pub fn shuffled(&self, rng: &mut impl Rng) -> VideoClip {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(rng);
        self.select(&idx).unwrap()
    }

    /// Network layout `(C, T, H, W)`, rescaled from `[0, 1]` to `[-1, 1]`.
    pub fn to_network_input(&self) -> Tensor {
        let [t, c, h, w] = self.dims();
        let plane = h * w;
        let src = self.frames.data();
        let mut out = vec![0.0; src.len()];
        for ti in 0..t {
            for ci in 0..c {
                let from = (ti * c + ci) * plane;
                let to = (ci * t + ti) * plane;
                for k in 0..plane {
                    out[to + k] = src[from + k] * 2.0 - 1.0;
                }
            }
        }
        Tensor::new(vec![c, t, h, w], out).unwrap()
    }

    /// Flip every frame left to right.
    pub fn flipped(&self) -> VideoClip {
        let [_, _, h, w] = self.dims();
        let mut data = self.frames.data().to_vec();
        for row in data.chunks_mut(w) {
            row.reverse();
        }
        debug_assert_eq!(data.len() % (h * w), 0);
        VideoClip {
            frames: Tensor::new(self.frames.shape().to_vec(), data).unwrap(),
            ..*self
        }
    }

    /// Bilinear resize of every frame with corner-aligned sampling.
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<VideoClip> {
        let [t, c, h, w] = self.dims();
        if out_h == 0 || out_w == 0 {
            return Err(Error::invalid("resize", "target size must be positive"));
        }
        if (out_h, out_w) == (h, w) {
            return Ok(self.clone());
        }
        let coord = |i: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
            if n_out == 1 || n_in == 1 {
                return (0, 0, 0.0);
            }
            let s = i as f32 * (n_in - 1) as f32 / (n_out - 1) as f32;
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f32)
        };
        let ys: Vec<_> = (0..out_h).map(|y| coord(y, out_h, h)).collect();
        let xs: Vec<_> = (0..out_w).map(|x| coord(x, out_w, w)).collect();
        let src = self.frames.data();
        let mut out = Vec::with_capacity(t * c * out_h * out_w);
        for plane in src.chunks(h * w) {
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let a = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let b = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out.push(a * (1.0 - fy) + b * fy);
                }
            }
        }
        VideoClip::new(
            Tensor::new(vec![t, c, out_h, out_w], out)?,
            self.fps,
            self.label,
        )
    }

    /// Scales so the shorter side equals `short`.
    pub fn resize_short_side(&self, short: usize) -> Result<VideoClip> {
        let [_, _, h, w] = self.dims();
        let (oh, ow) = if h <= w {
            (short, ((w * short) as f32 / h as f32).round() as usize)
        } else {
            (((h * short) as f32 / w as f32).round() as usize, short)
        };
        self.resize(oh, ow)
    }

    /// Spatial window `[y, y + size) × [x, x + size)` of every frame.
    pub fn crop(&self, y: usize, x: usize, size_h: usize, size_w: usize) -> Result<VideoClip> {
        let [t, c, h, w] = self.dims();
        if y + size_h > h || x + size_w > w {
            return Err(Error::invalid(
                "crop",
                format!("window {size_h}x{size_w} at ({y}, {x}) exceeds {h}x{w}"),
            ));
        }
        let src = self.frames.data();
        let mut out = Vec::with_capacity(t * c * size_h * size_w);
        for plane in src.chunks(h * w) {
            for row in y..y + size_h {
                out.extend_from_slice(&plane[row * w + x..row * w + x + size_w]);
            }
        }
        VideoClip::new(
            Tensor::new(vec![t, c, size_h, size_w], out)?,
            self.fps,
            self.label,
        )
    }

    /// Repeats the clip end-to-start until it has at least `frames` frames.
    pub fn looped(&self, frames: usize) -> VideoClip {
        if self.len() >= frames {
            return self.clone();
        }
        let idx: Vec<usize> = (0..frames).map(|i| i % self.len()).collect();
        self.select(&idx).unwrap()
    }
}

/// Stacks clips of equal geometry into a network batch `(N, C, T, H, W)`.
pub fn batch_input(clips: &[&VideoClip]) -> Result<Tensor> {
    let items = clips
        .iter()
        .map(|c| crate::train::with_batch_axis(&c.to_network_input()))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&items)
}

/// Keeps frames `0, k, 2k, ...`; fps drops by `k` so the footprint of the
/// kept frames is unchanged.
pub fn subsample_frames(clip: &VideoClip, keep_one_in: usize) -> Result<VideoClip> {
    if keep_one_in == 0 {
        return Err(Error::invalid(
            "subsample_frames",
            "keep_one_in must be at least 1",
        ));
    }
    let idx: Vec<usize> = (0..clip.len()).step_by(keep_one_in).collect();
    let mut out = clip.select(&idx)?;
    out.fps = clip.fps / keep_one_in as f32;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Shorter side after resizing.
    pub resize_short: usize,
    pub crop: usize,
    pub flip_prob: f32,
    /// Frames per training sample; `None` keeps the full duration.
    pub temporal_crop: Option<usize>,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            resize_short: 256,
            crop: 224,
            flip_prob: 0.5,
            temporal_crop: None,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop > self.resize_short {
            return Err(Error::invalid(
                "AugmentConfig",
                format!("crop {} must lie in 1..={}", self.crop, self.resize_short),
            ));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::invalid(
                "AugmentConfig",
                "flip probability must lie in [0, 1]",
            ));
        }
        if self.temporal_crop == Some(0) {
            return Err(Error::invalid(
                "AugmentConfig",
                "temporal crop must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Random spatial crop, temporal crop (looping short clips) and flip, each
/// sampled once per clip.
pub fn augment_train(
    clip: &VideoClip,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<VideoClip> {
    config.validate()?;
    let resized = clip.resize_short_side(config.resize_short)?;
    let [_, _, h, w] = resized.dims();
    let y = rng.random_range(0..=h - config.crop);
    let x = rng.random_range(0..=w - config.crop);
    let timed = match config.temporal_crop {
        Some(len) => {
            let looped = resized.looped(len);
            let start = rng.random_range(0..=looped.len() - len);
            looped.select(&(start..start + len).collect::<Vec<_>>())?
        }
        None => resized,
    };
    let flip = rng.random::<f32>() < config.flip_prob;
    let out = timed.crop(y, x, config.crop, config.crop)?;
    Ok(if flip { out.flipped() } else { out })
}

/// Deterministic centre crop over the full duration, no flip.
pub fn eval_preprocess(clip: &VideoClip, config: &AugmentConfig) -> Result<VideoClip> {
    config.validate()?;
    let resized = clip.resize_short_side(config.resize_short)?;
    let [_, _, h, w] = resized.dims();
    resized.crop(
        (h - config.crop) / 2,
        (w - config.crop) / 2,
        config.crop,
        config.crop,
    )
}

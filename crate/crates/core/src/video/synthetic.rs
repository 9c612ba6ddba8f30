//! Two-class synthetic video tasks whose classes differ only in temporal
//! order.
//!
//! Every class-1 clip is the time reversal of a class-0 twin, so the two
//! classes contain exactly the same multiset of frames and any per-frame
//! classifier sits at chance.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::clip::VideoClip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// A textured square moves right (class 0) or left (class 1).
    Direction,
    /// A textured square grows (class 0) or shrinks (class 1).
    Order,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direction" => Ok(Task::Direction),
            "order" => Ok(Task::Order),
            _ => Err(Error::invalid(
                "task",
                format!("unknown task `{s}`, expected direction or order"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Geometry {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        Geometry {
            frames,
            height,
            width,
            channels: 3,
        }
    }
}

pub const SYNTHETIC_FPS: f32 = 25.0;

fn square_side(g: &Geometry) -> usize {
    (g.height.min(g.width) / 4).max(3)
}

fn check(task: Task, g: &Geometry) -> Result<()> {
    let fail = |r: String| Err(Error::invalid("gen_synthetic_temporal", r));
    if g.frames < 2 || g.channels == 0 {
        return fail("need at least 2 frames and 1 channel".into());
    }
    let side = square_side(g);
    match task {
        Task::Direction => {
            let travel = g.frames - 1;
            if side + travel > g.width || side > g.height {
                return fail(format!(
                    "{}x{} frames cannot hold a {side} px square moving {travel} px",
                    g.height, g.width
                ));
            }
        }
        Task::Order => {
            if g.height.min(g.width) < 8 {
                return fail(format!(
                    "{}x{} frames are too small, need at least 8x8",
                    g.height, g.width
                ));
            }
        }
    }
    Ok(())
}

/// Generates `n_per_class` clips of each class, twins adjacent
/// (`[c0, c1, c0, c1, ...]`).
pub fn gen_synthetic_temporal(
    task: Task,
    n_per_class: usize,
    geometry: Geometry,
    rng: &mut impl Rng,
) -> Result<Vec<VideoClip>> {
    check(task, &geometry)?;
    let seeds: Vec<u64> = (0..n_per_class).map(|_| rng.random()).collect();
    let pairs: Vec<(VideoClip, VideoClip)> = seeds
        .par_iter()
        .map(|&s| {
            let mut r = ChaCha8Rng::seed_from_u64(s);
            let forward = match task {
                Task::Direction => moving_square(&geometry, &mut r),
                Task::Order => growing_square(&geometry, &mut r),
            };
            let mut backward = forward.reversed();
            backward.label = Some(1);
            (forward, backward)
        })
        .collect();
    Ok(pairs.into_iter().flat_map(|(a, b)| [a, b]).collect())
}

struct Scene {
    background: Vec<f32>,
    texture: Vec<f32>,
    tex_side: usize,
}

fn scene(g: &Geometry, tex_side: usize, rng: &mut impl Rng) -> Scene {
    let plane = g.height * g.width;
    Scene {
        background: (0..g.channels * plane)
            .map(|_| rng.random_range(0.0..0.5))
            .collect(),
        texture: (0..g.channels * tex_side * tex_side)
            .map(|_| rng.random_range(0.5..1.0))
            .collect(),
        tex_side,
    }
}

/// One frame with the texture drawn over `[y, y + side) × [x, x + side)`,
/// sampled nearest-neighbour so any side works.
fn render(g: &Geometry, s: &Scene, y: usize, x: usize, side: usize, out: &mut Vec<f32>) {
    let plane = g.height * g.width;
    let start = out.len();
    out.extend_from_slice(&s.background);
    for c in 0..g.channels {
        for dy in 0..side {
            for dx in 0..side {
                let ty = dy * s.tex_side / side;
                let tx = dx * s.tex_side / side;
                out[start + c * plane + (y + dy) * g.width + x + dx] =
                    s.texture[(c * s.tex_side + ty) * s.tex_side + tx];
            }
        }
    }
}

fn moving_square(g: &Geometry, rng: &mut impl Rng) -> VideoClip {
    let side = square_side(g);
    let s = scene(g, side, rng);
    let x0 = rng.random_range(0..=g.width - side - (g.frames - 1));
    let y = rng.random_range(0..=g.height - side);
    let mut data = Vec::with_capacity(g.frames * g.channels * g.height * g.width);
    for t in 0..g.frames {
        render(g, &s, y, x0 + t, side, &mut data);
    }
    let frames = Tensor::new(vec![g.frames, g.channels, g.height, g.width], data).unwrap();
    VideoClip::new(frames, SYNTHETIC_FPS, Some(0)).unwrap()
}

fn growing_square(g: &Geometry, rng: &mut impl Rng) -> VideoClip {
    let min_dim = g.height.min(g.width);
    let (small, large) = ((min_dim / 8).max(1), min_dim / 2);
    let s = scene(g, large, rng);
    let cy = rng.random_range(large / 2..=g.height - large + large / 2);
    let cx = rng.random_range(large / 2..=g.width - large + large / 2);
    let mut data = Vec::with_capacity(g.frames * g.channels * g.height * g.width);
    for t in 0..g.frames {
        let side = small + ((large - small) * t + (g.frames - 1) / 2) / (g.frames - 1);
        render(g, &s, cy - side / 2, cx - side / 2, side, &mut data);
    }
    let frames = Tensor::new(vec![g.frames, g.channels, g.height, g.width], data).unwrap();
    VideoClip::new(frames, SYNTHETIC_FPS, Some(0)).unwrap()
}

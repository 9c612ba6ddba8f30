//! Command-line front end. [`run`] returns the process exit code:
//! 0 success, 1 verification failure, 2 usage error, 3 I/O error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{remap_2d_to_3d_names, Checkpoint};
use crate::error::{Error, Result};
use crate::flow::{flow_stack, rgb_to_gray, tvl1_with_energy, write_flo, TvL1Params};
use crate::graph::{
    build, count_params, init_params, nominal_input_shapes, receptive_fields, summary,
    temporal_footprint, ArchConfig, Family, GraphSpec,
};
use crate::inflate::{
    default_check_frames, inflate_graph, parse_key_values, required_frames, verify_fixed_point,
    InflationRule, DEFAULT_TOLERANCE,
};
use crate::ops::Mode;
use crate::tensor::Tensor;
use crate::train::{evaluate, examples_from_clips, train, write_history_csv, TrainConfig};
use crate::video::{
    gen_synthetic_temporal, read_frames_dir, read_pnm, write_frames_dir, write_pgm, Geometry, Task,
    VideoClip,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "inflate3d",
    version,
    about = "Inflate 2D ConvNets into 3D video models and check them"
)]
pub struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output file or directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub family: Option<Family>,
    #[arg(long, default_value_t = 400)]
    pub classes: usize,
    #[arg(long, default_value_t = 1.0)]
    pub width: f64,
    /// Input frames (defaults to the family's training length).
    #[arg(long)]
    pub frames: Option<usize>,
    /// Square input side (defaults to full size).
    #[arg(long)]
    pub size: Option<usize>,
    /// Read the graph from a checkpoint instead.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print a layer summary and parameter count; with --out, save
    /// randomly initialized weights.
    Build(ModelArgs),
    /// Inflate a 2D checkpoint into a 3D one.
    Inflate {
        #[arg(long)]
        graph2d: PathBuf,
        /// Rule file (`key = value`); defaults to the i3d preset.
        #[arg(long)]
        rule: Option<PathBuf>,
        /// Frames on the inflated input, overriding the rule.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Compare a 2D network on images with its inflation on boring videos.
    VerifyFixedPoint {
        #[arg(long)]
        ckpt2d: PathBuf,
        #[arg(long)]
        ckpt3d: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f32,
        #[arg(long, default_value_t = 3)]
        images: usize,
        /// Boring-video length; defaults to twice the output's temporal
        /// receptive field.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Trainable parameter count of a model.
    CountParams(ModelArgs),
    /// Seconds spanned by `frames` inputs taken every `stride` source frames.
    Footprint {
        #[arg(long)]
        family: Option<Family>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 25.0)]
        fps: f64,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Receptive-field extent and cumulative stride per layer, as (t, x, y).
    ReceptiveField {
        #[command(flatten)]
        model: ModelArgs,
        /// Only this layer; all layers otherwise.
        #[arg(long)]
        layer: Option<String>,
    },
    /// TV-L1 flow between two PPM/PGM images, written as .flo.
    Flow {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Flow between consecutive frames of a clip directory.
    FlowStack {
        #[arg(long)]
        dir: PathBuf,
    },
    /// Write a synthetic two-class dataset as clip directories.
    GenData {
        #[arg(long)]
        task: String,
        /// Clips per class.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        frames: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Train on a directory of clip directories.
    Train {
        #[arg(long)]
        family: Family,
        #[arg(long)]
        data: PathBuf,
        /// `key = value` file; flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        width: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Accuracy of a checkpoint on a directory of clip directories.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Permute the frames of every clip before evaluating.
        #[arg(long)]
        shuffle_frames: bool,
    },
    /// Write one PGM per filter: input channels top to bottom, temporal
    /// slices left to right.
    DumpFilters {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "conv1")]
        layer: String,
    },
}

/// Parses `args` (including the program name) and runs the command,
/// printing results to stdout and errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let threads = cli.threads.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return EXIT_USAGE;
        }
    };
    match pool.install(|| execute(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } => EXIT_FAILED,
                e if e.is_io() => EXIT_IO,
                _ => EXIT_USAGE,
            }
        }
    }
}

fn require_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| Error::invalid("cli", "this command needs --out"))
}

fn model_graph(m: &ModelArgs) -> Result<GraphSpec> {
    if let Some(path) = &m.ckpt {
        return Checkpoint::load(path)?.graph();
    }
    let family = m
        .family
        .ok_or_else(|| Error::invalid("cli", "pass --family or --ckpt"))?;
    build(&model_config(family, m.classes, m.width, m.frames, m.size))
}

fn model_config(
    family: Family,
    classes: usize,
    width: f64,
    frames: Option<usize>,
    size: Option<usize>,
) -> ArchConfig {
    let mut cfg = match size {
        Some(s) => ArchConfig::toy(family, classes, width, frames.unwrap_or(16), s),
        None => ArchConfig::full_scale(family, classes),
    };
    cfg.width_multiplier = width;
    if let Some(f) = frames {
        cfg.frames = f;
    }
    cfg
}

fn execute(cli: &Cli) -> Result<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
    match &cli.command {
        Command::Build(m) => {
            let graph = model_graph(m)?;
            print!("{}", summary(&graph)?);
            if let Some(out) = &cli.out {
                init_params(&graph, &mut rng).save(out)?;
                println!("wrote {}", out.display());
            }
        }
        Command::CountParams(m) => println!("{}", count_params(&model_graph(m)?)),
        Command::Inflate {
            graph2d,
            rule,
            frames,
        } => {
            let out = require_out(cli)?;
            let ckpt2d = Checkpoint::load(graph2d)?;
            let g2 = ckpt2d.graph()?;
            let mut rule = match rule {
                Some(p) => InflationRule::parse(&read_text(p)?)?,
                None => InflationRule::i3d(nominal_input_shapes(&g2)[0][1].max(64)),
            };
            if let Some(f) = frames {
                rule.frames = *f;
            }
            let (g3, mut w3) = inflate_graph(&g2, &ckpt2d, &rule)?;
            w3.set_graph(&g3);
            let remap = remap_2d_to_3d_names(&ckpt2d, &g3)?;
            println!(
                "inflated {} tensors from {} to {}, {} unmapped",
                remap.mapping.len(),
                g2.family,
                g3.family,
                remap.unmapped.len()
            );
            w3.save(out)?;
            println!("wrote {}", out.display());
        }
        Command::VerifyFixedPoint {
            ckpt2d,
            ckpt3d,
            tol,
            images,
            frames,
        } => {
            let (w2, w3) = (Checkpoint::load(ckpt2d)?, Checkpoint::load(ckpt3d)?);
            let (g2, g3) = (w2.graph()?, w3.graph()?);
            let [c, _, h, w] = nominal_input_shapes(&g2)
                .first()
                .copied()
                .ok_or_else(|| Error::invalid("verify-fixed-point", "2D graph has no input"))?;
            let frames = match frames {
                Some(f) => *f,
                None => default_check_frames(&g3, &g3.nodes[g3.output].id)?
                    .max(required_frames(&g2, &g3, h, w)?),
            };
            let mut worst = 0.0f32;
            let mut passed = true;
            for k in 0..*images {
                let image = Tensor::uniform(vec![c, h, w], -1.0, 1.0, &mut rng);
                let report = verify_fixed_point(&g2, &w2, &g3, &w3, &image, frames, *tol)?;
                if k == 0 {
                    print!("{}", report.to_table());
                }
                worst = worst.max(report.max_deviation());
                passed &= report.passed();
            }
            println!(
                "{} images, {frames} frames: max deviation {worst:.3e} (tolerance {tol:.1e}) {}",
                images,
                if passed { "PASS" } else { "FAIL" }
            );
            return Ok(if passed { EXIT_OK } else { EXIT_FAILED });
        }
        Command::Footprint {
            family,
            frames,
            fps,
            stride,
        } => match (family, frames) {
            (_, Some(f)) => println!("{}s", seconds(temporal_footprint(*f, *stride, *fps))),
            (Some(fam), None) => {
                let cfg = ArchConfig::full_scale(*fam, 400);
                println!(
                    "train {}s test {}s",
                    seconds(cfg.footprint()),
                    seconds(cfg.test_footprint())
                );
            }
            (None, None) => return Err(Error::invalid("footprint", "pass --frames or --family")),
        },
        Command::ReceptiveField { model, layer } => {
            let graph = model_graph(model)?;
            let rfs = receptive_fields(&graph)?;
            let mut shown = 0;
            for (node, rf) in graph.nodes.iter().zip(&rfs) {
                if layer
                    .as_ref()
                    .is_some_and(|l| *l != node.id && !node.id.ends_with(&format!("/{l}")))
                {
                    continue;
                }
                let Some(rf) = rf else { continue };
                println!(
                    "{} extent {},{},{} stride {},{},{}",
                    node.id,
                    rf.extent[0],
                    rf.extent[1],
                    rf.extent[2],
                    rf.stride[0],
                    rf.stride[1],
                    rf.stride[2]
                );
                shown += 1;
            }
            if shown == 0 {
                return Err(Error::Graph(format!(
                    "no reachable layer `{}`",
                    layer.as_deref().unwrap_or("")
                )));
            }
        }
        Command::Flow { a, b } => {
            let out = require_out(cli)?;
            let (fa, fb) = (gray(&read_pnm(a)?)?, gray(&read_pnm(b)?)?);
            let r = tvl1_with_energy(&fa, &fb, &TvL1Params::default())?;
            write_flo(out, &r.flow)?;
            let energies: Vec<String> = r.energies.iter().map(|e| format!("{e:.3}")).collect();
            println!("energy per warp: {}", energies.join(" "));
            println!(
                "max |flow| {:.4}, wrote {}",
                r.flow.max_abs(),
                out.display()
            );
        }
        Command::FlowStack { dir } => {
            let out = require_out(cli)?;
            let clip = read_frames_dir(dir)?;
            let frames = (0..clip.len())
                .map(|t| rgb_to_gray(&clip.frame(t)))
                .collect::<Result<Vec<_>>>()?;
            let params = TvL1Params::default();
            let stack = flow_stack(&frames, &params)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let [_, h, w] = [stack.shape()[0], stack.shape()[1], stack.shape()[2]];
            for k in 0..stack.shape()[0] / 2 {
                let plane = h * w;
                let mut f = crate::flow::FlowField::zeros(w, h);
                for i in 0..plane {
                    f.u[i] = stack.data()[2 * k * plane + i] * params.clamp;
                    f.v[i] = stack.data()[(2 * k + 1) * plane + i] * params.clamp;
                }
                write_flo(out.join(format!("flow_{k:06}.flo")), &f)?;
            }
            println!(
                "wrote {} flow fields to {}",
                stack.shape()[0] / 2,
                out.display()
            );
        }
        Command::GenData {
            task,
            n,
            frames,
            size,
        } => {
            let out = require_out(cli)?;
            let task: Task = task.parse()?;
            let clips =
                gen_synthetic_temporal(task, *n, Geometry::new(*frames, *size, *size), &mut rng)?;
            for (i, clip) in clips.iter().enumerate() {
                write_frames_dir(clip, out.join(format!("clip_{i:05}")))?;
            }
            println!("wrote {} clips to {}", clips.len(), out.display());
        }
        Command::Train {
            family,
            data,
            config,
            width,
            steps,
            lr,
            batch_size,
        } => {
            let out = require_out(cli)?;
            let mut run = RunConfig::default();
            if let Some(p) = config {
                run.apply_file(&read_text(p)?)?;
            }
            run.train.seed = cli.seed;
            if let Some(w) = width {
                run.width = *w;
            }
            if let Some(s) = steps {
                run.train.max_steps = *s;
            }
            if let Some(l) = lr {
                run.train.learning_rate = *l;
            }
            if let Some(b) = batch_size {
                run.train.batch_size = *b;
            }
            let clips = read_dataset(data)?;
            let [t, _, h, w] = clips[0].dims();
            if h != w {
                return Err(Error::invalid("train", "clips must be square"));
            }
            let classes = clips
                .iter()
                .filter_map(|c| c.label)
                .max()
                .map_or(0, |m| m + 1)
                .max(2);
            let graph = build(&model_config(*family, classes, run.width, Some(t), Some(h)))?;
            let flow = TvL1Params::default();
            let n_val = ((clips.len() as f32 * run.val_fraction).round() as usize)
                .clamp(1, clips.len() - 1);
            let mut order: Vec<usize> = (0..clips.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
            let pick = |idx: &[usize]| idx.iter().map(|&i| clips[i].clone()).collect::<Vec<_>>();
            let val = examples_from_clips(&graph, &pick(&order[..n_val]), &flow)?;
            let tr = examples_from_clips(&graph, &pick(&order[n_val..]), &flow)?;
            let init = init_params(&graph, &mut rng);
            let outcome = train(&graph, init, &tr, &val, &run.train)?;
            outcome.best.save(out)?;
            let csv = out.with_extension("csv");
            write_history_csv(&csv, &outcome.state.history)?;
            if let Some(last) = outcome.state.history.last() {
                println!(
                    "step {} lr {} train loss {:.4} val loss {:.4} val acc {:.3}",
                    last.step, last.lr, last.train_loss, last.val_loss, last.val_acc
                );
            }
            println!("wrote {} and {}", out.display(), csv.display());
        }
        Command::Eval {
            ckpt,
            data,
            shuffle_frames,
        } => {
            let weights = Checkpoint::load(ckpt)?;
            let graph = weights.graph()?;
            let mut clips = read_dataset(data)?;
            if *shuffle_frames {
                clips = clips.iter().map(|c| c.shuffled(&mut rng)).collect();
            }
            let examples = examples_from_clips(&graph, &clips, &TvL1Params::default())?;
            let report = evaluate(&graph, &weights, &examples, Mode::Infer)?;
            println!("accuracy {:.4} ({} clips)", report.accuracy, examples.len());
            for (k, (right, total)) in report.per_class.iter().enumerate() {
                println!("class {k}: {right}/{total}");
            }
        }
        Command::DumpFilters { ckpt, layer } => {
            let out = require_out(cli)?;
            let weights = Checkpoint::load(ckpt)?;
            let kernel = weights.get(&format!("{layer}/weight"))?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let n = dump_filters(kernel, out)?;
            println!("wrote {n} filters to {}", out.display());
        }
    }
    Ok(EXIT_OK)
}

/// Trims float noise so `64 / 25` prints as `2.56`.
fn seconds(v: f64) -> f64 {
    (v * 1e9).round() / 1e9
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn gray(image: &Tensor) -> Result<Tensor> {
    match image.shape()[0] {
        1 => {
            let s = image.shape();
            image.clone().reshape(vec![s[1], s[2]])
        }
        _ => rgb_to_gray(image),
    }
}

/// Every clip directory under `dir`, in name order.
fn read_dataset(dir: &Path) -> Result<Vec<VideoClip>> {
    let mut subdirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::format(dir, "no clip directories"));
    }
    let clips = subdirs
        .iter()
        .map(read_frames_dir)
        .collect::<Result<Vec<_>>>()?;
    if clips.iter().any(|c| c.dims() != clips[0].dims()) {
        return Err(Error::format(dir, "clips differ in geometry"));
    }
    if clips.len() < 2 {
        return Err(Error::format(dir, "need at least two clips"));
    }
    Ok(clips)
}

/// Training options read from a `key = value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub width: f64,
    pub val_fraction: f32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig {
                learning_rate: 0.01,
                ..TrainConfig::default()
            },
            width: 0.25,
            val_fraction: 0.2,
        }
    }
}

impl RunConfig {
    /// Keys: `learning_rate`, `momentum`, `drop_factor`, `patience`
    /// (a count or `none`), `min_delta`, `max_steps`, `batch_size`,
    /// `eval_interval`, `clip_grad_norm` (a norm or `none`), `width`,
    /// `val_fraction`. Unknown keys are rejected.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        let bad = |line: usize, reason: String| {
            Error::invalid("config", format!("line {line}: {reason}"))
        };
        let pairs = parse_key_values(text).map_err(|(l, r)| bad(l, r))?;
        for (line, key, value) in pairs {
            fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
                v.parse().map_err(|_| format!("bad value `{v}`"))
            }
            let t = &mut self.train;
            let r: std::result::Result<(), String> = (|| {
                match key.as_str() {
                    "learning_rate" => t.learning_rate = num(&value)?,
                    "momentum" => t.momentum = num(&value)?,
                    "drop_factor" => t.drop_factor = num(&value)?,
                    "patience" => {
                        t.patience = if value == "none" {
                            None
                        } else {
                            Some(num(&value)?)
                        }
                    }
                    "min_delta" => t.min_delta = num(&value)?,
                    "max_steps" => t.max_steps = num(&value)?,
                    "batch_size" => t.batch_size = num(&value)?,
                    "eval_interval" => t.eval_interval = num(&value)?,
                    "clip_grad_norm" => {
                        t.clip_grad_norm = if value == "none" {
                            None
                        } else {
                            Some(num(&value)?)
                        }
                    }
                    "width" => self.width = num(&value)?,
                    "val_fraction" => self.val_fraction = num(&value)?,
                    other => return Err(format!("unknown key `{other}`")),
                }
                Ok(())
            })();
            r.map_err(|reason| bad(line, reason))?;
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid("config", "val_fraction must lie in (0, 1)"));
        }
        self.train.validate()
    }
}

/// Writes `filter_{o:03}.pgm` per output channel: a grid with one row of
/// tiles per input channel and one column per temporal slice, each filter
/// rescaled to `[0, 1]` on its own, with a one-pixel gap between tiles.
pub fn dump_filters(kernel: &Tensor, dir: &Path) -> Result<usize> {
    let (o, i, t, h, w) = match *kernel.shape() {
        [o, i, t, h, w] => (o, i, t, h, w),
        [o, i, h, w] => (o, i, 1, h, w),
        _ => {
            return Err(Error::invalid(
                "dump_filters",
                format!("expected a 4D or 5D kernel, got {:?}", kernel.shape()),
            ))
        }
    };
    let per = i * t * h * w;
    let (gh, gw) = (i * (h + 1) - 1, t * (w + 1) - 1);
    for oc in 0..o {
        let k = &kernel.data()[oc * per..(oc + 1) * per];
        let (lo, hi) = k
            .iter()
            .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        let range = if hi > lo { hi - lo } else { 1.0 };
        let mut grid = vec![0.0; gh * gw];
        for ic in 0..i {
            for ti in 0..t {
                for y in 0..h {
                    for x in 0..w {
                        let v = k[((ic * t + ti) * h + y) * w + x];
                        grid[(ic * (h + 1) + y) * gw + ti * (w + 1) + x] = (v - lo) / range;
                    }
                }
            }
        }
        write_pgm(
            dir.join(format!("filter_{oc:03}.pgm")),
            &Tensor::new(vec![gh, gw], grid)?,
        )?;
    }
    Ok(o)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_unknown_keys() {
        let mut c = RunConfig::default();
        assert!(c
            .apply_file("learning_rate = 0.5\nwidth = 0.5\npatience = none")
            .is_ok());
        assert_eq!(c.train.learning_rate, 0.5);
        assert_eq!(c.train.patience, None);
        assert!(c.apply_file("lr = 0.1").is_err());
        assert!(c.apply_file("momentum = 1.5").is_err());
    }

    #[test]
    fn seconds_formatting() {
        assert_eq!(
            format!("{}s", seconds(temporal_footprint(64, 1, 25.0))),
            "2.56s"
        );
        assert_eq!(
            format!("{}s", seconds(temporal_footprint(25, 5, 25.0))),
            "5s"
        );
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["inflate3d", "nonsense"]), EXIT_USAGE);
        assert_eq!(run(["inflate3d", "footprint"]), EXIT_USAGE);
        assert_eq!(
            run(["inflate3d", "count-params", "--ckpt", "/nonexistent/x.infl"]),
            EXIT_IO
        );
    }
}

//! SGD with momentum, plateau learning-rate decay and evaluation with
//! prediction averaging.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::flow::{flow_stack, rgb_to_gray, TvL1Params};
use crate::graph::{
    backward, class_probabilities, forward, loss_and_grad, nominal_input_shapes, Gradients,
    GraphSpec, Op,
};
use crate::ops::Mode;
use crate::tensor::Tensor;
use crate::video::VideoClip;

/// One labelled sample: a `(C, T, H, W)` tensor per graph input.
#[derive(Clone, Debug)]
pub struct Example {
    pub inputs: Vec<Tensor>,
    pub label: usize,
}

/// Builds the network inputs of `graph` from a clip. Three-channel inputs
/// take the RGB frames; two-channel inputs take `(u, v)` flow between
/// consecutive frames; `2k`-channel inputs take stacks of `k` consecutive
/// flows, one stack per starting frame.
pub fn example_from_clip(
    graph: &GraphSpec,
    clip: &VideoClip,
    flow: &TvL1Params,
) -> Result<Example> {
    let label = clip
        .label
        .ok_or_else(|| Error::invalid("example_from_clip", "clip has no label"))?;
    let needs_flow = nominal_input_shapes(graph)
        .iter()
        .any(|s| s[0] != clip.dims()[1]);
    let stack = if needs_flow {
        let gray = (0..clip.len())
            .map(|t| rgb_to_gray(&clip.frame(t)))
            .collect::<Result<Vec<_>>>()?;
        Some(flow_stack(&gray, flow)?)
    } else {
        None
    };
    let [_, c, h, w] = clip.dims();
    let mut inputs = Vec::new();
    for shape in nominal_input_shapes(graph) {
        let ch = shape[0];
        if ch == c {
            inputs.push(clip.to_network_input());
            continue;
        }
        let stack = match (&stack, ch % 2) {
            (Some(s), 0) => s,
            _ => {
                return Err(Error::invalid(
                    "example_from_clip",
                    format!("cannot feed a {ch}-channel input from a {c}-channel clip"),
                ))
            }
        };
        let k = ch / 2;
        let pairs = stack.shape()[0] / 2;
        if pairs < k {
            return Err(Error::invalid(
                "example_from_clip",
                format!("{k} flow frames needed, clip gives {pairs}"),
            ));
        }
        let plane = h * w;
        let steps = pairs - k + 1;
        let mut data = vec![0.0; ch * steps * plane];
        for s in 0..steps {
            for j in 0..ch {
                let src = &stack.data()[(2 * s + j) * plane..(2 * s + j + 1) * plane];
                data[(j * steps + s) * plane..(j * steps + s + 1) * plane].copy_from_slice(src);
            }
        }
        inputs.push(Tensor::new(vec![ch, steps, h, w], data)?);
    }
    Ok(Example { inputs, label })
}

pub fn examples_from_clips(
    graph: &GraphSpec,
    clips: &[VideoClip],
    flow: &TvL1Params,
) -> Result<Vec<Example>> {
    clips
        .iter()
        .map(|c| example_from_clip(graph, c, flow))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    /// The learning rate is divided by this on every plateau.
    pub drop_factor: f32,
    /// Evaluations without improvement before a drop; `None` never drops.
    pub patience: Option<usize>,
    pub min_delta: f32,
    pub max_steps: usize,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub seed: u64,
    /// Rescale gradients whose global L2 norm exceeds this.
    pub clip_grad_norm: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            drop_factor: 10.0,
            patience: Some(3),
            min_delta: 1e-3,
            max_steps: 1000,
            batch_size: 8,
            eval_interval: 50,
            seed: 0,
            clip_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("TrainConfig", r.to_string()));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.drop_factor > 1.0) {
            return bad("drop factor must exceed 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch size and eval interval must be at least 1");
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("gradient clip norm must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f32,
    pub train_loss: f32,
    pub val_loss: f32,
    pub val_acc: f32,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub momentum: f32,
    pub velocity: BTreeMap<String, Tensor>,
    pub lr: f32,
    pub step: usize,
    pub best_val_loss: f32,
    pub history: Vec<HistoryRow>,
}

impl TrainState {
    pub fn new(lr: f32, momentum: f32) -> Self {
        TrainState {
            momentum,
            velocity: BTreeMap::new(),
            lr,
            step: 0,
            best_val_loss: f32::INFINITY,
            history: Vec::new(),
        }
    }
}

/// Classic momentum: `v ← μ·v + g`, `p ← p − lr·v`.
pub fn sgd_momentum_step(
    params: &mut Checkpoint,
    grads: &Gradients,
    state: &mut TrainState,
    lr: f32,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape("sgd_momentum_step", p.shape(), g.shape()));
        }
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
        if v.shape() != g.shape() {
            return Err(Error::shape("sgd_momentum_step", v.shape(), g.shape()));
        }
        let mu = state.momentum;
        for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = mu * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f32) -> f32 {
    let norm = grads.values().map(|g| g.dot(g)).sum::<f64>().sqrt() as f32;
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

fn stack_inputs(examples: &[&Example]) -> Result<Vec<Tensor>> {
    let n = examples[0].inputs.len();
    (0..n)
        .map(|i| {
            let items = examples
                .iter()
                .map(|e| with_batch_axis(&e.inputs[i]))
                .collect::<Result<Vec<_>>>()?;
            Tensor::stack_batch(&items)
        })
        .collect()
}

pub(crate) fn with_batch_axis(x: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.clone().reshape(shape)
}

/// Splits inputs into the views the graph is evaluated on. Graphs with a
/// fully connected layer need their nominal clip length, so longer inputs
/// are cut into consecutive windows; other graphs see the whole clip.
fn views(graph: &GraphSpec, example: &Example) -> Vec<Example> {
    if graph.count("linear") == 0 {
        return vec![example.clone()];
    }
    let nominal = nominal_input_shapes(graph);
    let windows = example
        .inputs
        .iter()
        .zip(&nominal)
        .map(|(x, s)| x.shape()[1] / s[1].max(1))
        .min()
        .unwrap_or(1)
        .max(1);
    (0..windows)
        .map(|k| Example {
            inputs: example
                .inputs
                .iter()
                .zip(&nominal)
                .map(|(x, s)| time_window(x, k * s[1], s[1].min(x.shape()[1])))
                .collect(),
            label: example.label,
        })
        .collect()
}

fn time_window(x: &Tensor, start: usize, len: usize) -> Tensor {
    let &[c, t, h, w] = x.shape() else {
        unreachable!("(C, T, H, W) input")
    };
    if start == 0 && len == t {
        return x.clone();
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(c * len * plane);
    for ci in 0..c {
        let from = (ci * t + start) * plane;
        data.extend_from_slice(&x.data()[from..from + len * plane]);
    }
    Tensor::new(vec![c, len, h, w], data).unwrap()
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub accuracy: f32,
    pub loss: f32,
    /// `(correct, total)` per class.
    pub per_class: Vec<(usize, usize)>,
    /// Averaged class probabilities per example.
    pub probabilities: Vec<Vec<f32>>,
}

const EVAL_BATCH: usize = 16;

/// Accuracy with per-example predictions averaged over views.
pub fn evaluate(
    graph: &GraphSpec,
    weights: &Checkpoint,
    dataset: &[Example],
    mode: Mode,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    let mut flat = Vec::new();
    let mut owner = Vec::new();
    for (i, e) in dataset.iter().enumerate() {
        for v in views(graph, e) {
            flat.push(v);
            owner.push(i);
        }
    }
    let mut sums: Vec<Vec<f32>> = vec![Vec::new(); dataset.len()];
    let mut counts = vec![0usize; dataset.len()];
    for (chunk, owners) in flat.chunks(EVAL_BATCH).zip(owner.chunks(EVAL_BATCH)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let fwd = forward(graph, weights, &stack_inputs(&refs)?, mode)?;
        let probs = class_probabilities(graph, fwd.output(graph))?;
        for (p, &o) in probs.into_iter().zip(owners) {
            if sums[o].is_empty() {
                sums[o] = vec![0.0; p.len()];
            }
            sums[o].iter_mut().zip(&p).for_each(|(s, v)| *s += v);
            counts[o] += 1;
        }
    }
    let k = sums[0].len();
    let mut per_class = vec![(0, 0); k];
    let (mut correct, mut loss) = (0usize, 0.0f64);
    let probabilities: Vec<Vec<f32>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| v / c as f32).collect())
        .collect();
    for (p, e) in probabilities.iter().zip(dataset) {
        if e.label >= k {
            return Err(Error::invalid(
                "evaluate",
                format!("label {} out of range for {k} classes", e.label),
            ));
        }
        let pred = argmax(p);
        per_class[e.label].1 += 1;
        if pred == e.label {
            per_class[e.label].0 += 1;
            correct += 1;
        }
        loss -= (p[e.label].max(1e-12) as f64).ln();
    }
    Ok(EvalReport {
        accuracy: correct as f32 / dataset.len() as f32,
        loss: (loss / dataset.len() as f64) as f32,
        per_class,
        probabilities,
    })
}

/// Index of the largest value, the first one on ties.
pub fn argmax(values: &[f32]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights at the best validation loss.
    pub best: Checkpoint,
    /// Weights after the last step.
    pub last: Checkpoint,
    pub state: TrainState,
}

/// Mean training loss of one batch, weights, and gradients.
pub fn batch_loss_and_grad(
    graph: &GraphSpec,
    params: &Checkpoint,
    batch: &[&Example],
    mode: Mode,
) -> Result<(f32, Gradients, crate::graph::Forward)> {
    let inputs = stack_inputs(batch)?;
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let fwd = forward(graph, params, &inputs, mode)?;
    let (loss, grad) = loss_and_grad(graph, fwd.output(graph), &labels)?;
    let grads = backward(graph, params, &fwd, grad)?;
    Ok((loss, grads, fwd))
}

/// Minibatch training from `init`. Validation runs every `eval_interval`
/// steps and after the last step.
pub fn train(
    graph: &GraphSpec,
    init: Checkpoint,
    train_set: &[Example],
    val_set: &[Example],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::invalid(
            "train",
            "training and validation sets must be non-empty",
        ));
    }
    let mut params = init;
    let mut best = params.clone();
    let mut state = TrainState::new(config.learning_rate, config.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let (mut loss_sum, mut loss_count) = (0.0f64, 0usize);
    let mut stale = 0usize;

    while state.step < config.max_steps {
        if order.len() < config.batch_size {
            let mut epoch: Vec<usize> = (0..train_set.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let idx: Vec<usize> = order.drain(..config.batch_size.min(order.len())).collect();
        let batch: Vec<&Example> = idx.iter().map(|&i| &train_set[i]).collect();
        let (loss, mut grads, fwd) = match batch_loss_and_grad(graph, &params, &batch, Mode::Train)
        {
            Err(Error::NonFinite { .. }) => {
                return Err(Error::Diverged {
                    step: state.step,
                    loss: f32::NAN,
                })
            }
            other => other?,
        };
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step: state.step,
                loss,
            });
        }
        if let Some(max) = config.clip_grad_norm {
            clip_global_norm(&mut grads, max);
        }
        let lr = state.lr;
        sgd_momentum_step(&mut params, &grads, &mut state, lr)?;
        fwd.apply_running_stats(&mut params)?;
        state.step += 1;
        loss_sum += loss as f64;
        loss_count += 1;

        if state.step % config.eval_interval == 0 || state.step == config.max_steps {
            let report = evaluate(graph, &params, val_set, Mode::Infer)?;
            state.history.push(HistoryRow {
                step: state.step,
                lr: state.lr,
                train_loss: (loss_sum / loss_count as f64) as f32,
                val_loss: report.loss,
                val_acc: report.accuracy,
            });
            loss_sum = 0.0;
            loss_count = 0;
            if report.loss < state.best_val_loss - config.min_delta {
                state.best_val_loss = report.loss;
                best = params.clone();
                stale = 0;
            } else {
                stale += 1;
                if config.patience.is_some_and(|p| stale >= p) {
                    state.lr /= config.drop_factor;
                    stale = 0;
                }
            }
        }
    }
    Ok(TrainOutcome {
        best,
        last: params,
        state,
    })
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("step,lr,train_loss,val_loss,val_acc\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.step, r.lr, r.train_loss, r.val_loss, r.val_acc
        )
        .unwrap();
    }
    out
}

pub fn write_history_csv(path: impl AsRef<Path>, rows: &[HistoryRow]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, history_csv(rows)).map_err(|e| Error::io(path, e))
}

/// True when any node of `graph` is an LSTM.
pub fn is_recurrent(graph: &GraphSpec) -> bool {
    graph.nodes.iter().any(|n| matches!(n.op, Op::Lstm { .. }))
}

//! Forward and reverse-mode execution of a [`GraphSpec`] against a
//! [`Checkpoint`] of weights.

use std::collections::BTreeMap;

use rand::Rng;

use super::spec::{node_params, GraphSpec, Head, Op};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::ops::{
    self, add_channel_bias, batchnorm_backward, batchnorm_forward, channel_bias_grad,
    conv3d_forward, linear_backward, linear_forward, lstm_sequence_backward, lstm_sequence_forward,
    pool3d_backward, pool3d_forward, relu, relu_backward, softmax_channels,
    softmax_channels_backward, BatchNormCache, BatchNormState, LstmCache, LstmParams, Mode,
    PoolCache,
};
use crate::tensor::Tensor;

/// Random weights for every parameter of `graph`: He-normal convolutions
/// and linear layers (or the node's own Gaussian std), unit batch-norm
/// scale, zero offsets and biases.
pub fn init_params(graph: &GraphSpec, rng: &mut impl Rng) -> Checkpoint {
    let mut ckpt = Checkpoint::new(graph.family.name());
    ckpt.set_graph(graph);
    for node in &graph.nodes {
        let id = &node.id;
        match &node.op {
            Op::Conv {
                in_channels,
                out_channels,
                spec,
                init_std,
                ..
            } => {
                let params = node_params(node);
                let fan_in = in_channels * spec.kernel.iter().product::<usize>();
                let std = init_std.unwrap_or((2.0 / fan_in as f32).sqrt());
                ckpt.insert(
                    &params[0].name,
                    Tensor::randn(params[0].shape.clone(), std, rng),
                );
                if spec.use_bias {
                    ckpt.insert(format!("{id}/bias"), Tensor::zeros(vec![*out_channels]));
                }
            }
            Op::Linear {
                in_features,
                out_features,
                init_std,
            } => {
                let std = init_std.unwrap_or((2.0 / *in_features as f32).sqrt());
                ckpt.insert(
                    format!("{id}/weight"),
                    Tensor::randn(vec![*out_features, *in_features], std, rng),
                );
                ckpt.insert(format!("{id}/bias"), Tensor::zeros(vec![*out_features]));
            }
            Op::BatchNorm { channels } => insert_bn(&mut ckpt, id, &BatchNormState::new(*channels)),
            Op::Lstm { input_size, hidden } => {
                let g = 4 * hidden;
                ckpt.insert(
                    format!("{id}/w_input"),
                    Tensor::randn(vec![g, *input_size], (1.0 / *input_size as f32).sqrt(), rng),
                );
                ckpt.insert(
                    format!("{id}/w_hidden"),
                    Tensor::randn(vec![g, *hidden], (1.0 / *hidden as f32).sqrt(), rng),
                );
                let mut bias = Tensor::zeros(vec![g]);
                bias.data_mut()[*hidden..2 * hidden].fill(1.0);
                ckpt.insert(format!("{id}/bias"), bias);
                let mut bn = BatchNormState::new(g);
                bn.gamma.fill(0.1);
                insert_bn(&mut ckpt, &format!("{id}/bn_input"), &bn);
                insert_bn(&mut ckpt, &format!("{id}/bn_hidden"), &bn);
            }
            _ => {}
        }
    }
    ckpt
}

fn insert_bn(ckpt: &mut Checkpoint, prefix: &str, s: &BatchNormState) {
    let c = s.channels();
    let t = |v: &[f32]| Tensor::new(vec![c], v.to_vec()).expect("matching length");
    ckpt.insert(format!("{prefix}/gamma"), t(&s.gamma));
    ckpt.insert(format!("{prefix}/beta"), t(&s.beta));
    ckpt.insert(format!("{prefix}/running_mean"), t(&s.running_mean));
    ckpt.insert(format!("{prefix}/running_var"), t(&s.running_var));
}

fn read_bn(ckpt: &Checkpoint, prefix: &str) -> Result<BatchNormState> {
    let v =
        |s: &str| -> Result<Vec<f32>> { Ok(ckpt.get(&format!("{prefix}/{s}"))?.data().to_vec()) };
    let mut st = BatchNormState::new(0);
    st.gamma = v("gamma")?;
    st.beta = v("beta")?;
    st.running_mean = v("running_mean")?;
    st.running_var = v("running_var")?;
    Ok(st)
}

fn read_lstm(ckpt: &Checkpoint, id: &str) -> Result<LstmParams> {
    Ok(LstmParams {
        w_input: ckpt.get(&format!("{id}/w_input"))?.clone(),
        w_hidden: ckpt.get(&format!("{id}/w_hidden"))?.clone(),
        bias: ckpt.get(&format!("{id}/bias"))?.clone(),
        bn_input: read_bn(ckpt, &format!("{id}/bn_input"))?,
        bn_hidden: read_bn(ckpt, &format!("{id}/bn_hidden"))?,
    })
}

#[derive(Debug)]
enum Cache {
    None,
    BatchNorm(BatchNormCache),
    Pool(PoolCache),
    Lstm(Box<LstmCache>),
}

/// Activations of every node plus what the backward pass needs.
#[derive(Debug)]
pub struct Forward {
    values: Vec<Tensor>,
    caches: Vec<Cache>,
    mode: Mode,
    /// Running statistics updated by train-mode batch norm.
    running: Vec<(String, Vec<f32>)>,
}

impl Forward {
    pub fn value(&self, node: usize) -> &Tensor {
        &self.values[node]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn output<'a>(&'a self, graph: &GraphSpec) -> &'a Tensor {
        &self.values[graph.output]
    }

    pub fn into_values(self) -> Vec<Tensor> {
        self.values
    }

    /// Writes train-mode running statistics back into the checkpoint.
    pub fn apply_running_stats(&self, params: &mut Checkpoint) -> Result<()> {
        for (name, v) in &self.running {
            let t = params.get_mut(name)?;
            t.data_mut().copy_from_slice(v);
        }
        Ok(())
    }
}

fn record_bn(running: &mut Vec<(String, Vec<f32>)>, prefix: &str, st: &BatchNormState) {
    running.push((format!("{prefix}/running_mean"), st.running_mean.clone()));
    running.push((format!("{prefix}/running_var"), st.running_var.clone()));
}

/// `(N, C, inner)` of a tensor with at least two axes.
fn nci(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2..].iter().product())
}

/// Evaluates every node. `inputs` are `(N, C, T, H, W)` tensors in the
/// order of `graph.inputs`; all must share `N`.
pub fn forward(
    graph: &GraphSpec,
    params: &Checkpoint,
    inputs: &[Tensor],
    mode: Mode,
) -> Result<Forward> {
    if inputs.len() != graph.inputs.len() {
        return Err(Error::invalid(
            "forward",
            format!(
                "graph takes {} inputs, got {}",
                graph.inputs.len(),
                inputs.len()
            ),
        ));
    }
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.nodes.len());
    let mut caches = Vec::with_capacity(graph.nodes.len());
    let mut running = Vec::new();
    for (i, node) in graph.nodes.iter().enumerate() {
        let ctx = |e: Error| Error::at_layer(&node.id, e);
        let x = node.inputs.first().map(|&j| &values[j]);
        let (value, cache) = match &node.op {
            Op::Input { channels, .. } => {
                let k = graph
                    .inputs
                    .iter()
                    .position(|&j| j == i)
                    .expect("validated graph");
                let t = &inputs[k];
                let d = t.dims5("input").map_err(ctx)?;
                if d[1] != *channels {
                    return Err(ctx(Error::shape(
                        "input channels",
                        &[d[0], *channels, d[2], d[3], d[4]],
                        t.shape(),
                    )));
                }
                if d[0] != inputs[0].shape()[0] {
                    return Err(ctx(Error::invalid(
                        "forward",
                        "inputs disagree on batch size",
                    )));
                }
                (t.clone(), Cache::None)
            }
            Op::Conv { spec, .. } => {
                let x = x.unwrap();
                let w = params.get(&format!("{}/weight", node.id))?;
                let mut y = conv3d_forward(x, w, spec).map_err(ctx)?;
                if spec.use_bias {
                    add_channel_bias(&mut y, params.get(&format!("{}/bias", node.id))?)
                        .map_err(ctx)?;
                }
                (y, Cache::None)
            }
            Op::BatchNorm { .. } => {
                let mut st = read_bn(params, &node.id)?;
                let (y, c) = batchnorm_forward(x.unwrap(), &mut st, mode).map_err(ctx)?;
                if mode == Mode::Train {
                    record_bn(&mut running, &node.id, &st);
                }
                (y, Cache::BatchNorm(c))
            }
            Op::Relu => (relu(x.unwrap()), Cache::None),
            Op::Pool(spec) => {
                let (y, c) = pool3d_forward(x.unwrap(), spec).map_err(ctx)?;
                (y, Cache::Pool(c))
            }
            Op::Concat => {
                let parts: Vec<&Tensor> = node.inputs.iter().map(|&j| &values[j]).collect();
                (concat_channels(&parts).map_err(ctx)?, Cache::None)
            }
            Op::Add | Op::Average => {
                let mut acc = values[node.inputs[0]].clone();
                for &j in &node.inputs[1..] {
                    acc.add_assign(&values[j]).map_err(ctx)?;
                }
                if matches!(node.op, Op::Average) {
                    acc = acc.scale(1.0 / node.inputs.len() as f32);
                }
                (acc, Cache::None)
            }
            Op::Mean => {
                let x = x.unwrap();
                let (n, c, inner) = nci(x);
                let data = x
                    .data()
                    .chunks(inner)
                    .map(|s| (s.iter().map(|&v| v as f64).sum::<f64>() / inner as f64) as f32)
                    .collect();
                (Tensor::new(vec![n, c, 1, 1, 1], data)?, Cache::None)
            }
            Op::Linear { .. } => {
                let w = params.get(&format!("{}/weight", node.id))?;
                let b = params.get(&format!("{}/bias", node.id))?;
                let y = linear_forward(x.unwrap(), w, Some(b)).map_err(ctx)?;
                let [n, o] = y.dims2("linear")?;
                (y.reshape(vec![n, o, 1, 1, 1])?, Cache::None)
            }
            Op::Lstm { .. } => {
                let x = x.unwrap();
                let [n, f, t, h, w] = x.dims5("lstm").map_err(ctx)?;
                if h != 1 || w != 1 {
                    return Err(ctx(Error::invalid(
                        "lstm",
                        "expects (N, F, T, 1, 1) features",
                    )));
                }
                let mut p = read_lstm(params, &node.id)?;
                let seq = x.clone().reshape(vec![n, f, t])?;
                let (hs, cache) = lstm_sequence_forward(&seq, &mut p, mode).map_err(ctx)?;
                if mode == Mode::Train {
                    record_bn(&mut running, &format!("{}/bn_input", node.id), &p.bn_input);
                    record_bn(
                        &mut running,
                        &format!("{}/bn_hidden", node.id),
                        &p.bn_hidden,
                    );
                }
                let hd = p.hidden();
                (
                    hs.reshape(vec![n, hd, t, 1, 1])?,
                    Cache::Lstm(Box::new(cache)),
                )
            }
            Op::Softmax => (softmax_channels(x.unwrap()).map_err(ctx)?, Cache::None),
        };
        values.push(value);
        caches.push(cache);
    }
    Ok(Forward {
        values,
        caches,
        mode,
        running,
    })
}

fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let s0 = parts[0].shape();
    let n = s0[0];
    let inner: usize = s0[2..].iter().product();
    let mut c_total = 0;
    for p in parts {
        if p.shape()[0] != n || p.shape()[2..] != s0[2..] {
            return Err(Error::shape("concat", s0, p.shape()));
        }
        c_total += p.shape()[1];
    }
    let mut data = Vec::with_capacity(n * c_total * inner);
    for b in 0..n {
        for p in parts {
            let chunk = p.shape()[1] * inner;
            data.extend_from_slice(&p.data()[b * chunk..(b + 1) * chunk]);
        }
    }
    let mut shape = s0.to_vec();
    shape[1] = c_total;
    Tensor::new(shape, data)
}

fn split_channels(grad: &Tensor, parts: &[usize]) -> Result<Vec<Tensor>> {
    let (n, _, inner) = nci(grad);
    let mut outs: Vec<Vec<f32>> = parts
        .iter()
        .map(|c| Vec::with_capacity(n * c * inner))
        .collect();
    let mut off = 0;
    for _ in 0..n {
        for (k, &c) in parts.iter().enumerate() {
            outs[k].extend_from_slice(&grad.data()[off..off + c * inner]);
            off += c * inner;
        }
    }
    parts
        .iter()
        .zip(outs)
        .map(|(&c, d)| {
            let mut shape = grad.shape().to_vec();
            shape[1] = c;
            Tensor::new(shape, d)
        })
        .collect()
}

pub type Gradients = BTreeMap<String, Tensor>;

/// Gradients of every trainable parameter given the gradient of the
/// graph output.
pub fn backward(
    graph: &GraphSpec,
    params: &Checkpoint,
    fwd: &Forward,
    grad_output: Tensor,
) -> Result<Gradients> {
    grad_output.expect_shape("backward", fwd.values[graph.output].shape())?;
    let n = graph.nodes.len();
    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    grads[graph.output] = Some(grad_output);
    let mut out = Gradients::new();
    let is_input = |j: usize| matches!(graph.nodes[j].op, Op::Input { .. });

    let accumulate = |grads: &mut Vec<Option<Tensor>>, j: usize, g: Tensor| -> Result<()> {
        match &mut grads[j] {
            Some(acc) => acc.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    };

    for i in (0..n).rev() {
        let Some(g) = grads[i].take() else { continue };
        let node = &graph.nodes[i];
        let ctx = |e: Error| Error::at_layer(&node.id, e);
        let xi = node.inputs.first().copied();
        let x = xi.map(|j| &fwd.values[j]);
        match (&node.op, &fwd.caches[i]) {
            (Op::Input { .. }, _) => {}
            (Op::Conv { spec, .. }, _) => {
                let w = params.get(&format!("{}/weight", node.id))?;
                let need_x = !is_input(xi.unwrap());
                let (gx, gw) = ops::conv::conv3d_backward_impl(&g, x.unwrap(), w, spec, need_x)
                    .map_err(ctx)?;
                out.insert(format!("{}/weight", node.id), gw);
                if spec.use_bias {
                    out.insert(format!("{}/bias", node.id), channel_bias_grad(&g));
                }
                if let Some(gx) = gx {
                    accumulate(&mut grads, xi.unwrap(), gx)?;
                }
            }
            (Op::BatchNorm { .. }, Cache::BatchNorm(c)) => {
                let gamma = params.get(&format!("{}/gamma", node.id))?;
                let (gx, gg, gb) = batchnorm_backward(&g, c, gamma.data()).map_err(ctx)?;
                let ch = gg.len();
                out.insert(format!("{}/gamma", node.id), Tensor::new(vec![ch], gg)?);
                out.insert(format!("{}/beta", node.id), Tensor::new(vec![ch], gb)?);
                accumulate(&mut grads, xi.unwrap(), gx)?;
            }
            (Op::Relu, _) => {
                let gx = relu_backward(&g, x.unwrap()).map_err(ctx)?;
                accumulate(&mut grads, xi.unwrap(), gx)?;
            }
            (Op::Pool(spec), Cache::Pool(c)) => {
                let gx = pool3d_backward(&g, x.unwrap().shape(), spec, c).map_err(ctx)?;
                accumulate(&mut grads, xi.unwrap(), gx)?;
            }
            (Op::Concat, _) => {
                let parts: Vec<usize> = node
                    .inputs
                    .iter()
                    .map(|&j| fwd.values[j].shape()[1])
                    .collect();
                for (&j, gx) in node.inputs.iter().zip(split_channels(&g, &parts)?) {
                    accumulate(&mut grads, j, gx)?;
                }
            }
            (Op::Add | Op::Average, _) => {
                let share = if matches!(node.op, Op::Average) {
                    g.scale(1.0 / node.inputs.len() as f32)
                } else {
                    g
                };
                for &j in &node.inputs {
                    accumulate(&mut grads, j, share.clone())?;
                }
            }
            (Op::Mean, _) => {
                let x = x.unwrap();
                let (_, _, inner) = nci(x);
                let mut gx = Vec::with_capacity(x.len());
                for &v in g.data() {
                    gx.extend(std::iter::repeat_n(v / inner as f32, inner));
                }
                accumulate(
                    &mut grads,
                    xi.unwrap(),
                    Tensor::new(x.shape().to_vec(), gx)?,
                )?;
            }
            (Op::Linear { .. }, _) => {
                let w = params.get(&format!("{}/weight", node.id))?;
                let [nb, o, ..] = g.dims5("linear grad")?;
                let g2 = g.reshape(vec![nb, o])?;
                let (gx, gw, gb) = linear_backward(&g2, x.unwrap(), w).map_err(ctx)?;
                out.insert(format!("{}/weight", node.id), gw);
                out.insert(format!("{}/bias", node.id), gb);
                accumulate(&mut grads, xi.unwrap(), gx)?;
            }
            (Op::Lstm { .. }, Cache::Lstm(c)) => {
                let p = read_lstm(params, &node.id)?;
                let [nb, hd, t, _, _] = g.dims5("lstm grad")?;
                let dhs = g.reshape(vec![nb, hd, t])?;
                let (dx, lg) = lstm_sequence_backward(&dhs, c, &p).map_err(ctx)?;
                let id = &node.id;
                let vec_t = |v: Vec<f32>| Tensor::new(vec![v.len()], v);
                out.insert(format!("{id}/w_input"), lg.w_input);
                out.insert(format!("{id}/w_hidden"), lg.w_hidden);
                out.insert(format!("{id}/bias"), lg.bias);
                out.insert(format!("{id}/bn_input/gamma"), vec_t(lg.gamma_input)?);
                out.insert(format!("{id}/bn_input/beta"), vec_t(lg.beta_input)?);
                out.insert(format!("{id}/bn_hidden/gamma"), vec_t(lg.gamma_hidden)?);
                out.insert(format!("{id}/bn_hidden/beta"), vec_t(lg.beta_hidden)?);
                let shape = x.unwrap().shape().to_vec();
                accumulate(&mut grads, xi.unwrap(), dx.reshape(shape)?)?;
            }
            (Op::Softmax, _) => {
                let gx = softmax_channels_backward(&g, &fwd.values[i]).map_err(ctx)?;
                accumulate(&mut grads, xi.unwrap(), gx)?;
            }
            (op, _) => {
                return Err(ctx(Error::invalid(
                    "backward",
                    format!("no cache for {}", op.kind()),
                )));
            }
        }
    }
    Ok(out)
}

/// Loss of the graph output against labels for the graph's head, and its
/// gradient with respect to that output.
pub fn loss_and_grad(
    graph: &GraphSpec,
    output: &Tensor,
    labels: &[usize],
) -> Result<(f32, Tensor)> {
    match graph.head {
        Head::Logits | Head::PerStepLogits => {
            let (loss, probs) = ops::softmax_cross_entropy(output, labels)?;
            Ok((loss, ops::softmax_cross_entropy_backward(&probs, labels)?))
        }
        Head::Probabilities => Ok((
            ops::nll_loss(output, labels)?,
            ops::nll_loss_backward(output, labels)?,
        )),
    }
}

/// Per-item class probabilities read off the graph output: softmax of the
/// logits, the averaged probabilities as-is, or the last step's softmax
/// for per-step heads.
pub fn class_probabilities(graph: &GraphSpec, output: &Tensor) -> Result<Vec<Vec<f32>>> {
    let [n, k, t, _, _] = output.dims5("class_probabilities")?;
    let probs = match graph.head {
        Head::Probabilities => output.clone(),
        Head::Logits | Head::PerStepLogits => softmax_channels(output)?,
    };
    let pos = t * output.shape()[3] * output.shape()[4];
    Ok((0..n)
        .map(|b| {
            (0..k)
                .map(|c| probs.data()[(b * k + c) * pos + pos - 1])
                .collect()
        })
        .collect())
}

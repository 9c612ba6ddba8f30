use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{ConvSpec, PoolSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Lstm,
    C3d,
    TwoStream,
    Fused3d,
    I3d,
    Inception2d,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Lstm,
        Family::C3d,
        Family::TwoStream,
        Family::Fused3d,
        Family::I3d,
        Family::Inception2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Lstm => "lstm",
            Family::C3d => "c3d",
            Family::TwoStream => "two-stream",
            Family::Fused3d => "fused3d",
            Family::I3d => "i3d",
            Family::Inception2d => "inception2d",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Family::ALL
            .into_iter()
            .find(|f| f.name() == norm || (norm == "fused-3d" && *f == Family::Fused3d))
            .ok_or_else(|| Error::invalid("family", format!("unknown family `{s}`")))
    }
}

/// What the graph's output node holds, which fixes the loss and how
/// predictions are read off it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// `(N, K, 1, 1, 1)` class scores.
    Logits,
    /// `(N, K, 1, 1, 1)` class probabilities (already averaged softmaxes).
    Probabilities,
    /// `(N, K, T, 1, 1)` scores at every time step.
    PerStepLogits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Input {
        channels: usize,
        frames: usize,
        height: usize,
        width: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        spec: ConvSpec,
        /// Weights stored as `(outC, inC, kH, kW)`.
        planar: bool,
        /// Gaussian init std for freshly added layers; He init otherwise.
        init_std: Option<f32>,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Pool(PoolSpec),
    /// Channel-axis concatenation.
    Concat,
    Add,
    /// Elementwise mean of the inputs.
    Average,
    /// Mean over `(T, H, W)`.
    Mean,
    Linear {
        in_features: usize,
        out_features: usize,
        init_std: Option<f32>,
    },
    Lstm {
        input_size: usize,
        hidden: usize,
    },
    Softmax,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv { .. } => "conv",
            Op::BatchNorm { .. } => "bn",
            Op::Relu => "relu",
            Op::Pool(_) => "pool",
            Op::Concat => "concat",
            Op::Add => "add",
            Op::Average => "average",
            Op::Mean => "mean",
            Op::Linear { .. } => "linear",
            Op::Lstm { .. } => "lstm",
            Op::Softmax => "softmax",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Updated by the optimizer and counted as a parameter.
    Trainable,
    /// Batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
}

/// Parameter tensors a node owns, in a fixed order.
pub fn node_params(node: &Node) -> Vec<ParamInfo> {
    let p = |suffix: &str, shape: Vec<usize>, role| ParamInfo {
        name: format!("{}/{suffix}", node.id),
        shape,
        role,
    };
    let bn = |prefix: &str, c: usize| {
        let q = |s: &str, role| p(&format!("{prefix}{s}"), vec![c], role);
        [
            q("gamma", ParamRole::Trainable),
            q("beta", ParamRole::Trainable),
            q("running_mean", ParamRole::Buffer),
            q("running_var", ParamRole::Buffer),
        ]
    };
    match &node.op {
        Op::Conv {
            in_channels,
            out_channels,
            spec,
            planar,
            ..
        } => {
            let [kt, kh, kw] = spec.kernel;
            let shape = if *planar {
                vec![*out_channels, *in_channels, kh, kw]
            } else {
                vec![*out_channels, *in_channels, kt, kh, kw]
            };
            let mut v = vec![p("weight", shape, ParamRole::Trainable)];
            if spec.use_bias {
                v.push(p("bias", vec![*out_channels], ParamRole::Trainable));
            }
            v
        }
        Op::BatchNorm { channels } => bn("", *channels).to_vec(),
        Op::Linear {
            in_features,
            out_features,
            ..
        } => vec![
            p(
                "weight",
                vec![*out_features, *in_features],
                ParamRole::Trainable,
            ),
            p("bias", vec![*out_features], ParamRole::Trainable),
        ],
        Op::Lstm { input_size, hidden } => {
            let g = 4 * hidden;
            let mut v = vec![
                p("w_input", vec![g, *input_size], ParamRole::Trainable),
                p("w_hidden", vec![g, *hidden], ParamRole::Trainable),
                p("bias", vec![g], ParamRole::Trainable),
            ];
            v.extend(bn("bn_input/", g));
            v.extend(bn("bn_hidden/", g));
            v
        }
        _ => Vec::new(),
    }
}

/// An immutable network description. Nodes are stored in topological
/// order: every input index is smaller than the consuming node's index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub family: Family,
    pub nodes: Vec<Node>,
    /// Input node indices in the order tensors are fed.
    pub inputs: Vec<usize>,
    pub output: usize,
    pub head: Head,
}

impl GraphSpec {
    pub fn node_index(&self, id: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.id == id)
            .ok_or_else(|| Error::Graph(format!("no layer named `{id}`")))
    }

    pub fn node(&self, id: &str) -> Result<&Node> {
        Ok(&self.nodes[self.node_index(id)?])
    }

    pub fn params(&self) -> Vec<ParamInfo> {
        self.nodes.iter().flat_map(node_params).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: GraphSpec =
            serde_json::from_str(text).map_err(|e| Error::Graph(format!("bad graph json: {e}")))?;
        g.validate()?;
        Ok(g)
    }

    /// Structural checks: topological order, unique ids, arities and
    /// declared channel agreement along every edge.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if !seen.insert(node.id.as_str()) {
                return Err(Error::Graph(format!("duplicate layer id `{}`", node.id)));
            }
            if let Some(&bad) = node.inputs.iter().find(|&&j| j >= i) {
                return Err(Error::Graph(format!(
                    "`{}` reads node {bad}, which does not precede it",
                    node.id
                )));
            }
            let arity_ok = match node.op {
                Op::Input { .. } => node.inputs.is_empty(),
                Op::Concat | Op::Add | Op::Average => !node.inputs.is_empty(),
                _ => node.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::Graph(format!(
                    "`{}` ({}) has {} inputs",
                    node.id,
                    node.op.kind(),
                    node.inputs.len()
                )));
            }
        }
        let channels = self.channels()?;
        for node in &self.nodes {
            let expected = match node.op {
                Op::Conv { in_channels, .. } => Some(in_channels),
                Op::BatchNorm { channels } => Some(channels),
                Op::Lstm { input_size, .. } => Some(input_size),
                _ => None,
            };
            if let (Some(e), Some(&src)) = (expected, node.inputs.first()) {
                if channels[src] != e {
                    return Err(Error::Graph(format!(
                        "`{}` expects {e} input channels but `{}` produces {}",
                        node.id, self.nodes[src].id, channels[src]
                    )));
                }
            }
        }
        for &i in &self.inputs {
            if !matches!(self.nodes.get(i).map(|n| &n.op), Some(Op::Input { .. })) {
                return Err(Error::Graph(format!(
                    "graph input {i} is not an input node"
                )));
            }
        }
        if self.output >= self.nodes.len() {
            return Err(Error::Graph("output index out of range".into()));
        }
        Ok(())
    }

    /// Output channel count of every node.
    pub fn channels(&self) -> Result<Vec<usize>> {
        let mut out: Vec<usize> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let first = node.inputs.first().map(|&j| out[j]);
            let c = match &node.op {
                Op::Input { channels, .. } => *channels,
                Op::Conv { out_channels, .. } => *out_channels,
                Op::Linear { out_features, .. } => *out_features,
                Op::Lstm { hidden, .. } => *hidden,
                Op::Concat => node.inputs.iter().map(|&j| out[j]).sum(),
                Op::Add | Op::Average => {
                    let c = first.unwrap_or(0);
                    if node.inputs.iter().any(|&j| out[j] != c) {
                        return Err(Error::Graph(format!(
                            "`{}` merges inputs with different channel counts",
                            node.id
                        )));
                    }
                    c
                }
                _ => first.unwrap_or(0),
            };
            out.push(c);
        }
        Ok(out)
    }

    pub fn count(&self, kind: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }
}

//! Static analyses over a [`GraphSpec`]: shapes, parameter counts and
//! theoretical receptive fields.

use std::fmt::Write as _;

use super::spec::{node_params, GraphSpec, Op, ParamRole};
use crate::error::{Error, Result};

/// Per-sample activation shape `(C, T, H, W)`.
pub type NodeShape = [usize; 4];

/// The `(C, T, H, W)` geometry declared by each input node.
pub fn nominal_input_shapes(graph: &GraphSpec) -> Vec<NodeShape> {
    graph
        .inputs
        .iter()
        .map(|&i| match graph.nodes[i].op {
            Op::Input {
                channels,
                frames,
                height,
                width,
            } => [channels, frames, height, width],
            _ => unreachable!("validated graph"),
        })
        .collect()
}

/// Output shape of every node for the given input shapes.
pub fn infer_shapes(graph: &GraphSpec, inputs: &[NodeShape]) -> Result<Vec<NodeShape>> {
    if inputs.len() != graph.inputs.len() {
        return Err(Error::invalid(
            "infer_shapes",
            format!(
                "graph has {} inputs, got {}",
                graph.inputs.len(),
                inputs.len()
            ),
        ));
    }
    let mut shapes: Vec<NodeShape> = Vec::with_capacity(graph.nodes.len());
    for i in 0..graph.nodes.len() {
        let shape = shape_of(graph, i, &shapes, inputs)?;
        shapes.push(shape);
    }
    Ok(shapes)
}

/// Output shape of node `i` given the shapes of all earlier nodes.
pub(crate) fn shape_of(
    graph: &GraphSpec,
    i: usize,
    shapes: &[NodeShape],
    inputs: &[NodeShape],
) -> Result<NodeShape> {
    let node = &graph.nodes[i];
    let ins: Vec<NodeShape> = node.inputs.iter().map(|&j| shapes[j]).collect();
    let fail = |reason: String| Error::Graph(format!("layer `{}`: {reason}", node.id));
    let x = ins.first().copied().unwrap_or([0; 4]);
    let [c, t, h, w] = x;
    let shape = match &node.op {
        Op::Input { channels, .. } => {
            let k = graph
                .inputs
                .iter()
                .position(|&j| j == i)
                .ok_or_else(|| fail("input node is not listed as a graph input".into()))?;
            let s = inputs[k];
            if s[0] != *channels {
                return Err(fail(format!("expects {channels} channels, got {}", s[0])));
            }
            s
        }
        Op::Conv {
            in_channels,
            out_channels,
            spec,
            ..
        } => {
            if c != *in_channels {
                return Err(fail(format!("expects {in_channels} channels, got {c}")));
            }
            let [t, h, w] = spec
                .output_extent([t, h, w])
                .map_err(|e| fail(e.to_string()))?;
            [*out_channels, t, h, w]
        }
        Op::Pool(spec) => {
            let [t, h, w] = spec
                .output_extent([t, h, w])
                .map_err(|e| fail(e.to_string()))?;
            [c, t, h, w]
        }
        Op::BatchNorm { channels } => {
            if c != *channels {
                return Err(fail(format!("expects {channels} channels, got {c}")));
            }
            x
        }
        Op::Relu | Op::Softmax => x,
        Op::Concat => {
            if ins.iter().any(|s| s[1..] != x[1..]) {
                return Err(fail("concatenated maps differ in (T, H, W)".into()));
            }
            [ins.iter().map(|s| s[0]).sum(), t, h, w]
        }
        Op::Add | Op::Average => {
            if ins.iter().any(|s| *s != x) {
                return Err(fail("merged inputs differ in shape".into()));
            }
            x
        }
        Op::Mean => [c, 1, 1, 1],
        Op::Linear {
            in_features,
            out_features,
            ..
        } => {
            if c * t * h * w != *in_features {
                return Err(fail(format!(
                    "expects {in_features} features, got {c}x{t}x{h}x{w}"
                )));
            }
            [*out_features, 1, 1, 1]
        }
        Op::Lstm { input_size, hidden } => {
            if c != *input_size || h != 1 || w != 1 {
                return Err(fail(format!(
                    "expects ({input_size}, T, 1, 1) features, got {x:?}"
                )));
            }
            [*hidden, t, 1, 1]
        }
    };
    Ok(shape)
}

/// Number of trainable parameters (weights, biases, batch-norm scales and
/// offsets); running statistics are not counted.
pub fn count_params(graph: &GraphSpec) -> usize {
    graph
        .nodes
        .iter()
        .flat_map(node_params)
        .filter(|p| p.role == ParamRole::Trainable)
        .map(|p| p.shape.iter().product::<usize>())
        .sum()
}

/// Theoretical receptive field of one layer. Both triples are ordered
/// `(time, x, y)`, x being the width axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReceptiveField {
    pub extent: [usize; 3],
    pub stride: [usize; 3],
}

impl ReceptiveField {
    fn from_thw(extent: [usize; 3], stride: [usize; 3]) -> Self {
        ReceptiveField {
            extent: [extent[0], extent[2], extent[1]],
            stride: [stride[0], stride[2], stride[1]],
        }
    }
}

/// Receptive field of every node, `None` for nodes no input reaches.
/// Layers that pool globally (mean, linear, LSTM over time) cover the
/// whole incoming map at the nominal input geometry.
pub fn receptive_fields(graph: &GraphSpec) -> Result<Vec<Option<ReceptiveField>>> {
    let shapes = infer_shapes(graph, &nominal_input_shapes(graph))?;
    // (extent, stride) in (T, H, W) order
    let mut rf: Vec<Option<([usize; 3], [usize; 3])>> = Vec::with_capacity(graph.nodes.len());
    for node in &graph.nodes {
        let ins: Vec<_> = node.inputs.iter().filter_map(|&j| rf[j]).collect();
        let value = if let Op::Input { .. } = node.op {
            Some(([1; 3], [1; 3]))
        } else if ins.is_empty() {
            None
        } else {
            let mut e = [0; 3];
            let mut s = [0; 3];
            for (ie, is) in &ins {
                for a in 0..3 {
                    e[a] = e[a].max(ie[a]);
                    s[a] = s[a].max(is[a]);
                }
            }
            let src = shapes[node.inputs[0]];
            let grow = |e: &mut [usize; 3], s: &mut [usize; 3], k: [usize; 3], st: [usize; 3]| {
                for a in 0..3 {
                    e[a] += (k[a] - 1) * s[a];
                    s[a] *= st[a];
                }
            };
            match &node.op {
                Op::Conv { spec, .. } => grow(&mut e, &mut s, spec.kernel, spec.stride),
                Op::Pool(spec) => grow(&mut e, &mut s, spec.kernel, spec.stride),
                Op::Mean | Op::Linear { .. } => {
                    let k = [src[1], src[2], src[3]];
                    grow(&mut e, &mut s, k, k)
                }
                Op::Lstm { .. } => grow(&mut e, &mut s, [src[1], 1, 1], [1, 1, 1]),
                _ => {}
            }
            Some((e, s))
        };
        rf.push(value);
    }
    Ok(rf
        .into_iter()
        .map(|v| v.map(|(e, s)| ReceptiveField::from_thw(e, s)))
        .collect())
}

pub fn receptive_field(graph: &GraphSpec, layer: &str) -> Result<ReceptiveField> {
    let i = graph.node_index(layer)?;
    receptive_fields(graph)?[i]
        .ok_or_else(|| Error::Graph(format!("layer `{layer}` is not reachable from an input")))
}

/// One aligned row per layer: kind, kernel, stride, output shape,
/// receptive field and parameter count.
pub fn summary(graph: &GraphSpec) -> Result<String> {
    let shapes = infer_shapes(graph, &nominal_input_shapes(graph))?;
    let rfs = receptive_fields(graph)?;
    let fmt3 = |v: [usize; 3]| format!("{}x{}x{}", v[0], v[1], v[2]);
    let mut rows = vec![[
        "layer".to_string(),
        "kind".into(),
        "kernel".into(),
        "stride".into(),
        "output".into(),
        "rf(t,x,y)".into(),
        "params".into(),
    ]];
    for (i, node) in graph.nodes.iter().enumerate() {
        let (kernel, stride) = match &node.op {
            Op::Conv { spec, .. } => (fmt3(spec.kernel), fmt3(spec.stride)),
            Op::Pool(spec) => (fmt3(spec.kernel), fmt3(spec.stride)),
            _ => ("-".into(), "-".into()),
        };
        let params: usize = node_params(node)
            .iter()
            .filter(|p| p.role == ParamRole::Trainable)
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        let s = shapes[i];
        rows.push([
            node.id.clone(),
            node.op.kind().into(),
            kernel,
            stride,
            format!("{}x{}x{}x{}", s[0], s[1], s[2], s[3]),
            rfs[i].map_or("-".into(), |r| {
                format!("{},{},{}", r.extent[0], r.extent[1], r.extent[2])
            }),
            params.to_string(),
        ]);
    }
    let mut widths = [0usize; 7];
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        writeln!(out, "{}", line.join("  ").trim_end()).unwrap();
    }
    writeln!(out, "total params: {}", count_params(graph)).unwrap();
    Ok(out)
}

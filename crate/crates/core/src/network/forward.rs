use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops;
use super::{LayerKind, NetworkGraph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Shape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl WeightTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for weight shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn filled(shape: Vec<usize>, v: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![v; n],
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Named float tensors keyed `"<node>.<param>"`: conv/FC `weight` and
/// `bias`, BN `gamma`, `beta`, `mean` and `var`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub tensors: BTreeMap<String, WeightTensor>,
}

impl WeightSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, t: WeightTensor) {
        self.tensors.insert(key.into(), t);
    }

    pub fn get(&self, node: &str, param: &str) -> Result<&WeightTensor> {
        let key = format!("{node}.{param}");
        self.tensors.get(&key).ok_or(Error::MissingWeights(key))
    }

    /// Fetches a tensor and checks its shape.
    pub fn expect(&self, node: &str, param: &str, shape: &[usize]) -> Result<&[f64]> {
        let t = self.get(node, param)?;
        if t.shape != shape {
            return Err(Error::DimensionMismatch(format!(
                "`{node}.{param}` has shape {:?}, layer expects {shape:?}",
                t.shape
            )));
        }
        Ok(&t.data)
    }

    /// Checks every parameter tensor the graph needs is present with the right shape.
    pub fn check(&self, graph: &NetworkGraph) -> Result<()> {
        for node in &graph.nodes {
            for (param, shape) in param_shapes(&node.kind) {
                self.expect(&node.name, param, &shape)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn param_shapes(kind: &LayerKind) -> Vec<(&'static str, Vec<usize>)> {
    match *kind {
        LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel,
            bias,
            ..
        } => {
            let mut v = vec![("weight", vec![out_ch, in_ch, kernel, kernel])];
            if bias {
                v.push(("bias", vec![out_ch]));
            }
            v
        }
        LayerKind::BatchNorm { channels, .. } => ["gamma", "beta", "mean", "var"]
            .into_iter()
            .map(|p| (p, vec![channels]))
            .collect(),
        LayerKind::FullyConnected {
            in_features,
            out_features,
            bias,
        } => {
            let mut v = vec![("weight", vec![out_features, in_features])];
            if bias {
                v.push(("bias", vec![out_features]));
            }
            v
        }
        _ => Vec::new(),
    }
}

/// Random weights: uniform fan-in scaled kernels and mildly perturbed BN
/// statistics, reproducible from `seed`.
pub fn init_weights(graph: &NetworkGraph, seed: u64) -> WeightSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ws = WeightSet::new();
    for node in &graph.nodes {
        for (param, shape) in param_shapes(&node.kind) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match (param, &node.kind) {
                ("weight", _) => {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                ("bias", _) => (0..n).map(|_| rng.random_range(-0.1..0.1)).collect(),
                ("gamma", _) => (0..n).map(|_| rng.random_range(0.5..1.5)).collect(),
                ("beta", _) | ("mean", _) => (0..n).map(|_| rng.random_range(-0.1..0.1)).collect(),
                ("var", _) => (0..n).map(|_| rng.random_range(0.5..1.5)).collect(),
                _ => unreachable!(),
            };
            ws.insert(format!("{}.{param}", node.name), WeightTensor { shape, data });
        }
    }
    ws
}

pub(crate) fn eval_node(
    graph: &NetworkGraph,
    weights: &WeightSet,
    shapes: &[Shape],
    id: NodeId,
    ins: &[&FloatTensor],
) -> Result<FloatTensor> {
    let node = &graph.nodes[id];
    let out_shape = shapes[id];
    Ok(match node.kind {
        LayerKind::Input { .. } => unreachable!("input handled by caller"),
        LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            bias,
        } => {
            let w = weights.expect(&node.name, "weight", &[out_ch, in_ch, kernel, kernel])?;
            let mut out = ops::conv2d(ins[0], w, kernel, stride, pad, out_shape);
            if bias {
                let b = weights.expect(&node.name, "bias", &[out_ch])?;
                for (c, &bv) in b.iter().enumerate() {
                    out.channel_mut(c).iter_mut().for_each(|v| *v += bv);
                }
            }
            out
        }
        LayerKind::BatchNorm { channels, eps } => {
            let g = weights.expect(&node.name, "gamma", &[channels])?;
            let b = weights.expect(&node.name, "beta", &[channels])?;
            let m = weights.expect(&node.name, "mean", &[channels])?;
            let v = weights.expect(&node.name, "var", &[channels])?;
            let mut out = ins[0].clone();
            for c in 0..channels {
                let s = g[c] / (v[c] + eps).sqrt();
                out.channel_mut(c)
                    .iter_mut()
                    .for_each(|x| *x = (*x - m[c]) * s + b[c]);
            }
            out
        }
        LayerKind::Relu => ins[0].map(|v| v.max(0.0)),
        LayerKind::MaxPool {
            kernel,
            stride,
            pad,
        } => ops::max_pool(ins[0], kernel, stride, pad, out_shape),
        LayerKind::GlobalAvgPool => {
            let n = ins[0].shape.plane() as f64;
            ops::channel_sums(ins[0]).map(|s| s / n)
        }
        LayerKind::Add => {
            let mut out = ins[0].clone();
            out.data
                .iter_mut()
                .zip(&ins[1].data)
                .for_each(|(a, b)| *a += b);
            out
        }
        LayerKind::FullyConnected {
            in_features,
            out_features,
            bias,
        } => {
            let w = weights.expect(&node.name, "weight", &[out_features, in_features])?;
            let mut out = ops::linear(&ins[0].data, w, out_features);
            if bias {
                let b = weights.expect(&node.name, "bias", &[out_features])?;
                out.data.iter_mut().zip(b).for_each(|(o, bv)| *o += bv);
            }
            out
        }
    })
}

/// Evaluates the graph in `order`, handing each node's output to `visit`
/// and releasing intermediates once their last consumer has run.
pub(crate) fn forward_visit(
    graph: &NetworkGraph,
    weights: &WeightSet,
    input: &FloatTensor,
    order: &[NodeId],
    mut visit: impl FnMut(NodeId, &FloatTensor),
) -> Result<FloatTensor> {
    graph.check_order(order)?;
    let dims = graph.input_dims()?;
    if input.shape != dims {
        return Err(Error::DimensionMismatch(format!(
            "graph expects input {dims}, got {}",
            input.shape
        )));
    }
    let shapes = graph.infer_shapes()?;
    let mut remaining: Vec<usize> = graph.consumers().iter().map(Vec::len).collect();
    let mut outs: Vec<Option<FloatTensor>> = vec![None; graph.len()];
    for &id in order {
        let t = if matches!(graph.nodes[id].kind, LayerKind::Input { .. }) {
            input.clone()
        } else {
            let ins: Vec<&FloatTensor> = graph.nodes[id]
                .inputs
                .iter()
                .map(|&p| outs[p].as_ref().expect("scheduled after predecessors"))
                .collect();
            eval_node(graph, weights, &shapes, id, &ins)?
        };
        visit(id, &t);
        let mut preds = graph.nodes[id].inputs.clone();
        preds.dedup();
        for p in preds {
            remaining[p] -= 1;
            if remaining[p] == 0 && p != graph.output {
                outs[p] = None;
            }
        }
        outs[id] = Some(t);
    }
    Ok(outs[graph.output].take().expect("output evaluated"))
}

/// Float outputs of every node, evaluated in `order` (any valid schedule).
pub fn forward_all(
    graph: &NetworkGraph,
    weights: &WeightSet,
    input: &FloatTensor,
    order: &[NodeId],
) -> Result<Vec<FloatTensor>> {
    let mut all: Vec<Option<FloatTensor>> = vec![None; graph.len()];
    forward_visit(graph, weights, input, order, |id, t| all[id] = Some(t.clone()))?;
    Ok(all.into_iter().map(|t| t.expect("every node evaluated")).collect())
}

pub fn forward_float_with_order(
    graph: &NetworkGraph,
    weights: &WeightSet,
    input: &FloatTensor,
    order: &[NodeId],
) -> Result<Vec<f64>> {
    Ok(forward_visit(graph, weights, input, order, |_, _| {})?.data)
}

/// Reference float evaluation; returns the flattened output node.
pub fn forward_float(graph: &NetworkGraph, weights: &WeightSet, input: &FloatTensor) -> Result<Vec<f64>> {
    forward_float_with_order(graph, weights, input, &graph.topo_order()?)
}

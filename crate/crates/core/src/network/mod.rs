//! Layer graphs for the RGB and frequency-domain ResNet variants.

pub(crate) mod forward;
pub(crate) mod ops;
mod resnet;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Shape;

pub use forward::{forward_all, forward_float, forward_float_with_order, init_weights, WeightSet, WeightTensor};
pub use resnet::{build_network, toy_cnn, Architecture, BuildOptions};

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerKind {
    Input {
        dims: Shape,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
        eps: f64,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool,
    Add,
    FullyConnected {
        in_features: usize,
        out_features: usize,
        bias: bool,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input { .. } => "input",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm { .. } => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "max_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::Add => "add",
            LayerKind::FullyConnected { .. } => "fully_connected",
        }
    }

    fn arity(&self) -> usize {
        match self {
            LayerKind::Input { .. } => 0,
            LayerKind::Add => 2,
            _ => 1,
        }
    }

    /// Number of trainable parameters this layer owns.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => in_ch * out_ch * kernel * kernel + if bias { out_ch } else { 0 },
            LayerKind::BatchNorm { channels, .. } => 2 * channels,
            LayerKind::FullyConnected {
                in_features,
                out_features,
                bias,
            } => in_features * out_features + if bias { out_features } else { 0 },
            _ => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    #[serde(default)]
    pub inputs: Vec<NodeId>,
}

/// Directed acyclic layer graph with one input node and one output node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub nodes: Vec<Node>,
    pub output: NodeId,
}

impl NetworkGraph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            output: 0,
        }
    }

    /// Appends a node; the most recent node becomes the output.
    pub fn push(&mut self, name: impl Into<String>, kind: LayerKind, inputs: &[NodeId]) -> NodeId {
        self.nodes.push(Node {
            name: name.into(),
            kind,
            inputs: inputs.to_vec(),
        });
        self.output = self.nodes.len() - 1;
        self.output
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn input_node(&self) -> Result<NodeId> {
        let mut inputs = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, LayerKind::Input { .. }))
            .map(|(i, _)| i);
        let first = inputs
            .next()
            .ok_or_else(|| Error::Graph("graph has no input node".into()))?;
        if inputs.next().is_some() {
            return Err(Error::Graph("graph has more than one input node".into()));
        }
        Ok(first)
    }

    pub fn input_dims(&self) -> Result<Shape> {
        match self.nodes[self.input_node()?].kind {
            LayerKind::Input { dims } => Ok(dims),
            _ => unreachable!(),
        }
    }

    /// Consumers of every node, in node order.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for &p in &n.inputs {
                if p < out.len() && !out[p].contains(&i) {
                    out[p].push(i);
                }
            }
        }
        out
    }

    /// Structural checks: arity, dangling edges, unique names, acyclicity.
    pub fn validate(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Graph("graph is empty".into()));
        }
        if self.output >= self.nodes.len() {
            return Err(Error::Graph(format!("output id {} out of range", self.output)));
        }
        self.input_node()?;
        let mut names = BTreeSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if !names.insert(n.name.as_str()) {
                return Err(Error::Graph(format!("duplicate node name `{}`", n.name)));
            }
            if n.inputs.len() != n.kind.arity() {
                return Err(Error::Graph(format!(
                    "node `{}` ({}) expects {} inputs, has {}",
                    n.name,
                    n.kind.name(),
                    n.kind.arity(),
                    n.inputs.len()
                )));
            }
            if let Some(&bad) = n.inputs.iter().find(|&&p| p >= self.nodes.len() || p == i) {
                return Err(Error::Graph(format!(
                    "node `{}` has invalid predecessor {bad}",
                    n.name
                )));
            }
        }
        self.topo_order().map(|_| ())
    }

    /// Kahn's algorithm, lowest id first among ready nodes.
    pub fn topo_order(&self) -> Result<Vec<NodeId>> {
        let consumers = self.consumers();
        let mut indegree: Vec<usize> = self.nodes.iter().map(|n| n.inputs.len()).collect();
        let mut ready: BTreeSet<NodeId> = (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &c in &consumers[i] {
                // an Add may list the same predecessor twice
                let times = self.nodes[c].inputs.iter().filter(|&&p| p == i).count();
                indegree[c] -= times;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(Error::Graph("graph contains a cycle".into()));
        }
        Ok(order)
    }

    /// Checks that `order` is a permutation respecting every edge.
    pub fn check_order(&self, order: &[NodeId]) -> Result<()> {
        let mut pos = vec![usize::MAX; self.nodes.len()];
        for (k, &i) in order.iter().enumerate() {
            if i >= pos.len() || pos[i] != usize::MAX {
                return Err(Error::Graph("schedule is not a permutation".into()));
            }
            pos[i] = k;
        }
        if order.len() != self.nodes.len() {
            return Err(Error::Graph("schedule is not a permutation".into()));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.inputs.iter().any(|&p| pos[p] > pos[i]) {
                return Err(Error::Graph(format!("schedule runs `{}` too early", n.name)));
            }
        }
        Ok(())
    }

    /// Sum of weight, bias and BN affine parameters.
    pub fn count_params(&self) -> usize {
        self.nodes.iter().map(|n| n.kind.param_count()).sum()
    }

    pub fn count_kind(&self, pred: impl Fn(&LayerKind) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.kind)).count()
    }

    /// Output shape of every node.
    pub fn infer_shapes(&self) -> Result<Vec<Shape>> {
        self.validate()?;
        let order = self.topo_order()?;
        let mut shapes = vec![Shape::new(0, 0, 0); self.nodes.len()];
        for i in order {
            let node = &self.nodes[i];
            let ins: Vec<Shape> = node.inputs.iter().map(|&p| shapes[p]).collect();
            shapes[i] = output_shape(node, &ins)?;
        }
        Ok(shapes)
    }

    /// Re-roots the graph at new input dimensions and infers shapes.
    pub fn infer_shapes_for(&self, dims: Shape) -> Result<Vec<Shape>> {
        let mut g = self.clone();
        g.set_input_dims(dims)?;
        g.infer_shapes()
    }

    pub fn set_input_dims(&mut self, dims: Shape) -> Result<()> {
        let id = self.input_node()?;
        self.nodes[id].kind = LayerKind::Input { dims };
        Ok(())
    }
}

impl Default for NetworkGraph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(node: &Node, detail: String) -> Error {
    Error::ShapeMismatch {
        node: node.name.clone(),
        detail,
    }
}

fn window_out(len: usize, kernel: usize, stride: usize, pad: usize, node: &Node) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(mismatch(node, "kernel and stride must be positive".into()));
    }
    let padded = len + 2 * pad;
    if padded < kernel {
        return Err(mismatch(
            node,
            format!("input extent {len} smaller than kernel {kernel}"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

fn output_shape(node: &Node, ins: &[Shape]) -> Result<Shape> {
    match node.kind {
        LayerKind::Input { dims } => Ok(dims),
        LayerKind::Conv2d {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            ..
        } => {
            let s = ins[0];
            if s.c != in_ch {
                return Err(mismatch(node, format!("expects {in_ch} channels, got {}", s.c)));
            }
            Ok(Shape::new(
                out_ch,
                window_out(s.h, kernel, stride, pad, node)?,
                window_out(s.w, kernel, stride, pad, node)?,
            ))
        }
        LayerKind::BatchNorm { channels, .. } => {
            if ins[0].c != channels {
                return Err(mismatch(
                    node,
                    format!("expects {channels} channels, got {}", ins[0].c),
                ));
            }
            Ok(ins[0])
        }
        LayerKind::Relu => Ok(ins[0]),
        LayerKind::MaxPool {
            kernel,
            stride,
            pad,
        } => {
            let s = ins[0];
            if pad >= kernel {
                return Err(mismatch(node, "padding must be smaller than the window".into()));
            }
            Ok(Shape::new(
                s.c,
                window_out(s.h, kernel, stride, pad, node)?,
                window_out(s.w, kernel, stride, pad, node)?,
            ))
        }
        LayerKind::GlobalAvgPool => Ok(Shape::new(ins[0].c, 1, 1)),
        LayerKind::Add => {
            if ins[0] != ins[1] {
                return Err(mismatch(
                    node,
                    format!("operand shapes differ: {} vs {}", ins[0], ins[1]),
                ));
            }
            Ok(ins[0])
        }
        LayerKind::FullyConnected {
            in_features,
            out_features,
            ..
        } => {
            if ins[0].len() != in_features {
                return Err(mismatch(
                    node,
                    format!("expects {in_features} features, got {}", ins[0].len()),
                ));
            }
            Ok(Shape::new(out_features, 1, 1))
        }
    }
}

/// Whether a node's integer output is a requantized activation or a raw
/// accumulator once the graph is lowered to integer arithmetic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Activation,
    Accumulator,
}

/// Why a table lookup (and hence a bootstrap) sits at a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LutKind {
    /// The ReLU node itself.
    Relu,
    /// Identity requantization of the node's accumulator before a consumer
    /// that needs a bounded activation.
    Requant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LutSite {
    pub node: NodeId,
    pub kind: LutKind,
}

/// Integer value kind of every node's raw output.
pub fn value_kinds(graph: &NetworkGraph) -> Result<Vec<ValueKind>> {
    let mut kinds = vec![ValueKind::Activation; graph.len()];
    for i in graph.topo_order()? {
        let node = &graph.nodes[i];
        kinds[i] = match node.kind {
            LayerKind::Input { .. } | LayerKind::Relu | LayerKind::GlobalAvgPool => ValueKind::Activation,
            LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. } | LayerKind::Add => {
                ValueKind::Accumulator
            }
            LayerKind::BatchNorm { .. } | LayerKind::MaxPool { .. } => kinds[node.inputs[0]],
        };
    }
    Ok(kinds)
}

/// Every place a lookup table is evaluated when the graph runs on integers.
///
/// Each ReLU is one site. An accumulator additionally needs an identity
/// requantization table when some consumer other than a ReLU or a BN reads
/// it; the graph output is dequantized directly and never gets one.
pub fn lut_sites(graph: &NetworkGraph) -> Result<Vec<LutSite>> {
    let kinds = value_kinds(graph)?;
    let consumers = graph.consumers();
    let mut sites = Vec::new();
    for i in graph.topo_order()? {
        if matches!(graph.nodes[i].kind, LayerKind::Relu) {
            sites.push(LutSite {
                node: i,
                kind: LutKind::Relu,
            });
        }
        let needs_requant = kinds[i] == ValueKind::Accumulator
            && i != graph.output
            && consumers[i].iter().any(|&c| {
                !matches!(graph.nodes[c].kind, LayerKind::Relu | LayerKind::BatchNorm { .. })
            });
        if needs_requant {
            sites.push(LutSite {
                node: i,
                kind: LutKind::Requant,
            });
        }
    }
    Ok(sites)
}

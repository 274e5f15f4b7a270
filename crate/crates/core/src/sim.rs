//! Integer execution of a quantized model with table activations and
//! optional bootstrap-failure injection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ops;
use crate::network::{LayerKind, LutKind, NodeId, WeightSet};
use crate::noise::{ElementStream, NoiseChannel};
use crate::quant::{round_accumulator, CryptoParams, LutSpec, QuantizedModel};
use crate::tensor::{FloatTensor, Shape, Tensor3};

type IntTensor = Tensor3<i64>;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeTrace {
    pub name: String,
    pub op: String,
    pub macs: u64,
    pub lut_evals: u64,
    pub pbs: u64,
    pub max_abs_accumulator: i64,
}

/// Operations actually performed during one run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTrace {
    pub macs: u64,
    pub lut_evals: u64,
    pub pbs_invocations: u64,
    pub additions: u64,
    pub max_abs_accumulator: i64,
    pub nodes: Vec<NodeTrace>,
}

impl CostTrace {
    pub fn hops(&self) -> u64 {
        self.macs + self.pbs_invocations
    }
}

/// One table lookup. With a stream and `p_err > 0`, the lookup lands on
/// `T[x + k]` with probability `p_err`, `k` drawn from the offset
/// distribution; indices past either end clamp to the edge.
#[inline]
pub fn lut_eval(lut: &LutSpec, x: i64, crypto: &CryptoParams, stream: Option<&mut ElementStream>) -> i64 {
    match stream {
        Some(s) if crypto.p_err > 0.0 => {
            let (u_fail, u_k) = s.next_pair();
            if u_fail < crypto.p_err {
                lut.lookup(x + crypto.pick_offset(u_k))
            } else {
                lut.lookup(x)
            }
        }
        _ => lut.lookup(x),
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct Exec<'a> {
    model: &'a QuantizedModel,
    noise: Option<NoiseChannel>,
    trace: CostTrace,
    shapes: Vec<Shape>,
    raw: Vec<Option<IntTensor>>,
    req: Vec<Option<IntTensor>>,
    acc_limit: i64,
}

impl<'a> Exec<'a> {
    fn new(model: &'a QuantizedModel, input: &FloatTensor, noise: Option<NoiseChannel>) -> Result<Self> {
        let dims = model.graph.input_dims()?;
        if input.shape != dims {
            return Err(Error::DimensionMismatch(format!(
                "model expects input {dims}, got {}",
                input.shape
            )));
        }
        let n = model.graph.len();
        let cbw = model.crypto.circuit_bitwidth.clamp(1, 63);
        Ok(Self {
            model,
            noise,
            trace: CostTrace::default(),
            shapes: model.graph.infer_shapes()?,
            raw: vec![None; n],
            req: vec![None; n],
            acc_limit: (1i64 << (cbw - 1)) - 1,
        })
    }

    /// Value of `p` as consumer `c` reads it.
    fn read(&self, p: NodeId, c: NodeId) -> &IntTensor {
        let relu = matches!(self.model.graph.nodes[c].kind, LayerKind::Relu);
        match (&self.req[p], relu) {
            (Some(t), false) => t,
            _ => self.raw[p].as_ref().expect("predecessor evaluated"),
        }
    }

    fn apply_lut(&self, node: NodeId, kind: LutKind, lut: &LutSpec, a: &IntTensor) -> IntTensor {
        let crypto = &self.model.crypto;
        let mut stream = self.noise.map(|n| n.stream(node, kind));
        let z = lut.output.zero_point;
        let data = a
            .data
            .iter()
            .map(|&v| {
                let x = round_accumulator(v, lut.input_bits, lut.retained_bits);
                lut_eval(lut, x, crypto, stream.as_mut()) - z
            })
            .collect();
        Tensor3 { shape: a.shape, data }
    }

    fn check_accumulator(&self, id: NodeId, t: &IntTensor, row: &mut NodeTrace) -> Result<()> {
        let m = t.data.iter().map(|v| v.abs()).max().unwrap_or(0);
        row.max_abs_accumulator = m;
        let bound = self.model.nodes[id].bound;
        if m > bound || m > self.acc_limit {
            return Err(Error::Invariant(format!(
                "accumulator at `{}` reached {m}, static bound {bound}, circuit limit {}",
                self.model.graph.nodes[id].name, self.acc_limit
            )));
        }
        Ok(())
    }

    fn eval(&mut self, id: NodeId, input: &FloatTensor) -> Result<()> {
        let model = self.model;
        let node = &model.graph.nodes[id];
        let nq = &model.nodes[id];
        let out_shape = self.shapes[id];
        let elems = out_shape.len() as u64;
        let mut row = NodeTrace {
            name: node.name.clone(),
            op: node.kind.name().to_string(),
            ..NodeTrace::default()
        };
        let missing = || Error::Invariant(format!("layer `{}` has no integer weights", node.name));
        let raw = match node.kind {
            LayerKind::Input { .. } => {
                let qp = model.input;
                input.map(|v| qp.quantize(v) - qp.zero_point)
            }
            LayerKind::Conv2d {
                in_ch,
                kernel,
                stride,
                pad,
                ..
            } => {
                let w = nq.weights.as_ref().ok_or_else(missing)?;
                let x = self.read(node.inputs[0], id);
                let mut acc = ops::conv2d(x, &w.data, kernel, stride, pad, out_shape);
                if let Some(b) = &w.bias {
                    for (c, &bv) in b.iter().enumerate() {
                        acc.channel_mut(c).iter_mut().for_each(|v| *v += bv);
                    }
                }
                row.macs = (kernel * kernel * in_ch) as u64 * elems;
                self.check_accumulator(id, &acc, &mut row)?;
                acc
            }
            LayerKind::FullyConnected {
                in_features,
                out_features,
                ..
            } => {
                let w = nq.weights.as_ref().ok_or_else(missing)?;
                let x = self.read(node.inputs[0], id);
                let mut acc = ops::linear(&x.data, &w.data, out_features);
                if let Some(b) = &w.bias {
                    acc.data.iter_mut().zip(b).for_each(|(a, bv)| *a += bv);
                }
                row.macs = (in_features * out_features) as u64;
                self.check_accumulator(id, &acc, &mut row)?;
                acc
            }
            LayerKind::Relu => {
                let lut = nq
                    .lut
                    .as_ref()
                    .ok_or_else(|| Error::Invariant(format!("ReLU `{}` has no table", node.name)))?;
                let a = self.raw[node.inputs[0]].as_ref().expect("predecessor evaluated");
                let out = self.apply_lut(id, LutKind::Relu, lut, a);
                row.lut_evals = elems;
                row.pbs = elems * model.pbs_model.per_element(LutKind::Relu);
                out
            }
            LayerKind::MaxPool { kernel, stride, pad } => {
                if model.pbs_model.count_maxpool_comparisons {
                    row.pbs = elems * (kernel * kernel - 1) as u64;
                }
                ops::max_pool(self.read(node.inputs[0], id), kernel, stride, pad, out_shape)
            }
            LayerKind::GlobalAvgPool => {
                let x = self.read(node.inputs[0], id);
                let adds = (x.shape.c * x.shape.plane().saturating_sub(1)) as u64;
                let acc = ops::channel_sums(x);
                self.trace.additions += adds;
                self.check_accumulator(id, &acc, &mut row)?;
                acc
            }
            LayerKind::Add => {
                let mut acc = self.read(node.inputs[0], id).clone();
                let b = self.read(node.inputs[1], id);
                acc.data.iter_mut().zip(&b.data).for_each(|(a, v)| *a += v);
                self.trace.additions += elems;
                self.check_accumulator(id, &acc, &mut row)?;
                acc
            }
            LayerKind::BatchNorm { .. } => {
                return Err(Error::Invariant(format!("unfolded batch norm `{}`", node.name)));
            }
        };
        if let Some(lut) = &nq.requant {
            self.req[id] = Some(self.apply_lut(id, LutKind::Requant, lut, &raw));
            row.lut_evals += elems;
            row.pbs += elems * model.pbs_model.per_element(LutKind::Requant);
        }
        self.raw[id] = Some(raw);
        self.trace.macs += row.macs;
        self.trace.lut_evals += row.lut_evals;
        self.trace.pbs_invocations += row.pbs;
        self.trace.max_abs_accumulator = self.trace.max_abs_accumulator.max(row.max_abs_accumulator);
        self.trace.nodes.push(row);
        Ok(())
    }

    /// Runs every node needed for `target`, dropping values after their
    /// last use.
    fn run(&mut self, input: &FloatTensor, target: NodeId) -> Result<()> {
        let g = &self.model.graph;
        let order = g.topo_order()?;
        let consumers = g.consumers();
        let mut needed = vec![false; g.len()];
        needed[target] = true;
        for &i in order.iter().rev() {
            if needed[i] {
                for &p in &g.nodes[i].inputs {
                    needed[p] = true;
                }
            }
        }
        let mut remaining: Vec<usize> = consumers
            .iter()
            .map(|cs| cs.iter().filter(|&&c| needed[c]).count())
            .collect();
        for &id in order.iter().filter(|&&i| needed[i]) {
            self.eval(id, input)?;
            let mut preds = g.nodes[id].inputs.clone();
            preds.dedup();
            for p in preds {
                remaining[p] -= 1;
                if remaining[p] == 0 && p != target {
                    self.raw[p] = None;
                    self.req[p] = None;
                }
            }
        }
        Ok(())
    }
}

fn run_to_output(model: &QuantizedModel, input: &FloatTensor, noise: Option<NoiseChannel>) -> Result<(Vec<f64>, CostTrace)> {
    let mut ex = Exec::new(model, input, noise)?;
    let out = model.graph.output;
    ex.run(input, out)?;
    let s = model.nodes[out].scale;
    let logits = ex.raw[out]
        .as_ref()
        .expect("output evaluated")
        .data
        .iter()
        .map(|&v| v as f64 * s)
        .collect();
    Ok((logits, ex.trace))
}

/// Noise-free integer inference; returns dequantized logits.
pub fn run_exact(model: &QuantizedModel, input: &FloatTensor) -> Result<(Vec<f64>, CostTrace)> {
    run_to_output(model, input, None)
}

/// Integer inference with bootstrap failures at every table, drawn from
/// the streams of `seed`.
pub fn run_noisy(model: &QuantizedModel, input: &FloatTensor, seed: u64) -> Result<(Vec<f64>, CostTrace)> {
    run_to_output(model, input, Some(NoiseChannel::new(seed)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitOutput {
    pub label: usize,
    pub logits: Vec<f64>,
    /// Dequantized penultimate features handed to the client.
    pub features: Vec<f64>,
    pub trace: CostTrace,
}

/// Runs the noisy model up to the input of its final linear layer, then
/// finishes with the client's float layer (`<fc>.weight` and optional
/// `<fc>.bias` in `client_fc`, named after the model's final layer).
pub fn run_split(model: &QuantizedModel, input: &FloatTensor, seed: u64, client_fc: &WeightSet) -> Result<SplitOutput> {
    let (fc, feat) = model.head()?;
    let mut ex = Exec::new(model, input, Some(NoiseChannel::new(seed)))?;
    ex.run(input, feat)?;
    let (scale, _) = model.view(feat, fc);
    let features: Vec<f64> = ex.read(feat, fc).data.iter().map(|&v| v as f64 * scale).collect();
    let name = &model.graph.nodes[fc].name;
    let w = client_fc.get(name, "weight")?;
    if w.shape.len() != 2 || w.shape[1] != features.len() {
        return Err(Error::DimensionMismatch(format!(
            "client layer has shape {:?}, features have length {}",
            w.shape,
            features.len()
        )));
    }
    let out = w.shape[0];
    let mut logits = ops::linear(&features, &w.data, out).data;
    if let Ok(b) = client_fc.get(name, "bias") {
        if b.data.len() != out {
            return Err(Error::DimensionMismatch(format!(
                "client bias has {} entries for {out} outputs",
                b.data.len()
            )));
        }
        logits.iter_mut().zip(&b.data).for_each(|(l, v)| *l += v);
    }
    Ok(SplitOutput {
        label: argmax(&logits),
        logits,
        features,
        trace: ex.trace,
    })
}

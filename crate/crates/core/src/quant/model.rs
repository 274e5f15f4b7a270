use serde::{Deserialize, Serialize};

use super::calibrate::{Calibration, Range, DEGENERATE_EPS};
use super::fold::fold_mapped;
use super::lut::{build_lut, AccFormat, CryptoParams, LutSpec};
use super::params::{bits_for_bound, make_qparams, QuantParams};
use crate::analyzer::PbsModel;
use crate::error::{Error, Result};
use crate::network::{lut_sites, LayerKind, LutKind, NetworkGraph, NodeId, WeightSet, WeightTensor};

/// Widest symmetric format a requantization table may target.
const MAX_ADD_OPERAND_BITS: u32 = 16;

/// Integer kernel (and bias) of a convolution or linear layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntWeights {
    pub params: QuantParams,
    pub shape: Vec<usize>,
    /// Stored in the binary blob of a model file, not in its JSON header.
    #[serde(skip)]
    pub data: Vec<i64>,
    /// Bias at the accumulator scale.
    #[serde(default)]
    pub bias: Option<Vec<i64>>,
}

/// Integer format of one node.
///
/// The raw output is a centered integer (`q - Z` for activations, the sum
/// itself for accumulators) worth `scale` per unit, with `|raw| <= bound`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeQuant {
    pub scale: f64,
    pub bound: i64,
    #[serde(default)]
    pub weights: Option<IntWeights>,
    /// ReLU table, present on ReLU nodes; reads the predecessor's raw output.
    #[serde(default)]
    pub lut: Option<LutSpec>,
    /// Identity requantization of this node's raw output. Consumers other
    /// than ReLUs read the requantized value when this is present.
    #[serde(default)]
    pub requant: Option<LutSpec>,
}

impl NodeQuant {
    fn new(scale: f64, bound: i64) -> Self {
        Self {
            scale,
            bound,
            weights: None,
            lut: None,
            requant: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedModel {
    /// BN-free graph.
    pub graph: NetworkGraph,
    pub bits: u32,
    pub input: QuantParams,
    pub nodes: Vec<NodeQuant>,
    pub crypto: CryptoParams,
    #[serde(default)]
    pub pbs_model: PbsModel,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl QuantizedModel {
    /// Scale and bound of `p` as seen by consumer `c`.
    pub fn view(&self, p: NodeId, c: NodeId) -> (f64, i64) {
        let nq = &self.nodes[p];
        match &nq.requant {
            Some(lut) if !matches!(self.graph.nodes[c].kind, LayerKind::Relu) => {
                (lut.output.scale, lut.output.centered_bound())
            }
            _ => (nq.scale, nq.bound),
        }
    }

    /// Every table with the node it is evaluated at.
    pub fn luts(&self) -> impl Iterator<Item = (NodeId, &LutSpec)> {
        self.nodes
            .iter()
            .enumerate()
            .flat_map(|(i, n)| n.lut.iter().chain(n.requant.iter()).map(move |l| (i, l)))
    }

    /// Structural checks after loading or building.
    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        self.input.validate()?;
        self.crypto.validate()?;
        self.pbs_model.validate()?;
        if self.nodes.len() != self.graph.len() {
            return Err(Error::Invariant(format!(
                "{} node formats for {} nodes",
                self.nodes.len(),
                self.graph.len()
            )));
        }
        let sites = lut_sites(&self.graph)?;
        for (i, (node, nq)) in self.graph.nodes.iter().zip(&self.nodes).enumerate() {
            let wants_requant = sites.iter().any(|s| s.node == i && s.kind == LutKind::Requant);
            match node.kind {
                LayerKind::BatchNorm { .. } => {
                    return Err(Error::Invariant(format!("unfolded batch norm `{}`", node.name)))
                }
                LayerKind::Relu if nq.lut.is_none() => {
                    return Err(Error::Invariant(format!("ReLU `{}` has no table", node.name)))
                }
                LayerKind::Conv2d { .. } | LayerKind::FullyConnected { .. } => {
                    let w = nq.weights.as_ref().ok_or_else(|| {
                        Error::Invariant(format!("layer `{}` has no integer weights", node.name))
                    })?;
                    if w.data.len() != w.shape.iter().product::<usize>() {
                        return Err(Error::Invariant(format!("layer `{}` weight size mismatch", node.name)));
                    }
                    if let Some(&q) = w.data.iter().find(|&&q| q < w.params.qmin() || q > w.params.qmax()) {
                        return Err(Error::Invariant(format!(
                            "layer `{}` weight {q} outside [{}, {}]",
                            node.name,
                            w.params.qmin(),
                            w.params.qmax()
                        )));
                    }
                }
                _ => {}
            }
            if wants_requant != nq.requant.is_some() {
                return Err(Error::Invariant(format!(
                    "requantization table at `{}` does not match the graph",
                    node.name
                )));
            }
            for lut in nq.lut.iter().chain(nq.requant.iter()) {
                lut.output.validate()?;
                if lut.table.len() != 1usize << lut.retained_bits {
                    return Err(Error::Invariant(format!("table at `{}` has wrong length", node.name)));
                }
                let (lo, hi) = (lut.output.qmin(), lut.output.qmax());
                if lut.table.iter().any(|&q| q < lo || q > hi) {
                    return Err(Error::Invariant(format!(
                        "table entry at `{}` outside its output range",
                        node.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// The final linear layer and the node feeding it.
    pub fn head(&self) -> Result<(NodeId, NodeId)> {
        let out = self.graph.output;
        match self.graph.nodes[out].kind {
            LayerKind::FullyConnected { .. } => Ok((out, self.graph.nodes[out].inputs[0])),
            _ => Err(Error::Unsupported("model does not end in a linear layer".into())),
        }
    }
}

/// Smallest signed width holding every accumulator of the model.
pub fn circuit_bitwidth(qmodel: &QuantizedModel) -> u32 {
    qmodel
        .nodes
        .iter()
        .map(|n| bits_for_bound(n.bound))
        .max()
        .unwrap_or(1)
}

fn activation_qparams(r: Range, bits: u32) -> Result<QuantParams> {
    let r = r.with_zero();
    make_qparams(r.lo, r.hi, bits, false)
}

fn quantize_weights(
    name: &str,
    w: &WeightTensor,
    bits: u32,
    warnings: &mut Vec<String>,
) -> Result<(QuantParams, Vec<i64>)> {
    let (lo, hi) = w.min_max();
    let mut m = lo.abs().max(hi.abs());
    if m.is_nan() || m <= 0.0 {
        warnings.push(format!("weights of `{name}` are all zero; range widened by {DEGENERATE_EPS}"));
        m = DEGENERATE_EPS;
    }
    let qp = make_qparams(-m, m, bits, true)?;
    Ok((qp, w.data.iter().map(|&v| qp.quantize(v)).collect()))
}

/// Worst-case `|acc|` per output row of a kernel laid out `[rows, per_row]`.
fn accumulator_bound(w: &[i64], rows: usize, in_bound: i64, bias: Option<&[i64]>) -> Result<i64> {
    let per = w.len() / rows.max(1);
    let mut worst: i64 = 0;
    for r in 0..rows {
        let l1: i64 = w[r * per..(r + 1) * per].iter().map(|q| q.abs()).sum();
        let b = bias.map_or(0, |b| b[r].abs());
        let a = l1
            .checked_mul(in_bound)
            .and_then(|v| v.checked_add(b))
            .ok_or_else(|| Error::Unsupported("accumulator bound overflows 64 bits".into()))?;
        worst = worst.max(a);
    }
    Ok(worst)
}

fn quantize_bias(b: &[f64], scale: f64) -> Result<Vec<i64>> {
    b.iter()
        .map(|&v| {
            let q = (v / scale).round();
            if q.abs() >= 2f64.powi(52) {
                Err(Error::Unsupported(format!("bias {v} too large for accumulator scale {scale}")))
            } else {
                Ok(q as i64)
            }
        })
        .collect()
}

/// Post-training quantization of a float network.
///
/// BatchNorms are folded first; `calib` must hold the ranges of `graph`
/// as given (folded or not). Weights become symmetric `bits`-bit tensors,
/// activations asymmetric `bits`-bit. A table is built at every ReLU and
/// every identity-requantization site. Residual additions run at one
/// shared scale: an operand whose requantization feeds only the addition
/// is requantized straight to that scale in a symmetric format wide enough
/// for its calibrated range.
pub fn quantize_model(
    graph: &NetworkGraph,
    weights: &WeightSet,
    calib: &Calibration,
    bits: u32,
    crypto: &CryptoParams,
    pbs_model: &PbsModel,
) -> Result<QuantizedModel> {
    if !(2..=8).contains(&bits) {
        return Err(Error::InvalidConfig(format!("quantization bits {bits} outside [2, 8]")));
    }
    crypto.validate()?;
    pbs_model.validate()?;
    if calib.ranges.len() != graph.len() {
        return Err(Error::DimensionMismatch(format!(
            "calibration covers {} nodes, graph has {}",
            calib.ranges.len(),
            graph.len()
        )));
    }
    let (g, ws, origin) = fold_mapped(graph, weights)?;
    let ranges: Vec<Range> = origin.iter().map(|&o| calib.ranges[o]).collect();
    let shapes = g.infer_shapes()?;
    let consumers = g.consumers();
    let sites = lut_sites(&g)?;
    let has_requant = |i: NodeId| sites.iter().any(|s| s.node == i && s.kind == LutKind::Requant);
    let t = crypto.retained_precision;
    let mut warnings = Vec::new();

    // requant sites whose only non-ReLU consumer is a single Add
    let dedicated: Vec<bool> = (0..g.len())
        .map(|i| {
            if !has_requant(i) {
                return false;
            }
            let mut others: Vec<NodeId> = consumers[i]
                .iter()
                .copied()
                .filter(|&c| !matches!(g.nodes[c].kind, LayerKind::Relu))
                .collect();
            others.dedup();
            others.len() == 1 && matches!(g.nodes[others[0]].kind, LayerKind::Add)
        })
        .collect();

    let mut model = QuantizedModel {
        input: activation_qparams(ranges[g.input_node()?], bits)?,
        graph: g.clone(),
        bits,
        nodes: Vec::with_capacity(g.len()),
        crypto: crypto.clone(),
        pbs_model: *pbs_model,
        warnings: Vec::new(),
    };
    model.nodes = vec![NodeQuant::new(1.0, 0); g.len()];
    let push_lut = |res: (LutSpec, Option<String>), warnings: &mut Vec<String>, at: &str| {
        if let Some(w) = res.1 {
            warnings.push(format!("`{at}`: {w}"));
        }
        res.0
    };

    for i in g.topo_order()? {
        let node = &g.nodes[i];
        let nq = match node.kind {
            LayerKind::Input { .. } => {
                NodeQuant::new(model.input.scale, model.input.centered_bound())
            }
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                bias,
                ..
            } => {
                let (s_in, b_in) = model.view(node.inputs[0], i);
                let w = ws.get(&node.name, "weight")?;
                ws.expect(&node.name, "weight", &[out_ch, in_ch, kernel, kernel])?;
                let (params, data) = quantize_weights(&node.name, w, bits, &mut warnings)?;
                let scale = params.scale * s_in;
                let bias_q = if bias {
                    Some(quantize_bias(ws.expect(&node.name, "bias", &[out_ch])?, scale)?)
                } else {
                    None
                };
                let bound = accumulator_bound(&data, out_ch, b_in, bias_q.as_deref())?;
                let mut nq = NodeQuant::new(scale, bound);
                nq.weights = Some(IntWeights {
                    params,
                    shape: w.shape.clone(),
                    data,
                    bias: bias_q,
                });
                nq
            }
            LayerKind::FullyConnected {
                in_features,
                out_features,
                bias,
            } => {
                let (s_in, b_in) = model.view(node.inputs[0], i);
                let w = ws.get(&node.name, "weight")?;
                ws.expect(&node.name, "weight", &[out_features, in_features])?;
                let (params, data) = quantize_weights(&node.name, w, bits, &mut warnings)?;
                let scale = params.scale * s_in;
                let bias_q = if bias {
                    Some(quantize_bias(ws.expect(&node.name, "bias", &[out_features])?, scale)?)
                } else {
                    None
                };
                let bound = accumulator_bound(&data, out_features, b_in, bias_q.as_deref())?;
                let mut nq = NodeQuant::new(scale, bound);
                nq.weights = Some(IntWeights {
                    params,
                    shape: w.shape.clone(),
                    data,
                    bias: bias_q,
                });
                nq
            }
            LayerKind::Relu => {
                let p = node.inputs[0];
                let out = activation_qparams(ranges[i], bits)?;
                let acc = AccFormat {
                    scale: model.nodes[p].scale,
                    bound: model.nodes[p].bound,
                };
                let lut = push_lut(build_lut(LutKind::Relu, acc, out, t)?, &mut warnings, &node.name);
                let mut nq = NodeQuant::new(out.scale, out.centered_bound());
                nq.lut = Some(lut);
                nq
            }
            LayerKind::MaxPool { .. } => {
                let (s, b) = model.view(node.inputs[0], i);
                NodeQuant::new(s, b)
            }
            LayerKind::GlobalAvgPool => {
                let (s, b) = model.view(node.inputs[0], i);
                let hw = shapes[node.inputs[0]].plane();
                let bound = b
                    .checked_mul(hw as i64)
                    .ok_or_else(|| Error::Unsupported("pooling bound overflows 64 bits".into()))?;
                NodeQuant::new(s / hw as f64, bound)
            }
            LayerKind::Add => {
                let ops = [node.inputs[0], node.inputs[1]];
                let fixed: Vec<f64> = ops
                    .iter()
                    .filter(|&&p| !dedicated[p])
                    .map(|&p| model.view(p, i).0)
                    .collect();
                let s_add = match fixed.as_slice() {
                    [] => ranges[i].abs_max() / ((1i64 << bits) - 1) as f64,
                    [s] => *s,
                    [a, b] => {
                        if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
                            return Err(Error::Unsupported(format!(
                                "`{}` adds operands at different fixed scales {a} and {b}",
                                node.name
                            )));
                        }
                        *a
                    }
                    _ => unreachable!(),
                };
                for &p in &ops {
                    if !dedicated[p] || model.nodes[p].requant.is_some() {
                        continue;
                    }
                    let need = (ranges[p].abs_max() / s_add).ceil() as i64;
                    let mut ob = (bits + 1).max(bits_for_bound(need));
                    if ob > MAX_ADD_OPERAND_BITS {
                        warnings.push(format!(
                            "`{}`: operand range needs {ob} bits at the shared scale; clamped to {MAX_ADD_OPERAND_BITS}",
                            g.nodes[p].name
                        ));
                        ob = MAX_ADD_OPERAND_BITS;
                    }
                    let out = QuantParams::symmetric_with_scale(ob, s_add)?;
                    let acc = AccFormat {
                        scale: model.nodes[p].scale,
                        bound: model.nodes[p].bound,
                    };
                    let lut = push_lut(build_lut(LutKind::Requant, acc, out, t)?, &mut warnings, &g.nodes[p].name);
                    model.nodes[p].requant = Some(lut);
                }
                let bound = model.view(ops[0], i).1 + model.view(ops[1], i).1;
                NodeQuant::new(s_add, bound)
            }
            LayerKind::BatchNorm { .. } => unreachable!("folded"),
        };
        model.nodes[i] = nq;
        if has_requant(i) && !dedicated[i] {
            let out = activation_qparams(ranges[i], bits)?;
            let acc = AccFormat {
                scale: model.nodes[i].scale,
                bound: model.nodes[i].bound,
            };
            let lut = push_lut(build_lut(LutKind::Requant, acc, out, t)?, &mut warnings, &node.name);
            model.nodes[i].requant = Some(lut);
        }
    }

    model.crypto.circuit_bitwidth = circuit_bitwidth(&model);
    for w in &warnings {
        log::warn!("{w}");
    }
    model.warnings = warnings;
    model.validate()?;
    Ok(model)
}

/// Float copy of the model's final linear layer as its integers represent
/// it, keyed like the layer (`<name>.weight`, `<name>.bias`).
pub fn dequantized_head(qmodel: &QuantizedModel) -> Result<WeightSet> {
    let (fc, _) = qmodel.head()?;
    let name = &qmodel.graph.nodes[fc].name;
    let nq = &qmodel.nodes[fc];
    let w = nq
        .weights
        .as_ref()
        .ok_or_else(|| Error::Invariant(format!("layer `{name}` has no integer weights")))?;
    let mut ws = WeightSet::new();
    ws.insert(
        format!("{name}.weight"),
        WeightTensor::new(w.shape.clone(), w.data.iter().map(|&q| w.params.dequantize(q)).collect())?,
    );
    let out = w.shape[0];
    let bias = match &w.bias {
        Some(b) => b.iter().map(|&q| q as f64 * nq.scale).collect(),
        None => vec![0.0; out],
    };
    ws.insert(format!("{name}.bias"), WeightTensor::new(vec![out], bias)?);
    Ok(ws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, init_weights, toy_cnn, Architecture, BuildOptions};
    use crate::quant::calibrate;
    use crate::tensor::{FloatTensor, Shape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(dims: Shape, n: usize, seed: u64) -> Vec<FloatTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| FloatTensor::from_vec(dims, (0..dims.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn one_by_one_conv_bitwidth() {
        let mut g = NetworkGraph::new();
        let x = g.push("x", LayerKind::Input { dims: Shape::new(1, 2, 2) }, &[]);
        g.push(
            "conv",
            LayerKind::Conv2d {
                in_ch: 1,
                out_ch: 1,
                kernel: 1,
                stride: 1,
                pad: 0,
                bias: false,
            },
            &[x],
        );
        let mut ws = WeightSet::new();
        ws.insert("conv.weight", WeightTensor::filled(vec![1, 1, 1, 1], 3.0));
        let cal = Calibration {
            ranges: vec![Range { lo: 0.0, hi: 15.0 }, Range { lo: 0.0, hi: 45.0 }],
            samples: 1,
            warnings: vec![],
        };
        // symmetric 3-bit weights put 3.0 exactly at q = 3
        let m = quantize_model(&g, &ws, &cal, 3, &CryptoParams::default(), &PbsModel::default());
        let m = m.unwrap();
        assert_eq!(m.nodes[1].weights.as_ref().unwrap().data, vec![3]);
        // input 4-bit would give max 15; here 3-bit input gives 7
        assert_eq!(m.nodes[0].bound, 7);
        assert_eq!(m.nodes[1].bound, 21);

        let m = quantize_model(&g, &ws, &cal, 4, &CryptoParams::default(), &PbsModel::default()).unwrap();
        let w = m.nodes[1].weights.as_ref().unwrap();
        assert_eq!(m.nodes[0].bound, 15);
        assert_eq!(m.nodes[1].bound, 15 * w.data[0].abs());
        assert_eq!(m.crypto.circuit_bitwidth, bits_for_bound(15 * w.data[0].abs()));
    }

    #[test]
    fn toy_weights_in_symmetric_range() {
        let dims = Shape::new(3, 6, 6);
        let g = toy_cnn(dims, 4, 3);
        let ws = init_weights(&g, 1);
        let cal = calibrate(&g, &ws, &batch(dims, 4, 0)).unwrap();
        let m = quantize_model(&g, &ws, &cal, 4, &CryptoParams::default(), &PbsModel::default()).unwrap();
        for n in &m.nodes {
            if let Some(w) = &n.weights {
                assert!(w.data.iter().all(|q| q.abs() <= 7));
            }
        }
        assert!(m.nodes[2].lut.is_some());
        assert_eq!(m.luts().count(), 1);
    }

    #[test]
    fn resnets_quantize_with_expected_tables() {
        for arch in Architecture::ALL {
            let dims = match arch {
                Architecture::Resnet18Rgb => Shape::new(3, 32, 32),
                Architecture::Resnet18Dct => Shape::new(24, 8, 8),
                Architecture::Resnet20Rgb => Shape::new(3, 8, 8),
                Architecture::Resnet20Dct => Shape::new(48, 8, 8),
            };
            let g = build_network(arch, dims, &BuildOptions::default()).unwrap();
            let ws = init_weights(&g, 3);
            let cal = calibrate(&g, &ws, &batch(dims, 2, 1)).unwrap();
            let m = quantize_model(&g, &ws, &cal, 4, &CryptoParams::default(), &PbsModel::default()).unwrap();
            let sites = lut_sites(&m.graph).unwrap();
            assert_eq!(m.luts().count(), sites.len(), "{arch}");
            assert!(m.crypto.circuit_bitwidth >= 2);
        }
    }

    #[test]
    fn head_dequantizes() {
        let dims = Shape::new(2, 4, 4);
        let g = toy_cnn(dims, 3, 2);
        let ws = init_weights(&g, 1);
        let cal = calibrate(&g, &ws, &batch(dims, 3, 2)).unwrap();
        let m = quantize_model(&g, &ws, &cal, 8, &CryptoParams::default(), &PbsModel::default()).unwrap();
        let head = dequantized_head(&m).unwrap();
        let a = &head.get("fc", "weight").unwrap().data;
        let b = &ws.get("fc", "weight").unwrap().data;
        let s = m.nodes[4].weights.as_ref().unwrap().params.scale;
        assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() <= s));
    }

    #[test]
    fn bad_bits_rejected() {
        let dims = Shape::new(2, 4, 4);
        let g = toy_cnn(dims, 3, 2);
        let ws = init_weights(&g, 1);
        let cal = calibrate(&g, &ws, &batch(dims, 1, 2)).unwrap();
        assert!(quantize_model(&g, &ws, &cal, 9, &CryptoParams::default(), &PbsModel::default()).is_err());
        assert!(quantize_model(&g, &ws, &cal, 1, &CryptoParams::default(), &PbsModel::default()).is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::forward::forward_visit;
use crate::network::{NetworkGraph, WeightSet};
use crate::tensor::FloatTensor;

/// Half-width used to widen a range whose min equals its max.
pub const DEGENERATE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const EMPTY: Range = Range {
        lo: f64::INFINITY,
        hi: f64::NEG_INFINITY,
    };

    pub fn include(&mut self, v: f64) {
        self.lo = self.lo.min(v);
        self.hi = self.hi.max(v);
    }

    pub fn merge(self, o: Range) -> Range {
        Range {
            lo: self.lo.min(o.lo),
            hi: self.hi.max(o.hi),
        }
    }

    /// Smallest range containing both this one and zero.
    pub fn with_zero(self) -> Range {
        Range {
            lo: self.lo.min(0.0),
            hi: self.hi.max(0.0),
        }
    }

    pub fn abs_max(self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }
}

/// Per-node float output ranges observed over a calibration batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub ranges: Vec<Range>,
    pub samples: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

/// Min/max of every node's float output for one input.
pub fn observe(graph: &NetworkGraph, weights: &WeightSet, input: &FloatTensor) -> Result<Vec<Range>> {
    let mut ranges = vec![Range::EMPTY; graph.len()];
    forward_visit(graph, weights, input, &graph.topo_order()?, |id, t| {
        for &v in &t.data {
            ranges[id].include(v);
        }
    })?;
    Ok(ranges)
}

/// Merges per-input observations and widens degenerate ranges by
/// [`DEGENERATE_EPS`], recording a warning for each.
pub fn finish_calibration(
    graph: &NetworkGraph,
    observations: impl IntoIterator<Item = Vec<Range>>,
) -> Result<Calibration> {
    let mut ranges = vec![Range::EMPTY; graph.len()];
    let mut samples = 0;
    for obs in observations {
        if obs.len() != graph.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} ranges for a graph of {} nodes",
                obs.len(),
                graph.len()
            )));
        }
        for (r, o) in ranges.iter_mut().zip(obs) {
            *r = r.merge(o);
        }
        samples += 1;
    }
    if samples == 0 {
        return Err(Error::InvalidConfig("calibration batch is empty".into()));
    }
    let mut warnings = Vec::new();
    for (i, r) in ranges.iter_mut().enumerate() {
        if r.lo == r.hi {
            warnings.push(format!(
                "node `{}` has constant output {}; range widened by {DEGENERATE_EPS}",
                graph.nodes[i].name, r.lo
            ));
            log::warn!("{}", warnings.last().unwrap());
            r.lo -= DEGENERATE_EPS;
            r.hi += DEGENERATE_EPS;
        }
    }
    Ok(Calibration {
        ranges,
        samples,
        warnings,
    })
}

/// Float min/max of every node over `batch`.
pub fn calibrate(graph: &NetworkGraph, weights: &WeightSet, batch: &[FloatTensor]) -> Result<Calibration> {
    let mut obs = Vec::with_capacity(batch.len());
    for x in batch {
        obs.push(observe(graph, weights, x)?);
    }
    finish_calibration(graph, obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward_all, init_weights, toy_cnn, LayerKind, WeightTensor};
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_everything_is_widened() {
        let g = toy_cnn(Shape::new(2, 4, 4), 3, 2);
        let mut ws = init_weights(&g, 0);
        for t in ws.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let cal = calibrate(&g, &ws, &[FloatTensor::zeros(Shape::new(2, 4, 4))]).unwrap();
        assert_eq!(cal.warnings.len(), g.len());
        for r in &cal.ranges {
            assert_eq!((r.lo, r.hi), (-DEGENERATE_EPS, DEGENERATE_EPS));
        }
    }

    #[test]
    fn constant_through_identity_conv() {
        let mut g = NetworkGraph::new();
        let x = g.push("x", LayerKind::Input { dims: Shape::new(1, 3, 3) }, &[]);
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
        ws.insert("conv.weight", WeightTensor::filled(vec![1, 1, 1, 1], 1.0));
        let c = 0.75;
        let cal = calibrate(&g, &ws, &[FloatTensor::from_vec(Shape::new(1, 3, 3), vec![c; 9]).unwrap()]).unwrap();
        let r = cal.ranges[1];
        assert_eq!((r.lo, r.hi), (c - DEGENERATE_EPS, c + DEGENERATE_EPS));
    }

    #[test]
    fn maxima_match_float_forward() {
        let dims = Shape::new(3, 6, 6);
        let g = toy_cnn(dims, 4, 5);
        let ws = init_weights(&g, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch: Vec<FloatTensor> = (0..8)
            .map(|_| FloatTensor::from_vec(dims, (0..dims.len()).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap())
            .collect();
        let cal = calibrate(&g, &ws, &batch).unwrap();
        let order = g.topo_order().unwrap();
        for id in 0..g.len() {
            let hi = batch
                .iter()
                .map(|x| forward_all(&g, &ws, x, &order).unwrap()[id].data.iter().cloned().fold(f64::MIN, f64::max))
                .fold(f64::MIN, f64::max);
            assert_eq!(cal.ranges[id].hi, hi);
        }
        assert!(calibrate(&g, &ws, &[]).is_err());
    }
}

use serde::{Deserialize, Serialize};

use super::params::{bits_for_bound, QuantParams};
use crate::error::{Error, Result};
use crate::network::LutKind;

/// One possible lookup offset `k` when a bootstrap fails, and its probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetProb {
    pub offset: i64,
    pub prob: f64,
}

/// Parameters of the encrypted circuit: accumulator width, retained
/// precision before every table lookup, and the bootstrap failure model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CryptoParams {
    /// Filled in by quantization; 0 until then.
    #[serde(default)]
    pub circuit_bitwidth: u32,
    pub retained_precision: u32,
    pub p_err: f64,
    pub k_distribution: Vec<OffsetProb>,
}

impl Default for CryptoParams {
    fn default() -> Self {
        Self {
            circuit_bitwidth: 0,
            retained_precision: 6,
            p_err: 0.01,
            k_distribution: vec![
                OffsetProb {
                    offset: 1,
                    prob: 0.5,
                },
                OffsetProb {
                    offset: -1,
                    prob: 0.5,
                },
            ],
        }
    }
}

impl CryptoParams {
    pub fn new(retained_precision: u32, p_err: f64) -> Result<Self> {
        let c = Self {
            retained_precision,
            p_err,
            ..Self::default()
        };
        c.validate()?;
        Ok(c)
    }

    /// Settings used for the hardest (1000-class) task.
    pub fn imagenet() -> Self {
        Self {
            retained_precision: 7,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.retained_precision == 0 || self.retained_precision > 30 {
            return Err(Error::InvalidConfig(format!(
                "retained precision must lie in [1, 30], got {}",
                self.retained_precision
            )));
        }
        if !(0.0..=1.0).contains(&self.p_err) {
            return Err(Error::InvalidConfig(format!("p_err {} outside [0, 1]", self.p_err)));
        }
        if self.k_distribution.is_empty() {
            return Err(Error::InvalidConfig("k_distribution is empty".into()));
        }
        let mut total = 0.0;
        for k in &self.k_distribution {
            if k.offset == 0 {
                return Err(Error::InvalidConfig("k_distribution offsets must be nonzero".into()));
            }
            if k.prob.is_nan() || k.prob < 0.0 {
                return Err(Error::InvalidConfig("k_distribution probabilities must be nonnegative".into()));
            }
            total += k.prob;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "k_distribution sums to {total}, expected 1"
            )));
        }
        Ok(())
    }

    /// Offset for a uniform draw `u` in `[0, 1)`.
    pub fn pick_offset(&self, u: f64) -> i64 {
        let mut acc = 0.0;
        for k in &self.k_distribution {
            acc += k.prob;
            if u < acc {
                return k.offset;
            }
        }
        self.k_distribution.last().map_or(0, |k| k.offset)
    }
}

/// Integer accumulator feeding a table: real value is `scale * a`, and
/// `|a| <= bound` always holds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccFormat {
    pub scale: f64,
    pub bound: i64,
}

/// Lookup table over a rounded accumulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LutSpec {
    pub kind: LutKind,
    /// Quantized outputs (`q`, not `q - Z`), one per domain value.
    pub table: Vec<i64>,
    /// Domain value of `table[0]`.
    pub domain_offset: i64,
    /// Accumulator width `W` before rounding.
    pub input_bits: u32,
    /// Bits kept after rounding; `min(t, W)`.
    pub retained_bits: u32,
    /// Scale of the unrounded accumulator.
    pub input_scale: f64,
    pub output: QuantParams,
}

impl LutSpec {
    /// Real value represented by rounded domain value `x`.
    pub fn dequantize_input(&self, x: i64) -> f64 {
        self.effective_scale() * x as f64
    }

    pub fn effective_scale(&self) -> f64 {
        self.input_scale * f64::powi(2.0, (self.input_bits - self.retained_bits) as i32)
    }

    pub fn domain(&self) -> std::ops::RangeInclusive<i64> {
        self.domain_offset..=self.domain_offset + self.table.len() as i64 - 1
    }

    /// Clamps a domain value to the table edges and returns its index.
    #[inline]
    pub fn index(&self, x: i64) -> usize {
        (x - self.domain_offset).clamp(0, self.table.len() as i64 - 1) as usize
    }

    #[inline]
    pub fn lookup(&self, x: i64) -> i64 {
        self.table[self.index(x)]
    }
}

/// Builds the table for a ReLU or identity requantization.
///
/// The domain is the `2^min(t, W)` signed values left after rounding an
/// accumulator of width `W`; entry `x` is
/// `quantize(f(S_eff * x), output)`. Returns a warning when `t` exceeds
/// the accumulator width, since the upper part of a `2^t` table would be
/// unreachable.
pub fn build_lut(
    kind: LutKind,
    input: AccFormat,
    output: QuantParams,
    retained_precision: u32,
) -> Result<(LutSpec, Option<String>)> {
    output.validate()?;
    if retained_precision == 0 {
        return Err(Error::InvalidConfig("retained precision must be at least 1".into()));
    }
    let width = bits_for_bound(input.bound);
    let retained = retained_precision.min(width);
    let warning = (retained_precision > width).then(|| {
        format!(
            "retained precision {retained_precision} exceeds accumulator width {width}; table limited to 2^{width} entries"
        )
    });
    let len = 1i64 << retained;
    let mut spec = LutSpec {
        kind,
        table: Vec::with_capacity(len as usize),
        domain_offset: -(len / 2),
        input_bits: width,
        retained_bits: retained,
        input_scale: input.scale,
        output,
    };
    let s_eff = spec.effective_scale();
    for x in -(len / 2)..len / 2 {
        let r = s_eff * x as f64;
        let v = match kind {
            LutKind::Relu => r.max(0.0),
            LutKind::Requant => r,
        };
        spec.table.push(output.quantize(v));
    }
    Ok((spec, warning))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::make_qparams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_on_integers() {
        let out = make_qparams(0.0, 15.0, 4, false).unwrap();
        let (lut, warn) = build_lut(LutKind::Relu, AccFormat { scale: 1.0, bound: 7 }, out, 4).unwrap();
        assert!(warn.is_none());
        assert_eq!(lut.domain(), -8..=7);
        assert_eq!(lut.table, vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn entries_within_output_range() {
        let out = make_qparams(0.0, 3.0, 4, false).unwrap();
        let (lut, _) = build_lut(LutKind::Relu, AccFormat { scale: 0.37, bound: 500 }, out, 6).unwrap();
        assert_eq!(lut.table.len(), 64);
        assert!(lut.table.iter().all(|&q| (0..=15).contains(&q)));
    }

    #[test]
    fn random_scales_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let scale = rng.random_range(1e-4..1.0);
            let bound = rng.random_range(1..100_000);
            let t = rng.random_range(1..12);
            let hi = rng.random_range(0.1..50.0);
            let out = make_qparams(0.0, hi, 5, false).unwrap();
            let (lut, _) = build_lut(LutKind::Relu, AccFormat { scale, bound }, out, t).unwrap();
            // oracle: width from the bound, shift, then quantize(relu(.))
            let width = (bound as f64 + 1.0).log2().ceil() as u32 + 1;
            let t_eff = t.min(width);
            let s_acc = scale * 2f64.powi((width - t_eff) as i32);
            let half = 1i64 << (t_eff - 1);
            assert_eq!(lut.table.len() as i64, 2 * half);
            for (i, &q) in lut.table.iter().enumerate() {
                let x = i as i64 - half;
                let r = (s_acc * x as f64).max(0.0);
                let expected = ((r / out.scale).floor() as i64 + out.zero_point).clamp(0, 31);
                assert_eq!(q, expected, "x={x}");
            }
        }
    }

    #[test]
    fn oversized_precision_warns() {
        let out = make_qparams(0.0, 1.0, 4, false).unwrap();
        let (lut, warn) = build_lut(LutKind::Requant, AccFormat { scale: 1.0, bound: 3 }, out, 8).unwrap();
        assert!(warn.is_some());
        assert_eq!(lut.retained_bits, 3);
        assert_eq!(lut.table.len(), 8);
    }

    #[test]
    fn offset_sampling_and_validation() {
        let c = CryptoParams::default();
        c.validate().unwrap();
        assert_eq!(c.pick_offset(0.1), 1);
        assert_eq!(c.pick_offset(0.9), -1);
        assert_eq!(CryptoParams::imagenet().retained_precision, 7);
        let mut bad = CryptoParams::default();
        bad.k_distribution[0].prob = 0.7;
        assert!(bad.validate().is_err());
        assert!(CryptoParams::new(0, 0.01).is_err());
        assert!(CryptoParams::new(6, 1.5).is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform affine quantizer `q = floor(r / S + Z)`, `r = S (q - Z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u32,
    pub scale: f64,
    pub zero_point: i64,
    pub symmetric: bool,
}

impl QuantParams {
    /// Symmetric quantizer with an explicit scale, range `±(2^(b-1) - 1)`.
    pub fn symmetric_with_scale(bits: u32, scale: f64) -> Result<Self> {
        let qp = Self {
            bits,
            scale,
            zero_point: 0,
            symmetric: true,
        };
        qp.validate()?;
        Ok(qp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.bits) {
            return Err(Error::InvalidConfig(format!(
                "quantizer bit width {} outside [2, 16]",
                self.bits
            )));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "quantizer scale must be positive, got {}",
                self.scale
            )));
        }
        if self.symmetric && self.zero_point != 0 {
            return Err(Error::InvalidConfig("symmetric quantizer with nonzero zero point".into()));
        }
        if !self.symmetric && !(self.qmin()..=self.qmax()).contains(&self.zero_point) {
            return Err(Error::InvalidConfig(format!(
                "zero point {} outside [0, {}]",
                self.zero_point,
                self.qmax()
            )));
        }
        Ok(())
    }

    pub fn qmin(&self) -> i64 {
        if self.symmetric {
            -((1i64 << (self.bits - 1)) - 1)
        } else {
            0
        }
    }

    pub fn qmax(&self) -> i64 {
        if self.symmetric {
            (1i64 << (self.bits - 1)) - 1
        } else {
            (1i64 << self.bits) - 1
        }
    }

    /// Largest `|q - Z|` over the representable range.
    pub fn centered_bound(&self) -> i64 {
        (self.zero_point - self.qmin()).max(self.qmax() - self.zero_point)
    }

    /// Floor quantization, clamped to the representable range.
    #[inline]
    pub fn quantize(&self, r: f64) -> i64 {
        let q = (r / self.scale + self.zero_point as f64).floor();
        if q.is_nan() {
            return self.zero_point;
        }
        (q.clamp(self.qmin() as f64, self.qmax() as f64)) as i64
    }

    #[inline]
    pub fn dequantize(&self, q: i64) -> f64 {
        self.scale * (q - self.zero_point) as f64
    }
}

/// Builds a quantizer for the real range `[alpha, beta]`.
///
/// Asymmetric: `S = (beta - alpha) / (2^b - 1)`, `Z = round(-alpha / S)`
/// clamped to `[0, 2^b - 1]`. Symmetric: `S = m / (2^(b-1) - 1)` with
/// `m = max(|alpha|, |beta|)`, `Z = 0`.
pub fn make_qparams(alpha: f64, beta: f64, bits: u32, symmetric: bool) -> Result<QuantParams> {
    if !(2..=16).contains(&bits) {
        return Err(Error::InvalidConfig(format!("bit width {bits} outside [2, 16]")));
    }
    if !alpha.is_finite() || !beta.is_finite() || alpha >= beta {
        return Err(Error::DegenerateRange {
            lo: alpha,
            hi: beta,
        });
    }
    let qp = if symmetric {
        let m = alpha.abs().max(beta.abs());
        QuantParams {
            bits,
            scale: m / ((1i64 << (bits - 1)) - 1) as f64,
            zero_point: 0,
            symmetric: true,
        }
    } else {
        let levels = ((1i64 << bits) - 1) as f64;
        let scale = (beta - alpha) / levels;
        let z = (-alpha / scale).round().clamp(0.0, levels) as i64;
        QuantParams {
            bits,
            scale,
            zero_point: z,
            symmetric: false,
        }
    };
    qp.validate()?;
    Ok(qp)
}

/// Signed bit width holding every integer in `[-bound, bound]`:
/// `ceil(log2(bound + 1)) + 1`.
pub fn bits_for_bound(bound: i64) -> u32 {
    let b = bound.unsigned_abs();
    // ceil(log2(b + 1)) is the bit length of b
    (u64::BITS - b.leading_zeros()) + 1
}

/// Drops `W - t` least significant bits with round-half-away-from-zero;
/// identity when `t >= W`.
#[inline]
pub fn round_accumulator(a: i64, width: u32, retained: u32) -> i64 {
    if retained >= width {
        return a;
    }
    let shift = width - retained;
    if shift >= 63 {
        return 0;
    }
    let half = 1i64 << (shift - 1);
    let mag = (a.abs() + half) >> shift;
    if a < 0 {
        -mag
    } else {
        mag
    }
}

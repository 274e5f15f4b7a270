//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use freqhe_core::analyzer::PbsModel;
use freqhe_core::network::{init_weights, NetworkGraph, WeightSet};
use freqhe_core::quant::{calibrate, quantize_model, CryptoParams, QuantizedModel};
use freqhe_core::tensor::{FloatTensor, Shape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(dims: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> FloatTensor {
    FloatTensor::from_vec(dims, (0..dims.len()).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn batch(dims: Shape, n: usize, seed: u64) -> Vec<FloatTensor> {
    let mut r = rng(seed);
    (0..n).map(|_| uniform_tensor(dims, -1.0, 1.0, &mut r)).collect()
}

/// Direct evaluation of the 2-D DCT-II double sum for one N x N block
/// stored row-major; returns coefficients indexed `u * N + v`.
pub fn dct_bruteforce(block: &[f64], n: usize) -> Vec<f64> {
    let alpha = |k: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    let mut out = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            let mut s = 0.0;
            for y in 0..n {
                for x in 0..n {
                    s += block[y * n + x]
                        * ((2 * y + 1) as f64 * u as f64 * PI / (2 * n) as f64).cos()
                        * ((2 * x + 1) as f64 * v as f64 * PI / (2 * n) as f64).cos();
                }
            }
            out[u * n + v] = alpha(u) * alpha(v) * s;
        }
    }
    out
}

/// Six nested loops over output channel, output pixel, input channel and
/// kernel tap, with explicit bounds checks for padding.
#[allow(clippy::too_many_arguments)]
pub fn conv_naive(
    x: &FloatTensor,
    w: &[f64],
    bias: Option<&[f64]>,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> FloatTensor {
    let s = x.shape;
    let oh = (s.h + 2 * pad - k) / stride + 1;
    let ow = (s.w + 2 * pad - k) / stride + 1;
    let mut out = FloatTensor::zeros(Shape::new(out_ch, oh, ow));
    for o in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for c in 0..s.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                continue;
                            }
                            acc += w[((o * s.c + c) * k + ky) * k + kx] * x.at(c, iy as usize, ix as usize);
                        }
                    }
                }
                *out.at_mut(o, oy, ox) = acc;
            }
        }
    }
    out
}

/// Random weights, calibration on `n_cal` uniform inputs, then quantization.
pub fn quantized(
    g: &NetworkGraph,
    bits: u32,
    crypto: &CryptoParams,
    seed: u64,
    n_cal: usize,
) -> (QuantizedModel, WeightSet) {
    let ws = init_weights(g, seed);
    let dims = g.input_dims().unwrap();
    let cal = calibrate(g, &ws, &batch(dims, n_cal, seed ^ 0x5eed)).unwrap();
    let m = quantize_model(g, &ws, &cal, bits, crypto, &PbsModel::default()).unwrap();
    (m, ws)
}

/// `max |a - b| / max |b|`.
pub fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    let den = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let num = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    num / den.max(1e-300)
}

/// Inputs whose channels carry a random offset plus weaker per-pixel
/// texture, so pooled features (and hence labels) differ between inputs.
pub fn offset_batch(dims: Shape, n: usize, seed: u64) -> Vec<FloatTensor> {
    let mut r = rng(seed);
    let plane = dims.h * dims.w;
    (0..n)
        .map(|_| {
            let off: Vec<f64> = (0..dims.c).map(|_| r.random_range(-1.0..1.0)).collect();
            let v = (0..dims.len()).map(|i| off[i / plane] + 0.3 * r.random_range(-1.0..1.0)).collect();
            FloatTensor::from_vec(dims, v).unwrap()
        })
        .collect()
}

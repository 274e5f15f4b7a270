mod common;

use freqhe_core::analyzer::PbsModel;
use freqhe_core::dct::{preprocess, DctConfig, RgbImage};
use freqhe_core::io::{decode_model, encode_model, TensorFile};
use freqhe_core::network::{
    build_network, forward_all, forward_float, init_weights, toy_cnn, Architecture, BuildOptions, LayerKind, LutKind,
    NetworkGraph, WeightSet,
};
use freqhe_core::quant::{
    bits_for_bound, build_lut, calibrate, make_qparams, quantize_model, round_accumulator, AccFormat, CryptoParams,
};
use freqhe_core::sim::{argmax, run_exact, run_noisy, run_split};
use freqhe_core::tensor::Shape;
use proptest::prelude::*;
use rand::Rng;

use common::*;

fn single_conv(dims: Shape, out_ch: usize, k: usize, stride: usize, pad: usize) -> NetworkGraph {
    let mut g = NetworkGraph::new();
    let x = g.push("input", LayerKind::Input { dims }, &[]);
    g.push(
        "conv",
        LayerKind::Conv2d {
            in_ch: dims.c,
            out_ch,
            kernel: k,
            stride,
            pad,
            bias: true,
        },
        &[x],
    );
    g
}

#[test]
fn conv_matches_naive_loops() {
    let mut r = rng(1);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (7, 2, 3), (4, 4, 0)] {
        let dims = Shape::new(5, 12, 12);
        let g = single_conv(dims, 6, k, stride, pad);
        let ws = init_weights(&g, 2);
        let x = uniform_tensor(dims, -2.0, 2.0, &mut r);
        let got = forward_float(&g, &ws, &x).unwrap();
        let w = &ws.get("conv", "weight").unwrap().data;
        let b = &ws.get("conv", "bias").unwrap().data;
        let want = conv_naive(&x, w, Some(b), 6, k, stride, pad);
        assert_eq!(got.len(), want.data.len());
        assert!(rel_inf(&got, &want.data) <= 1e-5, "k={k} s={stride} p={pad}");
    }
}

#[test]
fn calibration_matches_float_extremes() {
    let dims = Shape::new(3, 8, 8);
    let g = build_network(Architecture::Resnet20Rgb, dims, &BuildOptions::default()).unwrap();
    let ws = init_weights(&g, 3);
    let xs = batch(dims, 6, 4);
    let cal = calibrate(&g, &ws, &xs).unwrap();
    let order = g.topo_order().unwrap();
    let mut lo = vec![f64::INFINITY; g.len()];
    let mut hi = vec![f64::NEG_INFINITY; g.len()];
    for x in &xs {
        for (id, t) in forward_all(&g, &ws, x, &order).unwrap().iter().enumerate() {
            for &v in &t.data {
                lo[id] = lo[id].min(v);
                hi[id] = hi[id].max(v);
            }
        }
    }
    for id in 0..g.len() {
        assert_eq!((cal.ranges[id].lo, cal.ranges[id].hi), (lo[id], hi[id]), "{}", g.nodes[id].name);
    }
    assert_eq!(cal.samples, 6);
}

fn random_image(w: usize, h: usize, seed: u64) -> RgbImage {
    let mut r = rng(seed);
    RgbImage::new(w, h, (0..w * h * 3).map(|_| r.random()).collect()).unwrap()
}

#[test]
fn image_to_label_pipeline() {
    let cfg = DctConfig::new(4, 48).unwrap();
    let imgs: Vec<_> = (0..6).map(|i| random_image(32, 32, 10 + i)).collect();
    let freq: Vec<_> = imgs.iter().map(|im| preprocess(im, &cfg).unwrap()).collect();
    let dims = freq[0].shape();
    assert_eq!(dims, Shape::new(48, 8, 8));

    // through the tensor container, as the command line does
    let file = TensorFile::decode(&TensorFile::from_frequency(&freq).unwrap().encode().unwrap()).unwrap();
    let xs: Vec<_> = file.tensors.iter().map(|t| t.map(|v| v / 255.0)).collect();

    let g = build_network(Architecture::Resnet20Dct, dims, &BuildOptions::default()).unwrap();
    let ws = init_weights(&g, 5);
    let cal = calibrate(&g, &ws, &xs).unwrap();
    let m = quantize_model(&g, &ws, &cal, 4, &CryptoParams::default(), &PbsModel::default()).unwrap();
    m.validate().unwrap();
    let back = decode_model(&encode_model(&m).unwrap()).unwrap();
    for (i, x) in xs.iter().enumerate() {
        let (a, trace) = run_exact(&m, x).unwrap();
        let (b, _) = run_exact(&back, x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        assert!(trace.pbs_invocations > 0 && trace.macs > 0);
        let n1 = run_noisy(&m, x, 100 + i as u64).unwrap();
        let n2 = run_noisy(&m, x, 100 + i as u64).unwrap();
        assert_eq!(n1.0, n2.0);
    }
}

#[test]
fn split_inference_matches_full_run() {
    let dims = Shape::new(3, 8, 8);
    let g = toy_cnn(dims, 8, 5);
    let (mut m, _) = quantized(&g, 6, &CryptoParams::default(), 8, 16);
    m.crypto.p_err = 0.0;
    let client = freqhe_core::quant::dequantized_head(&m).unwrap();
    for x in batch(dims, 20, 9) {
        let (logits, _) = run_exact(&m, &x).unwrap();
        let s = run_split(&m, &x, 0, &client).unwrap();
        assert_eq!(s.label, argmax(&s.logits));
        let err = rel_inf(&s.logits, &logits);
        assert!(err < 1e-9, "{err}");
    }
}

#[test]
fn split_with_foreign_head_uses_client_weights() {
    let dims = Shape::new(3, 8, 8);
    let g = toy_cnn(dims, 8, 5);
    let (m, _) = quantized(&g, 6, &CryptoParams::new(6, 0.0).unwrap(), 8, 16);
    let mut client = WeightSet::new();
    let fc = g.find("fc").unwrap();
    let name = &g.nodes[fc].name;
    let mut w = freqhe_core::network::WeightTensor::filled(vec![5, 8], 0.0);
    // class 3 reads feature 0 only
    w.data[3 * 8] = 1.0;
    client.insert(format!("{name}.weight"), w);
    client.insert(format!("{name}.bias"), {
        let mut b = freqhe_core::network::WeightTensor::filled(vec![5], -1e9);
        b.data[3] = 0.0;
        b
    });
    for x in batch(dims, 5, 1) {
        assert_eq!(run_split(&m, &x, 3, &client).unwrap().label, 3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lut_tables_are_well_formed(
        scale in 1e-4f64..1.0,
        bound in 1i64..1_000_000,
        bits in 2u32..=8,
        t in 1u32..=12,
        hi in 0.1f64..50.0,
    ) {
        let out = make_qparams(0.0, hi, bits, false).unwrap();
        let (lut, warn) = build_lut(LutKind::Relu, AccFormat { scale, bound }, out, t).unwrap();
        let w = bits_for_bound(bound);
        prop_assert_eq!(lut.table.len(), 1usize << t.min(w));
        prop_assert_eq!(warn.is_some(), t > w);
        prop_assert!(lut.table.iter().all(|&q| (out.qmin()..=out.qmax()).contains(&q)));
        prop_assert!(lut.table.windows(2).all(|p| p[0] <= p[1]));
        // rounding can carry the largest accumulators one step past the top
        // edge, where lookup saturates
        let d = lut.domain();
        for a in [-bound, -bound / 2, 0, bound / 3, bound] {
            let x = round_accumulator(a, w, t.min(w));
            prop_assert!(*d.start() <= x && x <= d.end() + 1, "{a} -> {x}");
            prop_assert_eq!(lut.lookup(x), lut.table[lut.index(x.min(*d.end()))]);
        }
    }

    #[test]
    fn requant_tables_are_monotone(scale in 1e-3f64..1.0, bound in 1i64..100_000, bits in 2u32..=8, t in 1u32..=10) {
        let out = make_qparams(-3.0, 3.0, bits, true).unwrap();
        let (lut, _) = build_lut(LutKind::Requant, AccFormat { scale, bound }, out, t).unwrap();
        prop_assert!(lut.table.windows(2).all(|p| p[0] <= p[1]));
        prop_assert!(lut.table.iter().all(|&q| (out.qmin()..=out.qmax()).contains(&q)));
    }

    #[test]
    fn noisy_runs_are_reproducible(seed in any::<u64>(), p in 0.0f64..0.3) {
        let dims = Shape::new(2, 4, 4);
        let g = toy_cnn(dims, 4, 3);
        let (mut m, _) = quantized(&g, 4, &CryptoParams::default(), 2, 4);
        m.crypto.p_err = p;
        let x = batch(dims, 1, seed).pop().unwrap();
        let a = run_noisy(&m, &x, seed).unwrap();
        let b = run_noisy(&m, &x, seed).unwrap();
        prop_assert_eq!(a.0, b.0);
        prop_assert!(a.1.max_abs_accumulator < 1i64 << (m.crypto.circuit_bitwidth - 1));
    }

    #[test]
    fn accumulators_stay_within_static_bound(seed in any::<u64>(), scale in 0.1f64..20.0) {
        // inputs far outside the calibration range are clamped at the input
        // quantizer, so the bound must still hold
        let dims = Shape::new(3, 4, 4);
        let g = build_network(Architecture::Resnet20Rgb, dims, &BuildOptions::default()).unwrap();
        let (m, _) = quantized(&g, 4, &CryptoParams::default(), 6, 4);
        let mut r = rng(seed);
        let x = uniform_tensor(dims, -scale, scale, &mut r);
        prop_assert!(run_exact(&m, &x).is_ok());
    }
}

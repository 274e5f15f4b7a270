use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use freqhe_core::config::ExperimentConfig;
use freqhe_core::dct::RgbImage;
use freqhe_core::io::{read_model, to_versioned_json, write_model, write_weights};
use freqhe_core::network::{Architecture, LayerKind};
use freqhe_core::quant::dequantized_head;
use serde_json::Value;
use tempfile::TempDir;

fn freqhe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_freqhe"))
        .current_dir(dir)
        .env("FREQHE_THREADS", "2")
        .args(args)
        .output()
        .unwrap()
}

#[track_caller]
fn ok(dir: &Path, args: &[&str]) -> String {
    let o = freqhe(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    freqhe(dir, args).status.code().unwrap()
}

/// Eight random 32x32 images, a DCT tensor file, a ResNet-20 graph with
/// random weights, and a quantized model.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let mut state = 12345u64;
    for i in 0..8 {
        let px: Vec<u8> = (0..32 * 32 * 3)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 56) as u8
            })
            .collect();
        RgbImage::new(32, 32, px).unwrap().write_ppm(dir.path().join(format!("img{i}.ppm"))).unwrap();
    }
    let d = dir.path();
    let imgs: Vec<String> = (0..8).map(|i| format!("img{i}.ppm")).collect();
    let mut args = vec!["preprocess", "--filter-size", "4", "--channels", "48", "-o", "data.fqt"];
    args.extend(imgs.iter().map(String::as_str));
    ok(d, &args);
    ok(d, &["build", "--arch", "resnet20-dct", "-o", "g.json", "--init-weights", "w.fqw", "--seed", "3"]);
    ok(d, &["quantize", "--graph", "g.json", "--weights", "w.fqw", "--calib", "data.fqt", "-o", "m.fqm"]);
    dir
}

fn json(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

fn labels(v: &Value) -> Vec<u64> {
    v["images"].as_array().unwrap().iter().map(|i| i["label"].as_u64().unwrap()).collect()
}

#[test]
fn infer_is_byte_identical_across_runs() {
    let w = workspace();
    let d = w.path();
    for extra in [&["--exact"][..], &["--seed", "7"][..]] {
        let mut a = vec!["infer", "--model", "m.fqm", "--input", "data.fqt", "-o", "a.json"];
        a.extend_from_slice(extra);
        ok(d, &a);
        let mut b = a.clone();
        b[6] = "b.json";
        ok(d, &b);
        assert_eq!(std::fs::read(d.join("a.json")).unwrap(), std::fs::read(d.join("b.json")).unwrap());
    }
    let v = json(&ok(d, &["infer", "--model", "m.fqm", "--input", "data.fqt", "--exact"]));
    assert_eq!(v["version"], 1);
    assert_eq!(v["mode"], "exact");
    assert_eq!(v["images"].as_array().unwrap().len(), 8);
    assert!(v["images"][0]["trace"]["pbs_invocations"].as_u64().unwrap() > 0);
}

#[test]
fn thread_count_does_not_change_results() {
    let w = workspace();
    let d = w.path();
    let one = ok(d, &["--threads", "1", "infer", "--model", "m.fqm", "--input", "data.fqt", "--seed", "9"]);
    let four = ok(d, &["--threads", "4", "infer", "--model", "m.fqm", "--input", "data.fqt", "--seed", "9"]);
    assert_eq!(one, four);
}

#[test]
fn split_inference_with_served_head_matches_exact_labels() {
    let w = workspace();
    let d = w.path();
    let m = read_model(d.join("m.fqm")).unwrap();
    write_weights(d.join("fc.fqw"), &dequantized_head(&m).unwrap()).unwrap();
    let exact = json(&ok(d, &["infer", "--model", "m.fqm", "--input", "data.fqt", "--exact"]));
    let split = json(&ok(
        d,
        &["infer", "--model", "m.fqm", "--input", "data.fqt", "--exact", "--split-penultimate", "fc.fqw"],
    ));
    assert_eq!(split["mode"], "split");
    assert_eq!(labels(&exact), labels(&split));
    assert_eq!(split["images"][0]["features"].as_array().unwrap().len(), 64);
}

#[test]
fn analyze_prints_table_one_layout() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(d.path(), &["analyze", "--arch", "resnet18-dct", "--channels", "6,24,48,64,192", "--dims", "56"]);
    let rows: Vec<&str> = out.lines().skip(2).collect();
    assert_eq!(rows.len(), 7, "{out}");
    assert!(rows[0].starts_with("| 3x224^2 | 1.81G | 2.31M"), "{out}");
    for (r, c) in rows[1..6].iter().zip([6, 24, 48, 64, 192]) {
        assert!(r.starts_with(&format!("| {c}x56^2 |")), "{r}");
        assert!(r.contains("| 1.51M |"), "{r}");
    }
    assert!(rows[6].contains("-34.8%"), "{}", rows[6]);

    let csv = ok(d.path(), &["analyze", "--arch", "resnet18-rgb", "--dims", "224,448", "--format", "csv"]);
    assert!(csv.contains("3x224^2,") && csv.contains(",2308096,") && csv.contains(",9232384,"), "{csv}");
}

#[test]
fn sweep_emits_three_by_three_grid() {
    let w = workspace();
    let d = w.path();
    let md = ok(
        d,
        &[
            "sweep", "--graph", "g.json", "--weights", "w.fqw", "--calib", "data.fqt", "--data", "data.fqt", "--rounding",
            "6,7,8", "--perr", "0.05,0.01,0.005", "--cells-dir", "cells",
        ],
    );
    let rows: Vec<&str> = md.lines().filter(|l| l.starts_with("| 0.")).collect();
    assert_eq!(rows.len(), 3, "{md}");
    assert!(rows.iter().all(|r| r.matches('|').count() == 8));
    assert!(rows[1].contains(" * | * |"), "baseline cell is t=6, p=0.01: {md}");
    assert_eq!(std::fs::read_dir(d.join("cells")).unwrap().count(), 9);

    let j = json(&ok(
        d,
        &[
            "sweep", "--graph", "g.json", "--weights", "w.fqw", "--calib", "data.fqt", "--data", "data.fqt", "--rounding",
            "6,7,8", "--perr", "0.05,0.01,0.005", "--format", "json",
        ],
    ));
    let cells = j["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 9);
    // tables grow with retained precision and do not depend on the error rate
    let mem = |t: u64| cells.iter().find(|c| c["rounding"] == t).unwrap()["lut_bits"].as_u64().unwrap();
    assert!(mem(6) <= mem(7) && mem(7) <= mem(8));
}

#[test]
fn bootstrap_reads_csv_and_reports_interval() {
    let d = tempfile::tempdir().unwrap();
    let mut csv = String::from("image,correct\n");
    for i in 0..4000 {
        csv.push_str(&format!("img{i},{}\n", (i % 10 != 0) as u8));
    }
    std::fs::write(d.path().join("c.csv"), &csv).unwrap();
    let a = ok(d.path(), &["bootstrap", "c.csv", "--seed", "4"]);
    let b = ok(d.path(), &["--threads", "1", "bootstrap", "c.csv", "--seed", "4"]);
    assert_eq!(a, b);
    let v = json(&a);
    assert_eq!(v["disjoint"], true);
    assert_eq!(v["n_subsets"], 20);
    assert_eq!(v["resamples"], 10000);
    let (lo, est, hi) = (v["ci_low"].as_f64().unwrap(), v["estimate"].as_f64().unwrap(), v["ci_high"].as_f64().unwrap());
    assert!(lo <= est && est <= hi && hi - lo < 5.0, "{a}");

    std::fs::write(d.path().join("all.csv"), "a,1\nb,1\nc,1\nd,1\n").unwrap();
    let v = json(&ok(d.path(), &["bootstrap", "all.csv", "--subsets", "2", "--subset-size", "2"]));
    assert_eq!(v["ci_low"], v["ci_high"]);

    std::fs::write(d.path().join("bad.csv"), "a,1\nb,maybe\n").unwrap();
    assert_eq!(code(d.path(), &["bootstrap", "bad.csv"]), 3);
}

#[test]
fn exit_codes() {
    let w = workspace();
    let d = w.path();
    assert_eq!(code(d, &["analyze", "--bogus"]), 2);
    assert_eq!(code(d, &["analyze", "--arch", "vgg16"]), 2);
    assert_eq!(code(d, &["quantize", "--graph", "g.json", "--weights", "w.fqw", "--calib", "data.fqt", "--bits", "12", "-o", "x"]), 2);
    assert_eq!(code(d, &["infer", "--model", "missing.fqm", "--input", "data.fqt"]), 3);
    assert_eq!(code(d, &["infer", "--model", "g.json", "--input", "data.fqt"]), 3);

    // unknown major version
    let g = std::fs::read_to_string(d.join("g.json")).unwrap().replacen("\"version\": 1", "\"version\": 2", 1);
    std::fs::write(d.join("g2.json"), g).unwrap();
    assert_eq!(code(d, &["analyze", "--graph", "g2.json"]), 3);
    let mut m = std::fs::read(d.join("m.fqm")).unwrap();
    let pos = m.windows(11).position(|w| w == b"\"version\":1").unwrap();
    m[pos + 10] = b'7';
    std::fs::write(d.join("m7.fqm"), m).unwrap();
    assert_eq!(code(d, &["infer", "--model", "m7.fqm", "--input", "data.fqt", "--exact"]), 3);

    // a model whose recorded bound is below the real accumulator range
    let mut m = read_model(d.join("m.fqm")).unwrap();
    let conv = (0..m.graph.len()).find(|&i| matches!(m.graph.nodes[i].kind, LayerKind::Conv2d { .. })).unwrap();
    m.nodes[conv].bound = 1;
    write_model(d.join("broken.fqm"), &m).unwrap();
    assert_eq!(code(d, &["infer", "--model", "broken.fqm", "--input", "data.fqt", "--exact"]), 4);
}

#[test]
fn config_file_with_flag_overrides() {
    let w = workspace();
    let d = w.path();
    let mut cfg = ExperimentConfig::new(Architecture::Resnet20Dct);
    cfg.bits = 5;
    cfg.paths.graph = Some(PathBuf::from("g.json"));
    cfg.paths.weights = Some(PathBuf::from("w.fqw"));
    cfg.paths.calibration = Some(PathBuf::from("data.fqt"));
    cfg.paths.model = Some(PathBuf::from("cfg.fqm"));
    std::fs::write(d.join("cfg.json"), to_versioned_json(&cfg).unwrap()).unwrap();
    ok(d, &["quantize", "--config", "cfg.json"]);
    assert_eq!(read_model(d.join("cfg.fqm")).unwrap().bits, 5);
    ok(d, &["quantize", "--config", "cfg.json", "--bits", "6", "--rounding", "7", "-o", "o.fqm"]);
    let m = read_model(d.join("o.fqm")).unwrap();
    assert_eq!((m.bits, m.crypto.retained_precision), (6, 7));
}

#[test]
fn preprocess_rgb_and_resize() {
    let w = workspace();
    let d = w.path();
    ok(d, &["preprocess", "--rgb", "--resize", "16x16", "img0.ppm", "img1.ppm", "-o", "rgb.fqt"]);
    let f = freqhe_core::io::TensorFile::read(d.join("rgb.fqt")).unwrap();
    assert_eq!(f.tensors.len(), 2);
    assert_eq!(f.dims(), Some(freqhe_core::tensor::Shape::new(3, 16, 16)));
    assert!(f.config.is_none());
    // 30 is not a multiple of the block size
    assert_eq!(code(d, &["preprocess", "--resize", "30x30", "img0.ppm", "-o", "x.fqt"]), 2);
}

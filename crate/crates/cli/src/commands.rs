use std::fs;
use std::path::{Path, PathBuf};

use freqhe_core::analyzer::{count_ops, emit_table, format_magnitude, CostReport, PbsModel, TableFormat};
use freqhe_core::config::ExperimentConfig;
use freqhe_core::dct::{preprocess_batch, DctConfig, RgbImage};
use freqhe_core::io::{
    from_versioned_json, is_tensor_file, read_calibration, read_graph, read_model, read_weights, to_versioned_json,
    write_calibration, write_graph, write_model, write_weights, TensorFile,
};
use freqhe_core::network::{build_network, init_weights, Architecture, BuildOptions, NetworkGraph, WeightSet};
use freqhe_core::noise::NoiseChannel;
use freqhe_core::quant::{calibrate, quantize_model, Calibration};
use freqhe_core::sim::{argmax, run_exact, run_noisy, run_split, CostTrace};
use freqhe_core::stats::{interval_from_means, resample_means, subset_accuracies, BootstrapResult, CorrectnessVector};
use freqhe_core::tensor::{FloatTensor, Shape};
use freqhe_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::{AnalyzeArgs, BootstrapArgs, BuildArgs, ConfigArgs, InferArgs, PreprocessArgs, QuantizeArgs};

pub fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

/// Config file (if any) with `--arch` applied on top. Without either, the
/// defaults of the small DCT network are used.
pub fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let arch = args.arch.as_deref().map(str::parse::<Architecture>).transpose()?;
    let mut cfg = match &args.config {
        Some(p) => from_versioned_json::<ExperimentConfig>("config", &fs::read_to_string(p)?)?,
        None => ExperimentConfig::new(arch.unwrap_or(Architecture::Resnet20Dct)),
    };
    if let Some(a) = arch {
        if a != cfg.architecture {
            let d = ExperimentConfig::new(a);
            cfg.architecture = a;
            cfg.input = d.input;
            cfg.dct = d.dct;
        }
    }
    Ok(cfg)
}

pub fn pick(flag: &Option<PathBuf>, cfg: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.clone()
        .or_else(|| cfg.clone())
        .ok_or_else(|| usage(format!("no {what} path given (flag or config)")))
}

pub fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<FloatTensor>> {
    let f = TensorFile::read(path)?;
    if f.tensors.is_empty() {
        return Err(Error::Format(format!("{} holds no tensors", path.display())));
    }
    Ok(f.tensors)
}

/// Observed ranges from a tensor file, or a saved calibration JSON.
pub fn load_calibration(path: &Path, g: &NetworkGraph, ws: &WeightSet) -> Result<Calibration> {
    let bytes = fs::read(path)?;
    if is_tensor_file(&bytes) {
        calibrate(g, ws, &TensorFile::decode(&bytes)?.tensors)
    } else {
        let c = read_calibration(path)?;
        if c.ranges.len() != g.len() {
            return Err(Error::Format(format!(
                "calibration covers {} nodes, graph has {}",
                c.ranges.len(),
                g.len()
            )));
        }
        Ok(c)
    }
}

fn check_input(g: &NetworkGraph, x: &FloatTensor) -> Result<()> {
    let dims = g.input_dims()?;
    if x.shape != dims {
        return Err(Error::DimensionMismatch(format!("model expects {dims}, tensor file holds {}", x.shape)));
    }
    Ok(())
}

pub fn preprocess(a: PreprocessArgs) -> Result<()> {
    let cfg = load_config(&a.cfg)?;
    let mut images = a
        .images
        .iter()
        .map(RgbImage::read_ppm)
        .collect::<Result<Vec<_>>>()?;
    if let Some((w, h)) = a.resize {
        images = images.iter().map(|im| im.resize(w, h)).collect::<Result<_>>()?;
    }
    let file = if a.rgb {
        TensorFile::plain(images.iter().map(RgbImage::to_tensor).collect())
    } else {
        let base = cfg.dct.unwrap_or(DctConfig::new(8, 64)?);
        let mut d = DctConfig::new(
            a.filter_size.unwrap_or(base.filter_size),
            a.channels.unwrap_or(base.channels_kept),
        )?;
        d.normalize = a.normalize || base.normalize;
        TensorFile::from_frequency(&preprocess_batch(&images, &d)?)?
    };
    if let Some(s) = file.dims() {
        log::info!("{} tensors of {s}", file.tensors.len());
    }
    file.write(&a.out)
}

pub fn build(a: BuildArgs) -> Result<()> {
    if a.cfg.arch.is_none() && a.cfg.config.is_none() {
        return Err(usage("build needs --arch or --config"));
    }
    let cfg = load_config(&a.cfg)?;
    let opts = BuildOptions {
        num_classes: a.classes,
        head_relu: a.head_relu,
        ..BuildOptions::default()
    };
    let g = build_network(cfg.architecture, a.input.unwrap_or(cfg.input), &opts)?;
    write_graph(&a.out, &g)?;
    if let Some(p) = &a.init_weights {
        write_weights(p, &init_weights(&g, a.seed.unwrap_or(cfg.seeds.weights)))?;
    }
    Ok(())
}

pub fn quantize(a: QuantizeArgs) -> Result<()> {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(b) = a.bits {
        cfg.bits = b;
    }
    if let Some(t) = a.rounding {
        cfg.crypto.retained_precision = t;
    }
    if let Some(p) = a.perr {
        cfg.crypto.p_err = p;
    }
    cfg.crypto.validate()?;
    let g = read_graph(pick(&a.graph, &cfg.paths.graph, "graph")?)?;
    let ws = read_weights(pick(&a.weights, &cfg.paths.weights, "weights")?)?;
    let calib = load_calibration(&pick(&a.calib, &cfg.paths.calibration, "calibration")?, &g, &ws)?;
    if let Some(p) = &a.save_calibration {
        write_calibration(p, &calib)?;
    }
    let pbs = PbsModel {
        count_maxpool_comparisons: a.count_maxpool,
        ..PbsModel::default()
    };
    let m = quantize_model(&g, &ws, &calib, cfg.bits, &cfg.crypto, &pbs)?;
    for w in calib.warnings.iter().chain(&m.warnings) {
        log::warn!("{w}");
    }
    write_model(pick(&a.out, &cfg.paths.model, "model output")?, &m)
}

/// The spatial-domain network whose input side is four times the DCT grid.
fn rgb_counterpart(arch: Architecture) -> Option<Architecture> {
    match arch {
        Architecture::Resnet18Dct => Some(Architecture::Resnet18Rgb),
        Architecture::Resnet20Dct => Some(Architecture::Resnet20Rgb),
        _ => None,
    }
}

fn layer_table(r: &CostReport, format: TableFormat) -> String {
    let mut out = String::new();
    let rows = r.layers.iter().map(|l| {
        [
            l.name.clone(),
            l.op.clone(),
            l.output.to_string(),
            l.macs.to_string(),
            l.relus.to_string(),
            l.pbs.to_string(),
        ]
    });
    let head = ["Layer", "Op", "Output", "#MACs", "#ReLUs", "#PBS"];
    match format {
        TableFormat::Csv => {
            out.push_str(&head.join(","));
            out.push('\n');
            for row in rows {
                out.push_str(&row.join(","));
                out.push('\n');
            }
        }
        _ => {
            out.push_str(&format!("### {}\n\n| {} |\n|{}\n", r.label, head.join(" | "), "---|".repeat(head.len())));
            for row in rows {
                out.push_str(&format!("| {} |\n", row.join(" | ")));
            }
            out.push_str(&format!(
                "| total | | | {} | {} | {} |\n\n",
                format_magnitude(r.macs),
                format_magnitude(r.relus),
                format_magnitude(r.pbs)
            ));
        }
    }
    out
}

pub fn analyze(a: AnalyzeArgs) -> Result<()> {
    let pbs = PbsModel {
        count_maxpool_comparisons: a.count_maxpool,
        ..PbsModel::default()
    };
    let opts = BuildOptions {
        num_classes: a.classes,
        ..BuildOptions::default()
    };
    let mut tables: Vec<Vec<CostReport>> = Vec::new();
    if let Some(p) = &a.graph {
        let g = read_graph(p)?;
        tables.push(vec![count_ops(&g, g.input_dims()?, &pbs)?]);
    } else {
        let arch: Architecture = a
            .arch
            .as_deref()
            .ok_or_else(|| usage("analyze needs --arch or --graph"))?
            .parse()?;
        let default = ExperimentConfig::new(arch).input;
        let dims = if a.dims.is_empty() { vec![default.h] } else { a.dims.clone() };
        let channels = match (arch.is_dct(), a.channels.is_empty()) {
            (false, _) => vec![3],
            (true, true) => vec![default.c],
            (true, false) => a.channels.clone(),
        };
        for &s in &dims {
            let mut rows = Vec::new();
            if let (Some(rgb), false) = (rgb_counterpart(arch), a.no_baseline) {
                let d = Shape::new(3, 4 * s, 4 * s);
                rows.push(count_ops(&build_network(rgb, d, &opts)?, d, &pbs)?);
            }
            for &c in &channels {
                let d = Shape::new(c, s, s);
                rows.push(count_ops(&build_network(arch, d, &opts)?, d, &pbs)?);
            }
            tables.push(rows);
        }
    }
    let mut text = String::new();
    for rows in &tables {
        if a.layers && a.format != TableFormat::Json {
            for r in rows {
                text.push_str(&layer_table(r, a.format));
            }
        } else {
            text.push_str(&emit_table(rows, a.format)?);
        }
        if tables.len() > 1 && a.format == TableFormat::Markdown {
            text.push('\n');
        }
    }
    emit(a.out.as_deref(), &text)
}

#[derive(Serialize)]
struct ImageResult {
    index: usize,
    label: usize,
    logits: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    trace: CostTrace,
}

#[derive(Serialize)]
struct InferReport {
    mode: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    bits: u32,
    retained_precision: u32,
    p_err: f64,
    circuit_bitwidth: u32,
    images: Vec<ImageResult>,
}

pub fn infer(a: InferArgs) -> Result<()> {
    let cfg = load_config(&a.cfg)?;
    let mut m = read_model(pick(&a.model, &cfg.paths.model, "model")?)?;
    let xs = read_tensors(&a.input)?;
    for x in &xs {
        check_input(&m.graph, x)?;
    }
    let seed = a.seed.unwrap_or(cfg.seeds.noise);
    if a.exact {
        m.crypto.p_err = 0.0;
    }
    let client: Option<WeightSet> = a.split_penultimate.as_ref().map(read_weights).transpose()?;
    let mode = match (&client, a.exact) {
        (Some(_), _) => "split",
        (None, true) => "exact",
        (None, false) => "noisy",
    };
    let images = xs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let s = NoiseChannel::image_seed(seed, i as u64);
            let mut r = if let Some(c) = &client {
                let o = run_split(&m, x, s, c)?;
                ImageResult {
                    index: i,
                    label: o.label,
                    logits: o.logits,
                    features: Some(o.features),
                    seed: None,
                    trace: o.trace,
                }
            } else {
                let (logits, trace) = if a.exact { run_exact(&m, x)? } else { run_noisy(&m, x, s)? };
                ImageResult {
                    index: i,
                    label: argmax(&logits),
                    logits,
                    features: None,
                    seed: None,
                    trace,
                }
            };
            if !a.exact {
                r.seed = Some(s);
            }
            if a.summary {
                r.trace.nodes.clear();
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = InferReport {
        mode,
        seed: (!a.exact).then_some(seed),
        bits: m.bits,
        retained_precision: m.crypto.retained_precision,
        p_err: m.crypto.p_err,
        circuit_bitwidth: m.crypto.circuit_bitwidth,
        images,
    };
    let mut text = to_versioned_json(&report)?;
    text.push('\n');
    emit(a.out.as_deref(), &text)
}

fn parse_correct(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" => Some(true),
        "0" | "false" => Some(false),
        _ => None,
    }
}

pub fn read_correctness(path: &Path) -> Result<CorrectnessVector> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut correct = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let field = rec
            .get(1)
            .ok_or_else(|| Error::Format(format!("line {}: expected `image-id,correct`", i + 1)))?;
        match parse_correct(field) {
            Some(c) => correct.push(c),
            // a header row
            None if i == 0 => {}
            None => return Err(Error::Format(format!("line {}: `{field}` is not 0 or 1", i + 1))),
        }
    }
    CorrectnessVector::new(correct).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Serialize)]
struct BootstrapReport {
    #[serde(flatten)]
    result: BootstrapResult,
    accuracy: f64,
    images: usize,
    subset_size: usize,
    disjoint: bool,
    seed: u64,
}

pub fn bootstrap(a: BootstrapArgs) -> Result<()> {
    let v = read_correctness(&a.csv)?;
    let s = subset_accuracies(&v, a.subsets, a.subset_size, a.seed)?;
    const CHUNK: usize = 1000;
    let means: Vec<f64> = (0..a.resamples.div_ceil(CHUNK))
        .into_par_iter()
        .flat_map_iter(|k| resample_means(&s.accuracies, a.resamples, a.seed, k * CHUNK..(k + 1) * CHUNK))
        .collect();
    let result = interval_from_means(&s.accuracies, means, a.level)?;
    let report = BootstrapReport {
        result,
        accuracy: v.accuracy() * 100.0,
        images: v.correct.len(),
        subset_size: a.subset_size,
        disjoint: s.disjoint,
        seed: a.seed,
    };
    let mut text = to_versioned_json(&report)?;
    text.push('\n');
    emit(a.out.as_deref(), &text)
}

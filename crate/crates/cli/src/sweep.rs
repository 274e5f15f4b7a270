//! Grid evaluation over activation bits, retained precision and bootstrap
//! error rate. Each (bits, rounding) pair is quantized once; every error
//! rate is then evaluated on the same model.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use freqhe_core::analyzer::PbsModel;
use freqhe_core::io::{read_graph, read_weights, to_versioned_json};
use freqhe_core::network::forward_float;
use freqhe_core::noise::NoiseChannel;
use freqhe_core::quant::{quantize_model, CryptoParams, QuantizedModel};
use freqhe_core::sim::{argmax, run_noisy};
use freqhe_core::tensor::FloatTensor;
use freqhe_core::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::commands::{emit, load_calibration, load_config, pick, read_tensors, usage};
use crate::SweepArgs;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepFormat {
    Markdown,
    Csv,
    Json,
}

#[derive(Clone, Debug, Serialize)]
pub struct Cell {
    pub bits: u32,
    pub rounding: u32,
    pub perr: f64,
    /// Percent of images whose label matches the reference.
    pub accuracy: f64,
    /// Table storage: entries times output bits, summed over all tables.
    pub lut_bits: u64,
    pub circuit_bitwidth: u32,
    pub delta_accuracy: f64,
    /// Percent change of `lut_bits`.
    pub delta_memory: f64,
}

#[derive(Serialize)]
struct SweepReport {
    images: usize,
    repeats: u64,
    seed: u64,
    reference: &'static str,
    baseline_rounding: u32,
    baseline_perr: f64,
    cells: Vec<Cell>,
}

fn lut_bits(m: &QuantizedModel) -> u64 {
    m.luts().map(|(_, l)| l.table.len() as u64 * l.output.bits as u64).sum()
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    fs::read_to_string(path)?
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Format(format!("label `{s}` is not an integer"))))
        .collect()
}

fn accuracy(m: &QuantizedModel, xs: &[FloatTensor], labels: &[usize], seed: u64, repeats: u64) -> Result<f64> {
    let hits = xs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut n = 0u64;
            for r in 0..repeats {
                let s = NoiseChannel::image_seed(seed.wrapping_add(r), i as u64);
                n += (argmax(&run_noisy(m, x, s)?.0) == labels[i]) as u64;
            }
            Ok(n)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<u64>() as f64 / (xs.len() as u64 * repeats) as f64 * 100.0)
}

fn fmt_pct(v: f64) -> String {
    let v = if v.abs() < 0.05 { 0.0 } else { v };
    format!("{v:+.1}%")
}

fn render(cells: &[Cell], rounding: &[u32], perr: &[f64], base: (u32, f64), format: SweepFormat) -> String {
    let mut out = String::new();
    match format {
        SweepFormat::Csv => {
            out.push_str("bits,rounding,perr,accuracy,lut_bits,circuit_bitwidth,delta_accuracy,delta_memory\n");
            for c in cells {
                writeln!(
                    out,
                    "{},{},{},{:.4},{},{},{:.4},{:.4}",
                    c.bits, c.rounding, c.perr, c.accuracy, c.lut_bits, c.circuit_bitwidth, c.delta_accuracy, c.delta_memory
                )
                .unwrap();
            }
        }
        SweepFormat::Markdown | SweepFormat::Json => {
            let mut bits: Vec<u32> = cells.iter().map(|c| c.bits).collect();
            bits.dedup();
            for b in bits {
                let find = |t: u32, p: f64| cells.iter().find(|c| c.bits == b && c.rounding == t && c.perr == p);
                let acc = find(base.0, base.1).map_or(f64::NAN, |c| c.accuracy);
                writeln!(out, "b = {b}: baseline rounding {} / PBS error {} at {acc:.1}% accuracy\n", base.0, base.1)
                    .unwrap();
                let mut head = String::from("| PBS Err. |");
                for t in rounding {
                    write!(head, " t={t} Δ Acc. | t={t} Δ Memory |").unwrap();
                }
                writeln!(out, "{head}\n|---|{}", "---|---|".repeat(rounding.len())).unwrap();
                for &p in perr {
                    let mut row = format!("| {p} |");
                    for &t in rounding {
                        match find(t, p) {
                            _ if (t, p) == base => row.push_str(" * | * |"),
                            Some(c) => write!(row, " {} | {} |", fmt_pct(c.delta_accuracy), fmt_pct(c.delta_memory))
                                .unwrap(),
                            None => row.push_str(" ~ | ~ |"),
                        }
                    }
                    writeln!(out, "{row}").unwrap();
                }
                out.push('\n');
            }
        }
    }
    out
}

pub fn run(a: SweepArgs) -> Result<()> {
    let cfg = load_config(&a.cfg)?;
    let bits = if a.bits.is_empty() { vec![cfg.bits] } else { a.bits.clone() };
    let rounding = if a.rounding.is_empty() { vec![cfg.crypto.retained_precision] } else { a.rounding.clone() };
    let perr = if a.perr.is_empty() { vec![cfg.crypto.p_err] } else { a.perr.clone() };
    if a.repeats == 0 {
        return Err(usage("--repeats must be positive"));
    }
    let seed = a.seed.unwrap_or(cfg.seeds.noise);

    let g = read_graph(pick(&a.graph, &cfg.paths.graph, "graph")?)?;
    let ws = read_weights(pick(&a.weights, &cfg.paths.weights, "weights")?)?;
    let calib = load_calibration(&pick(&a.calib, &cfg.paths.calibration, "calibration")?, &g, &ws)?;
    let xs = read_tensors(&a.data)?;
    let (labels, reference) = match &a.labels {
        Some(p) => (read_labels(p)?, "labels"),
        None => (
            xs.par_iter()
                .map(|x| forward_float(&g, &ws, x).map(|l| argmax(&l)))
                .collect::<Result<Vec<_>>>()?,
            "float",
        ),
    };
    if labels.len() != xs.len() {
        return Err(Error::DimensionMismatch(format!("{} labels for {} inputs", labels.len(), xs.len())));
    }

    // baseline cell: the configured rounding and error rate when present in
    // the grid, otherwise the first of each
    let base_t = if rounding.contains(&cfg.crypto.retained_precision) { cfg.crypto.retained_precision } else { rounding[0] };
    let base_p = if perr.contains(&cfg.crypto.p_err) { cfg.crypto.p_err } else { perr[0] };

    let pairs: Vec<(u32, u32)> = bits.iter().flat_map(|&b| rounding.iter().map(move |&t| (b, t))).collect();
    let models = pairs
        .par_iter()
        .map(|&(b, t)| {
            let crypto = CryptoParams {
                retained_precision: t,
                ..cfg.crypto.clone()
            };
            quantize_model(&g, &ws, &calib, b, &crypto, &PbsModel::default())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for ((b, t), m) in pairs.iter().zip(&models) {
        for &p in &perr {
            let mut mm = m.clone();
            mm.crypto.p_err = p;
            mm.crypto.validate()?;
            cells.push(Cell {
                bits: *b,
                rounding: *t,
                perr: p,
                accuracy: accuracy(&mm, &xs, &labels, seed, a.repeats)?,
                lut_bits: lut_bits(m),
                circuit_bitwidth: m.crypto.circuit_bitwidth,
                delta_accuracy: 0.0,
                delta_memory: 0.0,
            });
        }
    }
    let snapshot = cells.clone();
    for c in cells.iter_mut() {
        if let Some(base) = snapshot.iter().find(|x| x.bits == c.bits && x.rounding == base_t && x.perr == base_p) {
            c.delta_accuracy = c.accuracy - base.accuracy;
            c.delta_memory = (c.lut_bits as f64 - base.lut_bits as f64) / base.lut_bits.max(1) as f64 * 100.0;
        }
    }

    if let Some(dir) = &a.cells_dir {
        fs::create_dir_all(dir)?;
        for c in &cells {
            let name = format!("cell_b{}_t{}_p{}.json", c.bits, c.rounding, c.perr);
            fs::write(dir.join(name), to_versioned_json(c)? + "\n")?;
        }
    }

    let text = match a.format {
        SweepFormat::Json => {
            let report = SweepReport {
                images: xs.len(),
                repeats: a.repeats,
                seed,
                reference,
                baseline_rounding: base_t,
                baseline_perr: base_p,
                cells,
            };
            to_versioned_json(&report)? + "\n"
        }
        f => render(&cells, &rounding, &perr, (base_t, base_p), f),
    };
    emit(a.out.as_deref(), &text)
}

//! Static homomorphic-operation counting.
//!
//! MACs are `k² · C_in · C_out · H_out · W_out` per convolution and
//! `in · out` per linear layer. Every lookup-table site costs a fixed number
//! of programmable bootstraps per element (see [`PbsModel`]); HOPs are
//! MACs plus PBS. The counting convention travels with each report so
//! incompatible reports are never compared.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{lut_sites, LayerKind, LutKind, NetworkGraph};
use crate::tensor::Shape;

/// Bootstraps charged per lookup-table element.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PbsModel {
    pub pbs_per_relu_element: u64,
    pub pbs_per_requant_element: u64,
    /// Charge `k² - 1` comparator bootstraps per max-pool output.
    #[serde(default)]
    pub count_maxpool_comparisons: bool,
}

impl Default for PbsModel {
    fn default() -> Self {
        Self {
            pbs_per_relu_element: 1,
            pbs_per_requant_element: 1,
            count_maxpool_comparisons: false,
        }
    }
}

impl PbsModel {
    pub fn validate(&self) -> Result<()> {
        if self.pbs_per_relu_element == 0 {
            return Err(Error::InvalidConfig(
                "pbs_per_relu_element must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn per_element(&self, kind: LutKind) -> u64 {
        match kind {
            LutKind::Relu => self.pbs_per_relu_element,
            LutKind::Requant => self.pbs_per_requant_element,
        }
    }

    /// Tag identifying the counting rules.
    pub fn convention(&self) -> String {
        format!(
            "hops=macs+pbs;pbs_per_relu={};pbs_per_requant={};maxpool={}",
            self.pbs_per_relu_element,
            self.pbs_per_requant_element,
            if self.count_maxpool_comparisons {
                "comparators"
            } else {
                "free"
            }
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRow {
    pub name: String,
    pub op: String,
    pub output: Shape,
    pub macs: u64,
    pub relus: u64,
    pub lut_elements: u64,
    pub pbs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    /// Row label, e.g. `3x224^2`.
    pub label: String,
    pub input: Shape,
    pub convention: String,
    pub macs: u64,
    pub relus: u64,
    pub pbs: u64,
    pub hops: u64,
    pub layers: Vec<LayerRow>,
}

impl CostReport {
    /// Totals recomputed from the per-layer rows.
    pub fn row_totals(&self) -> (u64, u64, u64) {
        self.layers.iter().fold((0, 0, 0), |(m, r, p), l| {
            (m + l.macs, r + l.relus, p + l.pbs)
        })
    }
}

/// Counts MACs, ReLU elements, bootstraps and HOPs for `graph` at `input`.
pub fn count_ops(graph: &NetworkGraph, input: Shape, pbs_model: &PbsModel) -> Result<CostReport> {
    pbs_model.validate()?;
    let shapes = graph.infer_shapes_for(input)?;
    let sites = lut_sites(graph)?;
    let mut layers = Vec::new();
    for (i, node) in graph.nodes.iter().enumerate() {
        if matches!(node.kind, LayerKind::Input { .. }) {
            continue;
        }
        let out = shapes[i];
        let elems = out.len() as u64;
        let macs = match node.kind {
            LayerKind::Conv2d { in_ch, kernel, .. } => (kernel * kernel * in_ch) as u64 * elems,
            LayerKind::FullyConnected {
                in_features,
                out_features,
                ..
            } => (in_features * out_features) as u64,
            _ => 0,
        };
        let relus = if matches!(node.kind, LayerKind::Relu) {
            elems
        } else {
            0
        };
        let mut lut_elements = 0;
        let mut pbs = 0;
        for site in sites.iter().filter(|s| s.node == i) {
            lut_elements += elems;
            pbs += elems * pbs_model.per_element(site.kind);
        }
        if let LayerKind::MaxPool { kernel, .. } = node.kind {
            if pbs_model.count_maxpool_comparisons {
                pbs += elems * (kernel * kernel - 1) as u64;
            }
        }
        layers.push(LayerRow {
            name: node.name.clone(),
            op: node.kind.name().to_string(),
            output: out,
            macs,
            relus,
            lut_elements,
            pbs,
        });
    }
    let (macs, relus, pbs) = layers.iter().fold((0, 0, 0), |(m, r, p), l| {
        (m + l.macs, r + l.relus, p + l.pbs)
    });
    Ok(CostReport {
        label: input.to_string(),
        input,
        convention: pbs_model.convention(),
        macs,
        relus,
        pbs,
        hops: macs + pbs,
        layers,
    })
}

/// Signed percentage change per metric; `None` where the baseline is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub macs: Option<f64>,
    pub relus: Option<f64>,
    pub pbs: Option<f64>,
    pub hops: Option<f64>,
}

fn pct(a: u64, b: u64) -> Option<f64> {
    (a != 0).then(|| (b as f64 - a as f64) / a as f64 * 100.0)
}

/// Percentage change from `a` to `b`.
pub fn compare_reports(a: &CostReport, b: &CostReport) -> Result<Deltas> {
    if a.convention != b.convention {
        return Err(Error::ConventionMismatch(
            a.convention.clone(),
            b.convention.clone(),
        ));
    }
    Ok(Deltas {
        macs: pct(a.macs, b.macs),
        relus: pct(a.relus, b.relus),
        pbs: pct(a.pbs, b.pbs),
        hops: pct(a.hops, b.hops),
    })
}

/// Largest reduction (most negative delta) of each metric from `baseline`
/// across `others`.
pub fn max_deltas(baseline: &CostReport, others: &[CostReport]) -> Result<Deltas> {
    fn pick(acc: Option<f64>, v: Option<f64>) -> Option<f64> {
        match (acc, v) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
    let mut out = Deltas {
        macs: None,
        relus: None,
        pbs: None,
        hops: None,
    };
    for r in others {
        let d = compare_reports(baseline, r)?;
        out.macs = pick(out.macs, d.macs);
        out.relus = pick(out.relus, d.relus);
        out.pbs = pick(out.pbs, d.pbs);
        out.hops = pick(out.hops, d.hops);
    }
    Ok(out)
}

/// Rescales a latency measured on `reported_threads` to `target_threads`,
/// assuming linear speed-up in thread count.
pub fn normalize_latency(reported_seconds: f64, reported_threads: u32, target_threads: u32) -> Result<f64> {
    if reported_threads == 0 || target_threads == 0 {
        return Err(Error::InvalidConfig("thread counts must be positive".into()));
    }
    if reported_seconds.is_nan() || reported_seconds <= 0.0 {
        return Err(Error::InvalidConfig("latency must be positive".into()));
    }
    Ok(reported_seconds * reported_threads as f64 / target_threads as f64)
}

/// Whole seconds for display, halves rounded away from zero.
pub fn display_seconds(seconds: f64) -> u64 {
    seconds.round() as u64
}

/// `1.82G`, `2.31M`, `512K` style magnitude with three significant figures.
pub fn format_magnitude(n: u64) -> String {
    let v = n as f64;
    let (scaled, suffix) = if v >= 1e9 {
        (v / 1e9, "G")
    } else if v >= 1e6 {
        (v / 1e6, "M")
    } else if v >= 1e3 {
        (v / 1e3, "K")
    } else {
        return n.to_string();
    };
    // 999.6M must not print as "1000M"
    let rounded3 = |x: f64| {
        if x >= 99.95 {
            format!("{x:.0}")
        } else if x >= 9.995 {
            format!("{x:.1}")
        } else {
            format!("{x:.2}")
        }
    };
    let s = rounded3(scaled);
    if s == "1000" {
        match suffix {
            "K" => "1.00M".into(),
            "M" => "1.00G".into(),
            _ => format!("{s}{suffix}"),
        }
    } else {
        format!("{s}{suffix}")
    }
}

fn format_delta(d: Option<f64>) -> String {
    match d {
        Some(v) => {
            let v = if v.abs() < 5e-3 { 0.0 } else { v };
            format!("{v:.1}%")
        }
        None => "~".into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for TableFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(TableFormat::Json),
            "csv" => Ok(TableFormat::Csv),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            other => Err(Error::InvalidConfig(format!("unknown table format `{other}`"))),
        }
    }
}

const COLUMNS: [&str; 5] = ["Dimension", "#MACs", "#ReLUs", "#PBS", "#HOPs"];

/// Renders reports as a table. The first report is the baseline; with more
/// than one report a final row holds the largest reduction per metric.
pub fn emit_table(reports: &[CostReport], format: TableFormat) -> Result<String> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidConfig("no reports to render".into()))?;
    let deltas = if reports.len() > 1 {
        Some(max_deltas(first, &reports[1..])?)
    } else {
        None
    };
    let mut out = String::new();
    match format {
        TableFormat::Json => {
            out = serde_json::to_string_pretty(reports)?;
            out.push('\n');
        }
        TableFormat::Csv => {
            writeln!(out, "{}", COLUMNS.join(",")).unwrap();
            for r in reports {
                writeln!(out, "{},{},{},{},{}", r.label, r.macs, r.relus, r.pbs, r.hops).unwrap();
            }
            if let Some(d) = deltas {
                writeln!(
                    out,
                    "Max delta,{},{},{},{}",
                    format_delta(d.macs),
                    format_delta(d.relus),
                    format_delta(d.pbs),
                    format_delta(d.hops)
                )
                .unwrap();
            }
        }
        TableFormat::Markdown => {
            writeln!(out, "| {} |", COLUMNS.join(" | ")).unwrap();
            writeln!(out, "|{}", "---|".repeat(COLUMNS.len())).unwrap();
            for r in reports {
                writeln!(
                    out,
                    "| {} | {} | {} | {} | {} |",
                    r.label,
                    format_magnitude(r.macs),
                    format_magnitude(r.relus),
                    format_magnitude(r.pbs),
                    format_magnitude(r.hops)
                )
                .unwrap();
            }
            if let Some(d) = deltas {
                writeln!(
                    out,
                    "| Max Δ | {} | {} | {} | {} |",
                    format_delta(d.macs),
                    format_delta(d.relus),
                    format_delta(d.pbs),
                    format_delta(d.hops)
                )
                .unwrap();
            }
        }
    }
    Ok(out)
}

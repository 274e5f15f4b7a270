mod commands;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use freqhe_core::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_FORMAT: u8 = 3;
pub const EXIT_INVARIANT: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "freqhe", version, about = "Frequency-domain inputs for encrypted ResNet inference")]
pub struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, env = "FREQHE_THREADS", default_value_t = 0)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert PPM images into a tensor file (block DCT or plain RGB).
    Preprocess(PreprocessArgs),
    /// Write the graph of an architecture, optionally with random weights.
    Build(BuildArgs),
    /// Calibrate and quantize a float network into an integer model file.
    Quantize(QuantizeArgs),
    /// Count MACs, ReLUs, bootstraps and HOPs.
    Analyze(AnalyzeArgs),
    /// Run a quantized model on a tensor file.
    Infer(InferArgs),
    /// Accuracy and table size over a grid of bits, rounding and error rates.
    Sweep(SweepArgs),
    /// Subset-bootstrap confidence interval from a correctness CSV.
    Bootstrap(BootstrapArgs),
}

/// Fields shared with the JSON experiment config; flags win over the file.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Experiment config (versioned JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// resnet18-rgb, resnet18-dct, resnet20-rgb or resnet20-dct.
    #[arg(long)]
    pub arch: Option<String>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Input images (binary or ASCII PPM).
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    #[arg(long, short)]
    pub out: PathBuf,
    /// DCT block size N.
    #[arg(long)]
    pub filter_size: Option<usize>,
    /// Frequency channels kept across Y, Cb and Cr.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Standardize every channel with statistics fitted on this batch.
    #[arg(long)]
    pub normalize: bool,
    /// Resize to WxH (bilinear) before the transform.
    #[arg(long, value_parser = parse_pair)]
    pub resize: Option<(usize, usize)>,
    /// Emit plain RGB tensors in [0, 1] instead of DCT coefficients.
    #[arg(long, conflicts_with_all = ["filter_size", "channels", "normalize"])]
    pub rgb: bool,
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Input dimensions, CxHxW or CxS for square inputs.
    #[arg(long, value_parser = parse_shape)]
    pub input: Option<freqhe_core::tensor::Shape>,
    #[arg(long)]
    pub classes: Option<usize>,
    /// Force the ReLU after the stem on or off.
    #[arg(long)]
    pub head_relu: Option<bool>,
    #[arg(long, short)]
    pub out: PathBuf,
    /// Also write randomly initialised weights here.
    #[arg(long)]
    pub init_weights: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Tensor file of calibration inputs, or a calibration JSON.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Save the observed ranges as calibration JSON.
    #[arg(long)]
    pub save_calibration: Option<PathBuf>,
    #[arg(long)]
    pub bits: Option<u32>,
    /// Retained precision t in bits.
    #[arg(long)]
    pub rounding: Option<u32>,
    #[arg(long)]
    pub perr: Option<f64>,
    /// Charge comparator bootstraps for max pooling.
    #[arg(long)]
    pub count_maxpool: bool,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Analyze a saved graph instead of a built-in architecture.
    #[arg(long, conflicts_with_all = ["arch", "channels", "dims"])]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<String>,
    /// Input channel counts, one row each.
    #[arg(long, value_delimiter = ',')]
    pub channels: Vec<usize>,
    /// Square spatial sizes; one table per size.
    #[arg(long, value_delimiter = ',')]
    pub dims: Vec<usize>,
    /// Leave out the RGB baseline row for DCT architectures.
    #[arg(long)]
    pub no_baseline: bool,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, default_value = "markdown")]
    pub format: freqhe_core::analyzer::TableFormat,
    #[arg(long)]
    pub count_maxpool: bool,
    /// Per-layer rows instead of totals.
    #[arg(long)]
    pub layers: bool,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Tensor file; every tensor in it is evaluated.
    #[arg(long)]
    pub input: PathBuf,
    /// Noise-free integer evaluation.
    #[arg(long)]
    pub exact: bool,
    /// Base seed of the bootstrap noise; image i uses a seed derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Finish with the float final layer stored in this weights file.
    #[arg(long)]
    pub split_penultimate: Option<PathBuf>,
    /// Drop per-node traces from the output.
    #[arg(long)]
    pub summary: bool,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Calibration tensor file (or calibration JSON).
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Evaluation tensor file.
    #[arg(long)]
    pub data: PathBuf,
    /// Reference labels, one integer per line or comma separated. Defaults
    /// to the float network's predictions.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub bits: Vec<u32>,
    #[arg(long, value_delimiter = ',')]
    pub rounding: Vec<u32>,
    #[arg(long, value_delimiter = ',')]
    pub perr: Vec<f64>,
    /// Noise seeds averaged per cell.
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "markdown")]
    pub format: sweep::SweepFormat,
    /// Directory for one JSON result per grid cell.
    #[arg(long)]
    pub cells_dir: Option<PathBuf>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BootstrapArgs {
    /// CSV of image id and correctness (0/1), with or without a header.
    pub csv: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub subsets: usize,
    #[arg(long, default_value_t = 200)]
    pub subset_size: usize,
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
    Ok((a.parse().map_err(|e| format!("{e}"))?, b.parse().map_err(|e| format!("{e}"))?))
}

fn parse_shape(s: &str) -> Result<freqhe_core::tensor::Shape, String> {
    let parts: Vec<usize> = s
        .split(['x', 'X'])
        .map(|p| p.parse().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [c, s] => Ok(freqhe_core::tensor::Shape::new(c, s, s)),
        [c, h, w] => Ok(freqhe_core::tensor::Shape::new(c, h, w)),
        _ => Err("expected CxHxW or CxS".into()),
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_invariant() {
        EXIT_INVARIANT
    } else if e.is_format() {
        EXIT_FORMAT
    } else {
        EXIT_USAGE
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        log::warn!("thread pool: {e}");
    }
    let res = match cli.command {
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Build(a) => commands::build(a),
        Command::Quantize(a) => commands::quantize(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Infer(a) => commands::infer(a),
        Command::Sweep(a) => sweep::run(a),
        Command::Bootstrap(a) => commands::bootstrap(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

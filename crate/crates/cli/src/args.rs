//! Command-line definitions and the small value parsers they rely on.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use freqchain_core::compile::CompileMode;
use freqchain_core::freqreg::{DecayPolicy, MaskFamily};

#[derive(Debug, Parser)]
#[command(name = "freqchain", version, about = "Train, compile and benchmark frequency-domain MLPs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write a spatial checkpoint; prints one JSON line per epoch.
    Train(TrainArgs),
    /// Compile a spatial checkpoint into a frequency inference chain.
    Compile(CompileArgs),
    /// Predict classes for IDX images or inline rows; prints JSON lines.
    Infer(InferArgs),
    /// Time a model against a dense baseline and write a JSON report.
    Bench(BenchArgs),
    /// Parameter count for a list of weight shapes.
    Count(CountArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding the four MNIST IDX files (train-images-idx3-ubyte,
    /// train-labels-idx1-ubyte, t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte).
    #[arg(long, conflicts_with = "synthetic")]
    pub data_dir: Option<PathBuf>,
    /// Train on a seeded synthetic dataset instead of MNIST.
    #[arg(long)]
    pub synthetic: bool,
    /// Rows in the synthetic dataset.
    #[arg(long, default_value_t = 512)]
    pub samples: usize,
    /// Use only the first N training rows.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Layer widths, input first, e.g. 784,256,128,10.
    #[arg(long, value_parser = parse_arch)]
    pub arch: Arch,
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 128)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// raw, norm, or rect:MxK,MxK,... with one keep pair per linear layer.
    #[arg(long, default_value = "raw", value_parser = parse_mask)]
    pub mask: MaskFamily,
    /// Threshold at epoch 0. A huge value keeps every coefficient.
    #[arg(long, default_value_t = 1e9)]
    pub eps_init: f64,
    /// Threshold from `decay_end` on; defaults to `eps_init`.
    #[arg(long)]
    pub eps_final: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub decay_end: usize,
    #[arg(long, value_enum, default_value_t = Decay::Linear)]
    pub decay: Decay,
    /// Constrain biases so that their DCT vanishes outside each mask.
    #[arg(long)]
    pub bias_mask: bool,
    /// Leave out the batchnorm between linear layers.
    #[arg(long)]
    pub no_batchnorm: bool,
    /// Use a leaky ReLU with this slope instead of a ReLU.
    #[arg(long)]
    pub leaky_slope: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Decay {
    Linear,
    Exponential,
}

impl From<Decay> for DecayPolicy {
    fn from(d: Decay) -> Self {
        match d {
            Decay::Linear => DecayPolicy::Linear,
            Decay::Exponential => DecayPolicy::Exponential,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Exact,
    Narrow,
}

impl From<Mode> for CompileMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Exact => CompileMode::Exact,
            Mode::Narrow => CompileMode::Narrow,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Args)]
pub struct CompileArgs {
    /// Spatial checkpoint.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Exact)]
    pub mode: Mode,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Spatial or frequency model file.
    #[arg(long)]
    pub model: PathBuf,
    /// An IDX image file, or `inline:` followed by rows separated by `;`
    /// with comma-separated values.
    #[arg(long)]
    pub input: String,
    /// IDX label file; adds a `label` field and reports accuracy on stderr.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    /// Include class scores in every line.
    #[arg(long)]
    pub scores: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model under test: a frequency model, or a spatial checkpoint for a
    /// dense self-comparison.
    #[arg(long)]
    pub model: PathBuf,
    /// Spatial checkpoint run as the dense baseline.
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// MNIST directory; inputs come from the test split and accuracy is
    /// reported. Without it inputs are seeded uniform noise.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for row partitioning.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Run every chunk on the calling thread.
    #[arg(long)]
    pub sequential: bool,
    #[arg(long)]
    pub chunk_rows: Option<usize>,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the raw timings as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// Weight shapes such as 5x5x1x6,400x120,120x84.
    #[arg(long, value_parser = parse_shape, value_delimiter = ',', required = true)]
    pub shapes: Vec<Vec<usize>>,
}

/// Layer widths, input first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch(pub Vec<usize>);

fn parse_dim(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(0) => Err("dimensions must be >= 1".into()),
        Ok(n) => Ok(n),
        Err(_) => Err(format!("`{s}` is not a positive integer")),
    }
}

/// Comma-separated widths with at least an input and an output.
pub fn parse_arch(s: &str) -> Result<Arch, String> {
    let widths = s.split(',').map(parse_dim).collect::<Result<Vec<_>, _>>()?;
    if widths.len() < 2 {
        return Err("need at least input and output widths".into());
    }
    Ok(Arch(widths))
}

/// `AxBxC` extents.
pub fn parse_shape(s: &str) -> Result<Vec<usize>, String> {
    s.split('x').map(parse_dim).collect()
}

pub fn parse_mask(s: &str) -> Result<MaskFamily, String> {
    match s {
        "raw" => Ok(MaskFamily::RawL1),
        "norm" => Ok(MaskFamily::NormalizedL1),
        _ => {
            let spec = s
                .strip_prefix("rect:")
                .ok_or_else(|| format!("unknown mask `{s}`; expected raw, norm or rect:MxK,..."))?;
            let keeps = spec.split(',').map(parse_shape).collect::<Result<Vec<_>, _>>()?;
            if keeps.iter().any(|k| k.len() != 2) {
                return Err("rectangular keeps are MxK pairs".into());
            }
            Ok(MaskFamily::Rectangular { keeps })
        }
    }
}

/// Rows separated by `;`, values by `,`.
pub fn parse_inline(s: &str) -> Result<Vec<Vec<f64>>, String> {
    let rows: Vec<Vec<f64>> = s
        .split(';')
        .filter(|r| !r.trim().is_empty())
        .map(|r| {
            r.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| format!("`{v}` is not a number")))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    if rows.is_empty() {
        return Err("no inline rows".into());
    }
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err("inline rows differ in length".into());
    }
    Ok(rows)
}

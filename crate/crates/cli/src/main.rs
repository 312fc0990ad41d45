//! `sconv`: compress convolution kernels into truncated 2D series.

mod commands;
mod report;
mod visualize;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sconv_core::{BasisKind, FitMethod};

#[derive(Debug, Parser)]
#[command(name = "sconv", version, about = "Series compression of convolution kernels")]
struct Cli {
    /// Worker threads (defaults to the number of cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit every filter of a kernel tensor with an n x n series.
    Compress(CompressArgs),
    /// Sample a compressed (or quantized) layer back to dense kernels.
    Reconstruct(ReconstructArgs),
    /// Compare layer outputs of original and compressed kernels.
    Evaluate(EvaluateArgs),
    /// Fit at every n in a range and tabulate error against size.
    Sweep(SweepArgs),
    /// Block floating point quantization of a compressed layer.
    Quantize(QuantizeArgs),
    /// Parameter accounting for an architecture under a harmonic configuration.
    Account(AccountArgs),
    /// Dump original and reconstructed filters as CSV and PGM.
    Visualize(VisualizeArgs),
    /// Convert raw little-endian f32 kernels to a tensor file.
    Import(ImportArgs),
    /// Write a tensor of seeded N(0, 1) values.
    Random(RandomArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BasisArg {
    Cos,
    Cheb,
}

impl From<BasisArg> for BasisKind {
    fn from(b: BasisArg) -> Self {
        match b {
            BasisArg::Cos => BasisKind::Cosine,
            BasisArg::Cheb => BasisKind::Chebyshev,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MethodArg {
    Gd,
    Lstsq,
    Dct,
}

impl From<MethodArg> for FitMethod {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Gd => FitMethod::GradientDescent,
            MethodArg::Lstsq => FitMethod::LeastSquares,
            MethodArg::Dct => FitMethod::ClosedFormDct,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum InitArg {
    /// Gaussian for cos, mean-DC for cheb.
    Auto,
    Mean,
    Gaussian,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum WidthArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long, value_enum, default_value = "cos")]
    basis: BasisArg,
    #[arg(long, value_enum, default_value = "lstsq")]
    method: MethodArg,
    #[arg(long, value_enum, default_value = "auto")]
    init: InitArg,
    /// Gradient descent step size.
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 2000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1e-10)]
    grad_tol: f64,
    /// Seed for the Gaussian initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct CompressArgs {
    /// Kernel tensor (FKT1, rank 4).
    input: PathBuf,
    /// Harmonics per axis.
    #[arg(long)]
    n: usize,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    out: PathBuf,
    /// JSON report path (stdout when omitted).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    /// Compressed (FKC1) or quantized (FKQ1) layer.
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "f64")]
    width: WidthArg,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConvArgs {
    #[arg(long, default_value_t = 1)]
    stride: usize,
    /// Zero padding per side; defaults to floor(k / 2).
    #[arg(long)]
    padding: Option<usize>,
    #[arg(long, default_value_t = 1)]
    groups: usize,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Original kernels (FKT1, rank 4).
    #[arg(long)]
    kernels: PathBuf,
    /// Compressed (FKC1) or quantized (FKQ1) layer.
    #[arg(long)]
    compressed: PathBuf,
    /// Input activations (FKT1, rank 3).
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    conv: ConvArgs,
    /// Also report the error with activations quantized to this mantissa width.
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Kernel tensor (FKT1, rank 4).
    input: PathBuf,
    /// Inclusive range `lo:hi` of harmonics per axis.
    #[arg(long, default_value = "1:")]
    n_range: String,
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    /// Compressed layer (FKC1).
    input: PathBuf,
    /// Mantissa bits.
    #[arg(long)]
    bits: u32,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AccountArgs {
    /// Descriptor path or built-in name (resnet18, resnet20, resnet32, convnext_t).
    #[arg(long)]
    arch: String,
    /// Harmonic configuration, e.g. `6,3,3,3,2` or `7x3,7x3,7x9,6x3`.
    #[arg(long)]
    config: Option<String>,
    /// Measure the reduction against compressible layers only.
    #[arg(long)]
    compressible_only: bool,
    /// Also report model size at this mantissa width.
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VisualizeArgs {
    #[arg(long)]
    kernels: PathBuf,
    #[arg(long)]
    compressed: PathBuf,
    /// `all`, or `o=0,i=1` (either part may be left out to take every index).
    #[arg(long, default_value = "all")]
    filter: String,
    /// Pixels per kernel tap in the PGM images.
    #[arg(long, default_value_t = 16)]
    scale: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct ImportArgs {
    /// Raw little-endian f32 values in (c_out, c_in, k, k) order.
    input: PathBuf,
    /// Comma separated extents, e.g. `64,3,7,7`.
    #[arg(long)]
    shape: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "f32")]
    width: WidthArg,
}

#[derive(Debug, Args)]
struct RandomArgs {
    /// Three (activations) or four (kernels) comma separated extents.
    #[arg(long)]
    shape: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "f64")]
    width: WidthArg,
}

/// Failure with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    pub const USAGE: u8 = 2;
    pub const INTERNAL: u8 = 1;

    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: Self::USAGE,
            error: error.into(),
        }
    }

    pub fn internal(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: Self::INTERNAL,
            error: error.into(),
        }
    }
}

impl From<sconv_core::Error> for Failure {
    fn from(e: sconv_core::Error) -> Self {
        Failure::usage(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::usage(e)
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Compress(a) => commands::compress(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Quantize(a) => commands::quantize(a),
        Command::Account(a) => commands::account(a),
        Command::Visualize(a) => visualize::run(a),
        Command::Import(a) => commands::import(a),
        Command::Random(a) => commands::random(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.threads {
        Some(0) => Err(Failure::usage(anyhow::anyhow!("--threads must be at least 1"))),
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(Failure::internal)
            .and_then(|pool| pool.install(|| dispatch(cli.command))),
        None => dispatch(cli.command),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("sconv: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

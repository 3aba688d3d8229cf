//! `csg`: command-line front end for the csg-core library.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use csg_core::train::Loss;
use csg_core::Dtype;

use commands::Failure;

#[derive(Debug, Parser)]
#[command(name = "csg", version, about = "Convolutional slice generators: slicing, code sizing, budgets, training demo")]
struct Cli {
    /// Print machine-readable JSON on stdout instead of a table.
    #[arg(long, global = true)]
    json: bool,

    /// Seed for every random draw the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output file (tensor, CSV or JSON depending on the command).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Size the code vector from DCT compressibility of a slice corpus.
    EstimateCodesize(EstimateArgs),
    /// Parameter budget of an architecture, optionally CSG-augmented.
    CountParams(CountArgs),
    /// Cut a filter file into a slice corpus plus its grid.
    Slice(SliceArgs),
    /// Reassemble filters from a slice corpus and its grid.
    Reconstruct(ReconstructArgs),
    /// Generate filters from generator weights and a code bank.
    GenFilters(GenArgs),
    /// Least-squares codes for a filter file under given generator weights.
    Encode(EncodeArgs),
    /// Draw fresh generator weights.
    InitCsg(InitArgs),
    /// Train the demo network on a seeded separable dataset.
    TrainDemo(TrainArgs),
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Slice corpus (rank-5) or a filter file (rank-4, sliced on the fly).
    corpus: PathBuf,
    #[arg(long, value_name = "A,B,C,D")]
    slice_shape: String,
    #[arg(long, default_value_t = 20.0)]
    target_psnr: f64,
    #[arg(long, default_value_t = 0.1)]
    tolerance: f64,
    #[arg(long, default_value_t = 100.0)]
    cap: f64,
}

#[derive(Debug, Args)]
struct CountArgs {
    /// Built-in name (resnet20, resnet56, resnet18, resnet50, densenet-bc-L-K) or a JSON file.
    #[arg(required_unless_present = "table1")]
    arch: Option<String>,
    /// Slice shape and code length, `A,B,C,D:N`.
    #[arg(long, value_name = "A,B,C,D:N")]
    csg: Option<String>,
    /// The generator is pretrained and frozen; it is not counted.
    #[arg(long, requires = "csg")]
    pretrained_csg: bool,
    /// Also generate non-first 1×1 kernels from `(A,B,1,1)` slices.
    #[arg(long, requires = "csg")]
    compress_1x1: bool,
    /// Print every reference row next to the computed count.
    #[arg(long, conflicts_with_all = ["arch", "csg"])]
    table1: bool,
}

#[derive(Debug, Args)]
struct SliceArgs {
    filters: PathBuf,
    #[arg(long, value_name = "A,B,C,D")]
    slice_shape: String,
    /// Where to write the grid JSON.
    #[arg(long)]
    grid: PathBuf,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    corpus: PathBuf,
    #[arg(long)]
    grid: PathBuf,
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Generator weights, a `(rows, n_c, 1, 1)` tensor.
    #[arg(long)]
    weights: PathBuf,
    /// Code bank, a stack of `(n_c, 1, 1, 1)` tensors.
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    grid: PathBuf,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    filters: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, value_name = "A,B,C,D")]
    slice_shape: String,
    /// Also write the grid JSON here.
    #[arg(long)]
    grid: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InitArgs {
    #[arg(long, value_name = "A,B,C,D")]
    slice_shape: String,
    #[arg(long)]
    nc: usize,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    dtype: DtypeArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    Cnn,
    CnnCsg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Ce,
    L2,
}

impl From<LossArg> for Loss {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Ce => Loss::CrossEntropy,
            LossArg::L2 => Loss::L2,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(value_enum)]
    variant: Variant,
    /// Keep the generator at its initial value.
    #[arg(long)]
    freeze_csg: bool,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Iteration budget T.
    #[arg(long, default_value_t = 5_000)]
    iters: usize,
    /// Target training loss.
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    #[arg(long, value_enum, default_value_t = LossArg::Ce)]
    loss: LossArg,
    /// Dataset size.
    #[arg(long, default_value_t = 32)]
    points: usize,
    /// Minimum distance of every point from the separating hyperplane.
    #[arg(long, default_value_t = 0.5)]
    margin: f64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(e) if e.is_numerical() => 3,
            Failure::Core(csg_core::Error::InvalidConfig(_)) => 1,
            Failure::Core(_) => 2,
        }
    }
}

//! `fpq`: inspect tensors, build and fuse Hadamard rotations, quantize
//! weights to minifloat grids, and run block simulations.
//!
//! Exit codes: 0 on success, 1 on invalid arguments, configuration or
//! numerical failure, 2 on unreadable or malformed input and output files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(
    name = "fpq",
    version,
    about = "Minifloat post-training quantization toolkit"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize the tensors of an FPQT file.
    Inspect(InspectArgs),
    /// Build a randomized Hadamard matrix and report its cost.
    Hadamard(HadamardArgs),
    /// Fold Hadamard rotations into block weights.
    Fuse(FuseArgs),
    /// Quantize every matrix of an FPQT file per output channel.
    Quantize(QuantizeArgs),
    /// Report the spread indicator and chosen format of every matrix.
    SelectFormat(SelectArgs),
    /// Run the reference and quantized block and write a JSON report.
    Simulate(SimulateArgs),
    /// Print the analytic cost model of a block as JSON.
    Cost(CostArgs),
}

#[derive(Args)]
struct InspectArgs {
    path: PathBuf,
    /// Per-channel statistics.
    #[arg(long)]
    stats: bool,
    #[arg(long)]
    json: bool,
    /// Percentile used for the spread indicator.
    #[arg(long, default_value_t = 25.0)]
    alpha: f64,
}

#[derive(Args)]
struct HadamardArgs {
    /// Order of the matrix.
    #[arg(long)]
    n: usize,
    /// Sign randomization seed; omitted means no sign flips.
    #[arg(long)]
    seed: Option<u64>,
    /// Rows of the activation matrix used for the operation count.
    #[arg(long, default_value_t = 1)]
    rows: usize,
    /// Write the dense matrix as tensor `hadamard`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct FuseArgs {
    /// Block weights (w_q, w_k, w_v, w_out, w_fc1, w_fc2 and optional ln1/ln2).
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    heads: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// `exact` or `literal` value-path folding.
    #[arg(long, default_value = "exact")]
    v_mode: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `auto` or an `ExMy` format.
    #[arg(long, default_value = "auto")]
    format: String,
    /// Bit width for automatic selection.
    #[arg(long, default_value_t = 4)]
    bits: u32,
    #[arg(long, default_value_t = 25.0)]
    alpha: f64,
    /// `gptq` or `rtn`.
    #[arg(long, default_value = "rtn")]
    method: String,
    #[arg(long, default_value_t = 64)]
    block: usize,
    #[arg(long, default_value_t = 1e-2)]
    damping: f64,
    /// Calibration inputs, one `samples x in` tensor per weight name.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value_t = 25.0)]
    alpha: f64,
    #[arg(long, default_value_t = 4)]
    bits: u32,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON harness configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Report path; standard output when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct CostArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

/// Flags that replace the matching configuration keys.
#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Weight format policy, `auto` or `ExMy`.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Inspect(a) => commands::inspect(a),
        Command::Hadamard(a) => commands::hadamard(a),
        Command::Fuse(a) => commands::fuse(a),
        Command::Quantize(a) => commands::quantize(a),
        Command::SelectFormat(a) => commands::select_format(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Cost(a) => commands::cost(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

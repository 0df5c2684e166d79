//! `evmae`: simulate event streams, build intensity targets, report trail
//! energies, pre-train the toy model and benchmark the histogram path.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::GlobalOpts;

#[derive(Parser, Debug)]
#[command(name = "evmae", version, about = "Event-stream masked pre-training toolkit")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a scene file into an EVT1 stream.
    Simulate(SimulateArgs),
    /// Integrate an event stream into intensity frames (INTF).
    Intensity(IntensityArgs),
    /// Trail-energy table of INTF frames against a scene's trail region.
    Report(ReportArgs),
    /// Pre-train the toy recurrent model on a simulated scene.
    PretrainToy(PretrainArgs),
    /// Throughput of segmentation + histogram and of the adaptive rule.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Scene description (TOML).
    #[arg(long)]
    scene: PathBuf,
    /// Output EVT1 file.
    #[arg(long, short)]
    out: PathBuf,
    /// Extra hot pixel as `x,y,polarity,rate_hz`; repeatable.
    #[arg(long = "hot-pixel", value_name = "X,Y,P,RATE")]
    hot_pixels: Vec<String>,
    /// Per-pixel background noise rate in Hz (overrides the scene file).
    #[arg(long)]
    background_rate: Option<f64>,
    /// Draw hot-pixel events from a Poisson process instead of a fixed period.
    #[arg(long)]
    stochastic: bool,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Method {
    Decay,
    Adaptive,
}

#[derive(Args, Debug)]
struct IntensityArgs {
    /// EVT1 or text event file (text needs --geometry).
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "adaptive")]
    method: Method,
    /// Output INTF file.
    #[arg(long, short)]
    out: PathBuf,
    /// Number of segments to process; defaults to all remaining events.
    #[arg(long)]
    segments: Option<usize>,
    /// Continue from a saved INTS state; frames are appended to --out.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write the final state here for a later --resume.
    #[arg(long)]
    save_state: Option<PathBuf>,
    /// Also write one 8-bit PGM preview per frame into this directory.
    #[arg(long)]
    pgm_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// INTF frames, one per segment from time zero.
    #[arg(long)]
    frames: PathBuf,
    /// Scene file the frames were produced from.
    #[arg(long)]
    scene: PathBuf,
    /// Also write the table as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 5000)]
    steps: usize,
    #[arg(long, default_value_t = 0.5)]
    lr: f64,
    /// Gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = 0.5)]
    clip: f64,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    /// Disable the recurrent memory.
    #[arg(long)]
    feedforward: bool,
    /// Disable the neighbour-patch context.
    #[arg(long)]
    no_context: bool,
    /// Training curve output (`step train_loss eval_loss` lines).
    #[arg(long)]
    curve: PathBuf,
    /// Parameter blob output.
    #[arg(long)]
    params: PathBuf,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// EVT1 or text event file.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    input: Option<PathBuf>,
    /// Generate this many uniform random events instead of reading a file.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 3)]
    runs: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("evmae: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

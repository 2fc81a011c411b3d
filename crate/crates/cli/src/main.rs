use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod calibrate;
mod evaluate;
mod failure;
mod replay;
mod simulate;

use failure::Failure;

/// Online extrinsic calibration of camera networks from person keypoints.
#[derive(Debug, Parser)]
#[command(name = "keycalib", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic scene and render its detection streams.
    Simulate(SimulateArgs),
    /// Calibrate from detection files or a live replay feed.
    Calibrate(CalibrateArgs),
    /// Compare a calibration against a reference.
    Evaluate(EvaluateArgs),
    /// Stream a detection directory over TCP.
    Replay(ReplayArgs),
}

#[derive(Debug, clap::Args)]
pub struct SimulateArgs {
    /// Scenario JSON; omitted fields take the ring8-2p defaults.
    pub scenario: PathBuf,
    pub out_dir: PathBuf,
    /// Also write `initial.json`, the ground truth perturbed by this
    /// position (m) and rotation (deg) error on every camera but 0.
    #[arg(long, num_args = 2, value_names = ["POS_M", "ROT_DEG"])]
    pub perturb: Option<Vec<f64>>,
    /// Seed for the perturbation; defaults to the scenario seed.
    #[arg(long)]
    pub perturb_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Lockstep,
    FreeRunning,
}

#[derive(Debug, clap::Args)]
pub struct CalibrateArgs {
    /// Directory of `*.jsonl` detection streams.
    #[arg(required_unless_present = "listen", conflicts_with = "listen")]
    pub detections: Option<PathBuf>,
    /// Read detections from a replay server at PORT or HOST:PORT instead.
    #[arg(long, value_name = "ADDR")]
    pub listen: Option<String>,
    /// Pipeline configuration JSON; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Initial extrinsics (with intrinsics) as a rig JSON file.
    #[arg(long)]
    pub init: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Ground-truth rig; fills the error columns of the trace.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Seed for hypothesis selection.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Maximum number of optimization cycles.
    #[arg(long)]
    pub cycles: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct EvaluateArgs {
    pub calibration: PathBuf,
    pub reference: PathBuf,
    /// Detection directory for reprojection statistics.
    #[arg(long)]
    pub detections: Option<PathBuf>,
    /// Pipeline configuration used to associate the detections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Machine-readable report; defaults to `<calibration>.evaluation.json`.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ReplayArgs {
    pub detections: PathBuf,
    /// Playback rate relative to real time; 0 streams as fast as possible.
    #[arg(long, default_value_t = 1.0)]
    pub speed: f64,
    /// Port to accept one receiver on; 0 picks a free port.
    #[arg(long)]
    pub listen_port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Failure::CONFIG)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate::run(&a),
        Command::Calibrate(a) => calibrate::run(&a),
        Command::Evaluate(a) => evaluate::run(&a),
        Command::Replay(a) => replay::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

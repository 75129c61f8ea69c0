//! `tda`: synthetic data, object mining, adversarial training, tracking and
//! evaluation from one binary. Every subcommand writes into a run directory
//! (`--out`, or `$TDA_RUN_DIR`) and records its outputs in `manifest.json`.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "tda", version, about = "Temporal domain adaptation for nighttime tracking")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// TOML config with [training], [generator], [discriminator], [mining], [scene], [data].
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory. Defaults to $TDA_RUN_DIR.
    #[arg(long, global = true, env = "TDA_RUN_DIR")]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Device::Cpu)]
    pub device: Device,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Device {
    Cpu,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum DetectorKind {
    /// Reads planted objects of a synthetic sequence.
    Oracle,
    /// Posts frames to an external detection service.
    Http,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate paired day/night sequences into <run>/data.
    Synth {
        /// Scene spec as top-level TOML keys; defaults to the config's [scene].
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Number of pairs; defaults to [data].pairs.
        #[arg(long)]
        n: Option<usize>,
        /// Frames per sequence; defaults to [data].sequence_length.
        #[arg(long)]
        length: Option<usize>,
    },
    /// Detect, associate and crop objects of one video into <run>/mined/<name>.
    Mine {
        /// Directory of frame images, or a single image.
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, value_enum, default_value_t = DetectorKind::Oracle)]
        detector: DetectorKind,
        /// Detection service URL (http detector).
        #[arg(long)]
        endpoint: Option<String>,
        /// Request timeout in seconds (http detector).
        #[arg(long, default_value_t = 30.0)]
        timeout: f64,
        /// Planted-object file (oracle detector); inferred for synthetic layouts.
        #[arg(long)]
        objects: Option<PathBuf>,
        /// Uniform coordinate noise of the oracle detector, in pixels.
        #[arg(long, default_value_t = 0.0)]
        jitter: f64,
        /// Output name; defaults to the video's file name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Adversarial training; writes history.csv and checkpoints/.
    Train {
        /// Synthetic dataset root with day/ and night/; defaults to <run>/data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Mined output directories whose search patches serve as targets.
        #[arg(long)]
        targets: Vec<PathBuf>,
    },
    /// Run a checkpoint over sequences; writes <run>/results/<name>/.
    Track {
        /// Defaults to the newest checkpoint of the run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset root with data_seq/; defaults to <run>/data/night.
        #[arg(long)]
        sequences: Option<PathBuf>,
        #[arg(long, default_value = "tda")]
        name: String,
    },
    /// One-pass evaluation; writes curves, summary and plots to <run>/metrics.
    Eval {
        /// Ground-truth root with anno/ and att/; defaults to <run>/data/night.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// One tracker directory of <seq>.txt files, or a directory of them.
        #[arg(long)]
        results: Option<PathBuf>,
        /// Restrict to sequences carrying this attribute (ARC, FM, IV, LAI, SV).
        #[arg(long)]
        attribute: Option<String>,
    },
    /// Re-render summary and plots from a curves CSV into <run>/report.
    Report {
        /// Defaults to <run>/metrics/curves.csv.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}

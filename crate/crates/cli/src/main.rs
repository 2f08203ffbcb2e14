//! `ksvqe` command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ksvqe::plot::PlotKind;

#[derive(Parser, Debug)]
#[command(name = "ksvqe", version, about = "Short-form video quality evaluation toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// JSON file with optional `worksim` and `train` sections merged over the
    /// profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output root; every command writes into a subdirectory of it.
    #[arg(long, global = true, env = "KSVQE_OUT", default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    pub profile: ProfileArg,
    /// BT.500 screening with the second condition exactly as printed.
    #[arg(long, global = true)]
    pub strict_bt500: bool,
    /// Fit a 4-parameter logistic before PLCC.
    #[arg(long, global = true)]
    pub logistic_plcc: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic workflow corpus into `<out>/corpus`.
    GenData {
        #[arg(long)]
        n_refs: Option<usize>,
        #[arg(long)]
        clips_per_ref: Option<usize>,
        /// Confine the quality signal to the center window.
        #[arg(long)]
        localized: bool,
    },
    /// Train on a corpus; writes log, checkpoint and evaluation to `<out>/train`.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint (or the oracle predictor) on a corpus split.
    Eval {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Predict each clip's pseudo-MOS exactly; no checkpoint needed.
        #[arg(long)]
        oracle: bool,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Observer gate, BT.500 screening, CI trimming and MOS on a ratings CSV
    /// with columns `observer_id,video_id,score`.
    CleanScores {
        ratings: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        gate_threshold: f64,
    },
    /// Render a PNG figure from a report, manifest or selection trace file.
    Plot {
        #[arg(value_parser = parse_kind)]
        kind: PlotKind,
        report: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Rank accuracy of predictions over a rank-pair CSV.
    RankEval {
        /// Evaluation report JSON or a flat `{clip_id: score}` map.
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Test,
}

fn parse_kind(s: &str) -> Result<PlotKind, String> {
    s.parse().map_err(|e: ksvqe::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use voctl::commands::{
    cmd_align, cmd_eval, cmd_metrics, cmd_train, AlignArgs, CliError, EvalArgs, MetricsArgs,
    TrainArgs,
};

/// Train, evaluate, and analyze a learned keyframe/grid-size controller for
/// visual odometry on the built-in simulator.
#[derive(Parser)]
#[command(name = "voctl", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) a training run described by a config file.
    Train {
        /// Run configuration (TOML). Defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Continue from the trainer state saved in the output directory.
        #[arg(long)]
        resume: bool,
        /// Force single-threaded execution (results are identical).
        #[arg(long)]
        sequential: bool,
    },
    /// Evaluate a checkpoint against the scripted baselines.
    Eval {
        /// Checkpoint file written by `train`.
        checkpoint: PathBuf,
        /// Run configuration for the environment (defaults when omitted).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Held-out episodes per policy.
        #[arg(long, default_value_t = 5)]
        episodes: usize,
        /// Period of the fixed-interval baseline.
        #[arg(long, default_value_t = 5)]
        every_k: usize,
        /// First episode seed; episode i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Where to write evaluation artifacts (default: <output_dir>/eval).
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Sample from the policy instead of taking the argmax.
        #[arg(long)]
        stochastic: bool,
        /// Force single-threaded execution (results are identical).
        #[arg(long)]
        sequential: bool,
    },
    /// Compute trajectory metrics between two trajectory files.
    Metrics {
        /// Estimated trajectory (timestamp tx ty tz qx qy qz qw per line).
        estimated: PathBuf,
        /// Ground-truth trajectory in the same format.
        ground_truth: PathBuf,
        /// Also compute the sliding-window relative error CDF for windows
        /// of this many meters along the ground-truth path.
        #[arg(long)]
        rpe_window: Option<f64>,
        /// Also print ATE as a percentage of the traveled distance.
        #[arg(long)]
        kitti_percent: bool,
        /// Write machine-readable results to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Similarity-align an estimated trajectory onto a ground truth.
    Align {
        /// Estimated trajectory file.
        estimated: PathBuf,
        /// Ground-truth trajectory file.
        ground_truth: PathBuf,
        /// Output path for the aligned trajectory.
        output: PathBuf,
    },
}

fn run() -> Result<(), CliError> {
    // Argument errors are usage errors (exit 1); help/version exit 0.
    let cli = Cli::try_parse().unwrap_or_else(|e| {
        use clap::error::ErrorKind;
        let code = match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
            _ => 1,
        };
        let _ = e.print();
        std::process::exit(code);
    });
    match cli.command {
        Command::Train {
            config,
            seed,
            output_dir,
            resume,
            sequential,
        } => cmd_train(&TrainArgs {
            config,
            seed,
            output_dir,
            resume,
            sequential,
        }),
        Command::Eval {
            checkpoint,
            config,
            episodes,
            every_k,
            seed,
            output_dir,
            stochastic,
            sequential,
        } => cmd_eval(&EvalArgs {
            checkpoint,
            config,
            episodes,
            every_k,
            seed,
            output_dir,
            stochastic,
            sequential,
        })
        .map(|_| ()),
        Command::Metrics {
            estimated,
            ground_truth,
            rpe_window,
            kitti_percent,
            csv,
        } => cmd_metrics(&MetricsArgs {
            estimated,
            ground_truth,
            rpe_window,
            kitti_percent,
            csv,
        }),
        Command::Align {
            estimated,
            ground_truth,
            output,
        } => cmd_align(&AlignArgs {
            estimated,
            ground_truth,
            output,
        }),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

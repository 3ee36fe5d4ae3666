//! Implementations of the four commands. Each returns `CliError` with the
//! exit-code classification: usage/config/parse problems exit 1, runtime
//! failures exit 2.

use crate::config::{ConfigError, RunConfig};
use crate::tum::{read_tum, write_tum, TumError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use voctl_core::env::sim::LogRow;
use voctl_core::env::{EnvConfig, SimEnv, VOMode};
use voctl_core::eval::{
    evaluate, run_episode_with_env, BaselinePolicy, EvalPolicy, EvalSummary,
};
use voctl_core::exec::ExecMode;
use voctl_core::geometry::{apply_transform, Trajectory};
use voctl_core::metrics::{ate, ate_per_distance, keyframe_velocity_histogram, rpe_distance_windows, MetricsError};
use voctl_core::nn::Checkpoint;
use voctl_core::ppo::{fmt9, PpoError, Trainer, METRICS_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad invocation, unreadable/invalid config, or input parse failure.
    #[error("{0}")]
    Usage(String),
    /// Failure while executing a structurally valid request.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TumError> for CliError {
    fn from(e: TumError) -> Self {
        match e {
            TumError::Write { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<PpoError> for CliError {
    fn from(e: PpoError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

fn mode_name(mode: VOMode) -> &'static str {
    match mode {
        VOMode::Initializing => "initializing",
        VOMode::Tracking => "tracking",
        VOMode::Relocalizing => "relocalizing",
        VOMode::Lost => "lost",
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub resume: bool,
    pub sequential: bool,
}

/// Runs (or resumes) a training run, writing the config snapshot, metrics
/// CSV, latest/best checkpoints, and the resumable trainer state.
pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(dir) = &args.output_dir {
        config.output_dir = dir.clone();
    }
    config.validate()?;

    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    let hash = config.hash();

    // Config snapshot with audit header.
    let snapshot = format!(
        "# config_hash = \"{hash}\"\n# seed = {}\n{}",
        config.seed,
        config.snapshot_toml()
    );
    std::fs::write(out.join("config_snapshot.toml"), snapshot).map_err(runtime)?;

    let state_path = out.join("trainer_state.bin");
    let metrics_path = out.join("metrics.csv");
    let mut trainer: Trainer<SimEnv>;
    let mut csv_rows: Vec<String> = Vec::new();

    if args.resume && state_path.exists() {
        trainer = Trainer::load_state(&state_path)?;
        // Keep only rows from iterations the restored state has actually
        // completed; later rows belong to a lost future and are dropped.
        if let Ok(existing) = std::fs::read_to_string(&metrics_path) {
            for line in existing.lines() {
                if line.starts_with('#') || line.starts_with("iteration") {
                    continue;
                }
                if let Some(iter_field) = line.split(',').next() {
                    if let Ok(iter) = iter_field.parse::<u64>() {
                        if iter <= trainer.iteration() {
                            csv_rows.push(line.to_string());
                        }
                    }
                }
            }
        }
        eprintln!(
            "resuming from iteration {} ({} metric rows kept)",
            trainer.iteration(),
            csv_rows.len()
        );
    } else {
        let env_cfg = config.effective_env();
        let envs: Vec<SimEnv> = (0..config.ppo.num_envs)
            .map(|_| SimEnv::new(env_cfg.clone()))
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Usage(format!("invalid environment config: {e}")))?;
        trainer = Trainer::new(
            config.net.clone(),
            config.ppo.clone(),
            envs,
            config.seed,
        )?;
    }
    if args.sequential {
        trainer.mode = ExecMode::Sequential;
    }

    let write_metrics = |rows: &[String]| -> Result<(), CliError> {
        let mut text = format!("# config_hash={hash} seed={}\n{METRICS_HEADER}\n", config.seed);
        for row in rows {
            text.push_str(row);
            text.push('\n');
        }
        std::fs::write(&metrics_path, text).map_err(runtime)
    };
    write_metrics(&csv_rows)?;

    let total = config.ppo.iterations as u64;
    while trainer.iteration() < total {
        let row = trainer.train_iteration()?;
        if row.skipped_update {
            eprintln!(
                "iteration {}: no valid states in rollout; update skipped",
                row.iteration
            );
        }
        csv_rows.push(row.to_csv());
        // Append the new row (full rewrite keeps the file consistent with
        // the audit header even after resume truncation).
        {
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(&metrics_path)
                .map_err(runtime)?;
            writeln!(f, "{}", row.to_csv()).map_err(runtime)?;
        }

        let ckpt = trainer.checkpoint();
        ckpt.save(&out.join("checkpoint_latest.ckpt")).map_err(runtime)?;
        // Best-so-far checkpoint; seeded with the first one so the artifact
        // always exists even before any episode completes.
        let best_path = out.join("checkpoint_best.ckpt");
        if row.new_best || !best_path.exists() {
            ckpt.save(&best_path).map_err(runtime)?;
        }
        if trainer.iteration() % 10 == 0 || trainer.iteration() == total {
            trainer.save_state(&state_path)?;
        }
        println!(
            "iter {:>5}/{}  return {:>10.5}  e_tran {:.6}  kf_rate {:.3}  entropy {:.3}  kl {:.4}",
            row.iteration, total, row.mean_return, row.mean_e_tran, row.keyframe_rate,
            row.entropy, row.approx_kl,
        );
    }
    trainer.save_state(&state_path)?;

    // Manifest ties the binary artifacts to the config hash and seed.
    let manifest = serde_json::json!({
        "config_hash": hash,
        "seed": config.seed,
        "iterations": trainer.iteration(),
        "best_return": trainer.best_return,
        "artifacts": {
            "config_snapshot.toml": file_sha256(&out.join("config_snapshot.toml"))?,
            "metrics.csv": file_sha256(&metrics_path)?,
            "checkpoint_latest.ckpt": file_sha256(&out.join("checkpoint_latest.ckpt"))?,
            "trainer_state.bin": file_sha256(&state_path)?,
        },
    });
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(runtime)?,
    )
    .map_err(runtime)?;

    println!(
        "training complete: {} iterations, best mean return {}",
        trainer.iteration(),
        fmt9(trainer.best_return)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub config: Option<PathBuf>,
    pub episodes: usize,
    pub every_k: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub stochastic: bool,
    pub sequential: bool,
}

/// Full evaluation report: the trained policy and every scripted baseline
/// on identical episode seeds.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub episode_seeds: Vec<u64>,
    pub policies: Vec<EvalSummary>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport, CliError> {
    let config = match &args.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if args.episodes == 0 {
        return Err(CliError::Usage("--episodes must be positive".into()));
    }
    if args.every_k == 0 {
        return Err(CliError::Usage("--every-k must be positive".into()));
    }
    let checkpoint = Checkpoint::load(&args.checkpoint)
        .map_err(|e| runtime(format!("checkpoint {}: {e}", args.checkpoint.display())))?;

    let env_cfg = config.effective_env();
    let hash = config.hash();
    let mode = if args.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::default()
    };
    let seeds: Vec<u64> = (0..args.episodes as u64).map(|i| args.seed + i).collect();

    let out_dir = args
        .output_dir
        .clone()
        .unwrap_or_else(|| config.output_dir.join("eval"));
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", out_dir.display())))?;

    let trained = EvalPolicy::Trained {
        net: &checkpoint.config,
        actor: &checkpoint.actor,
        obs_norm: &checkpoint.obs_norm,
        stochastic: args.stochastic,
    };
    let mut policies: Vec<(String, EvalPolicy)> = vec![(trained.name(), trained)];
    for b in [
        BaselinePolicy::EveryFrame,
        BaselinePolicy::EveryK(args.every_k),
        BaselinePolicy::Never,
        BaselinePolicy::Random,
    ] {
        policies.push((b.name(), EvalPolicy::Baseline(b)));
    }

    let audit = vec![format!("config_hash={hash} seed={}", config.seed)];
    let mut summaries = Vec::new();
    for (name, policy) in &policies {
        let summary = evaluate(policy, &env_cfg, &seeds, mode).map_err(runtime)?;
        export_policy_artifacts(&out_dir, name, policy, &env_cfg, &seeds, &audit)?;
        summaries.push(summary);
    }

    // Ground truth is policy-independent per seed; export it once.
    for &seed in &seeds {
        let (_, env) = run_episode_with_env(
            &EvalPolicy::Baseline(BaselinePolicy::EveryFrame),
            &env_cfg,
            seed,
        )
        .map_err(runtime)?;
        let gt = Trajectory::from_poses(
            env.episode_log().iter().map(|r| r.ground_truth.clone()).collect(),
        )
        .map_err(runtime)?;
        write_tum(&out_dir.join(format!("ep{seed}_gt.tum")), &gt, &audit)?;
    }

    let report = EvalReport {
        config_hash: hash,
        seed: config.seed,
        episode_seeds: seeds,
        policies: summaries,
    };
    std::fs::write(
        out_dir.join("eval_report.json"),
        serde_json::to_string_pretty(&report).map_err(runtime)?,
    )
    .map_err(runtime)?;

    println!(
        "{:<20} {:>12} {:>11} {:>11} {:>12} {:>12}",
        "policy", "mean_return", "completion", "keyframes", "mean_e_tran", "mean_ate"
    );
    for s in &report.policies {
        println!(
            "{:<20} {:>12} {:>11} {:>11} {:>12} {:>12}",
            s.policy,
            fmt9(s.mean_return),
            fmt9(s.completion_rate),
            fmt9(s.mean_keyframes),
            s.mean_e_tran.map_or("n/a".into(), fmt9),
            s.mean_ate.map_or("n/a".into(), fmt9),
        );
    }
    Ok(report)
}

/// Per-policy artifacts: estimated TUM trajectory and per-step CSV per
/// episode, plus the aggregated keyframe-velocity histogram.
fn export_policy_artifacts(
    out_dir: &Path,
    name: &str,
    policy: &EvalPolicy,
    env_cfg: &EnvConfig,
    seeds: &[u64],
    audit: &[String],
) -> Result<(), CliError> {
    let mut trans_bins: BTreeMap<i64, usize> = BTreeMap::new();
    let mut ang_bins: BTreeMap<i64, usize> = BTreeMap::new();
    const BIN_WIDTH: f64 = 0.25;

    for &seed in seeds {
        let (_, env) = run_episode_with_env(policy, env_cfg, seed).map_err(runtime)?;
        let log = env.episode_log();

        let est = Trajectory::from_poses(
            log.iter().filter_map(|r| r.estimated.clone()).collect(),
        )
        .map_err(runtime)?;
        write_tum(
            &out_dir.join(format!("ep{seed}_{name}_est.tum")),
            &est,
            audit,
        )?;

        write_steps_csv(&out_dir.join(format!("ep{seed}_{name}_steps.csv")), log, audit)?;

        let gt = Trajectory::from_poses(log.iter().map(|r| r.ground_truth.clone()).collect())
            .map_err(runtime)?;
        let flags: Vec<bool> = log.iter().map(|r| r.keyframe).collect();
        let hist = keyframe_velocity_histogram(&gt, &flags, BIN_WIDTH, BIN_WIDTH)
            .map_err(runtime)?;
        for (low, count) in hist.translational_bins {
            *trans_bins.entry((low / BIN_WIDTH).round() as i64).or_insert(0) += count;
        }
        for (low, count) in hist.angular_bins {
            *ang_bins.entry((low / BIN_WIDTH).round() as i64).or_insert(0) += count;
        }
    }

    let mut text = String::new();
    for a in audit {
        writeln!(text, "# {a}").unwrap();
    }
    writeln!(text, "kind,bin_low,bin_high,count").unwrap();
    for (kind, bins) in [("translational", &trans_bins), ("angular", &ang_bins)] {
        for (&idx, &count) in bins {
            let low = idx as f64 * BIN_WIDTH;
            writeln!(
                text,
                "{kind},{},{},{count}",
                fmt9(low),
                fmt9(low + BIN_WIDTH)
            )
            .unwrap();
        }
    }
    std::fs::write(out_dir.join(format!("histogram_{name}.csv")), text).map_err(runtime)?;
    Ok(())
}

fn write_steps_csv(path: &Path, log: &[LogRow], audit: &[String]) -> Result<(), CliError> {
    let mut text = String::new();
    for a in audit {
        writeln!(text, "# {a}").unwrap();
    }
    writeln!(text, "step,mode,valid,keyframe,grid_size,n_tracked,e_tran,reward").unwrap();
    for r in log {
        writeln!(
            text,
            "{},{},{},{},{},{},{},{}",
            r.step,
            mode_name(r.mode),
            r.valid,
            r.keyframe,
            r.grid_size,
            r.n_tracked,
            r.e_tran.map_or(String::new(), fmt9),
            fmt9(r.reward),
        )
        .unwrap();
    }
    std::fs::write(path, text).map_err(runtime)
}

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

pub struct MetricsArgs {
    pub estimated: PathBuf,
    pub ground_truth: PathBuf,
    pub rpe_window: Option<f64>,
    pub kitti_percent: bool,
    pub csv: Option<PathBuf>,
}

pub fn cmd_metrics(args: &MetricsArgs) -> Result<(), CliError> {
    let est = read_tum(&args.estimated)?;
    let gt = read_tum(&args.ground_truth)?;

    let classify = |e: MetricsError| -> CliError {
        match e {
            MetricsError::NoAssociation { found } => CliError::Runtime(format!(
                "trajectory association failed: only {found} timestamp pairs matched \
                 (need at least 3 within tolerance)"
            )),
            other => CliError::Runtime(other.to_string()),
        }
    };

    let ate_result = ate(&est, &gt).map_err(classify)?;
    println!("ATE [m]: {}", fmt9(ate_result.rmse));

    let mut csv = String::new();
    writeln!(
        csv,
        "# inputs: est={} gt={}",
        file_sha256(&args.estimated)?,
        file_sha256(&args.ground_truth)?
    )
    .unwrap();
    writeln!(csv, "metric,index,value").unwrap();
    writeln!(csv, "ate_rmse_m,,{}", fmt9(ate_result.rmse)).unwrap();

    if args.kitti_percent {
        let percent = ate_per_distance(&est, &gt).map_err(classify)?;
        println!("ATE per distance [%]: {}", fmt9(percent));
        writeln!(csv, "ate_per_distance_percent,,{}", fmt9(percent)).unwrap();
    }

    if let Some(window) = args.rpe_window {
        if !(window > 0.0) {
            return Err(CliError::Usage("--rpe-window must be positive".into()));
        }
        let rpe = rpe_distance_windows(&est, &gt, window).map_err(classify)?;
        println!(
            "RPE CDF ({} windows of {} m):",
            rpe.errors.len(),
            window
        );
        for (i, (error, fraction)) in rpe.cdf_points.iter().enumerate() {
            println!("  {} {}", fmt9(*error), fmt9(*fraction));
            writeln!(csv, "rpe_error_m,{i},{}", fmt9(*error)).unwrap();
            writeln!(csv, "rpe_cdf_fraction,{i},{}", fmt9(*fraction)).unwrap();
        }
    }

    if let Some(path) = &args.csv {
        std::fs::write(path, csv).map_err(runtime)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// align
// ---------------------------------------------------------------------------

pub struct AlignArgs {
    pub estimated: PathBuf,
    pub ground_truth: PathBuf,
    pub output: PathBuf,
}

pub fn cmd_align(args: &AlignArgs) -> Result<(), CliError> {
    let est = read_tum(&args.estimated)?;
    let gt = read_tum(&args.ground_truth)?;

    // Alignment failures are input problems (too few/degenerate matches).
    let ate_result = ate(&est, &gt).map_err(|e| CliError::Usage(e.to_string()))?;
    let transform = ate_result.alignment;
    let aligned = apply_transform(&transform, &est);

    let q = transform.rotation.quaternion();
    let comments = vec![
        format!(
            "inputs: est={} gt={}",
            file_sha256(&args.estimated)?,
            file_sha256(&args.ground_truth)?
        ),
        format!(
            "alignment: s={} q=[{} {} {} {}] t=[{} {} {}]",
            transform.scale,
            q.i,
            q.j,
            q.k,
            q.w,
            transform.translation.x,
            transform.translation.y,
            transform.translation.z
        ),
    ];
    write_tum(&args.output, &aligned, &comments)?;

    println!("s: {}", fmt9(transform.scale));
    println!(
        "R (qx qy qz qw): {} {} {} {}",
        fmt9(q.i),
        fmt9(q.j),
        fmt9(q.k),
        fmt9(q.w)
    );
    println!(
        "t: {} {} {}",
        fmt9(transform.translation.x),
        fmt9(transform.translation.y),
        fmt9(transform.translation.z)
    );
    Ok(())
}

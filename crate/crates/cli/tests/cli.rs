//! End-to-end tests of the `voctl` binary: exit codes, artifact shapes, and
//! agreement between printed values and the library-level implementations.

use std::path::Path;
use std::process::{Command, Output};

use nalgebra::{UnitQuaternion, Vector3};
use voctl::tum::{read_tum, write_tum};
use voctl_core::geometry::{apply_transform, Pose, SimilarityTransform, Trajectory};
use voctl_core::metrics::ate;
use voctl_core::nn::Checkpoint;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_voctl")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn voctl")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exit code")
}

/// Parses the trailing number of a line like `ATE [m]: 1.23400000e-2`.
fn trailing_number(line: &str) -> f64 {
    line.rsplit(' ')
        .next()
        .unwrap()
        .parse()
        .unwrap_or_else(|_| panic!("no trailing number in {line:?}"))
}

/// A smooth helix: non-planar, so similarity alignment is well-conditioned.
fn helix(n: usize) -> Trajectory {
    let poses = (0..n)
        .map(|i| {
            let angle = 0.35 * i as f64;
            Pose::new(
                i as f64 * 0.1,
                Vector3::new(2.0 * angle.cos(), 2.0 * angle.sin(), 0.15 * i as f64),
                UnitQuaternion::from_euler_angles(0.02 * i as f64, 0.3 * angle.sin(), angle),
            )
        })
        .collect();
    Trajectory::from_poses(poses).unwrap()
}

const NO_COMMENTS: &[String] = &[];

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

#[test]
fn metrics_self_comparison_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.tum");
    write_tum(&path, &helix(60), NO_COMMENTS).unwrap();

    let out = run(&["metrics", path.to_str().unwrap(), path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let line = text
        .lines()
        .find(|l| l.starts_with("ATE [m]:"))
        .expect("ATE line");
    assert!(trailing_number(line).abs() < 1e-9, "self-ATE not zero: {line}");
}

#[test]
fn metrics_agrees_with_library_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let gt = helix(80);
    let transform = SimilarityTransform {
        scale: 1.7,
        rotation: UnitQuaternion::from_euler_angles(0.3, -0.2, 0.9),
        translation: Vector3::new(4.0, -2.0, 1.5),
    };
    // A similarity transform plus deterministic wobble makes the ATE
    // non-trivial while keeping the test reproducible.
    let noisy: Vec<Pose> = apply_transform(&transform, &gt)
        .poses()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let w = 0.01 * (i as f64 * 0.7).sin();
            Pose::new(
                p.timestamp,
                p.translation + Vector3::new(w, -w, 0.5 * w),
                p.rotation,
            )
        })
        .collect();
    let est = Trajectory::from_poses(noisy).unwrap();

    let est_path = dir.path().join("est.tum");
    let gt_path = dir.path().join("gt.tum");
    let csv_path = dir.path().join("metrics.csv");
    write_tum(&est_path, &est, NO_COMMENTS).unwrap();
    write_tum(&gt_path, &gt, NO_COMMENTS).unwrap();

    let out = run(&[
        "metrics",
        est_path.to_str().unwrap(),
        gt_path.to_str().unwrap(),
        "--kitti-percent",
        "--rpe-window",
        "2.0",
        "--csv",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    // The printed ATE must agree with the library run on the files the
    // binary actually read (i.e. after the TUM round trip).
    let expected = ate(&read_tum(&est_path).unwrap(), &read_tum(&gt_path).unwrap())
        .unwrap()
        .rmse;
    let text = stdout(&out);
    let printed = trailing_number(text.lines().find(|l| l.starts_with("ATE [m]:")).unwrap());
    assert!(
        (printed - expected).abs() <= 1e-7 * expected.max(1.0),
        "printed {printed} vs library {expected}"
    );
    assert!(text.lines().any(|l| l.starts_with("ATE per distance [%]:")));
    assert!(text.lines().any(|l| l.starts_with("RPE CDF")));

    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("# inputs: est="), "audit header missing");
    assert!(csv.contains("metric,index,value"));
    assert!(csv.contains("ate_rmse_m,,"));
    assert!(csv.contains("ate_per_distance_percent,,"));
    assert!(csv.contains("rpe_error_m,0,"));
    assert!(csv.contains("rpe_cdf_fraction,0,"));
}

#[test]
fn metrics_cites_malformed_line_and_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.tum");
    // Line 7 has seven fields instead of eight.
    let mut text = String::from("# comment\n");
    for i in 0..5 {
        text.push_str(&format!("{}.0 0 0 {} 0 0 0 1\n", i, i));
    }
    text.push_str("6.0 1 2 3 0 0 0\n");
    text.push_str("7.0 0 0 7 0 0 0 1\n");
    std::fs::write(&path, text).unwrap();

    let out = run(&["metrics", path.to_str().unwrap(), path.to_str().unwrap()]);
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));
    assert!(
        stderr(&out).contains(":7:"),
        "error does not cite line 7: {}",
        stderr(&out)
    );
}

#[test]
fn metrics_association_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let gt = helix(30);
    // Shift timestamps far past the association tolerance.
    let shifted: Vec<Pose> = gt
        .poses()
        .iter()
        .map(|p| Pose::new(p.timestamp + 1000.0, p.translation, p.rotation))
        .collect();
    let est = Trajectory::from_poses(shifted).unwrap();

    let est_path = dir.path().join("est.tum");
    let gt_path = dir.path().join("gt.tum");
    write_tum(&est_path, &est, NO_COMMENTS).unwrap();
    write_tum(&gt_path, &gt, NO_COMMENTS).unwrap();

    let out = run(&["metrics", est_path.to_str().unwrap(), gt_path.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("association"), "stderr: {}", stderr(&out));
}

#[test]
fn unknown_flag_exits_1() {
    let out = run(&["metrics", "a", "b", "--definitely-not-a-flag"]);
    assert_eq!(code(&out), 1);
}

// ---------------------------------------------------------------------------
// align
// ---------------------------------------------------------------------------

#[test]
fn align_same_file_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("traj.tum");
    let out_path = dir.path().join("aligned.tum");
    let traj = helix(40);
    write_tum(&path, &traj, NO_COMMENTS).unwrap();

    let out = run(&[
        "align",
        path.to_str().unwrap(),
        path.to_str().unwrap(),
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let s = trailing_number(text.lines().find(|l| l.starts_with("s:")).unwrap());
    assert!((s - 1.0).abs() < 1e-9, "scale {s}");

    let aligned = read_tum(&out_path).unwrap();
    assert_eq!(aligned.len(), traj.len());
    for (a, b) in aligned.poses().iter().zip(traj.poses()) {
        assert!((a.translation - b.translation).norm() < 1e-9);
    }
}

#[test]
fn align_recovers_synthetic_similarity() {
    let dir = tempfile::tempdir().unwrap();
    let gt = helix(50);
    let transform = SimilarityTransform {
        scale: 2.5,
        rotation: UnitQuaternion::from_euler_angles(-0.4, 0.25, 1.3),
        translation: Vector3::new(-3.0, 6.0, 2.0),
    };
    let est = apply_transform(&transform, &gt);

    let est_path = dir.path().join("est.tum");
    let gt_path = dir.path().join("gt.tum");
    let out_path = dir.path().join("aligned.tum");
    write_tum(&est_path, &est, NO_COMMENTS).unwrap();
    write_tum(&gt_path, &gt, NO_COMMENTS).unwrap();

    let out = run(&[
        "align",
        est_path.to_str().unwrap(),
        gt_path.to_str().unwrap(),
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    // The recovered transform must invert the applied one.
    let text = stdout(&out);
    let s = trailing_number(text.lines().find(|l| l.starts_with("s:")).unwrap());
    assert!((s - 1.0 / 2.5).abs() < 1e-9, "scale {s}");

    // Aligned output lands on the ground truth.
    let aligned = read_tum(&out_path).unwrap();
    for (a, g) in aligned.poses().iter().zip(gt.poses()) {
        assert!(
            (a.translation - g.translation).norm() < 1e-8,
            "aligned {:?} vs gt {:?}",
            a.translation,
            g.translation
        );
    }

    // Audit comments are embedded in the output file.
    let raw = std::fs::read_to_string(&out_path).unwrap();
    assert!(raw.contains("# inputs: est="));
    assert!(raw.contains("# alignment: s="));
}

#[test]
fn align_collinear_input_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    // All translations on a line: the similarity problem is degenerate.
    let poses = (0..12)
        .map(|i| {
            Pose::new(
                i as f64 * 0.1,
                Vector3::new(i as f64, 0.0, 0.0),
                UnitQuaternion::identity(),
            )
        })
        .collect();
    let traj = Trajectory::from_poses(poses).unwrap();
    let path = dir.path().join("line.tum");
    let out_path = dir.path().join("aligned.tum");
    write_tum(&path, &traj, NO_COMMENTS).unwrap();

    let out = run(&[
        "align",
        path.to_str().unwrap(),
        path.to_str().unwrap(),
        out_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));
}

// ---------------------------------------------------------------------------
// train / eval
// ---------------------------------------------------------------------------

/// Deliberately tiny everything: the flows under test are artifact layout,
/// exit codes, determinism, and resume — not learning.
const TINY_CONFIG: &str = r#"
seed = 11

[env]
episode_length = 40

[net]
token_count = 2
token_dim = 8
num_heads = 2
mlp_hidden = 16

[ppo]
num_envs = 2
rollout_len = 8
iterations = 2
epochs = 2
minibatch_size = 16
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

/// Metrics CSV with the wallclock column (timing noise) removed.
fn metrics_without_wallclock(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    text.lines()
        .map(|line| {
            if line.starts_with('#') || line.starts_with("iteration") {
                line.to_string()
            } else {
                let mut fields: Vec<&str> = line.split(',').collect();
                fields.pop();
                fields.join(",")
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn train_missing_config_exits_1_with_filename() {
    let out = run(&["train", "--config", "/nonexistent/cfg_xyz.toml"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("cfg_xyz.toml"), "stderr: {}", stderr(&out));
}

#[test]
fn train_unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "bogus_knob = 3\n");
    let out = run(&["train", "--config", &cfg]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("bogus_knob"), "stderr: {}", stderr(&out));
}

#[test]
fn train_rejects_env_reward_section() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.toml",
        "[env.reward]\nlambda1 = 0.5\n",
    );
    let out = run(&["train", "--config", &cfg]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("env.reward"), "stderr: {}", stderr(&out));
}

#[test]
fn train_smoke_writes_declared_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.toml", TINY_CONFIG);
    let out_dir = dir.path().join("run");

    let out = run(&["train", "--config", &cfg, "--output-dir", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let snapshot = std::fs::read_to_string(out_dir.join("config_snapshot.toml")).unwrap();
    assert!(snapshot.starts_with("# config_hash = \""));
    assert!(snapshot.contains("# seed = 11"));

    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash="));
    assert!(lines.next().unwrap().starts_with("iteration,"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2, "expected one row per iteration");
    assert!(rows[0].starts_with("1,"));
    assert!(rows[1].starts_with("2,"));

    let ckpt = Checkpoint::load(&out_dir.join("checkpoint_latest.ckpt")).unwrap();
    assert_eq!(ckpt.iteration, 2);
    assert!(out_dir.join("checkpoint_best.ckpt").exists());
    assert!(out_dir.join("trainer_state.bin").exists());

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["iterations"], 2);
    let hash = manifest["config_hash"].as_str().unwrap();
    assert!(snapshot.contains(hash), "manifest hash matches snapshot header");
    assert!(manifest["artifacts"]["checkpoint_latest.ckpt"].is_string());
}

#[test]
fn train_is_deterministic_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.toml", TINY_CONFIG);

    for (name, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let out_dir = dir.path().join(name);
        let out = run(&[
            "train",
            "--config",
            &cfg,
            "--seed",
            seed,
            "--output-dir",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    }

    let a = metrics_without_wallclock(&dir.path().join("a"));
    let b = metrics_without_wallclock(&dir.path().join("b"));
    let c = metrics_without_wallclock(&dir.path().join("c"));
    assert_eq!(a, b, "same seed must reproduce metrics exactly");
    assert_ne!(a, c, "different seed must change the run");

    let ckpt_a = std::fs::read(dir.path().join("a/checkpoint_latest.ckpt")).unwrap();
    let ckpt_b = std::fs::read(dir.path().join("b/checkpoint_latest.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b, "checkpoints must be bitwise identical");
}

#[test]
fn train_resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg4 = write_config(
        dir.path(),
        "cfg4.toml",
        &TINY_CONFIG.replace("iterations = 2", "iterations = 4"),
    );
    let cfg2 = write_config(dir.path(), "cfg2.toml", TINY_CONFIG);

    let straight = dir.path().join("straight");
    let out = run(&["train", "--config", &cfg4, "--output-dir", straight.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let resumed = dir.path().join("resumed");
    let out = run(&["train", "--config", &cfg2, "--output-dir", resumed.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let out = run(&[
        "train",
        "--config",
        &cfg4,
        "--output-dir",
        resumed.to_str().unwrap(),
        "--resume",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    assert_eq!(
        metrics_without_wallclock(&straight),
        metrics_without_wallclock(&resumed),
        "resumed run must reproduce the uninterrupted metrics"
    );
    let ckpt_s = std::fs::read(straight.join("checkpoint_latest.ckpt")).unwrap();
    let ckpt_r = std::fs::read(resumed.join("checkpoint_latest.ckpt")).unwrap();
    assert_eq!(ckpt_s, ckpt_r, "final checkpoints must match bitwise");
}

#[test]
fn eval_report_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.toml", TINY_CONFIG);
    let train_dir = dir.path().join("run");
    let out = run(&["train", "--config", &cfg, "--output-dir", train_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let eval_dir = dir.path().join("eval");
    let ckpt = train_dir.join("checkpoint_latest.ckpt");
    let out = run(&[
        "eval",
        ckpt.to_str().unwrap(),
        "--config",
        &cfg,
        "--episodes",
        "2",
        "--seed",
        "100",
        "--output-dir",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("eval_report.json")).unwrap())
            .unwrap();
    assert_eq!(report["episode_seeds"], serde_json::json!([100, 101]));
    let policies = report["policies"].as_array().unwrap();
    let names: Vec<&str> = policies
        .iter()
        .map(|p| p["policy"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["trained", "every_frame", "every_5", "never", "random"]);

    // Keyframe ordering across baselines is structural.
    let kf = |name: &str| -> f64 {
        policies
            .iter()
            .find(|p| p["policy"] == name)
            .unwrap()["mean_keyframes"]
            .as_f64()
            .unwrap()
    };
    assert!(kf("every_frame") > kf("every_5"));
    assert!(kf("every_5") > kf("never"));
    assert!((kf("never") - 1.0).abs() < 1e-12, "never inserts only the bootstrap keyframe");

    for seed in [100, 101] {
        assert!(eval_dir.join(format!("ep{seed}_gt.tum")).exists());
        for name in &names {
            assert!(eval_dir.join(format!("ep{seed}_{name}_est.tum")).exists());
            let steps =
                std::fs::read_to_string(eval_dir.join(format!("ep{seed}_{name}_steps.csv")))
                    .unwrap();
            assert!(steps.contains("step,mode,valid,keyframe,grid_size,n_tracked,e_tran,reward"));
        }
    }
    for name in &names {
        let hist =
            std::fs::read_to_string(eval_dir.join(format!("histogram_{name}.csv"))).unwrap();
        assert!(hist.contains("kind,bin_low,bin_high,count"));
    }

    // The ground truth for a seed is policy-independent: the every_frame
    // estimate tracks it frame-for-frame, so both files must associate.
    let gt = read_tum(&eval_dir.join("ep100_gt.tum")).unwrap();
    let ef = read_tum(&eval_dir.join("ep100_every_frame_est.tum")).unwrap();
    assert!(!gt.poses().is_empty());
    assert!(!ef.poses().is_empty());
    assert!(ef.len() <= gt.len());
}

#[test]
fn eval_corrupt_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("not_a_checkpoint.ckpt");
    std::fs::write(&bogus, b"garbage").unwrap();
    let out = run(&["eval", bogus.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));

    let missing = dir.path().join("missing.ckpt");
    let out = run(&["eval", missing.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn eval_zero_episodes_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("whatever.ckpt");
    std::fs::write(&bogus, b"garbage").unwrap();
    let out = run(&["eval", bogus.to_str().unwrap(), "--episodes", "0"]);
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));
}

//! Scratch harness: trains the desk-scale configuration and compares the
//! greedy policy against the scripted baselines on held-out seeds.
//!
//! Usage: calibrate [iterations] [lr] [entropy_coef] [minibatch] [seed]

use voctl_core::env::{EnvConfig, SimEnv, VOMode, GRID_SIZES};
use voctl_core::eval::{
    evaluate, run_episode_with_env, standard_baselines, EvalPolicy,
};
use voctl_core::exec::ExecMode;
use voctl_core::nn::NetConfig;
use voctl_core::ppo::{PpoConfig, Trainer};

/// Greedy evaluation with reloc/grid diagnostics the summary doesn't carry.
fn detailed_eval(policy: &EvalPolicy, env_cfg: &EnvConfig, seeds: &[u64], label: &str) {
    let mut sum_return = 0.0;
    let mut completed = 0usize;
    let mut sum_cover = 0.0;
    let mut sum_kf = 0.0;
    let mut lost = 0usize;
    let mut reloc_frames = 0usize;
    let mut e_sum = 0.0;
    let mut e_n = 0usize;
    let mut grid_counts = [0usize; GRID_SIZES.len()];
    for &seed in seeds {
        let (out, env) = run_episode_with_env(policy, env_cfg, seed).unwrap();
        sum_return += out.total_return;
        completed += out.completed as usize;
        sum_cover += out.coverage;
        sum_kf += out.keyframes as f64;
        lost += (out.final_mode == VOMode::Lost) as usize;
        for r in env.episode_log() {
            if r.mode == VOMode::Relocalizing {
                reloc_frames += 1;
            }
            if let Some(e) = r.e_tran {
                e_sum += e;
                e_n += 1;
            }
            if let Some(g) = GRID_SIZES.iter().position(|&s| s == r.grid_size) {
                grid_counts[g] += 1;
            }
        }
    }
    let n = seeds.len() as f64;
    let total_frames: usize = grid_counts.iter().sum();
    let grid_pct: Vec<String> = grid_counts
        .iter()
        .map(|&c| format!("{:.0}", 100.0 * c as f64 / total_frames.max(1) as f64))
        .collect();
    println!(
        ">>> {label}: return {:.4}  completed {:.2}  cover {:.3}  kf {:.1}  e_tran {:.5}  reloc/ep {:.1}  lost {}  grid% [{}]",
        sum_return / n,
        completed as f64 / n,
        sum_cover / n,
        sum_kf / n,
        e_sum / e_n.max(1) as f64,
        reloc_frames as f64 / n,
        lost,
        grid_pct.join(" "),
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iterations: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(120);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.01);
    let entropy: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(0.005);
    let minibatch: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(256);
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(7);

    let env_cfg = EnvConfig::default();
    let net = NetConfig::default();
    let ppo = PpoConfig {
        num_envs: 8,
        rollout_len: 250,
        iterations,
        learning_rate: lr,
        entropy_coef: entropy,
        minibatch_size: minibatch,
        ..PpoConfig::default()
    };

    let eval_seeds: Vec<u64> = (1000..1020).collect();
    let mode = ExecMode::default();

    // Baselines first.
    println!("=== baselines (20 held-out seeds) ===");
    for b in standard_baselines() {
        let s = evaluate(&EvalPolicy::Baseline(b), &env_cfg, &eval_seeds, mode).unwrap();
        println!(
            "{:<12} return {:>9.4}  completion {:>5.2}  keyframes {:>7.1}  e_tran {:?}  ate {:?}",
            s.policy, s.mean_return, s.completion_rate, s.mean_keyframes,
            s.mean_e_tran.map(|x| (x * 1e4).round() / 1e4),
            s.mean_ate.map(|x| (x * 1e4).round() / 1e4),
        );
    }

    let envs: Vec<SimEnv> = (0..ppo.num_envs)
        .map(|_| SimEnv::new(env_cfg.clone()).unwrap())
        .collect();
    let mut trainer = Trainer::new(net, ppo.clone(), envs, seed).unwrap();

    let t0 = std::time::Instant::now();
    for i in 0..ppo.iterations {
        let row = trainer.train_iteration().unwrap();
        if (i + 1) % 10 == 0 || i == 0 {
            println!(
                "iter {:>4}  return {:>9.4}  e_tran {:.5}  kf_rate {:.3}  policy {:+.4}  value {:.5}  ent {:.3}  clip {:.3}  kl {:.4}  {:.1}s",
                row.iteration, row.mean_return, row.mean_e_tran, row.keyframe_rate,
                row.policy_loss, row.value_loss, row.entropy, row.clip_fraction,
                row.approx_kl, t0.elapsed().as_secs_f64(),
            );
        }
        if (i + 1) % 10 == 0 {
            let p = EvalPolicy::Trained {
                net: &trainer.net,
                actor: &trainer.actor,
                obs_norm: &trainer.obs_norm,
                stochastic: false,
            };
            detailed_eval(&p, &env_cfg, &eval_seeds, &format!("greedy @ {}", i + 1));
        }
    }

    println!("=== final greedy eval ===");
    let p = EvalPolicy::Trained {
        net: &trainer.net,
        actor: &trainer.actor,
        obs_norm: &trainer.obs_norm,
        stochastic: false,
    };
    detailed_eval(&p, &env_cfg, &eval_seeds, "final");
    println!("total wallclock: {:.1}s", t0.elapsed().as_secs_f64());
}

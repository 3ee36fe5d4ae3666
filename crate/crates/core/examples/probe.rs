//! Maps keyframe spacing and grid size to survival and window error using
//! fixed every-k policies, bypassing learning entirely. Used to pick
//! training hyperparameters with known headroom.

use voctl_core::env::{Action, EnvConfig, Environment, SimEnv, VOMode};

fn main() {
    let seeds: Vec<u64> = (1000..1020).collect();
    let config = EnvConfig::default();

    println!(
        "{:>4} {:>5} {:>9} {:>6} {:>6} {:>9} {:>9} {:>7} {:>7} {:>6}",
        "k", "grid", "return", "span", "cover", "kf", "e_tran", "relocs", "lost", "steps"
    );
    for grid_index in [0usize, 2, 4] {
        for k in [1usize, 3, 5, 6, 8, 10, 12, 14] {
            let mut sum_return = 0.0;
            let mut sum_kf = 0.0;
            let mut sum_steps = 0.0;
            let mut span_done = 0usize;
            let mut cover_done = 0usize;
            let mut lost = 0usize;
            let mut reloc_frames = 0usize;
            let mut e_sum = 0.0;
            let mut e_count = 0usize;
            for &seed in &seeds {
                let mut env = SimEnv::new(config.clone()).unwrap();
                env.reset(seed);
                let mut step = 0usize;
                let mut total = 0.0;
                while !env.is_done() {
                    let action = Action {
                        keyframe: (step + 1) % k == 0,
                        grid_size_index: grid_index,
                    };
                    let r = env.step(&action).unwrap();
                    total += r.reward;
                    step += 1;
                }
                sum_return += total;
                sum_kf += env.keyframe_count() as f64;
                sum_steps += step as f64;
                let log = env.episode_log();
                let frames = log.len() as f64;
                let est: Vec<usize> = log
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.estimated.is_some())
                    .map(|(i, _)| i)
                    .collect();
                if !est.is_empty() {
                    let span = (est[est.len() - 1] - est[0] + 1) as f64 / frames;
                    if span >= 0.99 {
                        span_done += 1;
                    }
                    if est.len() as f64 / frames >= 0.99 {
                        cover_done += 1;
                    }
                }
                reloc_frames += log
                    .iter()
                    .filter(|r| r.mode == VOMode::Relocalizing)
                    .count();
                if env.mode() == VOMode::Lost {
                    lost += 1;
                }
                for r in log {
                    if let Some(e) = r.e_tran {
                        e_sum += e;
                        e_count += 1;
                    }
                }
            }
            let n = seeds.len() as f64;
            println!(
                "{:>4} {:>5} {:>9.4} {:>6.2} {:>6.2} {:>9.1} {:>9.5} {:>7.1} {:>7} {:>6.0}",
                k,
                [20, 25, 30, 35, 40][grid_index],
                sum_return / n,
                span_done as f64 / n,
                cover_done as f64 / n,
                sum_kf / n,
                e_sum / e_count.max(1) as f64,
                reloc_frames as f64 / n,
                lost,
                sum_steps / n,
            );
        }
    }
}

//! Policy evaluation: runs greedy or scripted policies on held-out episode
//! seeds and reports per-episode returns, completion, keyframe usage, window
//! error, and absolute trajectory error against the simulator ground truth.

use crate::env::sim::{EnvConfig, SimEnv};
use crate::env::vec::mix_seed;
use crate::env::{Action, EnvError, Environment, Observation, VOMode, RESET_GRID_INDEX};
use crate::exec::ExecMode;
use crate::geometry::Trajectory;
use crate::metrics::{self, ate};
use crate::nn::{policy_forward, prepare_actor_input, NetConfig, PolicyParameters, RunningNorm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Scripted reference controllers. All fixed-schedule baselines use the
/// reset grid size; the random baseline draws both heads uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselinePolicy {
    /// Keyframe on every step.
    EveryFrame,
    /// Keyframe on every k-th step (k = 1 is `EveryFrame`).
    EveryK(usize),
    /// Never keyframe after initialization.
    Never,
    /// Uniformly random keyframe flag and grid size.
    Random,
}

impl BaselinePolicy {
    pub fn name(&self) -> String {
        match self {
            BaselinePolicy::EveryFrame => "every_frame".into(),
            BaselinePolicy::EveryK(k) => format!("every_{k}"),
            BaselinePolicy::Never => "never".into(),
            BaselinePolicy::Random => "random".into(),
        }
    }

    fn act(&self, step: usize, rng: &mut ChaCha8Rng) -> Action {
        match self {
            BaselinePolicy::EveryFrame => Action::new(true, RESET_GRID_INDEX),
            BaselinePolicy::EveryK(k) => {
                assert!(*k > 0, "every_k period must be positive");
                Action::new((step + 1).is_multiple_of(*k), RESET_GRID_INDEX)
            }
            BaselinePolicy::Never => Action::new(false, RESET_GRID_INDEX),
            BaselinePolicy::Random => Action::new(
                rng.gen_bool(0.5),
                rng.gen_range(0..crate::env::GRID_SIZES.len()),
            ),
        }
    }
}

/// A policy under evaluation: either the trained network (greedy by
/// default) or one of the scripted baselines.
pub enum EvalPolicy<'a> {
    Trained {
        net: &'a NetConfig,
        actor: &'a PolicyParameters,
        obs_norm: &'a RunningNorm,
        /// Sample instead of taking the argmax.
        stochastic: bool,
    },
    Baseline(BaselinePolicy),
}

impl EvalPolicy<'_> {
    pub fn name(&self) -> String {
        match self {
            EvalPolicy::Trained { stochastic, .. } => {
                if *stochastic {
                    "trained_stochastic".into()
                } else {
                    "trained".into()
                }
            }
            EvalPolicy::Baseline(b) => b.name(),
        }
    }

    fn act(&self, obs: &Observation, step: usize, rng: &mut ChaCha8Rng) -> Result<Action, EnvError> {
        match self {
            EvalPolicy::Trained {
                net,
                actor,
                obs_norm,
                stochastic,
            } => {
                let input = prepare_actor_input(net, obs, obs_norm)
                    .map_err(|e| EnvError::InvalidConfig(e.to_string()))?;
                let out = policy_forward(net, actor, &input);
                Ok(if *stochastic {
                    out.sample(rng).0
                } else {
                    out.greedy()
                })
            }
            EvalPolicy::Baseline(b) => Ok(b.act(step, rng)),
        }
    }
}

/// Summary of one evaluated episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub seed: u64,
    /// Sum of rewards over the agent-controlled steps.
    pub total_return: f64,
    /// Agent-controlled steps actually executed (done may come early).
    pub steps: usize,
    /// Fraction of frames (including initialization) with a pose estimate —
    /// a per-frame diagnostic; brief relocalizations lower it.
    pub coverage: f64,
    /// True when the estimate's time span covers at least 99% of the
    /// ground-truth timestamps, i.e. the tracker survived to the end of the
    /// sequence instead of diverging (benchmark tables mark the latter "-").
    pub completed: bool,
    /// Keyframes registered, including the one closing initialization.
    pub keyframes: usize,
    /// Mean window error over steps where one was measured (None if never).
    pub mean_e_tran: Option<f64>,
    /// Absolute trajectory error of the estimate against ground truth,
    /// None when too little of the trajectory was estimated to align.
    pub ate: Option<f64>,
    pub final_mode: VOMode,
}

/// Runs one episode with per-policy deterministic randomness derived from
/// the episode seed.
pub fn run_episode(
    policy: &EvalPolicy,
    config: &EnvConfig,
    seed: u64,
) -> Result<EpisodeOutcome, EnvError> {
    run_episode_with_env(policy, config, seed).map(|(outcome, _)| outcome)
}

/// Like [`run_episode`] but also hands back the finished environment so the
/// caller can export its episode log.
pub fn run_episode_with_env(
    policy: &EvalPolicy,
    config: &EnvConfig,
    seed: u64,
) -> Result<(EpisodeOutcome, SimEnv), EnvError> {
    let mut env = SimEnv::new(config.clone())?;
    env.reset(seed);
    // Evaluation-side action draws come from a stream disjoint from the
    // environment's own.
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, u64::MAX, 3));

    let mut total_return = 0.0;
    let mut steps = 0;
    while !env.is_done() {
        let obs = env.observation();
        let action = policy.act(&obs, steps, &mut rng)?;
        let result = env.step(&action)?;
        total_return += result.reward;
        steps += 1;
    }

    let log = env.episode_log();
    let total_frames = log.len();
    let estimated: Vec<_> = log.iter().filter(|r| r.estimated.is_some()).collect();
    let coverage = estimated.len() as f64 / total_frames as f64;

    let measured: Vec<f64> = log.iter().filter_map(|r| r.e_tran).collect();
    let mean_e_tran = if measured.is_empty() {
        None
    } else {
        Some(measured.iter().sum::<f64>() / measured.len() as f64)
    };

    let (completed, ate_value) = {
        let gt = Trajectory::from_poses(log.iter().map(|r| r.ground_truth).collect());
        let est = Trajectory::from_poses(
            estimated.iter().map(|r| r.estimated.unwrap()).collect(),
        );
        match (gt, est) {
            (Ok(gt), Ok(est)) => (
                metrics::span_coverage(&est, &gt) >= 0.99,
                ate(&est, &gt).ok().map(|a| a.rmse),
            ),
            _ => (false, None),
        }
    };

    let outcome = EpisodeOutcome {
        seed,
        total_return,
        steps,
        coverage,
        completed,
        keyframes: env.keyframe_count(),
        mean_e_tran,
        ate: ate_value,
        final_mode: env.mode(),
    };
    Ok((outcome, env))
}

/// Aggregates over a seed set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub policy: String,
    pub episodes: Vec<EpisodeOutcome>,
    pub mean_return: f64,
    pub completion_rate: f64,
    pub mean_keyframes: f64,
    /// Mean over episodes that measured a window error at all.
    pub mean_e_tran: Option<f64>,
    /// Mean ATE over episodes where it was computable.
    pub mean_ate: Option<f64>,
}

/// Evaluates `policy` on every seed (episodes are independent, so the mode
/// only controls scheduling; results are identical either way).
pub fn evaluate(
    policy: &EvalPolicy,
    config: &EnvConfig,
    seeds: &[u64],
    mode: ExecMode,
) -> Result<EvalSummary, EnvError> {
    let outcomes: Vec<Result<EpisodeOutcome, EnvError>> =
        mode.map(seeds.to_vec(), |seed| run_episode(policy, config, seed));
    let mut episodes = Vec::with_capacity(seeds.len());
    for o in outcomes {
        episodes.push(o?);
    }
    Ok(summarize(policy.name(), episodes))
}

pub fn summarize(policy: String, episodes: Vec<EpisodeOutcome>) -> EvalSummary {
    assert!(!episodes.is_empty(), "no episodes evaluated");
    let n = episodes.len() as f64;
    let mean_return = episodes.iter().map(|e| e.total_return).sum::<f64>() / n;
    let completion_rate = episodes.iter().filter(|e| e.completed).count() as f64 / n;
    let mean_keyframes = episodes.iter().map(|e| e.keyframes as f64).sum::<f64>() / n;
    let e_trans: Vec<f64> = episodes.iter().filter_map(|e| e.mean_e_tran).collect();
    let mean_e_tran = if e_trans.is_empty() {
        None
    } else {
        Some(e_trans.iter().sum::<f64>() / e_trans.len() as f64)
    };
    let ates: Vec<f64> = episodes.iter().filter_map(|e| e.ate).collect();
    let mean_ate = if ates.is_empty() {
        None
    } else {
        Some(ates.iter().sum::<f64>() / ates.len() as f64)
    };
    EvalSummary {
        policy,
        episodes,
        mean_return,
        completion_rate,
        mean_keyframes,
        mean_e_tran,
        mean_ate,
    }
}

/// The four scripted baselines used for reference comparisons.
pub fn standard_baselines() -> Vec<BaselinePolicy> {
    vec![
        BaselinePolicy::EveryFrame,
        BaselinePolicy::EveryK(5),
        BaselinePolicy::Never,
        BaselinePolicy::Random,
    ]
}

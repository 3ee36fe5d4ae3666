//! On-policy training: rollout collection over vectorized environments, a
//! masked rollout buffer (returns over all transitions, sampling over valid
//! ones only), generalized advantage estimation, and the clipped-surrogate
//! policy update with a privileged critic.
//!
//! Determinism contract: given identical seeds and configs, training is
//! bitwise-reproducible and independent of the execution mode. Environments
//! and sampler RNGs are per-slot, minibatch gradients are computed in fixed
//! chunks of [`GRAD_CHUNK`] samples and summed in chunk order, and the
//! optimizer applies updates in declared tensor order.

use crate::env::vec::VecEnv;
use crate::env::{Action, EnvError, Environment, Observation, PrivilegedObservation};
use crate::exec::ExecMode;
use crate::nn::{
    actor_logits, bind_actor, bind_critic, critic_values, joint_entropy, joint_log_prob,
    prepare_actor_input, prepare_critic_input, Checkpoint, CriticParameters, Graph, NetConfig,
    NetInput, NnError, PolicyParameters, RunningNorm, Tensor,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::path::Path;
use thiserror::Error;

/// Fixed gradient-accumulation chunk: minibatches are split into chunks of
/// this many samples whose gradients are summed in chunk order, making the
/// reduction independent of the execution mode.
pub const GRAD_CHUNK: usize = 32;

/// Completed-episode window for the rolling mean return.
const RETURN_WINDOW: usize = 100;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("invalid ppo config: {0}")]
    InvalidConfig(String),
    #[error("rollout buffer is empty")]
    EmptyBuffer,
    #[error("rollout contains no valid states")]
    NoValidStates,
    #[error("non-finite loss or gradient; parameters restored")]
    NonFiniteLoss,
    #[error("environment error: {0}")]
    Env(#[from] EnvError),
    #[error("network error: {0}")]
    Nn(#[from] NnError),
    #[error("state i/o error: {0}")]
    State(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub num_envs: usize,
    pub rollout_len: usize,
    pub iterations: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.6,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            epochs: 10,
            minibatch_size: 256,
            learning_rate: 3e-4,
            momentum: 0.9,
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            num_envs: 8,
            rollout_len: 250,
            iterations: 300,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let fail = |m: String| Err(PpoError::InvalidConfig(m));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return fail(format!("gamma {} must be in (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return fail(format!("gae_lambda {} must be in [0, 1]", self.gae_lambda));
        }
        if self.clip_epsilon <= 0.0 {
            return fail("clip_epsilon must be positive".into());
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.num_envs == 0 || self.rollout_len == 0 {
            return fail("epochs, minibatch_size, num_envs, rollout_len must be positive".into());
        }
        if self.learning_rate <= 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return fail("learning_rate must be positive, momentum in [0, 1)".into());
        }
        if self.value_coef < 0.0 || self.entropy_coef < 0.0 || self.max_grad_norm <= 0.0 {
            return fail("coefficients must be non-negative, max_grad_norm positive".into());
        }
        Ok(())
    }
}

/// One recorded environment interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub observation: Observation,
    pub privileged_observation: PrivilegedObservation,
    pub action: Action,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
    /// Copied verbatim from the step result: the pre-step state was in
    /// tracking mode, so this transition is eligible for policy updates.
    pub valid: bool,
    /// Window error reported by the environment this step, when measured.
    pub e_tran: Option<f64>,
}

/// Env-major rollout storage: index = env * rollout_len + t. Returns and
/// advantages are computed over all transitions; the valid mask restricts
/// minibatch sampling only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBuffer {
    pub num_envs: usize,
    pub rollout_len: usize,
    pub transitions: Vec<Transition>,
    /// Critic bootstrap values for the post-rollout state of each env.
    pub last_values: Vec<f64>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
    pub computed: bool,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn index(&self, env: usize, t: usize) -> usize {
        env * self.rollout_len + t
    }

    pub fn valid_indices(&self) -> Vec<usize> {
        (0..self.transitions.len())
            .filter(|&i| self.transitions[i].valid)
            .collect()
    }

    /// Canonical byte serialization (used for determinism audits).
    pub fn to_bytes(&self) -> Vec<u8> {
        bincode::serialize(self).expect("buffer serialization cannot fail")
    }
}

/// Runs the current policy for `cfg.rollout_len` steps across all
/// environments without touching parameters. Sampling consumes one RNG per
/// environment slot, so the stream is independent of the execution mode.
///
/// The argument list mirrors the trainer's fields; bundling them would just
/// duplicate that struct.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollout<E: Environment>(
    net: &NetConfig,
    actor: &PolicyParameters,
    critic: &CriticParameters,
    obs_norm: &RunningNorm,
    priv_norm: &RunningNorm,
    venv: &mut VecEnv<E>,
    cfg: &PpoConfig,
    sampler_rngs: &mut [ChaCha8Rng],
    mode: ExecMode,
) -> Result<RolloutBuffer, PpoError> {
    let n = venv.len();
    if n == 0 {
        return Err(PpoError::EmptyBuffer);
    }
    assert_eq!(sampler_rngs.len(), n, "one sampler RNG per environment");

    let mut per_env: Vec<Vec<Transition>> = (0..n)
        .map(|_| Vec::with_capacity(cfg.rollout_len))
        .collect();

    for _ in 0..cfg.rollout_len {
        let observations: Vec<Observation> = venv.envs().iter().map(|e| e.observation()).collect();
        let privileged = venv.privileged_observations();

        let actor_inputs = observations
            .iter()
            .map(|o| prepare_actor_input(net, o, obs_norm))
            .collect::<Result<Vec<_>, _>>()?;
        let critic_inputs = privileged
            .iter()
            .map(|p| prepare_critic_input(net, p, obs_norm, priv_norm))
            .collect::<Result<Vec<_>, _>>()?;

        let outputs = crate::nn::policy_forward_batch(net, actor, &actor_inputs);
        let values = crate::nn::critic_forward_batch(net, critic, &critic_inputs);

        let mut actions = Vec::with_capacity(n);
        let mut log_probs = Vec::with_capacity(n);
        for (i, out) in outputs.iter().enumerate() {
            let (action, lp) = out.sample(&mut sampler_rngs[i]);
            actions.push(action);
            log_probs.push(lp);
        }

        let results = venv.step_all(&actions, mode)?;
        for i in 0..n {
            per_env[i].push(Transition {
                observation: observations[i].clone(),
                privileged_observation: privileged[i].clone(),
                action: actions[i],
                log_prob: log_probs[i],
                reward: results[i].reward,
                value: values[i],
                done: results[i].done,
                valid: results[i].valid,
                e_tran: results[i].info.e_tran,
            });
        }
    }

    let final_privileged = venv.privileged_observations();
    let final_inputs = final_privileged
        .iter()
        .map(|p| prepare_critic_input(net, p, obs_norm, priv_norm))
        .collect::<Result<Vec<_>, _>>()?;
    let last_values = crate::nn::critic_forward_batch(net, critic, &final_inputs);

    let transitions: Vec<Transition> = per_env.into_iter().flatten().collect();
    let total = transitions.len();
    Ok(RolloutBuffer {
        num_envs: n,
        rollout_len: cfg.rollout_len,
        transitions,
        last_values,
        returns: vec![0.0; total],
        advantages: vec![0.0; total],
        computed: false,
    })
}

/// Standard GAE over ALL transitions (the valid mask plays no role here):
/// delta_t = r_t + gamma*(1-done_t)*V_{t+1} - V_t, advantages by the
/// backward recursion, returns = advantages + values. Advantages are then
/// standardized over valid entries only.
pub fn compute_gae(buffer: &mut RolloutBuffer, cfg: &PpoConfig) -> Result<(), PpoError> {
    if buffer.is_empty() {
        return Err(PpoError::EmptyBuffer);
    }
    for env in 0..buffer.num_envs {
        let mut next_adv = 0.0;
        for t in (0..buffer.rollout_len).rev() {
            let i = buffer.index(env, t);
            let tr = &buffer.transitions[i];
            let not_done = 1.0 - f64::from(tr.done);
            let next_value = if t + 1 < buffer.rollout_len {
                buffer.transitions[buffer.index(env, t + 1)].value
            } else {
                buffer.last_values[env]
            };
            let delta = tr.reward + cfg.gamma * not_done * next_value - tr.value;
            next_adv = delta + cfg.gamma * cfg.gae_lambda * not_done * next_adv;
            buffer.advantages[i] = next_adv;
            buffer.returns[i] = next_adv + tr.value;
        }
    }

    // Standardize advantages over valid entries (exact population std).
    let valid = buffer.valid_indices();
    if valid.len() >= 2 {
        let mean = valid.iter().map(|&i| buffer.advantages[i]).sum::<f64>() / valid.len() as f64;
        let var = valid
            .iter()
            .map(|&i| (buffer.advantages[i] - mean).powi(2))
            .sum::<f64>()
            / valid.len() as f64;
        let std = var.sqrt();
        for &i in &valid {
            buffer.advantages[i] -= mean;
            if std > 1e-12 {
                buffer.advantages[i] /= std;
            }
        }
    }
    buffer.computed = true;
    Ok(())
}

/// Shuffled minibatches over valid indices: every valid index appears in
/// exactly one minibatch per call.
pub fn masked_minibatches(
    buffer: &RolloutBuffer,
    minibatch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>, PpoError> {
    let mut valid = buffer.valid_indices();
    if valid.is_empty() {
        return Err(PpoError::NoValidStates);
    }
    valid.shuffle(rng);
    Ok(valid.chunks(minibatch_size).map(|c| c.to_vec()).collect())
}

/// Network-ready views of every transition, prepared once per update with
/// the normalization statistics frozen during collection.
#[derive(Debug, Clone)]
pub struct PreparedBuffer {
    pub actor_inputs: Vec<NetInput>,
    pub critic_inputs: Vec<NetInput>,
    pub actions: Vec<Action>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

pub fn prepare_buffer(
    net: &NetConfig,
    buffer: &RolloutBuffer,
    obs_norm: &RunningNorm,
    priv_norm: &RunningNorm,
) -> Result<PreparedBuffer, PpoError> {
    assert!(buffer.computed, "compute_gae must run before preparing");
    let mut prep = PreparedBuffer {
        actor_inputs: Vec::with_capacity(buffer.len()),
        critic_inputs: Vec::with_capacity(buffer.len()),
        actions: Vec::with_capacity(buffer.len()),
        old_log_probs: Vec::with_capacity(buffer.len()),
        advantages: buffer.advantages.clone(),
        returns: buffer.returns.clone(),
    };
    for tr in &buffer.transitions {
        prep.actor_inputs
            .push(prepare_actor_input(net, &tr.observation, obs_norm)?);
        prep.critic_inputs.push(prepare_critic_input(
            net,
            &tr.privileged_observation,
            obs_norm,
            priv_norm,
        )?);
        prep.actions.push(tr.action);
        prep.old_log_probs.push(tr.log_prob);
    }
    Ok(prep)
}

/// Per-chunk gradient/diagnostic bundle; sums are over the chunk's samples.
struct ChunkResult {
    grads: Vec<Option<Tensor>>,
    loss_sum: f64,
    policy_sum: f64,
    value_sum: f64,
    entropy_sum: f64,
    clip_count: usize,
    kl_sum: f64,
}

/// Builds the clipped-surrogate loss for `idx` samples and differentiates
/// it. The scalar loss is the SUM over samples of
///   -min(ratio*A, clip(ratio)*A) + value_coef*(V - return)^2
///   - entropy_coef*H,
/// so that chunk gradients add up to the minibatch-sum gradient exactly.
fn chunk_loss_and_grads(
    net: &NetConfig,
    ppo: &PpoConfig,
    actor: &PolicyParameters,
    critic: &CriticParameters,
    prep: &PreparedBuffer,
    idx: &[usize],
) -> Result<ChunkResult, PpoError> {
    let b = idx.len();
    let actor_in: Vec<NetInput> = idx.iter().map(|&i| prep.actor_inputs[i].clone()).collect();
    let critic_in: Vec<NetInput> = idx.iter().map(|&i| prep.critic_inputs[i].clone()).collect();
    let actions: Vec<Action> = idx.iter().map(|&i| prep.actions[i]).collect();
    let old_lp = Tensor::from_vec(b, 1, idx.iter().map(|&i| prep.old_log_probs[i]).collect());
    let adv = Tensor::from_vec(b, 1, idx.iter().map(|&i| prep.advantages[i]).collect());
    let ret = Tensor::from_vec(b, 1, idx.iter().map(|&i| prep.returns[i]).collect());

    let mut g = Graph::new();
    let mut slot = 0;
    let a_nodes = bind_actor(&mut g, actor, &mut slot);
    let c_nodes = bind_critic(&mut g, critic, &mut slot);
    let n_slots = slot;

    let (kf_logits, grid_logits) = actor_logits(&mut g, &a_nodes, net, &actor_in);
    let new_lp = joint_log_prob(&mut g, kf_logits, grid_logits, &actions);
    let old_lp_node = g.constant(old_lp);
    let adv_node = g.constant(adv);
    let diff_lp = g.sub(new_lp, old_lp_node);
    let ratio = g.exp(diff_lp);
    let surr_raw = g.mul_elem(ratio, adv_node);
    let clipped = g.clamp(ratio, 1.0 - ppo.clip_epsilon, 1.0 + ppo.clip_epsilon);
    let surr_clip = g.mul_elem(clipped, adv_node);
    let surr = g.min_elem(surr_raw, surr_clip);
    let surr_mean = g.mean_all(surr);
    let policy_loss = g.scale(surr_mean, -(b as f64)); // -sum(surr)

    let values = critic_values(&mut g, &c_nodes, net, &critic_in);
    let ret_node = g.constant(ret);
    let v_err = g.sub(values, ret_node);
    let v_sq = g.square(v_err);
    let v_mean = g.mean_all(v_sq);
    let value_loss = g.scale(v_mean, b as f64 * ppo.value_coef); // coef*sum(err^2)

    let entropy = joint_entropy(&mut g, kf_logits, grid_logits);
    let ent_mean = g.mean_all(entropy);
    let ent_term = g.scale(ent_mean, -(b as f64) * ppo.entropy_coef); // -coef*sum(H)

    let pv = g.add(policy_loss, value_loss);
    let loss = g.add(pv, ent_term);

    // Diagnostics from forward values.
    let ratio_v = g.value(ratio).data.clone();
    let surr_v = g.value(surr).data.clone();
    let vsq_v = g.value(v_sq).data.clone();
    let ent_v = g.value(entropy).data.clone();
    let loss_sum = g.value(loss).data[0];

    let grads = g.backward(loss, n_slots).map_err(NnError::from)?;

    let mut clip_count = 0;
    let mut kl_sum = 0.0;
    for r in &ratio_v {
        if (r - 1.0).abs() > ppo.clip_epsilon {
            clip_count += 1;
        }
        // First-order-exact KL estimator: (r - 1) - ln r.
        kl_sum += (r - 1.0) - r.ln();
    }

    Ok(ChunkResult {
        grads,
        loss_sum,
        policy_sum: -surr_v.iter().sum::<f64>(),
        value_sum: vsq_v.iter().sum::<f64>(),
        entropy_sum: ent_v.iter().sum::<f64>(),
        clip_count,
        kl_sum,
    })
}

/// Momentum-SGD state, one velocity per parameter tensor (actor tensors
/// first, then critic, in declared order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub velocities: Vec<Tensor>,
}

impl OptState {
    pub fn new(actor: &PolicyParameters, critic: &CriticParameters) -> Self {
        let velocities = actor
            .tensors()
            .into_iter()
            .chain(critic.tensors())
            .map(|t| Tensor::zeros(t.rows, t.cols))
            .collect();
        Self { velocities }
    }
}

/// Aggregate diagnostics of one `ppo_update` call (means over minibatches).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub minibatches: usize,
}

impl UpdateStats {
    fn skipped() -> Self {
        Self {
            policy_loss: 0.0,
            value_loss: 0.0,
            entropy: 0.0,
            clip_fraction: 0.0,
            approx_kl: 0.0,
            minibatches: 0,
        }
    }
}

/// Clipped-surrogate update: `epochs` passes over shuffled valid-index
/// minibatches, gradient-norm clipping over the joint actor+critic
/// parameter set, momentum SGD. On a non-finite loss or gradient the
/// parameters and optimizer state are restored to their pre-call values and
/// `NonFiniteLoss` is returned.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    net: &NetConfig,
    ppo: &PpoConfig,
    actor: &mut PolicyParameters,
    critic: &mut CriticParameters,
    opt: &mut OptState,
    buffer: &RolloutBuffer,
    prep: &PreparedBuffer,
    shuffle_rng: &mut ChaCha8Rng,
    mode: ExecMode,
) -> Result<UpdateStats, PpoError> {
    assert!(buffer.computed, "compute_gae must run before updating");
    let snapshot = (actor.clone(), critic.clone(), opt.clone());
    let restore = |actor: &mut PolicyParameters,
                   critic: &mut CriticParameters,
                   opt: &mut OptState,
                   snap: &(PolicyParameters, CriticParameters, OptState)| {
        *actor = snap.0.clone();
        *critic = snap.1.clone();
        *opt = snap.2.clone();
    };

    let n_actor = actor.tensors().len();
    let n_slots = n_actor + critic.tensors().len();
    let mut stats = UpdateStats::skipped();

    for _ in 0..ppo.epochs {
        let minibatches = masked_minibatches(buffer, ppo.minibatch_size, shuffle_rng)?;
        for mb in minibatches {
            let b = mb.len() as f64;
            let chunks: Vec<&[usize]> = mb.chunks(GRAD_CHUNK).collect();
            let results: Vec<Result<ChunkResult, PpoError>> = mode.map(chunks, |chunk| {
                chunk_loss_and_grads(net, ppo, actor, critic, prep, chunk)
            });

            // Deterministic reduction: accumulate in chunk order, then take
            // the minibatch mean.
            let mut grad_acc: Vec<Option<Tensor>> = vec![None; n_slots];
            let mut loss_sum = 0.0;
            let mut policy_sum = 0.0;
            let mut value_sum = 0.0;
            let mut entropy_sum = 0.0;
            let mut clip_count = 0usize;
            let mut kl_sum = 0.0;
            for result in results {
                let chunk = result?;
                debug_assert_eq!(chunk.grads.len(), n_slots);
                for (slot, grad) in chunk.grads.into_iter().enumerate() {
                    if let Some(grad) = grad {
                        match &mut grad_acc[slot] {
                            None => grad_acc[slot] = Some(grad),
                            Some(acc) => {
                                for (a, v) in acc.data.iter_mut().zip(grad.data.iter()) {
                                    *a += v;
                                }
                            }
                        }
                    }
                }
                loss_sum += chunk.loss_sum;
                policy_sum += chunk.policy_sum;
                value_sum += chunk.value_sum;
                entropy_sum += chunk.entropy_sum;
                clip_count += chunk.clip_count;
                kl_sum += chunk.kl_sum;
            }

            let mut grads: Vec<Tensor> = Vec::with_capacity(n_slots);
            {
                let shapes: Vec<(usize, usize)> = actor
                    .tensors()
                    .into_iter()
                    .chain(critic.tensors())
                    .map(|t| (t.rows, t.cols))
                    .collect();
                for (slot, acc) in grad_acc.into_iter().enumerate() {
                    let mut t = acc.unwrap_or_else(|| Tensor::zeros(shapes[slot].0, shapes[slot].1));
                    for v in t.data.iter_mut() {
                        *v /= b;
                    }
                    grads.push(t);
                }
            }

            if !loss_sum.is_finite() || grads.iter().any(|t| !t.is_finite()) {
                restore(actor, critic, opt, &snapshot);
                return Err(PpoError::NonFiniteLoss);
            }

            // Global gradient-norm clip over the joint parameter set.
            let global_norm = grads
                .iter()
                .map(|t| t.data.iter().map(|v| v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if global_norm > ppo.max_grad_norm {
                let scale = ppo.max_grad_norm / global_norm;
                for t in &mut grads {
                    for v in t.data.iter_mut() {
                        *v *= scale;
                    }
                }
            }

            // Momentum SGD in declared tensor order.
            {
                let mut params: Vec<&mut Tensor> = actor.tensors_mut();
                params.extend(critic.tensors_mut());
                for (slot, param) in params.into_iter().enumerate() {
                    let vel = &mut opt.velocities[slot];
                    for i in 0..param.data.len() {
                        vel.data[i] = ppo.momentum * vel.data[i] + grads[slot].data[i];
                        param.data[i] -= ppo.learning_rate * vel.data[i];
                    }
                }
            }

            stats.policy_loss += policy_sum / b;
            stats.value_loss += value_sum / b;
            stats.entropy += entropy_sum / b;
            stats.clip_fraction += clip_count as f64 / b;
            stats.approx_kl += kl_sum / b;
            stats.minibatches += 1;
        }
    }

    if stats.minibatches > 0 {
        let m = stats.minibatches as f64;
        stats.policy_loss /= m;
        stats.value_loss /= m;
        stats.entropy /= m;
        stats.clip_fraction /= m;
        stats.approx_kl /= m;
    }
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Fixed metrics-log header; one row per training iteration.
pub const METRICS_HEADER: &str = "iteration,mean_return,mean_e_tran,keyframe_rate,policy_loss,value_loss,entropy,clip_fraction,approx_kl,wallclock_s";

/// Formats with 9 significant digits (scientific), the project-wide numeric
/// CSV format.
pub fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: u64,
    /// Rolling mean return over the last completed episodes (0 until any
    /// episode completes).
    pub mean_return: f64,
    /// Mean window error over steps where the environment measured one.
    pub mean_e_tran: f64,
    /// Fraction of valid steps that chose a keyframe.
    pub keyframe_rate: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub wallclock_s: f64,
    /// True when this iteration set a new best rolling return.
    pub new_best: bool,
    /// True when the update was skipped (no valid states).
    pub skipped_update: bool,
}

impl IterationRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            fmt9(self.mean_return),
            fmt9(self.mean_e_tran),
            fmt9(self.keyframe_rate),
            fmt9(self.policy_loss),
            fmt9(self.value_loss),
            fmt9(self.entropy),
            fmt9(self.clip_fraction),
            fmt9(self.approx_kl),
            fmt9(self.wallclock_s),
        )
    }
}

/// The alternating rollout/update loop with all state needed to resume:
/// serializing a `Trainer` and loading it later continues bitwise-identically
/// (wallclock excepted).
#[derive(Serialize, Deserialize)]
#[serde(bound(
    serialize = "E: Serialize",
    deserialize = "E: DeserializeOwned + Environment"
))]
pub struct Trainer<E: Environment> {
    pub net: NetConfig,
    pub ppo: PpoConfig,
    pub actor: PolicyParameters,
    pub critic: CriticParameters,
    pub obs_norm: RunningNorm,
    pub priv_norm: RunningNorm,
    opt: OptState,
    venv: VecEnv<E>,
    sampler_rngs: Vec<ChaCha8Rng>,
    shuffle_rng: ChaCha8Rng,
    iteration: u64,
    /// Per-env running return of the episode in progress.
    episode_acc: Vec<f64>,
    /// Returns of recently completed episodes (rolling window).
    recent_returns: VecDeque<f64>,
    pub best_return: f64,
    pub seed: u64,
    #[serde(skip, default)]
    pub mode: ExecMode,
}

fn stream_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(index.wrapping_mul(0xd1b54a32d192ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl<E: Environment> Trainer<E> {
    pub fn new(
        net: NetConfig,
        ppo: PpoConfig,
        envs: Vec<E>,
        seed: u64,
    ) -> Result<Self, PpoError> {
        net.validate()?;
        ppo.validate()?;
        if envs.len() != ppo.num_envs {
            return Err(PpoError::InvalidConfig(format!(
                "expected {} envs, got {}",
                ppo.num_envs,
                envs.len()
            )));
        }
        let (actor, critic) = crate::nn::init_parameters(&net, seed)?;
        let opt = OptState::new(&actor, &critic);
        let mut venv = VecEnv::new(envs, seed);
        venv.reset_all(ExecMode::Sequential);
        let sampler_rngs = (0..ppo.num_envs)
            .map(|i| ChaCha8Rng::seed_from_u64(stream_seed(seed, 1, i as u64)))
            .collect();
        let shuffle_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 2, 0));
        let n = ppo.num_envs;
        Ok(Self {
            obs_norm: RunningNorm::new(net.map_stats_dim),
            priv_norm: RunningNorm::new(net.privileged_extra_dim),
            net,
            ppo,
            actor,
            critic,
            opt,
            venv,
            sampler_rngs,
            shuffle_rng,
            iteration: 0,
            episode_acc: vec![0.0; n],
            recent_returns: VecDeque::new(),
            best_return: f64::NEG_INFINITY,
            seed,
            mode: ExecMode::default(),
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn recent_mean_return(&self) -> f64 {
        if self.recent_returns.is_empty() {
            0.0
        } else {
            self.recent_returns.iter().sum::<f64>() / self.recent_returns.len() as f64
        }
    }

    /// One rollout + GAE + update + normalizer refresh. Also returns the
    /// raw buffer for audits.
    pub fn train_iteration_with_buffer(&mut self) -> Result<(IterationRow, RolloutBuffer), PpoError> {
        let start = std::time::Instant::now();
        let mut buffer = collect_rollout(
            &self.net,
            &self.actor,
            &self.critic,
            &self.obs_norm,
            &self.priv_norm,
            &mut self.venv,
            &self.ppo,
            &mut self.sampler_rngs,
            self.mode,
        )?;

        // Episode accounting (time order within each env).
        for env in 0..buffer.num_envs {
            for t in 0..buffer.rollout_len {
                let tr = &buffer.transitions[buffer.index(env, t)];
                self.episode_acc[env] += tr.reward;
                if tr.done {
                    self.recent_returns.push_back(self.episode_acc[env]);
                    while self.recent_returns.len() > RETURN_WINDOW {
                        self.recent_returns.pop_front();
                    }
                    self.episode_acc[env] = 0.0;
                }
            }
        }

        compute_gae(&mut buffer, &self.ppo)?;
        let prep = prepare_buffer(&self.net, &buffer, &self.obs_norm, &self.priv_norm)?;
        let (stats, skipped) = match ppo_update(
            &self.net,
            &self.ppo,
            &mut self.actor,
            &mut self.critic,
            &mut self.opt,
            &buffer,
            &prep,
            &mut self.shuffle_rng,
            self.mode,
        ) {
            Ok(stats) => (stats, false),
            Err(PpoError::NoValidStates) => (UpdateStats::skipped(), true),
            Err(e) => return Err(e),
        };

        // Refresh normalization statistics after the update so the frozen
        // view used for collection matches the one used for gradients.
        for tr in &buffer.transitions {
            self.obs_norm.update(&tr.observation.map_stats);
            self.priv_norm
                .update(&tr.privileged_observation.privileged_extras());
        }

        self.iteration += 1;
        let mean_return = self.recent_mean_return();
        let new_best = !self.recent_returns.is_empty() && mean_return > self.best_return;
        if new_best {
            self.best_return = mean_return;
        }

        let measured: Vec<f64> = buffer.transitions.iter().filter_map(|t| t.e_tran).collect();
        let mean_e_tran = if measured.is_empty() {
            0.0
        } else {
            measured.iter().sum::<f64>() / measured.len() as f64
        };
        let valid_count = buffer.transitions.iter().filter(|t| t.valid).count();
        let keyframe_rate = if valid_count == 0 {
            0.0
        } else {
            buffer
                .transitions
                .iter()
                .filter(|t| t.valid && t.action.keyframe)
                .count() as f64
                / valid_count as f64
        };

        let row = IterationRow {
            iteration: self.iteration,
            mean_return,
            mean_e_tran,
            keyframe_rate,
            policy_loss: stats.policy_loss,
            value_loss: stats.value_loss,
            entropy: stats.entropy,
            clip_fraction: stats.clip_fraction,
            approx_kl: stats.approx_kl,
            wallclock_s: start.elapsed().as_secs_f64(),
            new_best,
            skipped_update: skipped,
        };
        Ok((row, buffer))
    }

    pub fn train_iteration(&mut self) -> Result<IterationRow, PpoError> {
        self.train_iteration_with_buffer().map(|(row, _)| row)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.net.clone(),
            actor: self.actor.clone(),
            critic: self.critic.clone(),
            obs_norm: self.obs_norm.clone(),
            priv_norm: self.priv_norm.clone(),
            iteration: self.iteration,
        }
    }
}

impl<E: Environment + Serialize> Trainer<E> {
    /// Serializes the complete training state for later resumption.
    pub fn save_state(&self, path: &Path) -> Result<(), PpoError> {
        let bytes = bincode::serialize(self).map_err(|e| PpoError::State(e.to_string()))?;
        std::fs::write(path, bytes).map_err(|e| PpoError::State(e.to_string()))
    }
}

impl<E: Environment + DeserializeOwned> Trainer<E> {
    /// Restores a trainer saved with [`Trainer::save_state`]; continuing
    /// from it reproduces an uninterrupted run exactly.
    pub fn load_state(path: &Path) -> Result<Self, PpoError> {
        let bytes = std::fs::read(path).map_err(|e| PpoError::State(e.to_string()))?;
        bincode::deserialize(&bytes).map_err(|e| PpoError::State(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::bandit::ContextualBanditEnv;
    use crate::env::sim::{EnvConfig, SimEnv};
    use crate::env::MAP_STATS_DIM;
    use crate::nn::{init_parameters, PolicyOutput};
    use rand::Rng;

    fn tiny_net() -> NetConfig {
        NetConfig {
            token_count: 2,
            token_dim: 8,
            num_heads: 2,
            mlp_hidden: 16,
            ..NetConfig::default()
        }
    }

    /// Hand-rolled buffer with given rewards/values/dones/valids, one env.
    fn synthetic_buffer(
        rewards: &[f64],
        values: &[f64],
        dones: &[bool],
        valids: &[bool],
        last_value: f64,
    ) -> RolloutBuffer {
        let n = rewards.len();
        let transitions = (0..n)
            .map(|t| Transition {
                observation: Observation {
                    keypoints: vec![],
                    map_stats: [0.0; MAP_STATS_DIM],
                },
                privileged_observation: PrivilegedObservation {
                    observation: Observation {
                        keypoints: vec![],
                        map_stats: [0.0; MAP_STATS_DIM],
                    },
                    e_tran: 0.0,
                    future_motion: [0.0; 10],
                },
                action: Action::new(false, 0),
                log_prob: -(2.0_f64.ln() + 5.0_f64.ln()),
                reward: rewards[t],
                value: values[t],
                done: dones[t],
                valid: valids[t],
                e_tran: None,
            })
            .collect();
        RolloutBuffer {
            num_envs: 1,
            rollout_len: n,
            transitions,
            last_values: vec![last_value],
            returns: vec![0.0; n],
            advantages: vec![0.0; n],
            computed: false,
        }
    }

    /// Brute-force GAE oracle: O(T^2) forward accumulation, no recursion.
    fn brute_force_gae(
        rewards: &[f64],
        values: &[f64],
        dones: &[bool],
        last_value: f64,
        gamma: f64,
        lambda: f64,
    ) -> (Vec<f64>, Vec<f64>) {
        let n = rewards.len();
        let delta = |t: usize| -> f64 {
            let next = if dones[t] {
                0.0
            } else if t + 1 < n {
                values[t + 1]
            } else {
                last_value
            };
            rewards[t] + gamma * next - values[t]
        };
        let mut advantages = vec![0.0; n];
        for t in 0..n {
            let mut coef = 1.0;
            for k in t..n {
                advantages[t] += coef * delta(k);
                if dones[k] {
                    break;
                }
                coef *= gamma * lambda;
            }
        }
        let returns = (0..n).map(|t| advantages[t] + values[t]).collect();
        (advantages, returns)
    }

    fn raw_gae(buffer: &RolloutBuffer, cfg: &PpoConfig) -> (Vec<f64>, Vec<f64>) {
        // Advantages before standardization: recompute via the recursion on
        // a clone with no valid entries (standardization skipped < 2).
        let mut b = buffer.clone();
        for tr in &mut b.transitions {
            tr.valid = false;
        }
        compute_gae(&mut b, cfg).unwrap();
        (b.advantages, b.returns)
    }

    #[test]
    fn gae_frozen_two_step_example() {
        let cfg = PpoConfig {
            gamma: 0.6,
            gae_lambda: 1.0,
            ..PpoConfig::default()
        };
        let buffer = synthetic_buffer(
            &[1.0, 1.0],
            &[0.0, 0.0],
            &[false, true],
            &[true, true],
            0.0,
        );
        let (_, returns) = raw_gae(&buffer, &cfg);
        assert!((returns[0] - 1.6).abs() < 1e-12);
        assert!((returns[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gae_single_terminal_transition() {
        let cfg = PpoConfig::default();
        let buffer = synthetic_buffer(&[2.5], &[0.7], &[true], &[true], 99.0);
        let (adv, ret) = raw_gae(&buffer, &cfg);
        assert!((ret[0] - 2.5).abs() < 1e-12);
        assert!((adv[0] - (2.5 - 0.7)).abs() < 1e-12);
    }

    #[test]
    fn gae_matches_brute_force_oracle() {
        let cfg = PpoConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let n = rng.gen_range(1..40);
            let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dones: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
            let valids: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
            let last_value = rng.gen_range(-1.0..1.0);
            let buffer = synthetic_buffer(&rewards, &values, &dones, &valids, last_value);
            let (adv, ret) = raw_gae(&buffer, &cfg);
            let (oadv, oret) =
                brute_force_gae(&rewards, &values, &dones, last_value, cfg.gamma, cfg.gae_lambda);
            for t in 0..n {
                assert!((adv[t] - oadv[t]).abs() < 1e-10, "adv[{t}]");
                assert!((ret[t] - oret[t]).abs() < 1e-10, "ret[{t}]");
            }
        }
    }

    #[test]
    fn returns_are_mask_independent_and_advantages_standardized() {
        let cfg = PpoConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 64;
        let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dones: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.15)).collect();
        let valids: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();

        let mut masked = synthetic_buffer(&rewards, &values, &dones, &valids, 0.3);
        let mut unmasked = synthetic_buffer(&rewards, &values, &dones, &[true; 64], 0.3);
        compute_gae(&mut masked, &cfg).unwrap();
        compute_gae(&mut unmasked, &cfg).unwrap();
        assert_eq!(masked.returns, unmasked.returns);

        let valid_idx = masked.valid_indices();
        assert!(valid_idx.len() >= 2);
        let mean =
            valid_idx.iter().map(|&i| masked.advantages[i]).sum::<f64>() / valid_idx.len() as f64;
        let std = (valid_idx
            .iter()
            .map(|&i| (masked.advantages[i] - mean).powi(2))
            .sum::<f64>()
            / valid_idx.len() as f64)
            .sqrt();
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert!((std - 1.0).abs() < 1e-6, "std {std}");
    }

    #[test]
    fn masked_minibatches_cover_valid_exactly_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(5..120);
            let valids: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let buffer = synthetic_buffer(
                &vec![0.0; n],
                &vec![0.0; n],
                &vec![false; n],
                &valids,
                0.0,
            );
            let n_valid = buffer.valid_indices().len();
            if n_valid == 0 {
                assert!(matches!(
                    masked_minibatches(&buffer, 8, &mut rng),
                    Err(PpoError::NoValidStates)
                ));
                continue;
            }
            let mbs = masked_minibatches(&buffer, 8, &mut rng).unwrap();
            let mut seen = std::collections::HashSet::new();
            for mb in &mbs {
                for &i in mb {
                    assert!(buffer.transitions[i].valid, "sampled invalid index {i}");
                    assert!(seen.insert(i), "index {i} sampled twice");
                }
            }
            assert_eq!(seen.len(), n_valid);
        }
    }

    fn bandit_trainer(seed: u64, ppo: PpoConfig) -> Trainer<ContextualBanditEnv> {
        let envs: Vec<ContextualBanditEnv> = (0..ppo.num_envs)
            .map(|i| ContextualBanditEnv::new(seed + i as u64))
            .collect();
        Trainer::new(tiny_net(), ppo, envs, seed).unwrap()
    }

    fn bandit_ppo() -> PpoConfig {
        PpoConfig {
            num_envs: 32,
            rollout_len: 1,
            minibatch_size: 32,
            epochs: 4,
            learning_rate: 0.05,
            entropy_coef: 0.003,
            ..PpoConfig::default()
        }
    }

    #[test]
    fn collect_rollout_shape_and_logprob_recomputation() {
        let mut trainer = bandit_trainer(11, bandit_ppo());
        let (_, buffer) = trainer.train_iteration_with_buffer().unwrap();
        assert_eq!(buffer.len(), 32);
        assert_eq!(buffer.num_envs, 32);
        // Recorded log-probs must match recomputation from stored pairs.
        // (Parameters changed after the update, so recompute with a fresh
        // trainer at the same seed instead.)
        let fresh = bandit_trainer(11, bandit_ppo());
        for tr in &buffer.transitions {
            let input = prepare_actor_input(&fresh.net, &tr.observation, &fresh.obs_norm).unwrap();
            let out = crate::nn::policy_forward(&fresh.net, &fresh.actor, &input);
            let (lp, _) = out.log_prob_and_entropy(&tr.action).unwrap();
            assert!((lp - tr.log_prob).abs() < 1e-12, "{lp} vs {}", tr.log_prob);
        }
    }

    #[test]
    fn collect_rollout_is_deterministic() {
        let run = || {
            let mut trainer = bandit_trainer(21, bandit_ppo());
            let (_, buffer) = trainer.train_iteration_with_buffer().unwrap();
            buffer.to_bytes()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_advantages_move_policy_only_through_entropy() {
        let net = tiny_net();
        let ppo = PpoConfig {
            entropy_coef: 0.0,
            ..PpoConfig::default()
        };
        let (mut actor, mut critic) = init_parameters(&net, 31).unwrap();
        let actor_before = actor.clone();
        let critic_before = critic.clone();
        let mut opt = OptState::new(&actor, &critic);

        let n = 16;
        let mut buffer = synthetic_buffer(
            &vec![0.5; n],
            &vec![0.1; n],
            &vec![false; n],
            &vec![true; n],
            0.0,
        );
        compute_gae(&mut buffer, &ppo).unwrap();
        for a in &mut buffer.advantages {
            *a = 0.0;
        }
        let prep = prepare_buffer(
            &net,
            &buffer,
            &RunningNorm::new(net.map_stats_dim),
            &RunningNorm::new(net.privileged_extra_dim),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        ppo_update(
            &net,
            &ppo,
            &mut actor,
            &mut critic,
            &mut opt,
            &buffer,
            &prep,
            &mut rng,
            ExecMode::Sequential,
        )
        .unwrap();
        // Policy untouched (zero surrogate gradient, no entropy bonus);
        // critic moved (value regression is active).
        assert_eq!(actor, actor_before);
        assert_ne!(critic, critic_before);
    }

    #[test]
    fn clip_disabled_single_epoch_equals_vanilla_policy_gradient() {
        // With a huge clip range and parameters at the sampling point
        // (ratio = 1), the surrogate gradient equals the vanilla
        // policy-gradient estimator -mean(A * grad log pi).
        let net = tiny_net();
        let ppo = PpoConfig {
            clip_epsilon: 1e9,
            value_coef: 0.0,
            entropy_coef: 0.0,
            ..PpoConfig::default()
        };
        let (actor, critic) = init_parameters(&net, 41).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);

        let n = 12;
        let obs_norm = RunningNorm::new(net.map_stats_dim);
        let mut prep = PreparedBuffer {
            actor_inputs: Vec::new(),
            critic_inputs: Vec::new(),
            actions: Vec::new(),
            old_log_probs: Vec::new(),
            advantages: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            returns: vec![0.0; n],
        };
        for _ in 0..n {
            let n_kp = rng.gen_range(0..6);
            let keypoints = (0..n_kp)
                .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen_range(0.5..3.0)])
                .collect();
            let mut map_stats = [0.0; MAP_STATS_DIM];
            for v in &mut map_stats {
                *v = rng.gen_range(-1.0..1.0);
            }
            let obs = Observation {
                keypoints,
                map_stats,
            };
            let input = prepare_actor_input(&net, &obs, &obs_norm).unwrap();
            let action = Action::new(rng.gen_bool(0.5), rng.gen_range(0..5));
            let out = crate::nn::policy_forward(&net, &actor, &input);
            let (lp, _) = out.log_prob_and_entropy(&action).unwrap();
            let mut stats = input.stats.clone();
            stats.extend(std::iter::repeat(0.0).take(net.privileged_extra_dim));
            prep.critic_inputs.push(NetInput {
                keypoints: input.keypoints.clone(),
                stats,
            });
            prep.actor_inputs.push(input);
            prep.actions.push(action);
            prep.old_log_probs.push(lp);
        }

        let idx: Vec<usize> = (0..n).collect();
        let chunk = chunk_loss_and_grads(&net, &ppo, &actor, &critic, &prep, &idx).unwrap();

        // Vanilla PG gradient of -sum(A * log pi).
        let mut g = Graph::new();
        let mut slot = 0;
        let nodes = bind_actor(&mut g, &actor, &mut slot);
        let (kf, gs) = actor_logits(&mut g, &nodes, &net, &prep.actor_inputs);
        let lp = joint_log_prob(&mut g, kf, gs, &prep.actions);
        let adv = g.constant(Tensor::from_vec(n, 1, prep.advantages.clone()));
        let weighted = g.mul_elem(lp, adv);
        let mean = g.mean_all(weighted);
        let loss = g.scale(mean, -(n as f64));
        let pg_grads = g.backward(loss, slot).unwrap();

        let n_actor = actor.tensors().len();
        for s in 0..n_actor {
            let a = chunk.grads[s].as_ref().unwrap();
            let b = pg_grads[s].as_ref().unwrap();
            for (x, y) in a.data.iter().zip(b.data.iter()) {
                assert!((x - y).abs() < 1e-8, "slot {s}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn repeated_positive_advantage_drives_action_probability_up() {
        // Synthetic bandit buffer: keyframe=true always has advantage +1,
        // keyframe=false advantage -1. After 50 updates the policy should
        // strongly prefer keyframe=true on the blank observation.
        let net = tiny_net();
        let ppo = PpoConfig {
            minibatch_size: 16,
            epochs: 1,
            learning_rate: 0.05,
            entropy_coef: 0.001,
            value_coef: 0.0,
            ..PpoConfig::default()
        };
        let (mut actor, mut critic) = init_parameters(&net, 51).unwrap();
        let mut opt = OptState::new(&actor, &critic);
        let obs_norm = RunningNorm::new(net.map_stats_dim);
        let priv_norm = RunningNorm::new(net.privileged_extra_dim);
        let blank = Observation {
            keypoints: vec![],
            map_stats: [0.0; MAP_STATS_DIM],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);

        for _ in 0..50 {
            let n = 16;
            let mut buffer = synthetic_buffer(
                &vec![0.0; n],
                &vec![0.0; n],
                &vec![true; n],
                &vec![true; n],
                0.0,
            );
            let input = prepare_actor_input(&net, &blank, &obs_norm).unwrap();
            let out = crate::nn::policy_forward(&net, &actor, &input);
            for tr in buffer.transitions.iter_mut() {
                let (action, lp) = out.sample(&mut rng);
                tr.action = action;
                tr.log_prob = lp;
            }
            compute_gae(&mut buffer, &ppo).unwrap();
            for (i, tr) in buffer.transitions.iter().enumerate() {
                buffer.advantages[i] = if tr.action.keyframe { 1.0 } else { -1.0 };
                buffer.returns[i] = 0.0;
            }
            let prep = prepare_buffer(&net, &buffer, &obs_norm, &priv_norm).unwrap();
            ppo_update(
                &net,
                &ppo,
                &mut actor,
                &mut critic,
                &mut opt,
                &buffer,
                &prep,
                &mut rng,
                ExecMode::Sequential,
            )
            .unwrap();
        }

        let input = prepare_actor_input(&net, &blank, &obs_norm).unwrap();
        let out = crate::nn::policy_forward(&net, &actor, &input);
        let p = out.keyframe_probabilities();
        assert!(p[1] > 0.9, "keyframe probability only {}", p[1]);
    }

    #[test]
    fn single_update_keeps_kl_small() {
        // Default (conservative) learning rate: one update stays well
        // inside the clip region.
        let ppo = PpoConfig {
            num_envs: 32,
            rollout_len: 1,
            minibatch_size: 32,
            epochs: 4,
            ..PpoConfig::default()
        };
        let mut trainer = bandit_trainer(61, ppo);
        let row = trainer.train_iteration().unwrap();
        assert!(row.approx_kl < 0.05, "approx_kl {}", row.approx_kl);
        assert!(row.approx_kl >= 0.0);
    }

    #[test]
    fn non_finite_advantage_restores_parameters() {
        let net = tiny_net();
        let ppo = PpoConfig::default();
        let (mut actor, mut critic) = init_parameters(&net, 71).unwrap();
        let mut opt = OptState::new(&actor, &critic);
        let before = (actor.clone(), critic.clone(), opt.clone());

        let n = 8;
        let mut buffer = synthetic_buffer(
            &vec![0.1; n],
            &vec![0.0; n],
            &vec![false; n],
            &vec![true; n],
            0.0,
        );
        compute_gae(&mut buffer, &ppo).unwrap();
        buffer.advantages[3] = f64::NAN;
        let prep = prepare_buffer(
            &net,
            &buffer,
            &RunningNorm::new(net.map_stats_dim),
            &RunningNorm::new(net.privileged_extra_dim),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let err = ppo_update(
            &net,
            &ppo,
            &mut actor,
            &mut critic,
            &mut opt,
            &buffer,
            &prep,
            &mut rng,
            ExecMode::Sequential,
        )
        .unwrap_err();
        assert!(matches!(err, PpoError::NonFiniteLoss));
        assert_eq!(actor, before.0);
        assert_eq!(critic, before.1);
        assert_eq!(opt, before.2);
    }

    #[test]
    fn gradient_clip_bounds_global_norm() {
        // Huge advantages force a clip; verify the applied update norm is
        // bounded by learning_rate * max_grad_norm on the first minibatch
        // (velocities start at zero, so the step is lr * clipped grad).
        let net = tiny_net();
        let ppo = PpoConfig {
            epochs: 1,
            minibatch_size: 64,
            momentum: 0.0,
            ..PpoConfig::default()
        };
        let (mut actor, mut critic) = init_parameters(&net, 81).unwrap();
        let before = (actor.clone(), critic.clone());
        let mut opt = OptState::new(&actor, &critic);
        let n = 16;
        let mut buffer = synthetic_buffer(
            &vec![1.0; n],
            &vec![0.0; n],
            &vec![false; n],
            &vec![true; n],
            0.0,
        );
        compute_gae(&mut buffer, &ppo).unwrap();
        for a in &mut buffer.advantages {
            *a = 1e6;
        }
        for r in &mut buffer.returns {
            *r = 1e6;
        }
        let prep = prepare_buffer(
            &net,
            &buffer,
            &RunningNorm::new(net.map_stats_dim),
            &RunningNorm::new(net.privileged_extra_dim),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        ppo_update(
            &net,
            &ppo,
            &mut actor,
            &mut critic,
            &mut opt,
            &buffer,
            &prep,
            &mut rng,
            ExecMode::Sequential,
        )
        .unwrap();
        let step_norm: f64 = actor
            .tensors()
            .into_iter()
            .chain(critic.tensors())
            .zip(before.0.tensors().into_iter().chain(before.1.tensors()))
            .map(|(after, b)| {
                after
                    .data
                    .iter()
                    .zip(b.data.iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt();
        let bound = ppo.learning_rate * ppo.max_grad_norm;
        assert!(
            step_norm <= bound * (1.0 + 1e-9),
            "step norm {step_norm} exceeds {bound}"
        );
        assert!(step_norm > 0.5 * bound, "clip should be active: {step_norm}");
    }

    #[test]
    fn bandit_training_learns_the_context() {
        let mut trainer = bandit_trainer(91, bandit_ppo());
        for _ in 0..150 {
            trainer.train_iteration().unwrap();
        }
        // Greedy accuracy over both contexts.
        let mut env = ContextualBanditEnv::new(12345);
        let mut correct = 0;
        let total = 200;
        for s in 0..total {
            let obs = env.reset(s as u64);
            let input = prepare_actor_input(&trainer.net, &obs, &trainer.obs_norm).unwrap();
            let out = crate::nn::policy_forward(&trainer.net, &trainer.actor, &input);
            let action = out.greedy();
            let r = env.step(&action).unwrap();
            if r.reward > 0.5 {
                correct += 1;
            }
        }
        let final_correct = correct as f64 / total as f64;
        assert!(
            final_correct >= 0.95,
            "greedy accuracy {final_correct} below 0.95"
        );
    }

    #[test]
    fn trainer_resume_reproduces_uninterrupted_run() {
        let ppo = PpoConfig {
            num_envs: 4,
            rollout_len: 30,
            minibatch_size: 32,
            epochs: 2,
            learning_rate: 0.01,
            ..PpoConfig::default()
        };
        let make = || -> Trainer<SimEnv> {
            let env_cfg = EnvConfig {
                episode_length: 40,
                ..EnvConfig::default()
            };
            let envs: Vec<SimEnv> = (0..4).map(|_| SimEnv::new(env_cfg.clone()).unwrap()).collect();
            Trainer::new(tiny_net(), ppo.clone(), envs, 1234).unwrap()
        };

        // Uninterrupted: 4 iterations.
        let mut full = make();
        let mut full_rows = Vec::new();
        for _ in 0..4 {
            full_rows.push(full.train_iteration().unwrap());
        }

        // Interrupted: 2 iterations, save, load, 2 more.
        let mut first = make();
        for _ in 0..2 {
            first.train_iteration().unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trainer.state");
        first.save_state(&path).unwrap();
        let mut resumed: Trainer<SimEnv> = Trainer::load_state(&path).unwrap();
        let mut resumed_rows = Vec::new();
        for _ in 0..2 {
            resumed_rows.push(resumed.train_iteration().unwrap());
        }

        for (a, b) in full_rows[2..].iter().zip(resumed_rows.iter()) {
            assert_eq!(a.iteration, b.iteration);
            assert_eq!(a.mean_return.to_bits(), b.mean_return.to_bits());
            assert_eq!(a.policy_loss.to_bits(), b.policy_loss.to_bits());
            assert_eq!(a.approx_kl.to_bits(), b.approx_kl.to_bits());
        }
        let ck_full = full.checkpoint().to_bytes().unwrap();
        let ck_resumed = resumed.checkpoint().to_bytes().unwrap();
        assert_eq!(ck_full, ck_resumed);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_and_sequential_training_match_bitwise() {
        let ppo = PpoConfig {
            num_envs: 4,
            rollout_len: 25,
            minibatch_size: 48,
            epochs: 2,
            learning_rate: 0.01,
            ..PpoConfig::default()
        };
        let make = |mode: ExecMode| -> Trainer<SimEnv> {
            let env_cfg = EnvConfig {
                episode_length: 40,
                ..EnvConfig::default()
            };
            let envs: Vec<SimEnv> = (0..4).map(|_| SimEnv::new(env_cfg.clone()).unwrap()).collect();
            let mut t = Trainer::new(tiny_net(), ppo.clone(), envs, 777).unwrap();
            t.mode = mode;
            t
        };
        let mut seq = make(ExecMode::Sequential);
        let mut par = make(ExecMode::Parallel);
        for _ in 0..3 {
            let (row_s, buf_s) = seq.train_iteration_with_buffer().unwrap();
            let (row_p, buf_p) = par.train_iteration_with_buffer().unwrap();
            assert_eq!(buf_s.to_bytes(), buf_p.to_bytes());
            assert_eq!(row_s.policy_loss.to_bits(), row_p.policy_loss.to_bits());
            assert_eq!(row_s.mean_return.to_bits(), row_p.mean_return.to_bits());
        }
        assert_eq!(
            seq.checkpoint().to_bytes().unwrap(),
            par.checkpoint().to_bytes().unwrap()
        );
    }

    #[test]
    fn smoke_train_emits_rows_with_stable_csv() {
        let ppo = PpoConfig {
            num_envs: 2,
            rollout_len: 12,
            minibatch_size: 16,
            epochs: 2,
            ..PpoConfig::default()
        };
        let env_cfg = EnvConfig {
            episode_length: 30,
            ..EnvConfig::default()
        };
        let envs: Vec<SimEnv> = (0..2).map(|_| SimEnv::new(env_cfg.clone()).unwrap()).collect();
        let mut trainer = Trainer::new(tiny_net(), ppo, envs, 9).unwrap();
        assert_eq!(METRICS_HEADER.split(',').count(), 10);
        for i in 0..10 {
            let row = trainer.train_iteration().unwrap();
            assert_eq!(row.iteration, i + 1);
            let csv = row.to_csv();
            assert_eq!(csv.split(',').count(), 10);
            // All numeric fields finite.
            assert!(csv.split(',').all(|f| !f.contains("NaN") && !f.contains("inf")));
        }
    }

    #[test]
    fn csv_formatting_is_nine_significant_digits() {
        assert_eq!(fmt9(0.0), "0.00000000e0");
        assert_eq!(fmt9(1.0), "1.00000000e0");
        assert_eq!(fmt9(-0.25), "-2.50000000e-1");
        let out = PolicyOutput {
            keyframe_logits: [0.0; 2],
            gridsize_logits: [0.0; 5],
        };
        let (lp, ent) = out.log_prob_and_entropy(&Action::new(false, 0)).unwrap();
        assert!((lp + ent).abs() < 1e-12); // uniform: lp = -(ln2+ln5) = -H
    }
}

//! A fixed-size batch of independent environments stepped together.
//!
//! Each environment owns its RNG, so batch results are independent of the
//! execution mode; `ExecMode::Parallel` fans the per-environment work out
//! over a thread pool and collects results in index order. Environments that
//! finish an episode are reset in place with a fresh seed derived from
//! (master seed, env index, episode counter), and the returned `StepResult`
//! keeps `done = true` while its observation already comes from the new
//! episode — the convention rollout collection expects.

use super::{Action, EnvError, Environment, Observation, PrivilegedObservation, StepResult};
use crate::exec::ExecMode;
use serde::{Deserialize, Serialize};

/// SplitMix64 finalizer; decorrelates seeds that differ in one bit.
pub fn mix_seed(master: u64, env_index: u64, episode: u64) -> u64 {
    let mut z = master
        .wrapping_add(env_index.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(episode.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VecEnv<E> {
    envs: Vec<E>,
    master_seed: u64,
    /// Episodes started per environment, drives reseed derivation.
    episode_counters: Vec<u64>,
}

impl<E: Environment> VecEnv<E> {
    pub fn new(envs: Vec<E>, master_seed: u64) -> Self {
        let n = envs.len();
        Self {
            envs,
            master_seed,
            episode_counters: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn envs(&self) -> &[E] {
        &self.envs
    }

    /// Starts episode 0 in every environment with derived seeds.
    pub fn reset_all(&mut self, mode: ExecMode) -> Vec<Observation> {
        let master = self.master_seed;
        for c in &mut self.episode_counters {
            *c = 1;
        }
        let work: Vec<(usize, &mut E)> = self.envs.iter_mut().enumerate().collect();
        mode.map(work, |(i, env)| env.reset(mix_seed(master, i as u64, 0)))
    }

    /// Steps every environment with its own action. Finished episodes are
    /// reset in place; their result keeps `done = true` with the fresh
    /// episode's first observation.
    pub fn step_all(&mut self, actions: &[Action], mode: ExecMode) -> Result<Vec<StepResult>, EnvError> {
        if actions.len() != self.envs.len() {
            return Err(EnvError::LengthMismatch {
                got: actions.len(),
                expected: self.envs.len(),
            });
        }
        let master = self.master_seed;
        let work: Vec<(usize, &mut E, &Action, &mut u64)> = self
            .envs
            .iter_mut()
            .zip(actions.iter())
            .zip(self.episode_counters.iter_mut())
            .enumerate()
            .map(|(i, ((env, action), counter))| (i, env, action, counter))
            .collect();
        let results = mode.map(work, |(i, env, action, counter)| {
            let mut result = env.step(action)?;
            if result.done {
                let seed = mix_seed(master, i as u64, *counter);
                *counter += 1;
                result.observation = env.reset(seed);
                result.privileged_observation = env.privileged_observation();
            }
            Ok(result)
        });
        results.into_iter().collect()
    }

    pub fn privileged_observations(&self) -> Vec<PrivilegedObservation> {
        self.envs.iter().map(|e| e.privileged_observation()).collect()
    }
}

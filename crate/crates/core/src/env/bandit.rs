//! A one-step contextual bandit speaking the `Environment` interface.
//!
//! Each episode draws a context bit, exposes it in the observation's map
//! stats (the keypoint set stays empty, exercising the encoder's zero-input
//! path), and pays reward 1 when the keyframe action matches the bit. The
//! optimal policy is trivially readable, which makes this a fast smoke test
//! for the full policy-gradient plumbing.

use super::{
    Action, EnvError, Environment, Observation, PrivilegedObservation, StepInfo, StepResult,
    VOMode, FUTURE_HORIZON, MAP_STATS_DIM,
};
use crate::geometry::Pose;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextualBanditEnv {
    rng: ChaCha8Rng,
    context: bool,
    done: bool,
}

impl ContextualBanditEnv {
    pub fn new(seed: u64) -> Self {
        let mut env = Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            context: false,
            done: true,
        };
        env.reset(seed);
        env
    }

    fn observation_now(&self) -> Observation {
        let mut map_stats = [0.0; MAP_STATS_DIM];
        map_stats[0] = f64::from(self.context);
        Observation {
            keypoints: Vec::new(),
            map_stats,
        }
    }
}

impl Environment for ContextualBanditEnv {
    fn reset(&mut self, seed: u64) -> Observation {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.context = self.rng.gen_bool(0.5);
        self.done = false;
        self.observation_now()
    }

    fn observation(&self) -> Observation {
        self.observation_now()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        if self.done {
            return Err(EnvError::SteppedAfterDone);
        }
        self.done = true;
        let reward = f64::from(action.keyframe == self.context);
        Ok(StepResult {
            observation: self.observation_now(),
            privileged_observation: self.privileged_observation(),
            reward,
            done: true,
            valid: true,
            info: StepInfo {
                ground_truth: Pose::identity(),
                estimated: Some(Pose::identity()),
                mode: VOMode::Tracking,
                keyframe_count: usize::from(action.keyframe),
                e_tran: None,
                n_tracked: 0,
            },
        })
    }

    fn privileged_observation(&self) -> PrivilegedObservation {
        PrivilegedObservation {
            observation: self.observation_now(),
            e_tran: 0.0,
            future_motion: [0.0; 2 * FUTURE_HORIZON],
        }
    }
}

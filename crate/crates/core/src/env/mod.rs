//! The decision environment: observation/action types, the environment
//! trait, the stochastic visual-odometry simulator, a vectorized wrapper,
//! and a one-step bandit used for training sanity checks.

pub mod bandit;
pub mod sim;
pub mod vec;

pub use bandit::ContextualBanditEnv;
pub use sim::{EnvConfig, SimEnv, RESET_GRID_INDEX};
pub use vec::VecEnv;

use crate::geometry::Pose;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Grid sizes (virtual pixels per bucketing cell) selectable by the agent.
pub const GRID_SIZES: [u32; 5] = [20, 25, 30, 35, 40];

/// Length of the fixed map-statistics vector in every observation.
pub const MAP_STATS_DIM: usize = 12;

/// Future steps whose ground-truth motion the critic may see.
pub const FUTURE_HORIZON: usize = 5;

/// Extra scalars in a privileged observation: e_tran plus
/// (translation, rotation) magnitudes for each future step.
pub const PRIVILEGED_EXTRA_DIM: usize = 1 + 2 * FUTURE_HORIZON;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("step called on a terminated environment")]
    SteppedAfterDone,
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("got {got} actions for {expected} environments")]
    LengthMismatch { got: usize, expected: usize },
}

/// Tracker state machine. `Initializing` only occurs inside `reset`;
/// the agent always acts from `Tracking` or `Relocalizing`, and `Lost`
/// terminates the episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VOMode {
    Initializing,
    Tracking,
    Relocalizing,
    Lost,
}

/// What the policy sees each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// Tracked keypoints as (u, v, depth): normalized image coordinates in
    /// [0,1] plus depth in meters.
    pub keypoints: Vec<[f64; 3]>,
    /// Fixed-size summary: relative pose to the newest keyframe (3 + 1),
    /// relative pose to the oldest keyframe in the window (3 + 1),
    /// normalized keypoint count, normalized frames since last keyframe,
    /// normalized grid size, previous keyframe action.
    pub map_stats: [f64; MAP_STATS_DIM],
}

/// Observation plus ground-truth-derived context for the critic only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivilegedObservation {
    pub observation: Observation,
    /// Current sliding-window error (0 when no window is available).
    pub e_tran: f64,
    /// Interleaved (translation norm, rotation angle) of the next
    /// [`FUTURE_HORIZON`] ground-truth steps, zero-padded at episode end.
    pub future_motion: [f64; 2 * FUTURE_HORIZON],
}

impl PrivilegedObservation {
    /// The critic-only input block: window error followed by future motion,
    /// [`PRIVILEGED_EXTRA_DIM`] values in total.
    pub fn privileged_extras(&self) -> Vec<f64> {
        let mut extras = Vec::with_capacity(PRIVILEGED_EXTRA_DIM);
        extras.push(self.e_tran);
        extras.extend_from_slice(&self.future_motion);
        extras
    }
}

/// One decision: keyframe yes/no and the bucketing grid size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Action {
    pub keyframe: bool,
    /// Index into [`GRID_SIZES`].
    pub grid_size_index: usize,
}

impl Action {
    pub fn new(keyframe: bool, grid_size_index: usize) -> Self {
        assert!(grid_size_index < GRID_SIZES.len(), "grid index out of range");
        Self {
            keyframe,
            grid_size_index,
        }
    }

    pub fn grid_size(&self) -> u32 {
        GRID_SIZES[self.grid_size_index]
    }
}

/// Side-channel diagnostics for logging and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub ground_truth: Pose,
    /// Present only while the tracker produced an estimate this step.
    pub estimated: Option<Pose>,
    pub mode: VOMode,
    pub keyframe_count: usize,
    /// Sliding-window error when one was computed this step.
    pub e_tran: Option<f64>,
    pub n_tracked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    /// Observation after the step; when `done`, the first observation of
    /// the auto-reset episode in vectorized use (the terminal state is not
    /// re-observed — continuing-rollout convention).
    pub observation: Observation,
    pub privileged_observation: PrivilegedObservation,
    pub reward: f64,
    pub done: bool,
    /// True exactly when the mode before this step was `Tracking`.
    pub valid: bool,
    pub info: StepInfo,
}

/// Common surface of the simulator and test environments, so the training
/// stack is generic over both.
pub trait Environment: Send {
    /// Starts a fresh episode; deterministic in `seed`.
    fn reset(&mut self, seed: u64) -> Observation;
    fn step(&mut self, action: &Action) -> Result<StepResult, EnvError>;
    /// The agent's view of the current state (before stepping).
    fn observation(&self) -> Observation;
    /// The privileged view of the current state (before stepping).
    fn privileged_observation(&self) -> PrivilegedObservation;
}

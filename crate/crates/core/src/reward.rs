//! Training reward: a sliding-window aligned position error combined with a
//! keyframe cost.
//!
//! The error term aligns the first `align_count` estimated poses of a
//! five-pose window onto ground truth with a similarity transform, applies
//! that transform to the newest estimated pose, and measures its distance to
//! the newest ground-truth pose. The reward is then
//! `lambda1 * max(clip_floor, error_offset - e_tran) - lambda2 * a_keyframe`.

use crate::geometry::{umeyama_align, GeometryError, Pose};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    /// The alignment poses are collinear or too few; the caller substitutes
    /// the configured fallback reward.
    #[error("degenerate window: {0}")]
    DegenerateWindow(String),
    #[error("window holds {got} poses, expected {expected}")]
    WrongLength { got: usize, expected: usize },
}

/// Weights and shape of the reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Weight of the clipped position-error term.
    pub lambda1: f64,
    /// Per-keyframe cost.
    pub lambda2: f64,
    /// Lower clip of `error_offset - e_tran`.
    pub clip_floor: f64,
    /// Error level (meters) at which the position term crosses zero.
    pub error_offset: f64,
    /// Poses per evaluation window.
    pub window_size: usize,
    /// Leading poses used for alignment.
    pub align_count: usize,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.01,
            lambda2: 5e-3,
            clip_floor: -1.0,
            error_offset: 0.2,
            window_size: 5,
            align_count: 3,
        }
    }
}

impl RewardConfig {
    /// Keyframes are free; only the position error matters.
    pub fn no_penalty() -> Self {
        Self {
            lambda2: 0.0,
            ..Self::default()
        }
    }

    /// Half again the default keyframe cost.
    pub fn high_penalty() -> Self {
        Self {
            lambda2: 7.5e-3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.align_count < 3 {
            return Err(format!("align_count {} < 3", self.align_count));
        }
        if self.window_size < self.align_count {
            return Err(format!(
                "window_size {} < align_count {}",
                self.window_size, self.align_count
            ));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err("lambda weights must be non-negative".into());
        }
        Ok(())
    }

    /// Reward substituted when the estimator is in an invalid state: the
    /// worst clipped position term, with no keyframe charge.
    pub fn invalid_state_reward(&self) -> f64 {
        self.lambda1 * self.clip_floor
    }
}

/// Matched estimated/ground-truth poses over one evaluation window.
#[derive(Debug, Clone)]
pub struct PoseWindow {
    pub estimated: Vec<Pose>,
    pub ground_truth: Vec<Pose>,
}

impl PoseWindow {
    pub fn new(
        estimated: Vec<Pose>,
        ground_truth: Vec<Pose>,
        window_size: usize,
    ) -> Result<Self, RewardError> {
        if estimated.len() != window_size {
            return Err(RewardError::WrongLength {
                got: estimated.len(),
                expected: window_size,
            });
        }
        if ground_truth.len() != window_size {
            return Err(RewardError::WrongLength {
                got: ground_truth.len(),
                expected: window_size,
            });
        }
        Ok(Self {
            estimated,
            ground_truth,
        })
    }
}

/// Aligned position error of the newest pose in the window (e_tran, meters).
pub fn sliding_window_error(window: &PoseWindow, config: &RewardConfig) -> Result<f64, RewardError> {
    if window.estimated.len() != config.window_size || window.ground_truth.len() != config.window_size
    {
        return Err(RewardError::WrongLength {
            got: window.estimated.len().min(window.ground_truth.len()),
            expected: config.window_size,
        });
    }
    let k = config.align_count;
    let src: Vec<_> = window.estimated[..k].iter().map(|p| p.translation).collect();
    let dst: Vec<_> = window.ground_truth[..k]
        .iter()
        .map(|p| p.translation)
        .collect();
    let transform = umeyama_align(&src, &dst).map_err(|e| match e {
        GeometryError::DegenerateInput(msg) => RewardError::DegenerateWindow(msg),
        other => RewardError::DegenerateWindow(other.to_string()),
    })?;
    let last_est = window.estimated.last().unwrap().translation;
    let last_gt = window.ground_truth.last().unwrap().translation;
    Ok((transform.apply_point(&last_est) - last_gt).norm())
}

/// The scalar reward for one step.
pub fn reward(e_tran: f64, keyframe_taken: bool, config: &RewardConfig) -> f64 {
    let position_term = (config.error_offset - e_tran).max(config.clip_floor);
    config.lambda1 * position_term - config.lambda2 * f64::from(keyframe_taken)
}

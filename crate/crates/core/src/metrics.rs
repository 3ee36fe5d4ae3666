//! Trajectory-evaluation metrics: absolute translation error after
//! similarity alignment, sliding-distance-window relative errors with an
//! empirical CDF, percent error per traveled distance, and keyframe
//! velocity histograms.
//!
//! All functions are pure; trajectory pairs are first associated by nearest
//! timestamp within a tolerance, and unmatched poses are dropped.

use crate::geometry::{umeyama_align, GeometryError, SimilarityTransform, Trajectory};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default timestamp-association tolerance in seconds (half a frame at a
/// typical camera rate).
pub const ASSOCIATION_TOLERANCE: f64 = 0.02;

/// Default velocity bin widths for keyframe histograms.
pub const DEFAULT_TRANS_BIN_WIDTH: f64 = 0.25;
pub const DEFAULT_ANG_BIN_WIDTH: f64 = 0.25;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("only {found} timestamp associations, need at least 3")]
    NoAssociation { found: usize },
    #[error("ground-truth path shorter than the requested window")]
    NoWindows,
    #[error("ground-truth path length is zero")]
    ZeroLength,
    #[error("flag count {flags} does not match trajectory length {poses}")]
    LengthMismatch { flags: usize, poses: usize },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Absolute translation error after similarity alignment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AteResult {
    /// Root-mean-square of the post-alignment translation distances, meters.
    pub rmse: f64,
    /// Per-associated-pose translation distances, meters.
    pub per_pose_errors: Vec<f64>,
    /// The similarity transform that maps the estimate onto ground truth.
    pub alignment: SimilarityTransform,
}

/// Sliding-window relative-error distribution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RpeCdf {
    /// Window length along the ground-truth path, meters.
    pub window_length: f64,
    /// Per-window final-pose errors, sorted ascending, meters.
    pub errors: Vec<f64>,
    /// Empirical CDF: (error, fraction of windows with error <= this one).
    pub cdf_points: Vec<(f64, f64)>,
}

/// Keyframe counts per velocity bin. Bins are sparse: only occupied bins are
/// listed, keyed by their lower edge, sorted ascending.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyframeHistogram {
    pub translational_bins: Vec<(f64, usize)>,
    pub angular_bins: Vec<(f64, usize)>,
}

/// Pairs estimated with ground-truth poses by nearest timestamp.
///
/// Candidate pairs within `tolerance` seconds are ranked by |dt| and taken
/// greedily so that each pose appears in at most one pair (the standard
/// association scheme for VO benchmarks). Returns `(estimated_index,
/// ground_truth_index)` pairs sorted by estimated index.
pub fn associate(
    estimated: &Trajectory,
    ground_truth: &Trajectory,
    tolerance: f64,
) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    let gt_ts = ground_truth.timestamps();
    for (ei, ep) in estimated.iter().enumerate() {
        // Binary search for the insertion point, then check the neighbors.
        let pos = gt_ts.partition_point(|&t| t < ep.timestamp);
        let lo = pos.saturating_sub(1);
        let hi = (pos + 1).min(gt_ts.len());
        for (gi, &gt_time) in gt_ts.iter().enumerate().take(hi).skip(lo) {
            let dt = (gt_time - ep.timestamp).abs();
            if dt <= tolerance {
                candidates.push((dt, ei, gi));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut est_used = vec![false; estimated.len()];
    let mut gt_used = vec![false; ground_truth.len()];
    let mut pairs = Vec::new();
    for (_, ei, gi) in candidates {
        if !est_used[ei] && !gt_used[gi] {
            est_used[ei] = true;
            gt_used[gi] = true;
            pairs.push((ei, gi));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Fraction of ground-truth timestamps matched by the estimate — a
/// per-frame coverage diagnostic (brief estimator outages lower it).
pub fn association_coverage(
    estimated: &Trajectory,
    ground_truth: &Trajectory,
    tolerance: f64,
) -> f64 {
    if ground_truth.is_empty() {
        return 0.0;
    }
    associate(estimated, ground_truth, tolerance).len() as f64 / ground_truth.len() as f64
}

/// Fraction of ground-truth timestamps lying within the estimate's time
/// span. Evaluation treats a trajectory as completed when this reaches
/// 0.99: a tracker that recovers from brief relocalizations still spans the
/// sequence, while one that diverges early does not — the distinction
/// behind "-" entries in benchmark tables.
pub fn span_coverage(estimated: &Trajectory, ground_truth: &Trajectory) -> f64 {
    let (Some(first), Some(last)) = (
        estimated.poses().first().map(|p| p.timestamp),
        estimated.poses().last().map(|p| p.timestamp),
    ) else {
        return 0.0;
    };
    if ground_truth.is_empty() {
        return 0.0;
    }
    let covered = ground_truth
        .poses()
        .iter()
        .filter(|p| p.timestamp >= first && p.timestamp <= last)
        .count();
    covered as f64 / ground_truth.len() as f64
}

/// Absolute translation error: aligns the estimate onto ground truth with a
/// similarity transform over all associated positions, then reports the RMSE
/// of the remaining translation distances.
pub fn ate(estimated: &Trajectory, ground_truth: &Trajectory) -> Result<AteResult, MetricsError> {
    ate_with_tolerance(estimated, ground_truth, ASSOCIATION_TOLERANCE)
}

pub fn ate_with_tolerance(
    estimated: &Trajectory,
    ground_truth: &Trajectory,
    tolerance: f64,
) -> Result<AteResult, MetricsError> {
    let pairs = associate(estimated, ground_truth, tolerance);
    if pairs.len() < 3 {
        return Err(MetricsError::NoAssociation { found: pairs.len() });
    }
    let src: Vec<_> = pairs
        .iter()
        .map(|&(ei, _)| estimated.get(ei).unwrap().translation)
        .collect();
    let dst: Vec<_> = pairs
        .iter()
        .map(|&(_, gi)| ground_truth.get(gi).unwrap().translation)
        .collect();
    let alignment = umeyama_align(&src, &dst)?;
    let per_pose_errors: Vec<f64> = src
        .iter()
        .zip(dst.iter())
        .map(|(s, d)| (alignment.apply_point(s) - d).norm())
        .collect();
    let rmse = (per_pose_errors.iter().map(|e| e * e).sum::<f64>()
        / per_pose_errors.len() as f64)
        .sqrt();
    Ok(AteResult {
        rmse,
        per_pose_errors,
        alignment,
    })
}

/// Sliding-distance-window relative errors.
///
/// For every associated start index, the window extends forward to the first
/// index where the ground-truth path length (measured along associated
/// positions) reaches `window`. Each window is aligned with its own Umeyama
/// transform over all of its positions, and the error recorded is the
/// post-alignment distance of the final pose — mirroring the "error at the
/// current timestep" structure of the training signal. Windows with fewer
/// than 3 points or degenerate alignment are skipped. Windows slide by one
/// frame.
pub fn rpe_distance_windows(
    estimated: &Trajectory,
    ground_truth: &Trajectory,
    window: f64,
) -> Result<RpeCdf, MetricsError> {
    let pairs = associate(estimated, ground_truth, ASSOCIATION_TOLERANCE);
    if pairs.len() < 3 {
        return Err(MetricsError::NoAssociation { found: pairs.len() });
    }
    let est_pos: Vec<_> = pairs
        .iter()
        .map(|&(ei, _)| estimated.get(ei).unwrap().translation)
        .collect();
    let gt_pos: Vec<_> = pairs
        .iter()
        .map(|&(_, gi)| ground_truth.get(gi).unwrap().translation)
        .collect();

    // Cumulative ground-truth path length over associated positions.
    let mut cum = vec![0.0; gt_pos.len()];
    for i in 1..gt_pos.len() {
        cum[i] = cum[i - 1] + (gt_pos[i] - gt_pos[i - 1]).norm();
    }

    let mut errors = Vec::new();
    for start in 0..gt_pos.len() {
        let target = cum[start] + window;
        let end = match (start + 1..gt_pos.len()).find(|&j| cum[j] >= target) {
            Some(j) => j,
            None => break, // remaining starts reach even less path
        };
        if end - start + 1 < 3 {
            continue;
        }
        let src = &est_pos[start..=end];
        let dst = &gt_pos[start..=end];
        let transform = match umeyama_align(src, dst) {
            Ok(t) => t,
            Err(_) => continue,
        };
        errors.push((transform.apply_point(&src[src.len() - 1]) - dst[dst.len() - 1]).norm());
    }

    if errors.is_empty() {
        return Err(MetricsError::NoWindows);
    }
    errors.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = errors.len() as f64;
    let cdf_points = errors
        .iter()
        .enumerate()
        .map(|(i, &e)| (e, (i + 1) as f64 / n))
        .collect();
    Ok(RpeCdf {
        window_length: window,
        errors,
        cdf_points,
    })
}

/// ATE as a percentage of the total ground-truth path length.
pub fn ate_per_distance(
    estimated: &Trajectory,
    ground_truth: &Trajectory,
) -> Result<f64, MetricsError> {
    let length = ground_truth.path_length();
    if length <= 0.0 {
        return Err(MetricsError::ZeroLength);
    }
    Ok(100.0 * ate(estimated, ground_truth)?.rmse / length)
}

/// Histograms keyframe decisions by the ground-truth velocity at which they
/// were taken. Velocities come from finite differences between consecutive
/// poses, so the first frame carries no velocity and its flag is ignored.
pub fn keyframe_velocity_histogram(
    ground_truth: &Trajectory,
    keyframe_flags: &[bool],
    trans_bin_width: f64,
    ang_bin_width: f64,
) -> Result<KeyframeHistogram, MetricsError> {
    if keyframe_flags.len() != ground_truth.len() {
        return Err(MetricsError::LengthMismatch {
            flags: keyframe_flags.len(),
            poses: ground_truth.len(),
        });
    }
    if ground_truth.len() < 2 {
        return Err(MetricsError::LengthMismatch {
            flags: keyframe_flags.len(),
            poses: ground_truth.len(),
        });
    }
    assert!(trans_bin_width > 0.0 && ang_bin_width > 0.0);

    let mut trans: std::collections::BTreeMap<u64, usize> = std::collections::BTreeMap::new();
    let mut ang: std::collections::BTreeMap<u64, usize> = std::collections::BTreeMap::new();
    let poses = ground_truth.poses();
    for i in 1..poses.len() {
        if !keyframe_flags[i] {
            continue;
        }
        let dt = poses[i].timestamp - poses[i - 1].timestamp;
        let v = (poses[i].translation - poses[i - 1].translation).norm() / dt;
        let w = poses[i - 1].relative(&poses[i]).rotation_angle() / dt;
        *trans.entry((v / trans_bin_width).floor() as u64).or_insert(0) += 1;
        *ang.entry((w / ang_bin_width).floor() as u64).or_insert(0) += 1;
    }

    Ok(KeyframeHistogram {
        translational_bins: trans
            .into_iter()
            .map(|(k, c)| (k as f64 * trans_bin_width, c))
            .collect(),
        angular_bins: ang
            .into_iter()
            .map(|(k, c)| (k as f64 * ang_bin_width, c))
            .collect(),
    })
}

//! SE(3) pose algebra, trajectory containers, and similarity alignment.
//!
//! Poses store a translation and a unit quaternion; rotations are converted
//! to matrices only inside composition and alignment so that renormalization
//! stays cheap. Quaternions are canonicalized to w >= 0 on construction,
//! which removes the double-cover ambiguity from equality tests.

use nalgebra::{DMatrix, Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance of the rank test used to reject collinear point sets.
pub const RANK_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    /// Too few points or a collinear point set; alignment has no unique answer.
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    /// Paired inputs of different lengths.
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    /// Timestamps must be strictly increasing within a trajectory.
    #[error("non-monotonic timestamp at index {0}")]
    NonMonotonicTimestamp(usize),
}

/// A timestamped rigid transform: translation in meters plus a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub timestamp: f64,
    pub translation: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
}

/// Renormalizes and flips the quaternion so that w >= 0.
fn canonicalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    let mut inner = q.into_inner();
    inner.normalize_mut();
    if inner.w < 0.0 {
        inner = -inner;
    }
    UnitQuaternion::new_unchecked(inner)
}

impl Pose {
    pub fn new(timestamp: f64, translation: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Self {
            timestamp,
            translation,
            rotation: canonicalize(rotation),
        }
    }

    /// Identity pose at timestamp zero.
    pub fn identity() -> Self {
        Self::new(0.0, Vector3::zeros(), UnitQuaternion::identity())
    }

    /// Composition `a * b`: rotation `R_a * R_b`, translation `R_a * t_b + t_a`.
    /// The timestamp is taken from `b`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            other.timestamp,
            self.rotation * other.translation + self.translation,
            self.rotation * other.rotation,
        )
    }

    /// Inverse pose: conjugated rotation, translation `-R^-1 * t`.
    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose::new(self.timestamp, -(rot_inv * self.translation), rot_inv)
    }

    /// Expresses `other` in the frame of `self`: `compose(inverse(self), other)`.
    pub fn relative(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    /// Geodesic rotation angle in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        let q = self.rotation.quaternion();
        2.0 * q.imag().norm().atan2(q.w.abs())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }
}

/// An ordered pose sequence with strictly increasing timestamps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self { poses: Vec::new() }
    }

    /// Builds a trajectory, rejecting out-of-order timestamps.
    pub fn from_poses(poses: Vec<Pose>) -> Result<Self, GeometryError> {
        for i in 1..poses.len() {
            if poses[i].timestamp <= poses[i - 1].timestamp {
                return Err(GeometryError::NonMonotonicTimestamp(i));
            }
        }
        Ok(Self { poses })
    }

    /// Appends a pose, rejecting a timestamp at or before the current last.
    pub fn push(&mut self, pose: Pose) -> Result<(), GeometryError> {
        if let Some(last) = self.poses.last() {
            if pose.timestamp <= last.timestamp {
                return Err(GeometryError::NonMonotonicTimestamp(self.poses.len()));
            }
        }
        self.poses.push(pose);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Pose> {
        self.poses.get(index)
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Pose> {
        self.poses.iter()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.translation).collect()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.poses.iter().map(|p| p.timestamp).collect()
    }

    /// Sum of Euclidean distances between consecutive positions.
    pub fn path_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| (w[1].translation - w[0].translation).norm())
            .sum()
    }
}

/// Similarity transform `p -> s * R * p + t` from point-set alignment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: f64, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        assert!(scale > 0.0, "similarity scale must be positive");
        Self {
            scale,
            rotation: canonicalize(rotation),
            translation,
        }
    }

    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rot_inv = self.rotation.inverse();
        Self {
            scale: 1.0 / self.scale,
            rotation: canonicalize(rot_inv),
            translation: -(1.0 / self.scale) * (rot_inv * self.translation),
        }
    }
}

/// Least-squares similarity alignment of `source` onto `target`.
///
/// Returns the `(s, R, t)` minimizing the sum of squared distances
/// `sum_i || target_i - (s * R * source_i + t) ||^2` via the SVD closed form,
/// with the determinant-sign correction so that `det(R) = +1`. Scale
/// estimation is always enabled.
///
/// The point sets must have equal length, at least 3 points, and the source
/// points must not be collinear. Collinearity is detected with a scale-free
/// rank test on the centered source matrix: the set is rejected when its
/// second singular value is below [`RANK_TOLERANCE`] times the largest, i.e.
/// the rank must be at least 2. Planar sets (rank exactly 2, e.g. any
/// non-collinear triple) are accepted; the sign correction keeps the
/// rotation proper for them.
pub fn umeyama_align(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
) -> Result<SimilarityTransform, GeometryError> {
    if source.len() != target.len() {
        return Err(GeometryError::LengthMismatch {
            left: source.len(),
            right: target.len(),
        });
    }
    let n = source.len();
    if n < 3 {
        return Err(GeometryError::DegenerateInput(format!(
            "need at least 3 points, got {n}"
        )));
    }

    let inv_n = 1.0 / n as f64;
    let mean_src: Vector3<f64> = source.iter().sum::<Vector3<f64>>() * inv_n;
    let mean_dst: Vector3<f64> = target.iter().sum::<Vector3<f64>>() * inv_n;

    // Centered source matrix (n x 3) for the rank test.
    let centered_src = DMatrix::from_fn(n, 3, |i, j| source[i][j] - mean_src[j]);
    let sv = centered_src.singular_values();
    if sv[1] < RANK_TOLERANCE * sv[0] {
        return Err(GeometryError::DegenerateInput(
            "source points are collinear within rank tolerance".into(),
        ));
    }

    let mut sigma = Matrix3::zeros();
    let mut var_src = 0.0;
    for (s, d) in source.iter().zip(target.iter()) {
        let cs = s - mean_src;
        let cd = d - mean_dst;
        sigma += cd * cs.transpose();
        var_src += cs.norm_squared();
    }
    sigma *= inv_n;
    var_src *= inv_n;

    let svd = sigma.svd(true, true);
    let u = svd.u.expect("svd of 3x3 always yields u");
    let v_t = svd.v_t.expect("svd of 3x3 always yields v_t");
    let mut sign = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        sign[2] = -1.0;
    }
    let rotation_matrix = u * Matrix3::from_diagonal(&sign) * v_t;
    let rotation = UnitQuaternion::from_rotation_matrix(
        &nalgebra::Rotation3::from_matrix_unchecked(rotation_matrix),
    );

    let scale = svd.singular_values.dot(&sign) / var_src;
    if scale <= 0.0 || scale.is_nan() {
        return Err(GeometryError::DegenerateInput(format!(
            "non-positive estimated scale {scale}"
        )));
    }
    let translation = mean_dst - scale * (rotation * mean_src);

    Ok(SimilarityTransform::new(scale, rotation, translation))
}

/// Applies a similarity transform to every pose of a trajectory.
///
/// Translations map to `s * R * t_i + t`, rotations are left-multiplied by
/// `R`, timestamps are unchanged.
pub fn apply_transform(transform: &SimilarityTransform, trajectory: &Trajectory) -> Trajectory {
    let poses = trajectory
        .iter()
        .map(|p| {
            Pose::new(
                p.timestamp,
                transform.apply_point(&p.translation),
                transform.rotation * p.rotation,
            )
        })
        .collect();
    Trajectory { poses }
}

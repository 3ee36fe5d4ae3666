//! Trajectory file I/O: one pose per line, `timestamp tx ty tz qx qy qz qw`
//! (space-separated), `#` starts a comment line, blank lines are ignored.
//! Numbers are written in Rust's shortest round-trip form, so a write/read
//! cycle reproduces every pose bit-exactly.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use std::path::{Path, PathBuf};
use voctl_core::geometry::{Pose, Trajectory};

#[derive(Debug, thiserror::Error)]
pub enum TumError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Parses trajectory text. `path` is only used for error messages.
pub fn parse_tum(text: &str, path: &Path) -> Result<Trajectory, TumError> {
    let mut trajectory = Trajectory::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let fail = |message: String| TumError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(fail(format!(
                "expected 8 fields (timestamp tx ty tz qx qy qz qw), found {}",
                fields.len()
            )));
        }
        let mut values = [0.0f64; 8];
        for (i, field) in fields.iter().enumerate() {
            values[i] = field
                .parse::<f64>()
                .map_err(|_| fail(format!("field {} ({field:?}) is not a number", i + 1)))?;
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(fail("non-finite value".into()));
        }
        let quat = Quaternion::new(values[7], values[4], values[5], values[6]);
        if quat.norm() < 1e-12 {
            return Err(fail("zero-norm quaternion".into()));
        }
        // Already-unit quaternions are taken verbatim so that write/read
        // round-trips are bit-exact; anything else is normalized.
        let rotation = if (quat.norm_squared() - 1.0).abs() < 1e-9 {
            UnitQuaternion::new_unchecked(quat)
        } else {
            UnitQuaternion::from_quaternion(quat)
        };
        let pose = Pose::new(
            values[0],
            Vector3::new(values[1], values[2], values[3]),
            rotation,
        );
        trajectory
            .push(pose)
            .map_err(|_| fail("timestamp not strictly increasing".into()))?;
    }
    Ok(trajectory)
}

pub fn read_tum(path: &Path) -> Result<Trajectory, TumError> {
    let text = std::fs::read_to_string(path).map_err(|e| TumError::Read {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_tum(&text, path)
}

/// Renders a trajectory with the given comment lines (written first, each
/// prefixed with `# `).
pub fn render_tum(trajectory: &Trajectory, comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        out.push_str("# ");
        out.push_str(c);
        out.push('\n');
    }
    out.push_str("# timestamp tx ty tz qx qy qz qw\n");
    for pose in trajectory.iter() {
        let q = pose.rotation.quaternion();
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {}\n",
            pose.timestamp,
            pose.translation.x,
            pose.translation.y,
            pose.translation.z,
            q.i,
            q.j,
            q.k,
            q.w,
        ));
    }
    out
}

pub fn write_tum(
    path: &Path,
    trajectory: &Trajectory,
    comments: &[String],
) -> Result<(), TumError> {
    std::fs::write(path, render_tum(trajectory, comments)).map_err(|e| TumError::Write {
        path: path.to_path_buf(),
        source: e,
    })
}

//! Trajectory metrics: timestamp association, closed-form rigid alignment
//! of an estimate onto ground truth, ATE, and plain RMSE, plus TUM-format
//! trajectory I/O.
//!
//! Alignment is SE(3) without scale: the odometry carries metric scale from
//! the IMU, so a scale fit would mask errors rather than remove gauge.

use std::path::Path;

use thiserror::Error;

use crate::geometry::{Mat3, Quaternion, Vec3};

/// Association window: estimate and reference poses pair up only when their
/// timestamps differ by at most this many seconds.
pub const MAX_ASSOCIATION_DT: f64 = 0.01;

/// Minimum associated pairs for a meaningful alignment.
pub const MIN_ALIGNMENT_PAIRS: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("only {found} associated pose pairs; at least {required} required")]
    TooFewPairs { found: usize, required: usize },
    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("timestamps must increase: row {index} goes backward")]
    NonMonotonic { index: usize },
    #[error("trajectory file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Timestamped pose sequence with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub rows: Vec<(f64, Vec3, Quaternion)>,
}

impl Trajectory {
    pub fn new(rows: Vec<(f64, Vec3, Quaternion)>) -> Result<Self, EvalError> {
        for (i, pair) in rows.windows(2).enumerate() {
            if pair[1].0 <= pair[0].0 {
                return Err(EvalError::NonMonotonic { index: i + 1 });
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Parses TUM text: `timestamp tx ty tz qx qy qz qw` per line, `#`
    /// comments and blank lines skipped.
    pub fn from_tum_str(text: &str) -> Result<Self, EvalError> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<f64> = line
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>().map_err(|_| EvalError::Parse {
                        line: lineno + 1,
                        reason: format!("non-numeric field {v:?}"),
                    })
                })
                .collect::<Result<_, _>>()?;
            if cols.len() != 8 {
                return Err(EvalError::Parse {
                    line: lineno + 1,
                    reason: format!("expected 8 fields, found {}", cols.len()),
                });
            }
            rows.push((
                cols[0],
                Vec3::new(cols[1], cols[2], cols[3]),
                Quaternion::new(cols[7], cols[4], cols[5], cols[6]).normalized(),
            ));
        }
        Self::new(rows)
    }

    pub fn read_tum(path: &Path) -> Result<Self, EvalError> {
        Self::from_tum_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_tum_string(&self) -> String {
        let mut out = String::new();
        for (t, p, q) in &self.rows {
            out.push_str(&format!(
                "{:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
                t, p.x, p.y, p.z, q.x, q.y, q.z, q.w
            ));
        }
        out
    }

    pub fn write_tum(&self, path: &Path) -> Result<(), EvalError> {
        std::fs::write(path, self.to_tum_string())?;
        Ok(())
    }

    /// Applies `p ↦ R·p + t` to every pose (rotations composed on the left).
    pub fn transformed(&self, r: &Mat3, t: Vec3) -> Self {
        let q_r = Quaternion::from_rotation_matrix(r);
        Self {
            rows: self
                .rows
                .iter()
                .map(|(time, p, q)| (*time, r * p + t, crate::geometry::quat_multiply(&q_r, q)))
                .collect(),
        }
    }
}

impl From<&crate::estimator::TrajectoryEstimate> for Trajectory {
    fn from(est: &crate::estimator::TrajectoryEstimate) -> Self {
        Self {
            rows: est.poses.clone(),
        }
    }
}

/// Nearest-timestamp association within [`MAX_ASSOCIATION_DT`]: for each
/// estimate row, the closest reference row by time.
pub fn associate(est: &Trajectory, reference: &Trajectory) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    if reference.rows.is_empty() {
        return pairs;
    }
    let mut j = 0usize;
    for (i, (t, _, _)) in est.rows.iter().enumerate() {
        while j + 1 < reference.rows.len()
            && (reference.rows[j + 1].0 - t).abs() <= (reference.rows[j].0 - t).abs()
        {
            j += 1;
        }
        if (reference.rows[j].0 - t).abs() <= MAX_ASSOCIATION_DT {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Closed-form least-squares rigid fit: the (R, t) minimizing
/// `Σ ‖gt_i − (R·est_i + t)‖²` over paired points (Kabsch/Umeyama without
/// scale; reflections rejected via the determinant sign).
pub fn fit_rigid(est_points: &[Vec3], gt_points: &[Vec3]) -> (Mat3, Vec3) {
    assert_eq!(est_points.len(), gt_points.len());
    let n = est_points.len() as f64;
    let mean_est = est_points.iter().sum::<Vec3>() / n;
    let mean_gt = gt_points.iter().sum::<Vec3>() / n;

    let mut h = Mat3::zeros();
    for (a, b) in est_points.iter().zip(gt_points) {
        h += (a - mean_est) * (b - mean_gt).transpose();
    }
    let svd = nalgebra::SVD::new(h, true, true);
    let u = svd.u.expect("3x3 SVD always yields U");
    let vt = svd.v_t.expect("3x3 SVD always yields Vᵀ");
    let mut d = Mat3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * d * u.transpose();
    let t = mean_gt - r * mean_est;
    (r, t)
}

/// Associates by nearest timestamp and rigidly aligns the estimate onto the
/// reference. Fails below [`MIN_ALIGNMENT_PAIRS`] associated pairs.
pub fn associate_and_align(
    est: &Trajectory,
    reference: &Trajectory,
) -> Result<Trajectory, EvalError> {
    let pairs = associate(est, reference);
    if pairs.len() < MIN_ALIGNMENT_PAIRS {
        return Err(EvalError::TooFewPairs {
            found: pairs.len(),
            required: MIN_ALIGNMENT_PAIRS,
        });
    }
    let est_points: Vec<Vec3> = pairs.iter().map(|&(i, _)| est.rows[i].1).collect();
    let gt_points: Vec<Vec3> = pairs.iter().map(|&(_, j)| reference.rows[j].1).collect();
    let (r, t) = fit_rigid(&est_points, &gt_points);
    Ok(est.transformed(&r, t))
}

/// Absolute trajectory error: RMS 3-D position error over associated pairs.
/// The caller decides whether to align first.
pub fn ate(est: &Trajectory, reference: &Trajectory) -> Result<f64, EvalError> {
    let pairs = associate(est, reference);
    if pairs.is_empty() {
        return Err(EvalError::TooFewPairs {
            found: 0,
            required: 1,
        });
    }
    let sum: f64 = pairs
        .iter()
        .map(|&(i, j)| (est.rows[i].1 - reference.rows[j].1).norm_squared())
        .sum();
    Ok((sum / pairs.len() as f64).sqrt())
}

/// Root-mean-square error between equal-length prediction/label slices.
pub fn rmse(predictions: &[f64], labels: &[f64]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(EvalError::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    let sum: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, l)| (p - l) * (p - l))
        .sum();
    Ok((sum / predictions.len() as f64).sqrt())
}

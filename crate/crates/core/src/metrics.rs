//! Pose-sequence errors and state losses.

use std::f64::consts::SQRT_2;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, Error, Result};
use crate::plant::{EePose, JointState};

/// Largest Frobenius distance between two rotations in SO(3).
pub const MAX_ROTATION_FROBENIUS: f64 = 2.0 * SQRT_2;

const ROTATION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepError {
    pub rotation: f64,
    pub translation: f64,
}

/// Rotation, translation and combined error of a predicted pose sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajErrorReport {
    pub trajectory_error: f64,
    pub rotation_error: f64,
    pub translation_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_step: Option<Vec<StepError>>,
}

impl TrajErrorReport {
    pub fn from_components(rotation_error: f64, translation_error: f64) -> Self {
        Self {
            trajectory_error: rotation_error + translation_error,
            rotation_error,
            translation_error,
            per_step: None,
        }
    }

    /// Component-wise mean of several reports.
    pub fn mean(reports: &[TrajErrorReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Empty("reports"));
        }
        let n = reports.len() as f64;
        let rot = reports.iter().map(|r| r.rotation_error).sum::<f64>() / n;
        let trans = reports.iter().map(|r| r.translation_error).sum::<f64>() / n;
        Ok(Self::from_components(rot, trans))
    }
}

fn check_pair_lengths(pred: &[EePose], gt: &[EePose]) -> Result<()> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Empty("pose sequence"));
    }
    ensure_len("pose sequence", gt.len(), pred.len())
}

pub fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    let residual = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det = r.determinant();
    if !(residual <= ROTATION_TOL) || !((det - 1.0).abs() <= ROTATION_TOL) {
        return Err(Error::InvalidRotation { residual, det });
    }
    Ok(())
}

/// Mean Euclidean distance between positions.
pub fn translation_error(pred: &[EePose], gt: &[EePose]) -> Result<f64> {
    check_pair_lengths(pred, gt)?;
    let sum: f64 = pred.iter().zip(gt).map(|(a, b)| (a.x - b.x).norm()).sum();
    Ok(sum / pred.len() as f64)
}

/// Angle recovered from the Frobenius distance of two rotations.
///
/// For a relative rotation by `phi` this equals `phi / 2`.
pub fn rotation_step_error(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let ratio = (a - b).norm() / MAX_ROTATION_FROBENIUS;
    ratio.clamp(0.0, 1.0).asin()
}

/// Mean of [`rotation_step_error`] over the sequence.
pub fn rotation_error(pred: &[EePose], gt: &[EePose]) -> Result<f64> {
    check_pair_lengths(pred, gt)?;
    let mut sum = 0.0;
    for (a, b) in pred.iter().zip(gt) {
        check_rotation(&a.r)?;
        check_rotation(&b.r)?;
        sum += rotation_step_error(&a.r, &b.r);
    }
    Ok(sum / pred.len() as f64)
}

pub fn trajectory_error(pred: &[EePose], gt: &[EePose]) -> Result<TrajErrorReport> {
    let rotation = rotation_error(pred, gt)?;
    let translation = translation_error(pred, gt)?;
    Ok(TrajErrorReport::from_components(rotation, translation))
}

/// Like [`trajectory_error`] but keeps the per-step breakdown.
pub fn trajectory_error_detailed(pred: &[EePose], gt: &[EePose]) -> Result<TrajErrorReport> {
    let mut report = trajectory_error(pred, gt)?;
    report.per_step = Some(
        pred.iter()
            .zip(gt)
            .map(|(a, b)| StepError {
                rotation: rotation_step_error(&a.r, &b.r),
                translation: (a.x - b.x).norm(),
            })
            .collect(),
    );
    Ok(report)
}

fn check_state_pairs(pred: &[JointState], target: &[JointState]) -> Result<()> {
    if pred.is_empty() || target.is_empty() {
        return Err(Error::Empty("state sequence"));
    }
    ensure_len("state sequence", target.len(), pred.len())?;
    for (a, b) in pred.iter().zip(target) {
        ensure_len("state.q", b.q.len(), a.q.len())?;
        ensure_len("state.qd", b.qd.len(), a.qd.len())?;
    }
    Ok(())
}

/// Mean over steps of the squared norm of the concatenated `(q, qd)` difference.
pub fn state_mse(pred: &[JointState], target: &[JointState]) -> Result<f64> {
    check_state_pairs(pred, target)?;
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| {
            a.q.iter()
                .zip(&b.q)
                .chain(a.qd.iter().zip(&b.qd))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient of [`state_mse`] with respect to `pred`, laid out like `pred`.
pub fn state_mse_grad(pred: &[JointState], target: &[JointState]) -> Result<Vec<JointState>> {
    check_state_pairs(pred, target)?;
    let scale = 2.0 / pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(a, b)| {
            JointState::new(
                a.q.iter().zip(&b.q).map(|(x, y)| scale * (x - y)).collect(),
                a.qd.iter().zip(&b.qd).map(|(x, y)| scale * (x - y)).collect(),
            )
        })
        .collect())
}

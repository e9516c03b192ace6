//! Evaluation metrics for dense flow, sparse matches, homographies and poses.
//!
//! Sums are plain left-to-right so results are reproducible bit-for-bit.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use thiserror::Error;

use crate::flow_field::FlowField;
use crate::geometry::{RelativePose, Vec2};
use crate::model_fit::{Homography, PointPair};

pub const F1_ABS_PX: f64 = 3.0;
pub const F1_REL: f64 = 0.05;
pub const DEFAULT_ACC_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];
pub const DEFAULT_POSE_THRESHOLD_DEG: f64 = 10.0;
pub const DEFAULT_CORNER_EPS: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no pixel or correspondence to evaluate")]
    EmptySet,
    #[error("field sizes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("mask has {got} entries for {expected} pixels")]
    MaskLength { expected: usize, got: usize },
    #[error("translation has zero length")]
    ZeroTranslation,
}

/// Endpoint errors over pixels valid in both fields and selected by `mask`.
pub fn endpoint_errors(
    pred: &FlowField,
    gt: &FlowField,
    mask: Option<&[bool]>,
) -> Result<Vec<(f64, f64)>, MetricError> {
    if pred.grid() != gt.grid() {
        return Err(MetricError::ShapeMismatch(pred.width(), pred.height(), gt.width(), gt.height()));
    }
    let n = gt.grid().len();
    if let Some(m) = mask {
        if m.len() != n {
            return Err(MetricError::MaskLength { expected: n, got: m.len() });
        }
    }
    let out: Vec<(f64, f64)> = (0..n)
        .filter(|&i| mask.is_none_or(|m| m[i]) && pred.is_valid(i) && gt.is_valid(i))
        .map(|i| ((pred.vectors()[i] - gt.vectors()[i]).norm(), gt.vectors()[i].norm()))
        .collect();
    if out.is_empty() {
        return Err(MetricError::EmptySet);
    }
    Ok(out)
}

pub fn aepe(pred: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<f64, MetricError> {
    let e = endpoint_errors(pred, gt, mask)?;
    Ok(e.iter().map(|(d, _)| d).sum::<f64>() / e.len() as f64)
}

fn is_f1_outlier(epe: f64, gt_norm: f64) -> bool {
    epe > F1_ABS_PX && epe > F1_REL * gt_norm
}

/// Fraction of pixels whose endpoint error exceeds both 3 px and 5% of the
/// ground-truth magnitude.
pub fn f1_outlier_rate(pred: &FlowField, gt: &FlowField, mask: Option<&[bool]>) -> Result<f64, MetricError> {
    let e = endpoint_errors(pred, gt, mask)?;
    Ok(e.iter().filter(|(d, g)| is_f1_outlier(*d, *g)).count() as f64 / e.len() as f64)
}

/// Fraction of errors strictly below each threshold.
pub fn accuracy_from_errors(errors: &[f64], thresholds: &[f64]) -> Result<Vec<f64>, MetricError> {
    if errors.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let n = errors.len() as f64;
    Ok(thresholds.iter().map(|&t| errors.iter().filter(|&&e| e < t).count() as f64 / n).collect())
}

pub fn accuracy_at(
    pred: &FlowField,
    gt: &FlowField,
    mask: Option<&[bool]>,
    thresholds: &[f64],
) -> Result<Vec<f64>, MetricError> {
    let e: Vec<f64> = endpoint_errors(pred, gt, mask)?.into_iter().map(|(d, _)| d).collect();
    accuracy_from_errors(&e, thresholds)
}

/// Sparse accuracy: `pairs[i]` is a predicted `(a, b)` and `gt[i]` the true target of `a`.
pub fn sparse_accuracy_at(predicted: &[Vec2], gt: &[Vec2], thresholds: &[f64]) -> Result<Vec<f64>, MetricError> {
    if predicted.len() != gt.len() {
        return Err(MetricError::MaskLength { expected: gt.len(), got: predicted.len() });
    }
    let e: Vec<f64> = predicted.iter().zip(gt).map(|(p, g)| (p - g).norm()).collect();
    accuracy_from_errors(&e, thresholds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowErrorStats {
    pub aepe: f64,
    pub f1: f64,
    pub acc_at: BTreeMap<u32, f64>,
    pub count: usize,
}

/// AEPE, F1 and accuracy at whole-pixel thresholds.
pub fn flow_error_stats(
    pred: &FlowField,
    gt: &FlowField,
    mask: Option<&[bool]>,
    thresholds: &[u32],
) -> Result<FlowErrorStats, MetricError> {
    let e = endpoint_errors(pred, gt, mask)?;
    let n = e.len() as f64;
    let d: Vec<f64> = e.iter().map(|(d, _)| *d).collect();
    let acc = accuracy_from_errors(&d, &thresholds.iter().map(|&t| t as f64).collect::<Vec<_>>())?;
    Ok(FlowErrorStats {
        aepe: d.iter().sum::<f64>() / n,
        f1: e.iter().filter(|(d, g)| is_f1_outlier(*d, *g)).count() as f64 / n,
        acc_at: thresholds.iter().copied().zip(acc).collect(),
        count: e.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchEvalStats {
    pub mma: BTreeMap<u32, f64>,
    pub num_matches: usize,
    pub num_features: usize,
}

/// Reprojection error of each match under the ground-truth homography
/// (infinite when `a` maps to infinity).
pub fn reprojection_errors(matches: &[PointPair], gt_h: &Homography) -> Vec<f64> {
    matches.iter().map(|m| gt_h.apply(&m.a).map_or(f64::INFINITY, |p| (p - m.b).norm())).collect()
}

/// Mean matching accuracy: fraction of matches with reprojection error at
/// most each threshold (inclusive, unlike [`accuracy_at`]).
pub fn mma(
    matches: &[PointPair],
    gt_h: &Homography,
    thresholds: &[u32],
    num_features: usize,
) -> Result<MatchEvalStats, MetricError> {
    if matches.is_empty() {
        return Err(MetricError::EmptySet);
    }
    let e = reprojection_errors(matches, gt_h);
    let n = e.len() as f64;
    let mma = thresholds.iter().map(|&t| (t, e.iter().filter(|&&x| x <= t as f64).count() as f64 / n)).collect();
    Ok(MatchEvalStats { mma, num_matches: matches.len(), num_features })
}

pub fn image_corners(width: usize, height: usize) -> [Vec2; 4] {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    [Vec2::new(0.0, 0.0), Vec2::new(w, 0.0), Vec2::new(0.0, h), Vec2::new(w, h)]
}

/// Mean displacement of the four image corners between the two homographies,
/// and whether it is below `eps`. Corners mapped to infinity count as infinite error.
pub fn corner_correctness(est: &Homography, gt: &Homography, width: usize, height: usize, eps: f64) -> (f64, bool) {
    let mut sum = 0.0;
    for c in image_corners(width, height) {
        sum += match (est.apply(&c), gt.apply(&c)) {
            (Some(a), Some(b)) => (a - b).norm(),
            _ => f64::INFINITY,
        };
    }
    let mean = sum / 4.0;
    (mean, mean < eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseErrors {
    pub rotation_deg: f64,
    pub translation_deg: f64,
}

impl PoseErrors {
    /// Both angles below the threshold.
    pub fn correct_at(&self, threshold_deg: f64) -> bool {
        self.rotation_deg < threshold_deg && self.translation_deg < threshold_deg
    }
}

fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> Result<f64, MetricError> {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(MetricError::ZeroTranslation);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees())
}

/// Rotation angle of `R_estᵀ R_gt` and the angle between translation directions, in degrees.
pub fn pose_angular_errors(est: &RelativePose, gt: &RelativePose) -> Result<PoseErrors, MetricError> {
    let c = (((est.rotation.transpose() * gt.rotation).trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    Ok(PoseErrors {
        rotation_deg: c.acos().to_degrees(),
        translation_deg: angle_between(&est.translation, &gt.translation)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_field::PixelGrid;
    use nalgebra::{Matrix3, Rotation3};

    fn grid(w: usize, h: usize) -> PixelGrid {
        PixelGrid::new(w, h).unwrap()
    }

    #[test]
    fn aepe_examples() {
        let g = grid(5, 4);
        let gt = FlowField::from_fn(g, |u, v| Some(Vec2::new(u as f64, -(v as f64))));
        assert_eq!(aepe(&gt, &gt, None).unwrap(), 0.0);
        let off = FlowField::from_fn(g, |u, v| Some(Vec2::new(u as f64 + 3.0, -(v as f64) + 4.0)));
        assert_eq!(aepe(&off, &gt, None).unwrap(), 5.0);
        let none = vec![false; g.len()];
        assert_eq!(aepe(&off, &gt, Some(&none)), Err(MetricError::EmptySet));
    }

    #[test]
    fn f1_rule_cases() {
        let g = grid(1, 1);
        let gt = FlowField::constant(g, Vec2::new(10.0, 0.0));
        let pred = FlowField::constant(g, Vec2::new(14.0, 0.0));
        assert_eq!(f1_outlier_rate(&pred, &gt, None).unwrap(), 1.0);
        let gt = FlowField::constant(g, Vec2::new(100.0, 0.0));
        let pred = FlowField::constant(g, Vec2::new(104.0, 0.0));
        assert_eq!(f1_outlier_rate(&pred, &gt, None).unwrap(), 0.0);
        assert_eq!(f1_outlier_rate(&gt, &gt, None).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_hand_count() {
        let acc = accuracy_from_errors(&[0.5, 2.0, 4.0, 10.0], &DEFAULT_ACC_THRESHOLDS).unwrap();
        assert_eq!(acc, vec![0.25, 0.5, 0.75]);
        // strict comparison
        assert_eq!(accuracy_from_errors(&[1.0], &[1.0]).unwrap(), vec![0.0]);
        assert_eq!(accuracy_from_errors(&[], &[1.0]), Err(MetricError::EmptySet));
    }

    #[test]
    fn mma_cases() {
        let id = Homography::identity();
        let pts: Vec<PointPair> =
            (0..5).map(|i| PointPair::new(Vec2::new(i as f64, 1.0), Vec2::new(i as f64, 1.0))).collect();
        let s = mma(&pts, &id, &[1, 2, 3], 10).unwrap();
        assert!(s.mma.values().all(|&v| v == 1.0));
        let one = [PointPair::new(Vec2::new(0.0, 0.0), Vec2::new(1.5, 2.0))];
        let s = mma(&one, &id, &(1..=10).collect::<Vec<_>>(), 1).unwrap();
        assert_eq!(s.mma[&2], 0.0);
        assert_eq!(s.mma[&3], 1.0);
        // inclusive threshold
        let edge = [PointPair::new(Vec2::new(0.0, 0.0), Vec2::new(3.0, 0.0))];
        assert_eq!(mma(&edge, &id, &[3], 1).unwrap().mma[&3], 1.0);
        assert_eq!(mma(&[], &id, &[3], 1), Err(MetricError::EmptySet));
    }

    #[test]
    fn corner_cases() {
        let gt = Homography::new(Matrix3::new(1.1, 0.05, 3.0, -0.02, 0.95, 7.0, 1e-4, 0.0, 1.0)).unwrap();
        assert_eq!(corner_correctness(&gt, &gt, 640, 480, 5.0), (0.0, true));
        let shift = |dx: f64| Homography::new(Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)).unwrap();
        let (e, ok) = corner_correctness(&gt.then(&shift(3.0)).unwrap(), &gt, 640, 480, 5.0);
        assert!((e - 3.0).abs() < 1e-9 && ok);
        let (e, ok) = corner_correctness(&gt.then(&shift(8.0)).unwrap(), &gt, 640, 480, 5.0);
        assert!((e - 8.0).abs() < 1e-9 && !ok);
        let scaled = Homography::new(gt.matrix() * 3.0).unwrap();
        assert!(corner_correctness(&scaled, &gt, 640, 480, 5.0).0 < 1e-12);
    }

    #[test]
    fn pose_cases() {
        let id = RelativePose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let e = pose_angular_errors(&id, &id).unwrap();
        assert_eq!((e.rotation_deg, e.translation_deg), (0.0, 0.0));
        let rz = *Rotation3::from_axis_angle(&Vector3::z_axis(), 10f64.to_radians()).matrix();
        let r = RelativePose::new(rz, Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert!((pose_angular_errors(&r, &id).unwrap().rotation_deg - 10.0).abs() < 1e-9);
        let ty = RelativePose::new(Matrix3::identity(), Vector3::new(0.0, 3.0, 0.0)).unwrap();
        assert!((pose_angular_errors(&ty, &id).unwrap().translation_deg - 90.0).abs() < 1e-12);
        let zero = RelativePose::new(Matrix3::identity(), Vector3::zeros()).unwrap();
        assert_eq!(pose_angular_errors(&zero, &id), Err(MetricError::ZeroTranslation));
        assert!(e.correct_at(DEFAULT_POSE_THRESHOLD_DEG));
    }
}

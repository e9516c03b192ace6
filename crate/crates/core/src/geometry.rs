//! Two-view epipolar geometry: cameras, relative poses, fundamental matrices
//! and the point-to-line distances used as a weak supervision signal.
//!
//! Pixels are homogeneous `(u, v, 1)` with `u` the column and `v` the row,
//! origin at the centre of the top-left pixel.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

/// 2-D point or vector in pixels.
pub type Vec2 = Vector2<f64>;

/// Below this norm of `(a, b)` an epipolar line is treated as undefined.
pub const DEGENERATE_LINE_EPS: f64 = 1e-12;

const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("translation is (numerically) zero, fundamental matrix undefined")]
    ZeroTranslation,
    #[error("epipolar line is degenerate (point at or near the epipole)")]
    DegenerateLine,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not a proper orthonormal matrix (orthogonality residual {residual:e}, det {det})")]
    InvalidRotation { residual: f64, det: f64 },
    #[error("matrix has zero norm or non-finite entries")]
    InvalidMatrix,
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub skew: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, skew: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, skew };
        k.validate()?;
        Ok(k)
    }

    /// Unit focal lengths, zero principal point: pixels are normalized coordinates.
    pub fn identity() -> Self {
        Self { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, skew: 0.0 }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let all = [self.fx, self.fy, self.cx, self.cy, self.skew];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics("non-finite parameter".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, self.skew, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Closed-form inverse of the upper-triangular calibration matrix.
    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        let (fx, fy, s, cx, cy) = (self.fx, self.fy, self.skew, self.cx, self.cy);
        Matrix3::new(1.0 / fx, -s / (fx * fy), (s * cy - cx * fy) / (fx * fy), 0.0, 1.0 / fy, -cy / fy, 0.0, 0.0, 1.0)
    }

    /// Projects a point given in this camera's frame. `None` when `z == 0`.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Vec2> {
        if p.z == 0.0 {
            return None;
        }
        let h = self.matrix() * p;
        Some(Vec2::new(h.x / h.z, h.y / h.z))
    }
}

/// Rigid motion taking camera-A coordinates to camera-B coordinates:
/// `X_b = rotation * X_a + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let residual = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !residual.is_finite() || residual > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(GeometryError::InvalidRotation { residual, det });
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidMatrix);
        }
        Ok(Self { rotation, translation })
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Fundamental matrix mapping pixels of image A to epipolar lines in image B
/// (`x_bᵀ F x_a = 0`). Always stored with unit Frobenius norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix {
    m: Matrix3<f64>,
}

impl FundamentalMatrix {
    /// Wraps an arbitrary 3×3 matrix, normalizing its scale. Rank is not enforced.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let n = m.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(GeometryError::InvalidMatrix);
        }
        Ok(Self { m: m / n })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// The B-to-A matrix.
    pub fn transpose(&self) -> Self {
        Self { m: self.m.transpose() }
    }

    /// Algebraic residual `x_bᵀ F x_a` for homogeneous pixels.
    pub fn residual(&self, xa: &Vec2, xb: &Vec2) -> f64 {
        homogeneous(xb).dot(&(self.m * homogeneous(xa)))
    }
}

/// Line `a·u + b·v + c = 0` in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl EpipolarLine {
    pub fn normal_norm(&self) -> f64 {
        self.a.hypot(self.b)
    }

    pub fn is_degenerate(&self) -> bool {
        self.normal_norm() < DEGENERATE_LINE_EPS
    }

    pub fn evaluate(&self, p: &Vec2) -> f64 {
        self.a * p.x + self.b * p.y + self.c
    }

    pub fn distance(&self, p: &Vec2) -> Result<f64, GeometryError> {
        let n = self.normal_norm();
        if n < DEGENERATE_LINE_EPS {
            return Err(GeometryError::DegenerateLine);
        }
        Ok(self.evaluate(p).abs() / n)
    }
}

pub fn homogeneous(p: &Vec2) -> Vector3<f64> {
    Vector3::new(p.x, p.y, 1.0)
}

pub fn skew_symmetric(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// `F = Kb⁻ᵀ [t]ₓ R Ka⁻¹`, normalized.
pub fn fundamental_from_pose(
    ka: &CameraIntrinsics,
    kb: &CameraIntrinsics,
    pose: &RelativePose,
) -> Result<FundamentalMatrix, GeometryError> {
    if pose.translation.norm() < 1e-12 {
        return Err(GeometryError::ZeroTranslation);
    }
    ka.validate()?;
    kb.validate()?;
    let essential = skew_symmetric(&pose.translation) * pose.rotation;
    let f = kb.inverse_matrix().transpose() * essential * ka.inverse_matrix();
    FundamentalMatrix::from_matrix(f)
}

/// Line in B on which the correspondence of `x` must lie. Pass `f.transpose()`
/// for the reverse direction.
pub fn epipolar_line(f: &FundamentalMatrix, x: &Vec2) -> EpipolarLine {
    let l = f.matrix() * homogeneous(x);
    EpipolarLine { a: l.x, b: l.y, c: l.z }
}

/// Unsquared distance from `xp` to the epipolar line of `x`.
pub fn epipolar_distance(f: &FundamentalMatrix, x: &Vec2, xp: &Vec2) -> Result<f64, GeometryError> {
    epipolar_line(f, x).distance(xp)
}

/// Symmetric epipolar distance: distance of `xp` to the line of `x` plus the
/// distance of `x` to the line of `xp` under `Fᵀ`.
pub fn sed(f: &FundamentalMatrix, x: &Vec2, xp: &Vec2) -> Result<f64, GeometryError> {
    let forward = epipolar_distance(f, x, xp)?;
    let backward = epipolar_distance(&f.transpose(), xp, x)?;
    Ok(forward + backward)
}

/// SED together with its gradient with respect to the B-side point.
pub fn sed_with_gradient(f: &FundamentalMatrix, x: &Vec2, xp: &Vec2) -> Result<(f64, Vec2), GeometryError> {
    let m = f.matrix();
    let line_b = m * homogeneous(x);
    let line_a = m.transpose() * homogeneous(xp);
    let n_b = line_b.x.hypot(line_b.y);
    let n_a = line_a.x.hypot(line_a.y);
    if n_b < DEGENERATE_LINE_EPS || n_a < DEGENERATE_LINE_EPS {
        return Err(GeometryError::DegenerateLine);
    }
    // Both distances share the algebraic residual r = x'ᵀ F x.
    let r = line_b.x * xp.x + line_b.y * xp.y + line_b.z;
    let value = r.abs() / n_b + r.abs() / n_a;
    if r == 0.0 {
        return Ok((value, Vec2::zeros()));
    }
    let s = r.signum();
    let dr = Vec2::new(line_b.x, line_b.y);
    // d(a_A)/d(x'_j) = F[j,0], d(b_A)/d(x'_j) = F[j,1]
    let dn_a =
        Vec2::new(line_a.x * m[(0, 0)] + line_a.y * m[(0, 1)], line_a.x * m[(1, 0)] + line_a.y * m[(1, 1)]) / n_a;
    let grad = dr * (s / n_b) + dr * (s / n_a) - dn_a * (r.abs() / (n_a * n_a));
    Ok((value, grad))
}

/// Gradient of [`sed`] with respect to `xp`; zero at the kink `r = 0`.
pub fn sed_gradient(f: &FundamentalMatrix, x: &Vec2, xp: &Vec2) -> Result<Vec2, GeometryError> {
    sed_with_gradient(f, x, xp).map(|(_, g)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn x_translation_f() -> FundamentalMatrix {
        let pose = RelativePose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let id = CameraIntrinsics::identity();
        fundamental_from_pose(&id, &id, &pose).unwrap()
    }

    fn rotation(rng: &mut impl Rng, max_angle: f64) -> Matrix3<f64> {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let angle = rng.random_range(-max_angle..max_angle);
        *nalgebra::Rotation3::from_scaled_axis(axis.normalize() * angle).matrix()
    }

    #[test]
    fn pure_x_translation_gives_cross_product_matrix() {
        let f = x_translation_f();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let expected = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -s, 0.0, s, 0.0);
        assert!((f.matrix() - expected).abs().max() < 1e-15);
    }

    #[test]
    fn zero_translation_is_rejected() {
        let pose = RelativePose::new(Matrix3::identity(), Vector3::zeros()).unwrap();
        let id = CameraIntrinsics::identity();
        assert_eq!(fundamental_from_pose(&id, &id, &pose), Err(GeometryError::ZeroTranslation));
    }

    #[test]
    fn line_and_distances_match_hand_values() {
        let f = FundamentalMatrix::from_matrix(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)).unwrap();
        let x = Vec2::new(2.0, 3.0);
        let l = epipolar_line(&f, &x);
        // stored F is unit-norm, so compare up to the 1/sqrt(2) scale
        let k = std::f64::consts::SQRT_2;
        assert!((l.a * k).abs() < 1e-15 && (l.b * k + 1.0).abs() < 1e-15 && (l.c * k - 3.0).abs() < 1e-15);
        assert_eq!(epipolar_distance(&f, &x, &Vec2::new(5.0, 3.0)).unwrap(), 0.0);
        assert!((epipolar_distance(&f, &x, &Vec2::new(5.0, 4.5)).unwrap() - 1.5).abs() < 1e-14);
        assert_eq!(sed(&f, &x, &Vec2::new(5.0, 3.0)).unwrap(), 0.0);
        assert!((sed(&f, &x, &Vec2::new(5.0, 4.5)).unwrap() - 3.0).abs() < 1e-14);
        assert!((sed(&f.transpose(), &Vec2::new(5.0, 4.5), &x).unwrap() - 3.0).abs() < 1e-14);
    }

    #[test]
    fn epipole_is_degenerate() {
        let pose = RelativePose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let id = CameraIntrinsics::identity();
        let f = fundamental_from_pose(&id, &id, &pose).unwrap();
        // forward motion: epipole at the principal point
        let e = Vec2::new(0.0, 0.0);
        assert!(epipolar_line(&f, &e).is_degenerate());
        assert_eq!(epipolar_distance(&f, &e, &Vec2::new(1.0, 1.0)), Err(GeometryError::DegenerateLine));
        assert_eq!(sed(&f, &e, &Vec2::new(1.0, 1.0)), Err(GeometryError::DegenerateLine));
    }

    #[test]
    fn scale_invariance() {
        let raw = Matrix3::new(0.1, -0.3, 0.2, 0.5, 0.05, -0.7, -0.2, 0.6, 0.01);
        let base = FundamentalMatrix::from_matrix(raw).unwrap();
        let x = Vec2::new(3.0, -1.0);
        let xp = Vec2::new(0.5, 2.0);
        let d0 = sed(&base, &x, &xp).unwrap();
        for lambda in [-3.0, 0.01, 7.0] {
            let f = FundamentalMatrix::from_matrix(raw * lambda).unwrap();
            assert!((sed(&f, &x, &xp).unwrap() - d0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_at_hand_configuration() {
        let f = FundamentalMatrix::from_matrix(Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0)).unwrap();
        let g = sed_gradient(&f, &Vec2::new(2.0, 3.0), &Vec2::new(5.0, 4.5)).unwrap();
        // both terms move with slope 1 in v'
        assert!((g - Vec2::new(0.0, 2.0)).norm() < 1e-14);
        let g0 = sed_gradient(&f, &Vec2::new(2.0, 3.0), &Vec2::new(5.0, 3.0)).unwrap();
        assert_eq!(g0, Vec2::zeros());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 100 {
            let raw = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
            let f = FundamentalMatrix::from_matrix(raw).unwrap();
            let x = Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let xp = Vec2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let Ok((value, g)) = sed_with_gradient(&f, &x, &xp) else { continue };
            // stay away from the kink and from near-epipole lines, where the
            // curvature makes a 1e-4 step too coarse
            let line_b = epipolar_line(&f, &x);
            let line_a = epipolar_line(&f.transpose(), &xp);
            if value < 1e-3 || line_a.normal_norm() < 0.1 || line_b.normal_norm() < 0.1 {
                continue;
            }
            let h = 1e-4;
            for k in 0..2 {
                let mut p = xp;
                let mut m = xp;
                p[k] += h;
                m[k] -= h;
                let fd = (sed(&f, &x, &p).unwrap() - sed(&f, &x, &m).unwrap()) / (2.0 * h);
                let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
                assert!(rel < 1e-5, "rel {rel} fd {fd} analytic {}", g[k]);
            }
            checked += 1;
        }
    }

    #[test]
    fn projected_points_satisfy_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ka = CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0, 0.0).unwrap();
        let kb = CameraIntrinsics::new(450.0, 460.0, 300.0, 250.0, 0.5).unwrap();
        let pose = RelativePose::new(rotation(&mut rng, 0.3), Vector3::new(0.7, -0.2, 0.1)).unwrap();
        let f = fundamental_from_pose(&ka, &kb, &pose).unwrap();
        let svd = f.matrix().svd(false, false);
        let sv = svd.singular_values;
        assert!(sv.min() / sv.max() < 1e-9);
        for _ in 0..20 {
            let p = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..10.0));
            let xa = ka.project(&p).unwrap();
            let xb = kb.project(&pose.transform(&p)).unwrap();
            let r = homogeneous(&xb).normalize().dot(&(f.matrix() * homogeneous(&xa).normalize()));
            assert!(r.abs() < 1e-9);
        }
    }

    #[test]
    fn transpose_gives_reverse_line() {
        let raw = Matrix3::new(0.1, -0.3, 0.2, 0.5, 0.05, -0.7, -0.2, 0.6, 0.01);
        let f = FundamentalMatrix::from_matrix(raw).unwrap();
        let xp = Vec2::new(1.5, -0.25);
        let direct = f.matrix().transpose() * homogeneous(&xp);
        let l = epipolar_line(&f.transpose(), &xp);
        assert_eq!((l.a, l.b, l.c), (direct.x, direct.y, direct.z));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 0.0, 0.0, 0.0).is_err());
        assert!(RelativePose::new(Matrix3::identity() * 2.0, Vector3::x()).is_err());
        let reflection = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RelativePose::new(reflection, Vector3::x()).is_err());
        let k = CameraIntrinsics::new(500.0, 400.0, 10.0, 20.0, 3.0).unwrap();
        assert!((k.matrix() * k.inverse_matrix() - Matrix3::identity()).abs().max() < 1e-15);
    }
}

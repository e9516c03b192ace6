//! Global transformations from sparse matches: RANSAC homographies, the
//! normalized eight-point fundamental matrix, and relative pose from the
//! essential matrix.

use nalgebra::{DMatrix, Matrix3, SVector, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{homogeneous, sed, CameraIntrinsics, FundamentalMatrix, GeometryError, RelativePose, Vec2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least {needed} matches, got {got}")]
    InsufficientMatches { needed: usize, got: usize },
    #[error("no model reached the minimum inlier count")]
    NoModel,
    #[error("degenerate point configuration")]
    DegenerateConfiguration,
    #[error("no pose candidate puts a strict majority of points in front of both cameras")]
    CheiralityAmbiguous,
    #[error("singular homography")]
    SingularHomography,
    #[error("invalid RANSAC configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Point correspondence `a ↔ b` (pixel coordinates in image A and image B).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointPair {
    pub a: Vec2,
    pub b: Vec2,
}

impl PointPair {
    pub fn new(a: Vec2, b: Vec2) -> Self {
        Self { a, b }
    }
}

/// Plane projective map `b ~ H a`, scaled so `H[(2,2)] = 1` when possible.
/// Matrices with condition number above 1e10 are rejected as singular.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self, FitError> {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(FitError::SingularHomography);
        }
        let norm = m.norm();
        if norm == 0.0 {
            return Err(FitError::SingularHomography);
        }
        let m = if m[(2, 2)].abs() > 1e-8 * norm { m / m[(2, 2)] } else { m / norm };
        // condition test is symmetric under inversion, so a valid H always has a valid inverse
        let sv = m.singular_values();
        if !(sv.min() > 1e-10 * sv.max()) {
            return Err(FitError::SingularHomography);
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    pub fn apply(&self, p: &Vec2) -> Option<Vec2> {
        let q = self.m * homogeneous(p);
        (q.z.abs() > 1e-15 * q.xy().norm().max(1.0)).then(|| Vec2::new(q.x / q.z, q.y / q.z))
    }

    pub fn inverse(&self) -> Self {
        Self::new(self.m.try_inverse().expect("validated at construction")).expect("inverse of a valid homography")
    }

    /// `self` followed by `then`.
    pub fn then(&self, then: &Homography) -> Result<Self, FitError> {
        Self::new(then.m * self.m)
    }

    /// Mean of forward and backward transfer distances; `None` if either side maps to infinity.
    pub fn symmetric_transfer_error(&self, inv: &Homography, pair: &PointPair) -> Option<f64> {
        let fwd = (self.apply(&pair.a)? - pair.b).norm();
        let bwd = (inv.apply(&pair.b)? - pair.a).norm();
        Some(0.5 * (fwd + bwd))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    /// Inlier threshold in pixels.
    pub threshold: f64,
    pub max_iterations: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { threshold: 3.0, max_iterations: 10_000, confidence: 0.9999, seed: 0 }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(FitError::InvalidConfig(format!("threshold must be positive, got {}", self.threshold)));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(FitError::InvalidConfig(format!("confidence must be in (0, 1), got {}", self.confidence)));
        }
        if self.max_iterations == 0 {
            return Err(FitError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult<M> {
    pub model: M,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl<M> RansacResult<M> {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn hartley(points: impl Iterator<Item = Vec2> + Clone) -> Option<Matrix3<f64>> {
    let n = points.clone().count() as f64;
    let c = points.clone().fold(Vec2::zeros(), |a, p| a + p) / n;
    let mean_dist = points.map(|p| (p - c).norm()).sum::<f64>() / n;
    if !(mean_dist > 1e-12) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0))
}

fn transform(t: &Matrix3<f64>, p: &Vec2) -> Vec2 {
    Vec2::new(t[(0, 0)] * p.x + t[(0, 2)], t[(1, 1)] * p.y + t[(1, 2)])
}

/// Right singular vector of the smallest singular value, plus the ratio of the
/// two smallest singular values to the largest.
fn null_vector(rows: Vec<SVector<f64, 9>>) -> (SVector<f64, 9>, f64) {
    let n = rows.len().max(9);
    let mut a = DMatrix::<f64>::zeros(n, 9);
    for (i, r) in rows.iter().enumerate() {
        a.row_mut(i).copy_from(&r.transpose());
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let smallest = order[0];
    let second = sv[order[1]] / sv[order[order.len() - 1]].max(f64::MIN_POSITIVE);
    (SVector::<f64, 9>::from_iterator(v_t.row(smallest).iter().copied()), second)
}

fn mat_from(v: &SVector<f64, 9>) -> Matrix3<f64> {
    Matrix3::from_row_slice(v.as_slice())
}

/// Normalized DLT on four or more correspondences.
pub fn homography_dlt(pairs: &[PointPair]) -> Result<Homography, FitError> {
    if pairs.len() < 4 {
        return Err(FitError::InsufficientMatches { needed: 4, got: pairs.len() });
    }
    let ta = hartley(pairs.iter().map(|p| p.a)).ok_or(FitError::DegenerateConfiguration)?;
    let tb = hartley(pairs.iter().map(|p| p.b)).ok_or(FitError::DegenerateConfiguration)?;
    let mut rows = Vec::with_capacity(2 * pairs.len());
    for p in pairs {
        let a = transform(&ta, &p.a);
        let b = transform(&tb, &p.b);
        rows.push(SVector::<f64, 9>::from_row_slice(&[0.0, 0.0, 0.0, -a.x, -a.y, -1.0, b.y * a.x, b.y * a.y, b.y]));
        rows.push(SVector::<f64, 9>::from_row_slice(&[a.x, a.y, 1.0, 0.0, 0.0, 0.0, -b.x * a.x, -b.x * a.y, -b.x]));
    }
    let (h, second) = null_vector(rows);
    if second < 1e-10 {
        return Err(FitError::DegenerateConfiguration);
    }
    let tb_inv = tb.try_inverse().ok_or(FitError::DegenerateConfiguration)?;
    Homography::new(tb_inv * mat_from(&h) * ta)
}

fn collinear(a: &Vec2, b: &Vec2, c: &Vec2) -> bool {
    let cross = (b - a).perp(&(c - a));
    cross.abs() <= 1e-9 * (b - a).norm().max(1.0) * (c - a).norm().max(1.0)
}

fn sample_is_degenerate(pts: &[Vec2]) -> bool {
    for i in 0..pts.len() {
        for j in i + 1..pts.len() {
            for k in j + 1..pts.len() {
                if collinear(&pts[i], &pts[j], &pts[k]) {
                    return true;
                }
            }
        }
    }
    false
}

fn required_iterations(confidence: f64, inlier_ratio: f64, sample_size: usize, cap: usize) -> usize {
    let w = inlier_ratio.powi(sample_size as i32);
    if w >= 1.0 {
        return 1;
    }
    if w <= 0.0 {
        return cap;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

const BATCH: usize = 64;

/// Generic seeded RANSAC loop. Hypotheses are drawn sequentially and scored in
/// parallel batches; the winner is the first hypothesis with the most inliers.
fn ransac<M: Send + Sync>(
    n: usize,
    sample_size: usize,
    cfg: &RansacConfig,
    hypothesis: impl Fn(&[usize]) -> Option<M> + Sync,
    is_inlier: impl Fn(&M, usize) -> bool + Sync,
) -> Option<(M, Vec<bool>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(M, Vec<bool>, usize)> = None;
    let mut needed = cfg.max_iterations;
    let mut drawn = 0;
    while drawn < needed {
        let batch = BATCH.min(needed - drawn);
        let samples: Vec<Vec<usize>> = (0..batch).map(|_| sample(&mut rng, n, sample_size).into_vec()).collect();
        let scored: Vec<Option<(M, Vec<bool>, usize)>> = samples
            .par_iter()
            .map(|s| {
                let m = hypothesis(s)?;
                let mask: Vec<bool> = (0..n).map(|i| is_inlier(&m, i)).collect();
                let count = mask.iter().filter(|&&b| b).count();
                Some((m, mask, count))
            })
            .collect();
        for s in scored {
            drawn += 1;
            if let Some(cand) = s {
                if best.as_ref().is_none_or(|b| cand.2 > b.2) {
                    needed = needed.min(required_iterations(
                        cfg.confidence,
                        cand.2 as f64 / n as f64,
                        sample_size,
                        cfg.max_iterations,
                    ));
                    best = Some(cand);
                }
            }
            if drawn >= needed {
                break;
            }
        }
    }
    best.map(|(m, mask, _)| (m, mask, drawn))
}

/// Robust homography: four-point hypotheses, symmetric transfer inlier test,
/// final least-squares refit on the inliers.
pub fn fit_homography_ransac(pairs: &[PointPair], cfg: &RansacConfig) -> Result<RansacResult<Homography>, FitError> {
    cfg.validate()?;
    if pairs.len() < 4 {
        return Err(FitError::InsufficientMatches { needed: 4, got: pairs.len() });
    }
    let is_inlier = |h: &(Homography, Homography), i: usize| {
        h.0.symmetric_transfer_error(&h.1, &pairs[i]).is_some_and(|e| e <= cfg.threshold)
    };
    let hypothesis = |idx: &[usize]| {
        let sub: Vec<PointPair> = idx.iter().map(|&i| pairs[i]).collect();
        let pa: Vec<Vec2> = sub.iter().map(|p| p.a).collect();
        let pb: Vec<Vec2> = sub.iter().map(|p| p.b).collect();
        if sample_is_degenerate(&pa) || sample_is_degenerate(&pb) {
            return None;
        }
        let h = homography_dlt(&sub).ok()?;
        Some((h, h.inverse()))
    };
    let (best, mask, iterations) = ransac(pairs.len(), 4, cfg, hypothesis, is_inlier).ok_or(FitError::NoModel)?;
    if mask.iter().filter(|&&b| b).count() < 4 {
        return Err(FitError::NoModel);
    }
    let inlier_pairs: Vec<PointPair> = pairs.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
    let refit = match homography_dlt(&inlier_pairs) {
        Ok(h) => (h, h.inverse()),
        Err(_) => best,
    };
    let inliers: Vec<bool> = (0..pairs.len()).map(|i| is_inlier(&refit, i)).collect();
    Ok(RansacResult { model: refit.0, inliers, iterations })
}

/// Normalized eight-point algorithm with rank-2 enforcement.
pub fn fit_fundamental_8pt(pairs: &[PointPair]) -> Result<FundamentalMatrix, FitError> {
    if pairs.len() < 8 {
        return Err(FitError::InsufficientMatches { needed: 8, got: pairs.len() });
    }
    for side in [pairs.iter().map(|p| p.a).collect::<Vec<_>>(), pairs.iter().map(|p| p.b).collect()] {
        if all_collinear(&side) {
            return Err(FitError::DegenerateConfiguration);
        }
    }
    let ta = hartley(pairs.iter().map(|p| p.a)).ok_or(FitError::DegenerateConfiguration)?;
    let tb = hartley(pairs.iter().map(|p| p.b)).ok_or(FitError::DegenerateConfiguration)?;
    let rows = pairs
        .iter()
        .map(|p| {
            let a = transform(&ta, &p.a);
            let b = transform(&tb, &p.b);
            SVector::<f64, 9>::from_row_slice(&[b.x * a.x, b.x * a.y, b.x, b.y * a.x, b.y * a.y, b.y, a.x, a.y, 1.0])
        })
        .collect();
    let (f, second) = null_vector(rows);
    if second < 1e-10 {
        return Err(FitError::DegenerateConfiguration);
    }
    let svd = mat_from(&f).svd(true, true);
    let (u, v_t) = (svd.u.expect("requested U"), svd.v_t.expect("requested V"));
    let mut s = svd.singular_values;
    // nalgebra sorts singular values in descending order
    s[2] = 0.0;
    let f_hat = u * Matrix3::from_diagonal(&s) * v_t;
    Ok(FundamentalMatrix::from_matrix(tb.transpose() * f_hat * ta)?)
}

fn all_collinear(points: &[Vec2]) -> bool {
    let n = points.len() as f64;
    let c = points.iter().fold(Vec2::zeros(), |a, p| a + p) / n;
    let mut cov = nalgebra::Matrix2::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    hi <= 0.0 || lo <= 1e-12 * hi
}

/// Eight-point RANSAC with the symmetric epipolar distance as inlier test.
pub fn fit_fundamental_ransac(
    pairs: &[PointPair],
    cfg: &RansacConfig,
) -> Result<RansacResult<FundamentalMatrix>, FitError> {
    cfg.validate()?;
    if pairs.len() < 8 {
        return Err(FitError::InsufficientMatches { needed: 8, got: pairs.len() });
    }
    let is_inlier =
        |f: &FundamentalMatrix, i: usize| sed(f, &pairs[i].a, &pairs[i].b).is_ok_and(|d| d <= cfg.threshold);
    let hypothesis = |idx: &[usize]| {
        let sub: Vec<PointPair> = idx.iter().map(|&i| pairs[i]).collect();
        fit_fundamental_8pt(&sub).ok()
    };
    let (best, mask, iterations) = ransac(pairs.len(), 8, cfg, hypothesis, is_inlier).ok_or(FitError::NoModel)?;
    if mask.iter().filter(|&&b| b).count() < 8 {
        return Err(FitError::NoModel);
    }
    let inlier_pairs: Vec<PointPair> = pairs.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
    let model = fit_fundamental_8pt(&inlier_pairs).unwrap_or(best);
    let inliers = (0..pairs.len()).map(|i| is_inlier(&model, i)).collect();
    Ok(RansacResult { model, inliers, iterations })
}

/// Linear triangulation of normalized image points with cameras `[I|0]` and
/// `[R|t]`; returns the point in A's frame.
pub fn triangulate(pose: &RelativePose, xa: &Vector3<f64>, xb: &Vector3<f64>) -> Option<Vector3<f64>> {
    let p = |r: &Matrix3<f64>, t: &Vector3<f64>, row: usize| -> nalgebra::RowVector4<f64> {
        nalgebra::RowVector4::new(r[(row, 0)], r[(row, 1)], r[(row, 2)], t[row])
    };
    let (i, z) = (Matrix3::identity(), Vector3::zeros());
    let (r, t) = (&pose.rotation, &pose.translation);
    let rows = [
        p(&i, &z, 0) * xa.z - p(&i, &z, 2) * xa.x,
        p(&i, &z, 1) * xa.z - p(&i, &z, 2) * xa.y,
        p(r, t, 0) * xb.z - p(r, t, 2) * xb.x,
        p(r, t, 1) * xb.z - p(r, t, 2) * xb.y,
    ];
    let a = nalgebra::Matrix4::from_rows(&rows);
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (k, _) = svd.singular_values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1))?;
    let x = v_t.row(k);
    (x[3].abs() > 1e-15).then(|| Vector3::new(x[0] / x[3], x[1] / x[3], x[2] / x[3]))
}

/// The four `(R, t)` factorizations of the essential matrix of `f`.
pub fn essential_candidates(
    f: &FundamentalMatrix,
    ka: &CameraIntrinsics,
    kb: &CameraIntrinsics,
) -> Result<[RelativePose; 4], FitError> {
    ka.validate()?;
    kb.validate()?;
    let e = kb.matrix().transpose() * f.matrix() * ka.matrix();
    let svd = e.svd(true, true);
    let mut u = svd.u.expect("requested U");
    let mut v_t = svd.v_t.expect("requested V");
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v_t.determinant() < 0.0 {
        v_t = -v_t;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).into();
    let t = t.normalize();
    Ok([RelativePose::new(r1, t)?, RelativePose::new(r1, -t)?, RelativePose::new(r2, t)?, RelativePose::new(r2, -t)?])
}

/// Number of matches triangulating in front of both cameras.
pub fn cheirality_count(
    pose: &RelativePose,
    ka: &CameraIntrinsics,
    kb: &CameraIntrinsics,
    pairs: &[PointPair],
) -> usize {
    let (ka_inv, kb_inv) = (ka.inverse_matrix(), kb.inverse_matrix());
    pairs
        .iter()
        .filter(|p| {
            let xa = ka_inv * homogeneous(&p.a);
            let xb = kb_inv * homogeneous(&p.b);
            triangulate(pose, &xa, &xb).is_some_and(|x| x.z > 0.0 && pose.transform(&x).z > 0.0)
        })
        .count()
}

/// Relative pose (unit translation) from a fundamental matrix, resolving the
/// four-fold ambiguity by majority cheirality.
pub fn pose_from_essential(
    f: &FundamentalMatrix,
    ka: &CameraIntrinsics,
    kb: &CameraIntrinsics,
    pairs: &[PointPair],
) -> Result<RelativePose, FitError> {
    if pairs.is_empty() {
        return Err(FitError::InsufficientMatches { needed: 1, got: 0 });
    }
    let candidates = essential_candidates(f, ka, kb)?;
    let counts: Vec<usize> = candidates.iter().map(|c| cheirality_count(c, ka, kb, pairs)).collect();
    let (best, &count) =
        counts.iter().enumerate().max_by_key(|&(i, c)| (*c, std::cmp::Reverse(i))).expect("four candidates");
    if 2 * count <= pairs.len() {
        return Err(FitError::CheiralityAmbiguous);
    }
    Ok(candidates[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::fundamental_from_pose;
    use crate::synthetic::random_pose;
    use rand::Rng;

    fn random_h(rng: &mut impl Rng) -> Homography {
        let m = Matrix3::new(
            rng.random_range(0.8..1.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-20.0..20.0),
            rng.random_range(-0.2..0.2),
            rng.random_range(0.8..1.2),
            rng.random_range(-20.0..20.0),
            rng.random_range(-4e-4..4e-4),
            rng.random_range(-4e-4..4e-4),
            1.0,
        );
        Homography::new(m).unwrap()
    }

    fn corners_error(a: &Homography, b: &Homography, w: f64, h: f64) -> f64 {
        [(0.0, 0.0), (w - 1.0, 0.0), (0.0, h - 1.0), (w - 1.0, h - 1.0)]
            .iter()
            .map(|&(x, y)| {
                let p = Vec2::new(x, y);
                (a.apply(&p).unwrap() - b.apply(&p).unwrap()).norm()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn homography_normalization() {
        let h = Homography::new(Matrix3::identity() * 4.0).unwrap();
        assert_eq!(h.matrix(), &Matrix3::identity());
        assert!(Homography::new(Matrix3::zeros()).is_err());
        let mut m = Matrix3::identity();
        m[(1, 1)] = 0.0;
        assert_eq!(Homography::new(m), Err(FitError::SingularHomography));
    }

    #[test]
    fn exact_homography_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt = random_h(&mut rng);
        let pairs: Vec<PointPair> = (0..100)
            .map(|_| {
                let a = Vec2::new(rng.random_range(0.0..640.0), rng.random_range(0.0..480.0));
                PointPair::new(a, gt.apply(&a).unwrap())
            })
            .collect();
        let r = fit_homography_ransac(&pairs, &RansacConfig::default()).unwrap();
        assert_eq!(r.inlier_count(), 100);
        assert!(corners_error(&r.model, &gt, 640.0, 480.0) < 1e-6);
    }

    #[test]
    fn too_few_matches() {
        let p = vec![PointPair::new(Vec2::zeros(), Vec2::zeros()); 3];
        assert_eq!(
            fit_homography_ransac(&p, &RansacConfig::default()),
            Err(FitError::InsufficientMatches { needed: 4, got: 3 })
        );
        assert!(matches!(fit_fundamental_8pt(&p), Err(FitError::InsufficientMatches { needed: 8, .. })));
    }

    #[test]
    fn ransac_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gt = random_h(&mut rng);
        let pairs: Vec<PointPair> = (0..60)
            .map(|i| {
                let a = Vec2::new(rng.random_range(0.0..320.0), rng.random_range(0.0..240.0));
                let b = if i % 3 == 0 {
                    Vec2::new(rng.random_range(0.0..320.0), rng.random_range(0.0..240.0))
                } else {
                    gt.apply(&a).unwrap() + Vec2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5))
                };
                PointPair::new(a, b)
            })
            .collect();
        let cfg = RansacConfig { seed: 17, ..RansacConfig::default() };
        let r1 = fit_homography_ransac(&pairs, &cfg).unwrap();
        let r2 = fit_homography_ransac(&pairs, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.model.matrix().as_slice(), r2.model.matrix().as_slice());
    }

    fn scene_pairs(rng: &mut impl Rng, pose: &RelativePose, k: &CameraIntrinsics, n: usize) -> Vec<PointPair> {
        let mut out = Vec::new();
        while out.len() < n {
            let x = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(4.0..10.0));
            let y = pose.transform(&x);
            if y.z <= 0.1 {
                continue;
            }
            out.push(PointPair::new(k.project(&x).unwrap(), k.project(&y).unwrap()));
        }
        out
    }

    #[test]
    fn eight_point_matches_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = CameraIntrinsics::new(500.0, 480.0, 320.0, 240.0, 0.0).unwrap();
        for _ in 0..20 {
            let pose = random_pose(&mut rng, 0.3);
            let pairs = scene_pairs(&mut rng, &pose, &k, 20);
            let f = fit_fundamental_8pt(&pairs).unwrap();
            let gt = fundamental_from_pose(&k, &k, &pose).unwrap();
            let d = (f.matrix() - gt.matrix()).norm().min((f.matrix() + gt.matrix()).norm());
            assert!(d < 1e-6, "{d}");
            for p in &pairs {
                assert!(f.residual(&p.a, &p.b).abs() < 1e-9);
            }
            let s = f.matrix().singular_values();
            assert!(s.min() < 1e-12 * s.max());
        }
    }

    #[test]
    fn collinear_points_are_degenerate() {
        let pairs: Vec<PointPair> = (0..8)
            .map(|i| PointPair::new(Vec2::new(i as f64, 2.0 * i as f64), Vec2::new(i as f64, (i * i) as f64)))
            .collect();
        assert_eq!(fit_fundamental_8pt(&pairs), Err(FitError::DegenerateConfiguration));
    }

    #[test]
    fn pose_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = CameraIntrinsics::new(400.0, 400.0, 200.0, 150.0, 0.0).unwrap();
        for _ in 0..30 {
            let pose = random_pose(&mut rng, 0.4);
            let pairs = scene_pairs(&mut rng, &pose, &k, 30);
            let f = fundamental_from_pose(&k, &k, &pose).unwrap();
            let est = pose_from_essential(&f, &k, &k, &pairs).unwrap();
            assert!((est.rotation - pose.rotation).norm() < 1e-8);
            assert!((est.translation - pose.translation.normalize()).norm() < 1e-8);
        }
    }

    #[test]
    fn mirrored_scene_is_ambiguous() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = CameraIntrinsics::identity();
        let pose = random_pose(&mut rng, 0.2);
        let mut pairs = Vec::new();
        for _ in 0..10 {
            let x = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(4.0..8.0));
            for p in [x, Vector3::new(x.x, x.y, -x.z)] {
                let y = pose.transform(&p);
                pairs.push(PointPair::new(p.xy() / p.z, y.xy() / y.z));
            }
        }
        let f = fundamental_from_pose(&k, &k, &pose).unwrap();
        assert_eq!(pose_from_essential(&f, &k, &k, &pairs), Err(FitError::CheiralityAmbiguous));
    }
}

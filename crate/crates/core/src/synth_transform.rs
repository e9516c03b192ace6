//! Random affine and thin-plate-spline warps used to synthesize an image pair
//! with exact dense correspondences, plus their forward/inverse evaluation.

use nalgebra::{DMatrix, Matrix2, Matrix2x3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::flow_field::{FlowField, PixelGrid};
use crate::geometry::Vec2;

pub const DEFAULT_INVERSE_TOL: f64 = 1e-6;
const MAX_NEWTON_ITERS: usize = 50;
const MAX_SAMPLING_ATTEMPTS: usize = 100;
const MIN_AFFINE_DET: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransformError {
    #[error("affine linear part is singular (|det| = {0:e})")]
    Singular(f64),
    #[error("no invertible transform after {0} draws")]
    SamplingExhausted(usize),
    #[error("inverse did not converge (residual {residual:e} px)")]
    NoConvergence { residual: f64 },
    #[error("invalid thin-plate spline: {0}")]
    InvalidSpline(String),
    #[error("invalid sampler ranges: {0}")]
    InvalidRanges(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Affine,
    Tps,
}

/// Interpolating thin-plate spline with kernel `U(r) = r² log r²`.
///
/// Solved in coordinates scaled by `1 / scale` to keep the kernel matrix
/// well conditioned at image resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ThinPlateSpline {
    controls: Vec<Vec2>,
    displacements: Vec<Vec2>,
    scale: f64,
    weights: Vec<Vec2>,
    affine: Matrix2x3<f64>,
}

fn kernel(sq: f64) -> f64 {
    if sq == 0.0 {
        0.0
    } else {
        sq * sq.ln()
    }
}

/// Gradient of `U(‖p‖)` with respect to `p`, given `sq = ‖p‖²`.
fn kernel_gradient(p: Vec2, sq: f64) -> Vec2 {
    if sq == 0.0 {
        Vec2::zeros()
    } else {
        p * (2.0 * (sq.ln() + 1.0))
    }
}

impl ThinPlateSpline {
    /// Spline mapping each control point `c_i` exactly to `c_i + d_i`.
    pub fn new(controls: Vec<Vec2>, displacements: Vec<Vec2>) -> Result<Self, TransformError> {
        let n = controls.len();
        if n < 3 || displacements.len() != n {
            return Err(TransformError::InvalidSpline(format!(
                "need >= 3 control points with matching displacements, got {} and {}",
                n,
                displacements.len()
            )));
        }
        if controls.iter().chain(&displacements).any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(TransformError::InvalidSpline("non-finite control data".into()));
        }
        let scale = controls.iter().map(|c| c.x.abs().max(c.y.abs())).fold(1.0, f64::max);
        let src: Vec<Vec2> = controls.iter().map(|c| c / scale).collect();

        let mut system = DMatrix::<f64>::zeros(n + 3, n + 3);
        for i in 0..n {
            for j in 0..n {
                system[(i, j)] = kernel((src[i] - src[j]).norm_squared());
            }
            let row = [1.0, src[i].x, src[i].y];
            for (k, v) in row.iter().enumerate() {
                system[(i, n + k)] = *v;
                system[(n + k, i)] = *v;
            }
        }
        let mut rhs = DMatrix::<f64>::zeros(n + 3, 2);
        for i in 0..n {
            let dst = (controls[i] + displacements[i]) / scale;
            rhs[(i, 0)] = dst.x;
            rhs[(i, 1)] = dst.y;
        }
        let sol = system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| TransformError::InvalidSpline("control points are collinear or repeated".into()))?;
        let weights = (0..n).map(|i| Vec2::new(sol[(i, 0)], sol[(i, 1)])).collect();
        let affine = Matrix2x3::new(
            sol[(n + 1, 0)],
            sol[(n + 2, 0)],
            sol[(n, 0)],
            sol[(n + 1, 1)],
            sol[(n + 2, 1)],
            sol[(n, 1)],
        );
        Ok(Self { controls, displacements, scale, weights, affine })
    }

    pub fn controls(&self) -> &[Vec2] {
        &self.controls
    }

    pub fn displacements(&self) -> &[Vec2] {
        &self.displacements
    }

    /// Affine part of the solution, in pixel coordinates.
    pub fn affine_part(&self) -> Matrix2x3<f64> {
        let mut m = self.affine;
        m[(0, 2)] *= self.scale;
        m[(1, 2)] *= self.scale;
        m
    }

    fn eval_normalized(&self, p: Vec2) -> Vec2 {
        let lin = self.affine.fixed_view::<2, 2>(0, 0) * p + self.affine.column(2);
        self.controls
            .iter()
            .zip(&self.weights)
            .fold(lin, |acc, (c, w)| acc + w * kernel((p - c / self.scale).norm_squared()))
    }

    fn jacobian_normalized(&self, p: Vec2) -> Matrix2<f64> {
        let mut j: Matrix2<f64> = self.affine.fixed_view::<2, 2>(0, 0).into_owned();
        for (c, w) in self.controls.iter().zip(&self.weights) {
            let d = p - c / self.scale;
            j += w * kernel_gradient(d, d.norm_squared()).transpose();
        }
        j
    }

    pub fn forward(&self, x: &Vec2) -> Vec2 {
        self.eval_normalized(x / self.scale) * self.scale
    }

    pub fn jacobian(&self, x: &Vec2) -> Matrix2<f64> {
        self.jacobian_normalized(x / self.scale)
    }

    /// Damped Newton inversion started from the inverse of the affine part.
    /// Solutions on an orientation-reversing (folded) sheet are rejected.
    pub fn inverse(&self, y: &Vec2, tol: f64) -> Result<Vec2, TransformError> {
        let target = y / self.scale;
        let lin = self.affine.fixed_view::<2, 2>(0, 0).into_owned();
        let mut x = match lin.try_inverse() {
            Some(inv) => inv * (target - self.affine.column(2)),
            None => target,
        };
        let mut residual = self.eval_normalized(x) - target;
        for _ in 0..MAX_NEWTON_ITERS {
            if residual.norm() * self.scale <= tol {
                if self.jacobian_normalized(x).determinant() <= 0.0 {
                    break;
                }
                return Ok(x * self.scale);
            }
            let Some(j_inv) = self.jacobian_normalized(x).try_inverse() else { break };
            let step = j_inv * residual;
            let mut t = 1.0;
            let mut improved = false;
            for _ in 0..20 {
                let cand = x - step * t;
                let r = self.eval_normalized(cand) - target;
                if r.norm() < residual.norm() {
                    x = cand;
                    residual = r;
                    improved = true;
                    break;
                }
                t *= 0.5;
            }
            if !improved {
                break;
            }
        }
        let res = residual.norm() * self.scale;
        if res <= tol && self.jacobian_normalized(x).determinant() > 0.0 {
            return Ok(x * self.scale);
        }
        Err(TransformError::NoConvergence { residual: res })
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Model {
    Affine(Matrix2x3<f64>),
    Tps(ThinPlateSpline),
}

/// A synthetic geometric transform over an image domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    model: Model,
    domain: PixelGrid,
}

impl TransformSpec {
    /// `y = M · (x, y, 1)ᵀ`.
    pub fn affine(matrix: Matrix2x3<f64>, domain: PixelGrid) -> Result<Self, TransformError> {
        let det = matrix.fixed_view::<2, 2>(0, 0).determinant();
        if !det.is_finite() || det.abs() <= MIN_AFFINE_DET {
            return Err(TransformError::Singular(det));
        }
        Ok(Self { model: Model::Affine(matrix), domain })
    }

    pub fn identity(domain: PixelGrid) -> Self {
        Self { model: Model::Affine(Matrix2x3::identity()), domain }
    }

    pub fn tps(spline: ThinPlateSpline, domain: PixelGrid) -> Self {
        Self { model: Model::Tps(spline), domain }
    }

    /// Spline over a `g × g` control lattice spanning the domain corners.
    pub fn tps_grid(g: usize, displacements: Vec<Vec2>, domain: PixelGrid) -> Result<Self, TransformError> {
        if g < 2 {
            return Err(TransformError::InvalidSpline("control grid must be at least 2x2".into()));
        }
        let spline = ThinPlateSpline::new(control_lattice(g, domain), displacements)?;
        Ok(Self::tps(spline, domain))
    }

    pub fn kind(&self) -> TransformKind {
        match self.model {
            Model::Affine(_) => TransformKind::Affine,
            Model::Tps(_) => TransformKind::Tps,
        }
    }

    pub fn domain(&self) -> PixelGrid {
        self.domain
    }

    pub fn affine_matrix(&self) -> Option<&Matrix2x3<f64>> {
        match &self.model {
            Model::Affine(m) => Some(m),
            Model::Tps(_) => None,
        }
    }

    pub fn spline(&self) -> Option<&ThinPlateSpline> {
        match &self.model {
            Model::Tps(s) => Some(s),
            Model::Affine(_) => None,
        }
    }

    pub fn forward(&self, x: &Vec2) -> Vec2 {
        match &self.model {
            Model::Affine(m) => m.fixed_view::<2, 2>(0, 0) * x + m.column(2),
            Model::Tps(s) => s.forward(x),
        }
    }

    pub fn jacobian(&self, x: &Vec2) -> Matrix2<f64> {
        match &self.model {
            Model::Affine(m) => m.fixed_view::<2, 2>(0, 0).into_owned(),
            Model::Tps(s) => s.jacobian(x),
        }
    }

    /// Preimage of `y`; closed form for affine maps, Newton for splines.
    pub fn inverse(&self, y: &Vec2, tol: f64) -> Result<Vec2, TransformError> {
        match &self.model {
            Model::Affine(m) => {
                let lin = m.fixed_view::<2, 2>(0, 0).into_owned();
                let inv = lin.try_inverse().ok_or(TransformError::Singular(lin.determinant()))?;
                Ok(inv * (y - m.column(2)))
            }
            Model::Tps(s) => s.inverse(y, tol),
        }
    }
}

/// `g × g` lattice of points at the normalized positions `i/(g-1)` scaled to the domain.
pub fn control_lattice(g: usize, domain: PixelGrid) -> Vec<Vec2> {
    let w = (domain.width - 1) as f64;
    let h = (domain.height - 1) as f64;
    let step = 1.0 / (g - 1) as f64;
    (0..g).flat_map(|j| (0..g).map(move |i| Vec2::new(i as f64 * step * w, j as f64 * step * h))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowDirection {
    /// `T(x) − x`
    Forward,
    /// `T⁻¹(x) − x`
    Inverse,
}

/// Exact flow induced by `t` on `grid`. Pixels whose target leaves the image
/// (or whose inverse fails) are marked invalid.
pub fn dense_flow_from_transform(t: &TransformSpec, grid: PixelGrid, direction: FlowDirection) -> FlowField {
    FlowField::from_fn(grid, |u, v| {
        let x = Vec2::new(u as f64, v as f64);
        let target = match direction {
            FlowDirection::Forward => t.forward(&x),
            FlowDirection::Inverse => t.inverse(&x, DEFAULT_INVERSE_TOL).ok()?,
        };
        grid.contains_point(&target).then(|| target - x)
    })
}

/// Sampling ranges for random transforms. Angles are in degrees, translation
/// and jitter are fractions of the image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformRanges {
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub translation_frac: f64,
    pub shear_deg: f64,
    pub tps_jitter_frac: f64,
    pub tps_grid: usize,
}

impl Default for TransformRanges {
    fn default() -> Self {
        Self {
            rotation_deg: 25.0,
            scale_min: 0.75,
            scale_max: 1.33,
            translation_frac: 0.15,
            shear_deg: 10.0,
            tps_jitter_frac: 0.10,
            tps_grid: 3,
        }
    }
}

impl TransformRanges {
    /// Zero-width ranges: every draw is the identity.
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            translation_frac: 0.0,
            shear_deg: 0.0,
            tps_jitter_frac: 0.0,
            tps_grid: 3,
        }
    }

    fn validate(&self) -> Result<(), TransformError> {
        let finite = [
            self.rotation_deg,
            self.scale_min,
            self.scale_max,
            self.translation_frac,
            self.shear_deg,
            self.tps_jitter_frac,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0);
        if !finite
            || self.scale_min <= 0.0
            || self.scale_min > self.scale_max
            || self.tps_grid < 2
            || self.shear_deg >= 90.0
        {
            return Err(TransformError::InvalidRanges(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Seeded generator of random transforms, alternating affine and TPS draws.
#[derive(Debug, Clone)]
pub struct TransformSampler {
    pub ranges: TransformRanges,
    domain: PixelGrid,
    seed: u64,
    rng: ChaCha8Rng,
    draws: u64,
}

impl TransformSampler {
    pub fn new(seed: u64, domain: PixelGrid, ranges: TransformRanges) -> Self {
        Self { ranges, domain, seed, rng: ChaCha8Rng::seed_from_u64(seed), draws: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn symmetric(&mut self, half_width: f64) -> f64 {
        if half_width == 0.0 {
            0.0
        } else {
            self.rng.random_range(-half_width..=half_width)
        }
    }

    fn draw_affine(&mut self) -> Result<TransformSpec, TransformError> {
        let r = self.ranges;
        let theta = self.symmetric(r.rotation_deg).to_radians();
        let shear = self.symmetric(r.shear_deg).to_radians();
        let scale =
            if r.scale_min == r.scale_max { r.scale_min } else { self.rng.random_range(r.scale_min..=r.scale_max) };
        let tx = self.symmetric(r.translation_frac) * self.domain.width as f64;
        let ty = self.symmetric(r.translation_frac) * self.domain.height as f64;
        let rot = Matrix2::new(theta.cos(), -theta.sin(), theta.sin(), theta.cos());
        let lin = rot * Matrix2::new(1.0, shear.tan(), 0.0, 1.0) * scale;
        // act about the image centre
        let c = Vec2::new((self.domain.width - 1) as f64 / 2.0, (self.domain.height - 1) as f64 / 2.0);
        let offset = c - lin * c + Vec2::new(tx, ty);
        TransformSpec::affine(
            Matrix2x3::new(lin[(0, 0)], lin[(0, 1)], offset.x, lin[(1, 0)], lin[(1, 1)], offset.y),
            self.domain,
        )
    }

    fn draw_tps(&mut self) -> Result<TransformSpec, TransformError> {
        let g = self.ranges.tps_grid;
        let jx = self.ranges.tps_jitter_frac * self.domain.width as f64;
        let jy = self.ranges.tps_jitter_frac * self.domain.height as f64;
        let displacements = (0..g * g).map(|_| Vec2::new(self.symmetric(jx), self.symmetric(jy))).collect();
        let t = TransformSpec::tps_grid(g, displacements, self.domain)?;
        if !orientation_preserving(&t, 9) {
            return Err(TransformError::InvalidSpline("spline folds over the domain".into()));
        }
        Ok(t)
    }

    /// Next random transform. Even draws are affine, odd draws are splines.
    pub fn sample_transform(&mut self) -> Result<TransformSpec, TransformError> {
        self.ranges.validate()?;
        let kind = if self.draws.is_multiple_of(2) { TransformKind::Affine } else { TransformKind::Tps };
        self.draws += 1;
        for _ in 0..MAX_SAMPLING_ATTEMPTS {
            let draw = match kind {
                TransformKind::Affine => self.draw_affine(),
                TransformKind::Tps => self.draw_tps(),
            };
            if let Ok(t) = draw {
                return Ok(t);
            }
        }
        Err(TransformError::SamplingExhausted(MAX_SAMPLING_ATTEMPTS))
    }
}

/// Checks `det J > 0` on an `n × n` lattice over the domain.
pub fn orientation_preserving(t: &TransformSpec, n: usize) -> bool {
    let d = t.domain();
    control_lattice(n.max(2), d).iter().all(|p| t.jacobian(p).determinant() > 1e-3)
}

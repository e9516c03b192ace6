//! Synthetic two-view scenes with exact ground truth: random poses, planar
//! scenes whose flow is a plane-induced homography, and image triplets
//! (A, B, B') for exercising the losses and the optimizer.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::flow_field::{FlowField, PixelGrid};
use crate::flow_optimizer::FlowModel;
use crate::geometry::{fundamental_from_pose, homogeneous, CameraIntrinsics, FundamentalMatrix, RelativePose, Vec2};
use crate::synth_transform::{dense_flow_from_transform, FlowDirection, TransformSpec};

pub fn random_rotation(rng: &mut impl Rng, max_angle: f64) -> Matrix3<f64> {
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let axis = if axis.norm() < 1e-6 { Vector3::z() } else { axis.normalize() };
    *Rotation3::from_scaled_axis(axis * rng.random_range(-max_angle..max_angle)).matrix()
}

/// Random pose with a rotation of at most `max_angle` radians and a unit-norm translation.
pub fn random_pose(rng: &mut impl Rng, max_angle: f64) -> RelativePose {
    let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
    let t = if t.norm() < 1e-3 { Vector3::x() } else { t.normalize() };
    RelativePose::new(random_rotation(rng, max_angle), t).expect("rotation from axis-angle is proper")
}

pub fn apply_homography(h: &Matrix3<f64>, p: &Vec2) -> Option<Vec2> {
    let q = h * homogeneous(p);
    (q.z.abs() > 1e-15).then(|| Vec2::new(q.x / q.z, q.y / q.z))
}

/// Plane `nᵀX = d` (camera-A frame) seen by two cameras.
#[derive(Debug, Clone, Copy)]
pub struct PlanarScene {
    pub ka: CameraIntrinsics,
    pub kb: CameraIntrinsics,
    pub pose: RelativePose,
    pub normal: Vector3<f64>,
    pub distance: f64,
}

impl PlanarScene {
    /// Pixel homography A → B induced by the plane: `Kb (R + t nᵀ / d) Ka⁻¹`.
    pub fn homography(&self) -> Matrix3<f64> {
        self.kb.matrix()
            * (self.pose.rotation + self.pose.translation * self.normal.transpose() / self.distance)
            * self.ka.inverse_matrix()
    }

    pub fn fundamental(&self) -> FundamentalMatrix {
        fundamental_from_pose(&self.ka, &self.kb, &self.pose).expect("scene pose has translation")
    }

    /// Exact flow `f_{B←A}` on A's grid (valid wherever the homography is defined).
    pub fn flow_b_from_a(&self, grid: PixelGrid) -> FlowField {
        let h = self.homography();
        FlowField::from_fn(grid, |u, v| {
            let x = Vec2::new(u as f64, v as f64);
            apply_homography(&h, &x).map(|y| y - x)
        })
    }

    pub fn flow_a_from_b(&self, grid: PixelGrid) -> FlowField {
        let h = self.homography().try_inverse().expect("plane not through camera centre");
        FlowField::from_fn(grid, |u, v| {
            let y = Vec2::new(u as f64, v as f64);
            apply_homography(&h, &y).map(|x| x - y)
        })
    }
}

/// Axis-aligned pixel rectangle `[u0, u1) × [v0, v1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub u0: f64,
    pub v0: f64,
    pub u1: f64,
    pub v1: f64,
}

impl Rect {
    pub fn contains(&self, p: &Vec2) -> bool {
        p.x >= self.u0 && p.x < self.u1 && p.y >= self.v0 && p.y < self.v1
    }
}

/// Closer plane covering a rectangle of image A, occluding part of the background in B.
#[derive(Debug, Clone, Copy)]
pub struct Occluder {
    pub region_a: Rect,
    pub depth: f64,
}

/// Image triplet with exact flows: A↔B from a (possibly occluded) planar
/// scene, B↔B' from a synthetic transform.
#[derive(Debug, Clone)]
pub struct SyntheticTriplet {
    pub grid: PixelGrid,
    pub scene: PlanarScene,
    pub f: FundamentalMatrix,
    pub transform: TransformSpec,
    pub gt_b_from_a: FlowField,
    pub gt_a_from_b: FlowField,
    pub gt_bp_from_b: FlowField,
    pub gt_b_from_bp: FlowField,
    /// Pixels of A whose ground-truth round trip A → B → A is consistent.
    pub visible_a: Vec<bool>,
    /// Pixels of B whose ground-truth round trip B → A → B is consistent.
    pub visible_b: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct TripletOptions {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub background_depth: f64,
    pub occluder: Option<Occluder>,
}

impl Default for TripletOptions {
    fn default() -> Self {
        Self { width: 48, height: 40, focal: 60.0, background_depth: 10.0, occluder: None }
    }
}

impl SyntheticTriplet {
    /// Builds a triplet with a seeded, mostly-lateral camera motion.
    pub fn new(seed: u64, options: TripletOptions, transform: impl FnOnce(PixelGrid) -> TransformSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = PixelGrid::new(options.width, options.height).expect("non-empty triplet grid");
        let k = CameraIntrinsics::new(
            options.focal,
            options.focal,
            (options.width - 1) as f64 / 2.0,
            (options.height - 1) as f64 / 2.0,
            0.0,
        )
        .expect("positive focal length");
        let rotation = random_rotation(&mut rng, 0.02);
        let translation =
            Vector3::new(rng.random_range(0.4..0.6), rng.random_range(-0.15..0.15), rng.random_range(-0.05..0.05));
        let pose = RelativePose::new(rotation, translation).expect("proper rotation");
        let scene = PlanarScene { ka: k, kb: k, pose, normal: Vector3::z(), distance: options.background_depth };
        let f = scene.fundamental();

        let h_bg = scene.homography();
        let h_bg_inv = h_bg.try_inverse().expect("invertible background homography");
        let occluder = options.occluder.map(|o| {
            let fg = PlanarScene { distance: o.depth, ..scene };
            let h = fg.homography();
            (o.region_a, h, h.try_inverse().expect("invertible occluder homography"))
        });
        let in_fg_b = |y: &Vec2| -> Option<Vec2> {
            let (region, _, h_inv) = occluder.as_ref()?;
            let x = apply_homography(h_inv, y)?;
            region.contains(&x).then_some(x)
        };

        let gt_b_from_a = FlowField::from_fn(grid, |u, v| {
            let x = Vec2::new(u as f64, v as f64);
            let h = match &occluder {
                Some((region, h_fg, _)) if region.contains(&x) => h_fg,
                _ => &h_bg,
            };
            apply_homography(h, &x).map(|y| y - x)
        });
        let gt_a_from_b = FlowField::from_fn(grid, |u, v| {
            let y = Vec2::new(u as f64, v as f64);
            match in_fg_b(&y) {
                Some(x) => Some(x - y),
                None => apply_homography(&h_bg_inv, &y).map(|x| x - y),
            }
        });
        let visible_a = grid
            .iter()
            .map(|(u, v)| {
                let x = Vec2::new(u as f64, v as f64);
                match &occluder {
                    Some((region, _, _)) if !region.contains(&x) => {
                        apply_homography(&h_bg, &x).is_some_and(|y| in_fg_b(&y).is_none())
                    }
                    _ => true,
                }
            })
            .collect();
        let visible_b = grid
            .iter()
            .map(|(u, v)| {
                let y = Vec2::new(u as f64, v as f64);
                match &occluder {
                    Some((region, _, _)) if in_fg_b(&y).is_none() => {
                        // background seen in B but hidden behind the occluder in A
                        apply_homography(&h_bg_inv, &y).is_some_and(|x| !region.contains(&x))
                    }
                    _ => true,
                }
            })
            .collect();

        let transform = transform(grid);
        let gt_bp_from_b = dense_flow_from_transform(&transform, grid, FlowDirection::Forward);
        let gt_b_from_bp = dense_flow_from_transform(&transform, grid, FlowDirection::Inverse);
        Self { grid, scene, f, transform, gt_b_from_a, gt_a_from_b, gt_bp_from_b, gt_b_from_bp, visible_a, visible_b }
    }
}

/// Lattice model initialised from `field` at the nodes plus independent
/// Gaussian noise of standard deviation `sigma` pixels.
pub fn noisy_lattice(field: &FlowField, spacing: usize, sigma: f64, rng: &mut impl Rng) -> FlowModel {
    let mut model = FlowModel::lattice_from_field(field, spacing);
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("positive sigma");
        for p in model.params_mut() {
            *p += Vec2::new(normal.sample(rng), normal.sample(rng));
        }
    }
    model
}

use epiflow::geometry::{sed, CameraIntrinsics, Vec2};
use epiflow::model_fit::{
    fit_fundamental_8pt, fit_homography_ransac, pose_from_essential, Homography, PointPair, RansacConfig,
};
use epiflow::synthetic::random_pose;
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const W: f64 = 640.0;
const H: f64 = 480.0;

fn random_h(rng: &mut impl Rng) -> Homography {
    Homography::new(Matrix3::new(
        rng.random_range(0.85..1.15),
        rng.random_range(-0.15..0.15),
        rng.random_range(-30.0..30.0),
        rng.random_range(-0.15..0.15),
        rng.random_range(0.85..1.15),
        rng.random_range(-30.0..30.0),
        rng.random_range(-2e-4..2e-4),
        rng.random_range(-2e-4..2e-4),
        1.0,
    ))
    .unwrap()
}

fn mean_corner_error(a: &Homography, b: &Homography) -> f64 {
    [(0.0, 0.0), (W - 1.0, 0.0), (0.0, H - 1.0), (W - 1.0, H - 1.0)]
        .iter()
        .map(|&(x, y)| {
            let p = Vec2::new(x, y);
            (a.apply(&p).unwrap() - b.apply(&p).unwrap()).norm()
        })
        .sum::<f64>()
        / 4.0
}

/// 70 noisy inliers followed by 30 uniform outliers.
fn contaminated(rng: &mut impl Rng, gt: &Homography) -> Vec<PointPair> {
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut pairs = Vec::new();
    for i in 0..100 {
        let a = Vec2::new(rng.random_range(0.0..W), rng.random_range(0.0..H));
        let b = if i < 70 {
            gt.apply(&a).unwrap() + Vec2::new(noise.sample(rng), noise.sample(rng))
        } else {
            Vec2::new(rng.random_range(0.0..W), rng.random_range(0.0..H))
        };
        pairs.push(PointPair::new(a, b));
    }
    pairs
}

#[test]
fn ransac_homography_statistics() {
    let mut correct = 0;
    let mut recall_ok = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_h(&mut rng);
        let pairs = contaminated(&mut rng, &gt);
        let r = fit_homography_ransac(&pairs, &RansacConfig { seed, ..RansacConfig::default() }).unwrap();
        if mean_corner_error(&r.model, &gt) < 0.5 {
            correct += 1;
        }
        let recall = r.inliers[..70].iter().filter(|&&b| b).count() as f64 / 70.0;
        if recall >= 0.95 {
            recall_ok += 1;
        }
    }
    assert!(correct >= 95, "{correct}/100 seeds under 0.5 px");
    assert!(recall_ok >= 95, "{recall_ok}/100 seeds with recall >= 0.95");
}

#[test]
fn ransac_inliers_invariant_under_similarity() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let gt = random_h(&mut rng);
        let pairs = contaminated(&mut rng, &gt);
        let (s, th): (f64, f64) = (rng.random_range(0.5..3.0), rng.random_range(-1.0..1.0));
        let (c, sn) = (th.cos(), th.sin());
        let off = Vec2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let sim = |p: Vec2| Vec2::new(s * (c * p.x - sn * p.y), s * (sn * p.x + c * p.y)) + off;
        let moved: Vec<PointPair> = pairs.iter().map(|p| PointPair::new(sim(p.a), sim(p.b))).collect();
        let cfg = RansacConfig { seed, ..RansacConfig::default() };
        let r1 = fit_homography_ransac(&pairs, &cfg).unwrap();
        let r2 = fit_homography_ransac(&moved, &RansacConfig { threshold: cfg.threshold * s, ..cfg }).unwrap();
        assert_eq!(r1.inliers, r2.inliers, "seed {seed}");
    }
}

fn scene(rng: &mut impl Rng, n: usize, k: &CameraIntrinsics, pose: &epiflow::geometry::RelativePose) -> Vec<PointPair> {
    let mut out = Vec::new();
    while out.len() < n {
        let x = Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0), rng.random_range(5.0..15.0));
        let y = pose.transform(&x);
        if y.z > 0.5 {
            out.push(PointPair::new(k.project(&x).unwrap(), k.project(&y).unwrap()));
        }
    }
    out
}

#[test]
fn eight_point_closed_loop_recovers_pose() {
    let k = CameraIntrinsics::new(520.0, 515.0, 319.5, 239.5, 0.0).unwrap();
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = random_pose(&mut rng, 0.3);
        let pairs = scene(&mut rng, 40, &k, &pose);
        let f = fit_fundamental_8pt(&pairs).unwrap();
        let est = pose_from_essential(&f, &k, &k, &pairs).unwrap();
        let rot = ((((est.rotation.transpose() * pose.rotation).trace() - 1.0) / 2.0).clamp(-1.0, 1.0)).acos();
        let tr = est.translation.normalize().dot(&pose.translation.normalize()).clamp(-1.0, 1.0).acos();
        assert!(rot < 1e-6 && tr < 1e-6, "seed {seed}: {rot} {tr}");
    }
}

#[test]
fn noisy_eight_point_keeps_small_sed() {
    let k = CameraIntrinsics::new(520.0, 520.0, 320.0, 240.0, 0.0).unwrap();
    let noise = Normal::new(0.0, 0.2).unwrap();
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = random_pose(&mut rng, 0.2);
        let pairs: Vec<PointPair> = scene(&mut rng, 60, &k, &pose)
            .into_iter()
            .map(|p| PointPair::new(p.a, p.b + Vec2::new(noise.sample(&mut rng), noise.sample(&mut rng))))
            .collect();
        let f = fit_fundamental_8pt(&pairs).unwrap();
        let mean = pairs.iter().map(|p| sed(&f, &p.a, &p.b).unwrap()).sum::<f64>() / pairs.len() as f64;
        assert!(mean < 1.0, "seed {seed}: {mean}");
    }
}

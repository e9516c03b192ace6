//! Flow-guided two-stage sparse matching.
//!
//! Stage 1 looks for each keypoint's partner only inside a small circle around
//! the location predicted by the dense flow, then keeps mutually consistent
//! pairs. Stage 2 matches the leftovers by global descriptor similarity with
//! the same reciprocity check.

use rayon::prelude::*;
use thiserror::Error;

use crate::flow_field::FlowField;
use crate::geometry::Vec2;

pub const DEFAULT_RADIUS: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("points and descriptors differ in length ({points} vs {descriptors})")]
    LengthMismatch { points: usize, descriptors: usize },
    #[error("descriptor {index} has dimension {got}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, got: usize },
    #[error("descriptor {0} has zero or non-finite norm")]
    DegenerateDescriptor(usize),
    #[error("keypoint {0} has a non-finite location")]
    NonFinitePoint(usize),
    #[error("descriptor dimensions differ between the two sets ({0} vs {1})")]
    SetDimensionMismatch(usize, usize),
}

/// Keypoints with unit-norm descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: Vec<Vec2>,
    descriptors: Vec<Vec<f64>>,
    dim: usize,
}

impl KeypointSet {
    /// Normalizes every descriptor to unit L2 norm.
    pub fn new(points: Vec<Vec2>, descriptors: Vec<Vec<f64>>) -> Result<Self, MatchError> {
        if points.len() != descriptors.len() {
            return Err(MatchError::LengthMismatch { points: points.len(), descriptors: descriptors.len() });
        }
        let dim = descriptors.first().map_or(0, Vec::len);
        let mut normalized = Vec::with_capacity(descriptors.len());
        for (i, (p, d)) in points.iter().zip(descriptors).enumerate() {
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(MatchError::NonFinitePoint(i));
            }
            if d.len() != dim {
                return Err(MatchError::DimensionMismatch { index: i, expected: dim, got: d.len() });
            }
            let n = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(MatchError::DegenerateDescriptor(i));
            }
            normalized.push(d.into_iter().map(|x| x / n).collect());
        }
        Ok(Self { points, descriptors: normalized, dim })
    }

    pub fn empty(dim: usize) -> Self {
        Self { points: Vec::new(), descriptors: Vec::new(), dim }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn descriptors(&self) -> &[Vec<f64>] {
        &self.descriptors
    }

    pub fn similarity(&self, i: usize, other: &KeypointSet, j: usize) -> f64 {
        dot(&self.descriptors[i], &other.descriptors[j])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    FlowGuided = 1,
    Descriptor = 2,
}

impl Stage {
    pub fn number(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub stage: Stage,
    pub similarity: f64,
}

/// One-to-one matches sorted by A index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pairs: Vec<Match>,
}

impl MatchSet {
    pub fn from_pairs(mut pairs: Vec<Match>) -> Self {
        pairs.sort_by_key(|m| (m.a, m.b));
        Self { pairs }
    }

    pub fn pairs(&self) -> &[Match] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn stage_count(&self, stage: Stage) -> usize {
        self.pairs.iter().filter(|m| m.stage == stage).count()
    }

    pub fn is_one_to_one(&self) -> bool {
        let mut a: Vec<usize> = self.pairs.iter().map(|m| m.a).collect();
        let mut b: Vec<usize> = self.pairs.iter().map(|m| m.b).collect();
        a.sort_unstable();
        b.sort_unstable();
        a.windows(2).all(|w| w[0] != w[1]) && b.windows(2).all(|w| w[0] != w[1])
    }
}

/// `map[i] = Some(j)` when query `i` picked candidate `j`.
pub type DirectedMatches = Vec<Option<usize>>;

/// Highest-similarity candidate; exact ties go to the lowest index.
fn best_candidate(query: &[f64], to: &KeypointSet, candidates: impl Iterator<Item = usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for j in candidates {
        let s = dot(query, &to.descriptors[j]);
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((j, s));
        }
    }
    best.map(|(j, _)| j)
}

/// For each point of `from`, the most similar point of `to` within `radius`
/// of the flow-predicted location. Flow is sampled bilinearly at the
/// keypoint; invalid or out-of-image samples leave the point unmatched.
pub fn stage1_directed(from: &KeypointSet, to: &KeypointSet, flow: &FlowField, radius: f64) -> DirectedMatches {
    (0..from.len())
        .into_par_iter()
        .map(|i| {
            let p = from.points[i];
            let target = p + flow.sample(&p)?;
            let near = (0..to.len()).filter(|&j| (to.points[j] - target).norm() <= radius);
            best_candidate(&from.descriptors[i], to, near)
        })
        .collect()
}

/// Pairs `(i, j)` with `mba[i] = j` and `mab[j] = i`.
pub fn mutual_filter(mba: &DirectedMatches, mab: &DirectedMatches) -> Vec<(usize, usize)> {
    mba.iter()
        .enumerate()
        .filter_map(|(i, j)| {
            let j = (*j)?;
            (mab.get(j).copied().flatten() == Some(i)).then_some((i, j))
        })
        .collect()
}

fn tag(a: &KeypointSet, b: &KeypointSet, pairs: Vec<(usize, usize)>, stage: Stage) -> Vec<Match> {
    pairs.into_iter().map(|(i, j)| Match { a: i, b: j, stage, similarity: a.similarity(i, b, j) }).collect()
}

/// Adds descriptor matches between keypoints left over by stage 1.
///
/// Leftover queries search the whole other set; a pair is kept only when both
/// endpoints are leftovers and each is the other's choice.
pub fn stage2_supplement(a: &KeypointSet, b: &KeypointSet, stage1: &MatchSet) -> MatchSet {
    let mut used_a = vec![false; a.len()];
    let mut used_b = vec![false; b.len()];
    for m in stage1.pairs() {
        used_a[m.a] = true;
        used_b[m.b] = true;
    }
    let leftover = |from: &KeypointSet, to: &KeypointSet, used: &[bool]| -> DirectedMatches {
        (0..from.len())
            .into_par_iter()
            .map(|i| if used[i] { None } else { best_candidate(&from.descriptors[i], to, 0..to.len()) })
            .collect()
    };
    let mba = leftover(a, b, &used_a);
    let mab = leftover(b, a, &used_b);
    let extra = mutual_filter(&mba, &mab).into_iter().filter(|&(i, j)| !used_a[i] && !used_b[j]).collect();
    let mut pairs = stage1.pairs().to_vec();
    pairs.extend(tag(a, b, extra, Stage::Descriptor));
    MatchSet::from_pairs(pairs)
}

/// Full two-stage matching with flows `f_{B←A}` and `f_{A←B}`.
pub fn match_keypoints(
    a: &KeypointSet,
    b: &KeypointSet,
    fba: &FlowField,
    fab: &FlowField,
    radius: f64,
) -> Result<MatchSet, MatchError> {
    if a.is_empty() || b.is_empty() {
        return Ok(MatchSet::default());
    }
    if a.dim() != b.dim() {
        return Err(MatchError::SetDimensionMismatch(a.dim(), b.dim()));
    }
    let mba = stage1_directed(a, b, fba, radius);
    let mab = stage1_directed(b, a, fab, radius);
    let stage1 = MatchSet::from_pairs(tag(a, b, mutual_filter(&mba, &mab), Stage::FlowGuided));
    Ok(stage2_supplement(a, b, &stage1))
}

/// Descriptor-only mutual nearest neighbours (no flow guidance).
pub fn match_descriptors_mnn(a: &KeypointSet, b: &KeypointSet) -> Result<MatchSet, MatchError> {
    if a.is_empty() || b.is_empty() {
        return Ok(MatchSet::default());
    }
    if a.dim() != b.dim() {
        return Err(MatchError::SetDimensionMismatch(a.dim(), b.dim()));
    }
    let mba: DirectedMatches = (0..a.len()).map(|i| best_candidate(&a.descriptors[i], b, 0..b.len())).collect();
    let mab: DirectedMatches = (0..b.len()).map(|j| best_candidate(&b.descriptors[j], a, 0..a.len())).collect();
    Ok(MatchSet::from_pairs(tag(a, b, mutual_filter(&mba, &mab), Stage::Descriptor)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow_field::PixelGrid;
    use proptest::prelude::*;

    fn kp(points: &[(f64, f64)], desc: &[Vec<f64>]) -> KeypointSet {
        KeypointSet::new(points.iter().map(|&(x, y)| Vec2::new(x, y)).collect(), desc.to_vec()).unwrap()
    }

    fn unit_with_sim(s: f64) -> Vec<f64> {
        vec![s, (1.0 - s * s).sqrt()]
    }

    fn const_flow(v: (f64, f64)) -> FlowField {
        FlowField::constant(PixelGrid::new(64, 32).unwrap(), Vec2::new(v.0, v.1))
    }

    #[test]
    fn descriptors_are_normalized() {
        let k = kp(&[(0.0, 0.0)], &[vec![3.0, 4.0]]);
        assert!((k.descriptors()[0].iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-12);
        let bad = KeypointSet::new(vec![Vec2::zeros()], vec![vec![0.0, 0.0]]);
        assert_eq!(bad, Err(MatchError::DegenerateDescriptor(0)));
        let ragged = KeypointSet::new(vec![Vec2::zeros(); 2], vec![vec![1.0], vec![1.0, 0.0]]);
        assert!(matches!(ragged, Err(MatchError::DimensionMismatch { index: 1, .. })));
    }

    #[test]
    fn stage1_single_pair() {
        let a = kp(&[(10.0, 10.0)], &[vec![1.0, 0.0]]);
        let b = kp(&[(20.0, 10.0)], &[vec![1.0, 0.0]]);
        let m = stage1_directed(&a, &b, &const_flow((10.0, 0.0)), 5.0);
        assert_eq!(m, vec![Some(0)]);
        assert_eq!(a.similarity(0, &b, 0), 1.0);
    }

    #[test]
    fn stage1_respects_radius_over_similarity() {
        let a = kp(&[(10.0, 10.0)], &[vec![1.0, 0.0]]);
        let b = kp(&[(21.0, 10.0), (40.0, 10.0)], &[unit_with_sim(0.9), unit_with_sim(0.99)]);
        assert_eq!(stage1_directed(&a, &b, &const_flow((10.0, 0.0)), 5.0), vec![Some(0)]);
        let far = kp(&[(30.0, 10.0)], &[vec![1.0, 0.0]]);
        assert_eq!(stage1_directed(&a, &far, &const_flow((10.0, 0.0)), 5.0), vec![None]);
    }

    #[test]
    fn stage1_ties_break_low() {
        let a = kp(&[(10.0, 10.0)], &[vec![1.0, 0.0]]);
        let b = kp(&[(22.0, 10.0), (18.0, 10.0)], &[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(stage1_directed(&a, &b, &const_flow((10.0, 0.0)), 5.0), vec![Some(0)]);
    }

    #[test]
    fn stage1_out_of_image_is_unmatched() {
        let a = kp(&[(70.0, 10.0)], &[vec![1.0, 0.0]]);
        let b = kp(&[(70.0, 10.0)], &[vec![1.0, 0.0]]);
        assert_eq!(stage1_directed(&a, &b, &const_flow((0.0, 0.0)), 5.0), vec![None]);
    }

    #[test]
    fn mutual_filter_cases() {
        assert_eq!(mutual_filter(&vec![Some(1)], &vec![None, Some(0)]), vec![(0, 1)]);
        assert!(mutual_filter(&vec![Some(1)], &vec![None, Some(2)]).is_empty());
        assert!(mutual_filter(&vec![Some(5)], &vec![None]).is_empty());
    }

    #[test]
    fn stage2_adds_nothing_when_all_matched() {
        let a = kp(&[(1.0, 1.0)], &[vec![1.0, 0.0]]);
        let b = kp(&[(1.0, 1.0)], &[vec![1.0, 0.0]]);
        let s1 = MatchSet::from_pairs(vec![Match { a: 0, b: 0, stage: Stage::FlowGuided, similarity: 1.0 }]);
        assert_eq!(stage2_supplement(&a, &b, &s1), s1);
    }

    #[test]
    fn stage2_adds_unique_leftover() {
        let a = kp(&[(1.0, 1.0), (5.0, 5.0)], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = kp(&[(1.0, 1.0), (50.0, 5.0)], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s1 = MatchSet::from_pairs(vec![Match { a: 0, b: 0, stage: Stage::FlowGuided, similarity: 1.0 }]);
        let out = stage2_supplement(&a, &b, &s1);
        assert_eq!(out.len(), 2);
        assert_eq!(out.pairs()[1], Match { a: 1, b: 1, stage: Stage::Descriptor, similarity: 1.0 });
    }

    #[test]
    fn stage2_rejects_non_reciprocal() {
        // a1 prefers b1, but b1 prefers a0 (already consumed), so no reciprocity
        let a = kp(&[(0.0, 0.0), (9.0, 9.0)], &[vec![1.0, 0.0], unit_with_sim(0.8)]);
        let b = kp(&[(3.0, 3.0), (7.0, 7.0)], &[vec![0.0, 1.0], unit_with_sim(0.95)]);
        let s1 = MatchSet::from_pairs(vec![Match { a: 0, b: 0, stage: Stage::FlowGuided, similarity: 0.0 }]);
        let out = stage2_supplement(&a, &b, &s1);
        assert_eq!(out, s1);
    }

    #[test]
    fn identity_flow_coincident_points() {
        let pts: Vec<(f64, f64)> = (0..6).map(|i| (5.0 + 8.0 * i as f64, 10.0)).collect();
        let desc: Vec<Vec<f64>> = (0..6).map(|i| (0..6).map(|k| if k == i { 1.0 } else { 0.1 }).collect()).collect();
        let a = kp(&pts, &desc);
        let zero = const_flow((0.0, 0.0));
        let m = match_keypoints(&a, &a, &zero, &zero, 5.0).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m.stage_count(Stage::FlowGuided), 6);
        assert!(m.pairs().iter().all(|p| p.a == p.b));
    }

    #[test]
    fn empty_side_gives_empty_set() {
        let a = kp(&[(1.0, 1.0)], &[vec![1.0, 0.0]]);
        let zero = const_flow((0.0, 0.0));
        assert!(match_keypoints(&a, &KeypointSet::empty(2), &zero, &zero, 5.0).unwrap().is_empty());
        assert!(match_keypoints(&KeypointSet::empty(2), &a, &zero, &zero, 5.0).unwrap().is_empty());
    }

    fn random_sets(seed: u64, na: usize, nb: usize) -> (KeypointSet, KeypointSet) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut mk = |n: usize| {
            let pts = (0..n).map(|_| Vec2::new(rng.random_range(0.0..63.0), rng.random_range(0.0..31.0))).collect();
            let desc = (0..n).map(|_| (0..4).map(|_| rng.random_range(0.1..1.0)).collect()).collect();
            KeypointSet::new(pts, desc).unwrap()
        };
        let a = mk(na);
        let b = mk(nb);
        (a, b)
    }

    proptest! {
        #[test]
        fn output_is_one_to_one_with_disjoint_stages(seed in any::<u64>(), na in 0usize..20, nb in 0usize..20, r in 0.0f64..12.0) {
            let (a, b) = random_sets(seed, na, nb);
            let fba = const_flow((1.5, -0.5));
            let fab = const_flow((-1.5, 0.5));
            let m = match_keypoints(&a, &b, &fba, &fab, r).unwrap();
            prop_assert!(m.is_one_to_one());
            prop_assert!(m.pairs().windows(2).all(|w| w[0].a < w[1].a));
            for p in m.pairs().iter().filter(|p| p.stage == Stage::FlowGuided) {
                prop_assert!((b.points()[p.b] - (a.points()[p.a] + Vec2::new(1.5, -0.5))).norm() <= r);
                prop_assert!((a.points()[p.a] - (b.points()[p.b] + Vec2::new(-1.5, 0.5))).norm() <= r);
            }
            for p in m.pairs() {
                prop_assert!((-1.0..=1.0).contains(&p.similarity));
            }
        }

        #[test]
        fn mutual_filter_matches_brute_force(
            mba in proptest::collection::vec(proptest::option::of(0usize..8), 0..8),
            mab in proptest::collection::vec(proptest::option::of(0usize..8), 0..8),
        ) {
            let mut oracle = Vec::new();
            for i in 0..mba.len() {
                for j in 0..mab.len() {
                    if mba[i] == Some(j) && mab[j] == Some(i) {
                        oracle.push((i, j));
                    }
                }
            }
            prop_assert_eq!(mutual_filter(&mba, &mab), oracle);
        }

        #[test]
        fn permutation_equivariant(seed in any::<u64>(), shift in 0usize..13) {
            let (a, b) = random_sets(seed, 13, 11);
            let fba = const_flow((0.5, 0.25));
            let fab = const_flow((-0.5, -0.25));
            let base = match_keypoints(&a, &b, &fba, &fab, 8.0).unwrap();
            // rotate A's order
            let perm: Vec<usize> = (0..a.len()).map(|k| (k + shift) % a.len()).collect();
            let pa = KeypointSet::new(
                perm.iter().map(|&k| a.points()[k]).collect(),
                perm.iter().map(|&k| a.descriptors()[k].clone()).collect(),
            ).unwrap();
            let permuted = match_keypoints(&pa, &b, &fba, &fab, 8.0).unwrap();
            let mut mapped: Vec<(usize, usize, Stage)> = permuted.pairs().iter().map(|m| (perm[m.a], m.b, m.stage)).collect();
            mapped.sort();
            let expect: Vec<(usize, usize, Stage)> = base.pairs().iter().map(|m| (m.a, m.b, m.stage)).collect();
            prop_assert_eq!(mapped, expect);
        }
    }
}

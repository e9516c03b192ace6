//! Training objectives on dense flows: symmetric epipolar distance, the
//! adaptively filtered cycle loss and the bidirectional transform loss.
//!
//! Every loss returns a [`LossReport`] and the gradient of its (unweighted)
//! term with respect to the flow vectors of each field it reads. Per-pixel
//! terms are evaluated in parallel and reduced with a fixed pairwise tree, so
//! results do not depend on the worker count.

use std::collections::BTreeMap;

use rayon::prelude::*;
use thiserror::Error;

use crate::flow_field::{BilinearTaps, FlowField, PixelGrid};
use crate::geometry::{sed_with_gradient, FundamentalMatrix, Vec2};
use crate::synth_transform::{dense_flow_from_transform, FlowDirection, TransformSpec};

pub const TERM_SED: &str = "sed";
pub const TERM_CYC: &str = "cyc";
pub const TERM_BIT: &str = "bit";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("no pixel contributes to the {0} loss")]
    EmptySupport(&'static str),
    #[error("flow fields have mismatched grids: {0:?} vs {1:?}")]
    ShapeMismatch(PixelGrid, PixelGrid),
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    /// Mean over the pixels that actually contribute to the term.
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(LossError::InvalidConfig(format!("unknown reduction '{other}'"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub w_sed: f64,
    pub w_cyc: f64,
    pub w_bit: f64,
    /// Absolute cycle-distance threshold in pixels.
    pub alpha: f64,
    /// Cycle-distance threshold relative to the forward flow magnitude.
    pub beta: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { w_sed: 1.0, w_cyc: 1.0, w_bit: 1.0, alpha: 3.0, beta: 0.05, reduction: Reduction::Mean }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let checks = [
            ("w_sed", self.w_sed),
            ("w_cyc", self.w_cyc),
            ("w_bit", self.w_bit),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ];
        for (name, v) in checks {
            // alpha = +inf is how the unfiltered cycle loss is expressed
            if v.is_nan() || v < 0.0 || (name != "alpha" && v.is_infinite()) {
                return Err(LossError::InvalidConfig(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    /// Sets one `key=value` entry. Returns `Ok(false)` for keys this config does not own.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<bool, LossError> {
        let parse = |v: &str| {
            v.parse::<f64>().map_err(|_| LossError::InvalidConfig(format!("{key}: cannot parse '{v}' as a number")))
        };
        match key {
            "w_sed" => self.w_sed = parse(value)?,
            "w_cyc" => self.w_cyc = parse(value)?,
            "w_bit" => self.w_bit = parse(value)?,
            "alpha" => self.alpha = parse(value)?,
            "beta" => self.beta = parse(value)?,
            "reduction" => self.reduction = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Weight applied to a named term in the total; unknown terms count once.
    pub fn weight(&self, term: &str) -> f64 {
        match term {
            TERM_SED => self.w_sed,
            TERM_CYC => self.w_cyc,
            TERM_BIT => self.w_bit,
            _ => 1.0,
        }
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("w_sed", self.w_sed.to_string()),
            ("w_cyc", self.w_cyc.to_string()),
            ("w_bit", self.w_bit.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("reduction", self.reduction.to_string()),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub per_term: BTreeMap<String, f64>,
    pub count: BTreeMap<String, usize>,
}

impl LossReport {
    fn single(term: &'static str, value: f64, count: usize, cfg: &LossConfig) -> Self {
        Self {
            total: cfg.weight(term) * value,
            per_term: BTreeMap::from([(term.to_string(), value)]),
            count: BTreeMap::from([(term.to_string(), count)]),
        }
    }

    pub fn term(&self, name: &str) -> f64 {
        self.per_term.get(name).copied().unwrap_or(0.0)
    }

    pub fn term_count(&self, name: &str) -> usize {
        self.count.get(name).copied().unwrap_or(0)
    }
}

/// Per-pixel gradient of a loss with respect to a flow field.
#[derive(Debug, Clone, PartialEq)]
pub struct GradField {
    grid: PixelGrid,
    values: Vec<Vec2>,
}

impl GradField {
    pub fn zeros(grid: PixelGrid) -> Self {
        Self { grid, values: vec![Vec2::zeros(); grid.len()] }
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn values(&self) -> &[Vec2] {
        &self.values
    }

    pub fn get(&self, u: usize, v: usize) -> Vec2 {
        self.values[self.grid.index(u, v)]
    }

    pub fn add_scaled(&mut self, other: &GradField, scale: f64) {
        debug_assert_eq!(self.grid, other.grid);
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b * scale;
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }
}

/// Pairwise (tree) summation with a fixed split order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

fn reduce(values: &[f64], reduction: Reduction) -> (f64, f64) {
    let sum = pairwise_sum(values);
    match reduction {
        Reduction::Sum => (sum, 1.0),
        Reduction::Mean => {
            let scale = 1.0 / values.len() as f64;
            (sum * scale, scale)
        }
    }
}

/// Symmetric epipolar distance of every valid pixel of `fba` against `f`
/// (pixels of A map into B). Pixels at the epipole are skipped.
pub fn loss_sed(
    fba: &FlowField,
    f: &FundamentalMatrix,
    cfg: &LossConfig,
) -> Result<(LossReport, GradField), LossError> {
    cfg.validate()?;
    let grid = fba.grid();
    let per_pixel: Vec<Option<(f64, Vec2)>> = (0..grid.len())
        .into_par_iter()
        .map(|i| {
            if !fba.is_valid(i) {
                return None;
            }
            let x = grid.point(i);
            sed_with_gradient(f, &x, &(x + fba.vector_at(i))).ok()
        })
        .collect();

    let values: Vec<f64> = per_pixel.iter().flatten().map(|(v, _)| *v).collect();
    if values.is_empty() {
        return Err(LossError::EmptySupport(TERM_SED));
    }
    let (loss, scale) = reduce(&values, cfg.reduction);
    let mut grad = GradField::zeros(grid);
    for (g, p) in grad.values.iter_mut().zip(&per_pixel) {
        if let Some((_, d)) = p {
            *g = d * scale;
        }
    }
    Ok((LossReport::single(TERM_SED, loss, values.len(), cfg), grad))
}

enum CycleTerm {
    Undefined,
    Filtered,
    Kept { distance: f64, grad_forward: Vec2, taps: BilinearTaps, grad_backward: Vec2 },
}

/// Cycle loss of the round trip A → B → A. A pixel contributes its cycle
/// distance `d` only when `d ≤ max(alpha, beta·‖fba(x)‖)`; the mask is held
/// fixed, so filtered pixels get zero gradient.
///
/// Returns gradients with respect to `fba` and `fab` in that order.
pub fn loss_cycle(
    fba: &FlowField,
    fab: &FlowField,
    cfg: &LossConfig,
) -> Result<(LossReport, GradField, GradField), LossError> {
    cfg.validate()?;
    let grid_a = fba.grid();
    let grid_b = fab.grid();
    let terms: Vec<CycleTerm> = (0..grid_a.len())
        .into_par_iter()
        .map(|i| {
            if !fba.is_valid(i) {
                return CycleTerm::Undefined;
            }
            let d = fba.vector_at(i);
            let target = grid_a.point(i) + d;
            let Some(taps) = BilinearTaps::new(&grid_b, &target) else { return CycleTerm::Undefined };
            let Some(back) = fab.sample_taps(&taps) else { return CycleTerm::Undefined };
            let residual = d + back;
            let distance = residual.norm();
            if !distance.is_finite() {
                return CycleTerm::Undefined;
            }
            if distance > cfg.alpha.max(cfg.beta * d.norm()) {
                return CycleTerm::Filtered;
            }
            if distance == 0.0 {
                return CycleTerm::Kept { distance, grad_forward: Vec2::zeros(), taps, grad_backward: Vec2::zeros() };
            }
            let unit = residual / distance;
            // chain rule through the sampling location
            let mut through_sample = Vec2::zeros();
            for (&j, dw) in taps.indices.iter().zip(&taps.d_weights) {
                through_sample += dw * fab.vector_at(j).dot(&unit);
            }
            CycleTerm::Kept { distance, grad_forward: unit + through_sample, taps, grad_backward: unit }
        })
        .collect();

    let values: Vec<f64> = terms
        .iter()
        .filter_map(|t| match t {
            CycleTerm::Kept { distance, .. } => Some(*distance),
            _ => None,
        })
        .collect();
    if values.is_empty() {
        return Err(LossError::EmptySupport(TERM_CYC));
    }
    let (loss, scale) = reduce(&values, cfg.reduction);
    let mut grad_fba = GradField::zeros(grid_a);
    let mut grad_fab = GradField::zeros(grid_b);
    for (i, t) in terms.iter().enumerate() {
        if let CycleTerm::Kept { grad_forward, taps, grad_backward, .. } = t {
            grad_fba.values[i] = grad_forward * scale;
            for (&j, &w) in taps.indices.iter().zip(&taps.weights) {
                grad_fab.values[j] += grad_backward * (w * scale);
            }
        }
    }
    Ok((LossReport::single(TERM_CYC, loss, values.len(), cfg), grad_fba, grad_fab))
}

/// Which halves of the bidirectional transform loss are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BitTerms {
    /// Supervise `f_{B'←B}` against `T`.
    pub forward: bool,
    /// Supervise `f_{B←B'}` against `T⁻¹`.
    pub backward: bool,
}

impl BitTerms {
    pub const BOTH: BitTerms = BitTerms { forward: true, backward: true };
    pub const FORWARD_ONLY: BitTerms = BitTerms { forward: true, backward: false };
}

/// Bidirectional transform loss with both directions active.
pub fn loss_bit(
    fbpb: &FlowField,
    fbbp: &FlowField,
    t: &TransformSpec,
    cfg: &LossConfig,
) -> Result<(LossReport, GradField, GradField), LossError> {
    loss_bit_with(fbpb, fbbp, t, cfg, BitTerms::BOTH)
}

pub fn loss_bit_with(
    fbpb: &FlowField,
    fbbp: &FlowField,
    t: &TransformSpec,
    cfg: &LossConfig,
    terms: BitTerms,
) -> Result<(LossReport, GradField, GradField), LossError> {
    let gt_forward = dense_flow_from_transform(t, fbpb.grid(), FlowDirection::Forward);
    let gt_backward = dense_flow_from_transform(t, fbbp.grid(), FlowDirection::Inverse);
    loss_bit_against(fbpb, fbbp, &gt_forward, &gt_backward, cfg, terms)
}

fn l1_term(pred: &FlowField, gt: &FlowField) -> Vec<Option<(f64, Vec2)>> {
    (0..pred.grid().len())
        .into_par_iter()
        .map(|i| {
            if !pred.is_valid(i) || !gt.is_valid(i) {
                return None;
            }
            let diff = pred.vector_at(i) - gt.vector_at(i);
            let sign = |x: f64| if x == 0.0 { 0.0 } else { x.signum() };
            Some((diff.x.abs() + diff.y.abs(), Vec2::new(sign(diff.x), sign(diff.y))))
        })
        .collect()
}

/// Transform loss against precomputed target fields (as produced by
/// [`dense_flow_from_transform`]); invalid target pixels are left out. With
/// mean reduction each direction is averaged separately and the two means added.
pub fn loss_bit_against(
    fbpb: &FlowField,
    fbbp: &FlowField,
    gt_forward: &FlowField,
    gt_backward: &FlowField,
    cfg: &LossConfig,
    terms: BitTerms,
) -> Result<(LossReport, GradField, GradField), LossError> {
    cfg.validate()?;
    if fbpb.grid() != gt_forward.grid() {
        return Err(LossError::ShapeMismatch(fbpb.grid(), gt_forward.grid()));
    }
    if fbbp.grid() != gt_backward.grid() {
        return Err(LossError::ShapeMismatch(fbbp.grid(), gt_backward.grid()));
    }
    let mut loss = 0.0;
    let mut count = 0;
    let mut grads = [GradField::zeros(fbpb.grid()), GradField::zeros(fbbp.grid())];
    let halves = [(terms.forward, fbpb, gt_forward), (terms.backward, fbbp, gt_backward)];
    for (grad, (active, pred, gt)) in grads.iter_mut().zip(halves) {
        if !active {
            continue;
        }
        let per_pixel = l1_term(pred, gt);
        let values: Vec<f64> = per_pixel.iter().flatten().map(|(v, _)| *v).collect();
        if values.is_empty() {
            continue;
        }
        let (part, scale) = reduce(&values, cfg.reduction);
        loss += part;
        count += values.len();
        for (g, p) in grad.values.iter_mut().zip(&per_pixel) {
            if let Some((_, s)) = p {
                *g = s * scale;
            }
        }
    }
    if count == 0 {
        return Err(LossError::EmptySupport(TERM_BIT));
    }
    let [g_forward, g_backward] = grads;
    Ok((LossReport::single(TERM_BIT, loss, count, cfg), g_forward, g_backward))
}

/// Merges term reports (same-named terms are added) and recomputes the weighted total.
pub fn loss_total(parts: &[&LossReport], cfg: &LossConfig) -> LossReport {
    let mut out = LossReport::default();
    for part in parts {
        for (name, value) in &part.per_term {
            *out.per_term.entry(name.clone()).or_insert(0.0) += value;
        }
        for (name, n) in &part.count {
            *out.count.entry(name.clone()).or_insert(0) += n;
        }
    }
    out.total = out.per_term.iter().map(|(name, v)| cfg.weight(name) * v).sum();
    out
}

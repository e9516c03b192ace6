//! Direct optimization of bidirectional flows for an image triplet.
//!
//! Instead of training a network, the four flows of a triplet (A↔B from a real
//! pair, B↔B' from a synthetic warp) are parameterized by coarse lattices of
//! 2-vectors, bilinearly upsampled to pixels, and fitted with momentum descent
//! on the weighted sum of the SED, cycle and transform losses. Per-pixel
//! gradients from [`crate::supervision`] are pulled back through the lattice
//! interpolation.

use thiserror::Error;

use crate::flow_field::{FlowField, PixelGrid};
use crate::geometry::{FundamentalMatrix, Vec2};
use crate::supervision::{
    loss_bit_against, loss_cycle, loss_sed, loss_total, BitTerms, GradField, LossConfig, LossError, LossReport,
};
use crate::synth_transform::{dense_flow_from_transform, FlowDirection, TransformSpec};

pub const DEFAULT_LATTICE_SPACING: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error("no loss term is enabled")]
    NoLossEnabled,
    #[error("full and adaptive cycle losses are mutually exclusive")]
    ConflictingCycleModes,
    #[error("total loss {total} at iteration {iteration} exceeds 10x the initial {initial}")]
    DivergenceDetected { iteration: usize, total: f64, initial: f64 },
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
    #[error("model does not match the {0:?} grid")]
    GridMismatch(PixelGrid),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Coarse lattice of flow vectors with nodes every `spacing` pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowLattice {
    spacing: usize,
    cols: usize,
    rows: usize,
    nodes: Vec<Vec2>,
}

fn lattice_extent(len: usize, spacing: usize) -> usize {
    if len <= 1 {
        1
    } else {
        (len - 1).div_ceil(spacing) + 1
    }
}

fn axis_taps(coord: usize, spacing: usize, nodes: usize) -> (usize, usize, f64) {
    if nodes == 1 {
        return (0, 0, 0.0);
    }
    let g = coord as f64 / spacing as f64;
    let i0 = (coord / spacing).min(nodes - 2);
    (i0, i0 + 1, g - i0 as f64)
}

impl FlowLattice {
    pub fn spacing(&self) -> usize {
        self.spacing
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.cols, self.rows)
    }

    /// Node indices and weights for pixel `(u, v)`.
    fn taps(&self, u: usize, v: usize) -> [(usize, f64); 4] {
        let (x0, x1, fx) = axis_taps(u, self.spacing, self.cols);
        let (y0, y1, fy) = axis_taps(v, self.spacing, self.rows);
        [
            (y0 * self.cols + x0, (1.0 - fx) * (1.0 - fy)),
            (y0 * self.cols + x1, fx * (1.0 - fy)),
            (y1 * self.cols + x0, (1.0 - fx) * fy),
            (y1 * self.cols + x1, fx * fy),
        ]
    }

    fn covers(&self, grid: PixelGrid) -> bool {
        self.cols == lattice_extent(grid.width, self.spacing) && self.rows == lattice_extent(grid.height, self.spacing)
    }
}

/// Parametric flow used in place of a network's output.
#[derive(Debug, Clone, PartialEq)]
pub enum FlowModel {
    Constant(Vec2),
    Lattice(FlowLattice),
}

impl FlowModel {
    /// Lattice covering `grid` with every node set to `value`.
    pub fn lattice(grid: PixelGrid, spacing: usize, value: Vec2) -> Self {
        let spacing = spacing.max(1);
        let cols = lattice_extent(grid.width, spacing);
        let rows = lattice_extent(grid.height, spacing);
        FlowModel::Lattice(FlowLattice { spacing, cols, rows, nodes: vec![value; cols * rows] })
    }

    /// Lattice whose nodes take the field's value at the node location
    /// (nodes past the border read the nearest in-image pixel).
    pub fn lattice_from_field(field: &FlowField, spacing: usize) -> Self {
        let grid = field.grid();
        let mut model = Self::lattice(grid, spacing, Vec2::zeros());
        if let FlowModel::Lattice(l) = &mut model {
            for j in 0..l.rows {
                for i in 0..l.cols {
                    let u = (i * l.spacing).min(grid.width - 1);
                    let v = (j * l.spacing).min(grid.height - 1);
                    l.nodes[j * l.cols + i] = field.get(u, v).unwrap_or_else(Vec2::zeros);
                }
            }
        }
        model
    }

    pub fn params(&self) -> &[Vec2] {
        match self {
            FlowModel::Constant(v) => std::slice::from_ref(v),
            FlowModel::Lattice(l) => &l.nodes,
        }
    }

    pub fn params_mut(&mut self) -> &mut [Vec2] {
        match self {
            FlowModel::Constant(v) => std::slice::from_mut(v),
            FlowModel::Lattice(l) => &mut l.nodes,
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.params().len()
    }

    fn check_grid(&self, grid: PixelGrid) -> Result<(), OptimizeError> {
        match self {
            FlowModel::Lattice(l) if !l.covers(grid) => Err(OptimizeError::GridMismatch(grid)),
            _ => Ok(()),
        }
    }

    /// Pulls a per-pixel gradient back onto the parameters.
    pub fn backprop(&self, grad: &GradField) -> Vec<Vec2> {
        let grid = grad.grid();
        match self {
            FlowModel::Constant(_) => vec![grad.values().iter().sum()],
            FlowModel::Lattice(l) => {
                let mut out = vec![Vec2::zeros(); l.nodes.len()];
                for (u, v) in grid.iter() {
                    let g = grad.get(u, v);
                    for (k, w) in l.taps(u, v) {
                        out[k] += g * w;
                    }
                }
                out
            }
        }
    }

    /// Fraction of the image each parameter is responsible for; used to put
    /// lattice and constant models on the same step scale.
    fn coverage(&self, grid: PixelGrid) -> Vec<f64> {
        match self {
            FlowModel::Constant(_) => vec![1.0],
            FlowModel::Lattice(l) => {
                let mut mass = vec![0.0; l.nodes.len()];
                for (u, v) in grid.iter() {
                    for (k, w) in l.taps(u, v) {
                        mass[k] += w;
                    }
                }
                let n = grid.len() as f64;
                mass.iter().map(|m| m / n).collect()
            }
        }
    }
}

/// Dense field of a model on `grid`; every pixel is valid.
pub fn evaluate_model(model: &FlowModel, grid: PixelGrid) -> FlowField {
    match model {
        FlowModel::Constant(v) => FlowField::constant(grid, *v),
        FlowModel::Lattice(l) => FlowField::from_fn(grid, |u, v| {
            Some(l.taps(u, v).iter().fold(Vec2::zeros(), |acc, &(k, w)| acc + l.nodes[k] * w))
        }),
    }
}

/// One value per flow direction of a triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet<T> {
    /// `f_{B←A}`
    pub b_from_a: T,
    /// `f_{A←B}`
    pub a_from_b: T,
    /// `f_{B'←B}`
    pub bp_from_b: T,
    /// `f_{B←B'}`
    pub b_from_bp: T,
}

impl<T> Triplet<T> {
    pub fn from_fn(mut f: impl FnMut(usize) -> T) -> Self {
        Self { b_from_a: f(0), a_from_b: f(1), bp_from_b: f(2), b_from_bp: f(3) }
    }

    pub fn each(&self) -> [&T; 4] {
        [&self.b_from_a, &self.a_from_b, &self.bp_from_b, &self.b_from_bp]
    }

    pub fn each_mut(&mut self) -> [&mut T; 4] {
        [&mut self.b_from_a, &mut self.a_from_b, &mut self.bp_from_b, &mut self.b_from_bp]
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Triplet<U> {
        Triplet {
            b_from_a: f(&self.b_from_a),
            a_from_b: f(&self.a_from_b),
            bp_from_b: f(&self.bp_from_b),
            b_from_bp: f(&self.b_from_bp),
        }
    }
}

/// Enabled loss terms; the combinations mirror the usual ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags {
    pub sed: bool,
    pub cyc_full: bool,
    pub cyc_adaptive: bool,
    pub bit_forward: bool,
    pub bit_backward: bool,
}

impl LossFlags {
    pub const NONE: LossFlags =
        LossFlags { sed: false, cyc_full: false, cyc_adaptive: false, bit_forward: false, bit_backward: false };
    pub const SED: LossFlags = LossFlags { sed: true, ..Self::NONE };
    pub const SED_FULL_CYCLE: LossFlags = LossFlags { sed: true, cyc_full: true, ..Self::NONE };
    pub const SED_ADAPTIVE_CYCLE: LossFlags = LossFlags { sed: true, cyc_adaptive: true, ..Self::NONE };
    pub const BIT: LossFlags = LossFlags { bit_forward: true, bit_backward: true, ..Self::NONE };
    /// Transform loss in the B' ← B direction only.
    pub const BIT_FORWARD: LossFlags = LossFlags { bit_forward: true, ..Self::NONE };
    pub const ALL: LossFlags =
        LossFlags { sed: true, cyc_full: false, cyc_adaptive: true, bit_forward: true, bit_backward: true };

    pub fn any(&self) -> bool {
        self.sed || self.cyc_full || self.cyc_adaptive || self.bit_forward || self.bit_backward
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    /// Initial step in pixels per unit of normalized gradient.
    pub step: f64,
    pub momentum: f64,
    /// Multiplicative step decay applied every iteration.
    pub step_decay: f64,
    pub iterations: usize,
    pub grad_tol: f64,
    pub losses: LossFlags,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { step: 0.5, momentum: 0.9, step_decay: 0.97, iterations: 500, grad_tol: 1e-9, losses: LossFlags::ALL }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(OptimizeError::InvalidConfig(format!("step must be positive, got {}", self.step)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(OptimizeError::InvalidConfig(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return Err(OptimizeError::InvalidConfig(format!("step_decay must be in (0, 1], got {}", self.step_decay)));
        }
        if self.iterations == 0 {
            return Err(OptimizeError::InvalidConfig("iterations must be at least 1".into()));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(OptimizeError::InvalidConfig(format!("grad_tol must be non-negative, got {}", self.grad_tol)));
        }
        if !self.losses.any() {
            return Err(OptimizeError::NoLossEnabled);
        }
        if self.losses.cyc_full && self.losses.cyc_adaptive {
            return Err(OptimizeError::ConflictingCycleModes);
        }
        Ok(())
    }

    /// Sets one `key=value` entry. Returns `Ok(false)` for keys this config does not own.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<bool, OptimizeError> {
        let num =
            |v: &str| v.parse::<f64>().map_err(|_| OptimizeError::InvalidConfig(format!("{key}: cannot parse '{v}'")));
        let flag = |v: &str| match v {
            "1" | "true" | "on" => Ok(true),
            "0" | "false" | "off" => Ok(false),
            _ => Err(OptimizeError::InvalidConfig(format!("{key}: expected a boolean, got '{v}'"))),
        };
        match key {
            "step" => self.step = num(value)?,
            "momentum" => self.momentum = num(value)?,
            "step_decay" => self.step_decay = num(value)?,
            "iterations" => {
                self.iterations = value
                    .parse()
                    .map_err(|_| OptimizeError::InvalidConfig(format!("iterations: cannot parse '{value}'")))?
            }
            "grad_tol" => self.grad_tol = num(value)?,
            "sed" => self.losses.sed = flag(value)?,
            "cyc_full" => self.losses.cyc_full = flag(value)?,
            "cyc_adaptive" => self.losses.cyc_adaptive = flag(value)?,
            "bit_forward" => self.losses.bit_forward = flag(value)?,
            "bit_backward" => self.losses.bit_backward = flag(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let b = |v: bool| if v { "1".to_string() } else { "0".to_string() };
        vec![
            ("step", self.step.to_string()),
            ("momentum", self.momentum.to_string()),
            ("step_decay", self.step_decay.to_string()),
            ("iterations", self.iterations.to_string()),
            ("grad_tol", self.grad_tol.to_string()),
            ("sed", b(self.losses.sed)),
            ("cyc_full", b(self.losses.cyc_full)),
            ("cyc_adaptive", b(self.losses.cyc_adaptive)),
            ("bit_forward", b(self.losses.bit_forward)),
            ("bit_backward", b(self.losses.bit_backward)),
        ]
    }
}

/// Supervision available for one triplet: the A↔B fundamental matrix and the
/// exact B↔B' flows of the synthetic transform.
#[derive(Debug, Clone)]
pub struct TripletObjective {
    grid: PixelGrid,
    f: FundamentalMatrix,
    bit_forward: FlowField,
    bit_backward: FlowField,
    loss_cfg: LossConfig,
    flags: LossFlags,
}

fn tolerate_empty<T>(r: Result<T, LossError>) -> Result<Option<T>, LossError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(LossError::EmptySupport(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl TripletObjective {
    pub fn new(
        grid: PixelGrid,
        f: FundamentalMatrix,
        t: &TransformSpec,
        loss_cfg: LossConfig,
        flags: LossFlags,
    ) -> Result<Self, OptimizeError> {
        loss_cfg.validate()?;
        let (bit_forward, bit_backward) = if flags.bit_forward || flags.bit_backward {
            (
                dense_flow_from_transform(t, grid, FlowDirection::Forward),
                dense_flow_from_transform(t, grid, FlowDirection::Inverse),
            )
        } else {
            (FlowField::zeros(grid), FlowField::zeros(grid))
        };
        Ok(Self { grid, f, bit_forward, bit_backward, loss_cfg, flags })
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    /// Weighted objective and its gradient with respect to each dense field.
    /// Terms without any contributing pixel count as zero.
    pub fn evaluate_fields(
        &self,
        fields: &Triplet<FlowField>,
    ) -> Result<(LossReport, Triplet<GradField>), OptimizeError> {
        let cfg = &self.loss_cfg;
        let mut grads = Triplet::from_fn(|_| GradField::zeros(self.grid));
        let mut parts = Vec::new();
        if self.flags.sed {
            let f_t = self.f.transpose();
            for (field, f, grad) in
                [(&fields.b_from_a, &self.f, &mut grads.b_from_a), (&fields.a_from_b, &f_t, &mut grads.a_from_b)]
            {
                if let Some((r, g)) = tolerate_empty(loss_sed(field, f, cfg))? {
                    grad.add_scaled(&g, cfg.w_sed);
                    parts.push(r);
                }
            }
        }
        if self.flags.cyc_full || self.flags.cyc_adaptive {
            let cyc_cfg = if self.flags.cyc_full { LossConfig { alpha: f64::INFINITY, ..*cfg } } else { *cfg };
            if let Some((r, g_ba, g_ab)) = tolerate_empty(loss_cycle(&fields.b_from_a, &fields.a_from_b, &cyc_cfg))? {
                grads.b_from_a.add_scaled(&g_ba, cfg.w_cyc);
                grads.a_from_b.add_scaled(&g_ab, cfg.w_cyc);
                parts.push(r);
            }
            if let Some((r, g_ab, g_ba)) = tolerate_empty(loss_cycle(&fields.a_from_b, &fields.b_from_a, &cyc_cfg))? {
                grads.a_from_b.add_scaled(&g_ab, cfg.w_cyc);
                grads.b_from_a.add_scaled(&g_ba, cfg.w_cyc);
                parts.push(r);
            }
        }
        if self.flags.bit_forward || self.flags.bit_backward {
            let terms = BitTerms { forward: self.flags.bit_forward, backward: self.flags.bit_backward };
            if let Some((r, g_f, g_b)) = tolerate_empty(loss_bit_against(
                &fields.bp_from_b,
                &fields.b_from_bp,
                &self.bit_forward,
                &self.bit_backward,
                cfg,
                terms,
            ))? {
                grads.bp_from_b.add_scaled(&g_f, cfg.w_bit);
                grads.b_from_bp.add_scaled(&g_b, cfg.w_bit);
                parts.push(r);
            }
        }
        let refs: Vec<&LossReport> = parts.iter().collect();
        Ok((loss_total(&refs, cfg), grads))
    }

    /// Objective and its gradient with respect to the model parameters.
    pub fn evaluate(&self, models: &Triplet<FlowModel>) -> Result<(LossReport, Triplet<Vec<Vec2>>), OptimizeError> {
        for m in models.each() {
            m.check_grid(self.grid)?;
        }
        let fields = models.map(|m| evaluate_model(m, self.grid));
        let (report, grads) = self.evaluate_fields(&fields)?;
        let params = Triplet {
            b_from_a: models.b_from_a.backprop(&grads.b_from_a),
            a_from_b: models.a_from_b.backprop(&grads.a_from_b),
            bp_from_b: models.bp_from_b.backprop(&grads.bp_from_b),
            b_from_bp: models.b_from_bp.backprop(&grads.b_from_bp),
        };
        Ok((report, params))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Budget,
    SmallGradient,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    /// Lowest-objective iterate seen.
    pub models: Triplet<FlowModel>,
    /// One report per evaluated iterate; entry 0 is the initialization.
    pub trace: Vec<LossReport>,
    pub best_iteration: usize,
    pub stop: StopReason,
}

/// Single-owner momentum optimizer over the four triplet flows.
#[derive(Debug, Clone)]
pub struct TripletOptimizer {
    objective: TripletObjective,
    cfg: OptimizerConfig,
    models: Triplet<FlowModel>,
    velocity: Triplet<Vec<Vec2>>,
    coverage: Triplet<Vec<f64>>,
    iteration: usize,
    initial_total: Option<f64>,
    best: Option<(f64, usize, Triplet<FlowModel>)>,
    trace: Vec<LossReport>,
}

/// Result of one [`TripletOptimizer::step`].
#[derive(Debug, Clone)]
pub struct StepReport {
    pub iteration: usize,
    pub report: LossReport,
    pub grad_norm: f64,
}

impl TripletOptimizer {
    pub fn new(
        init: Triplet<FlowModel>,
        objective: TripletObjective,
        cfg: OptimizerConfig,
    ) -> Result<Self, OptimizeError> {
        cfg.validate()?;
        if !(objective.flags == cfg.losses) {
            return Err(OptimizeError::InvalidConfig("objective and optimizer loss flags differ".into()));
        }
        for m in init.each() {
            m.check_grid(objective.grid)?;
        }
        let velocity = init.map(|m| vec![Vec2::zeros(); m.params().len()]);
        let coverage = init.map(|m| m.coverage(objective.grid));
        Ok(Self {
            objective,
            cfg,
            models: init,
            velocity,
            coverage,
            iteration: 0,
            initial_total: None,
            best: None,
            trace: Vec::new(),
        })
    }

    pub fn models(&self) -> &Triplet<FlowModel> {
        &self.models
    }

    pub fn trace(&self) -> &[LossReport] {
        &self.trace
    }

    /// Evaluates the current iterate, records it, and applies one update.
    pub fn step(&mut self) -> Result<StepReport, OptimizeError> {
        let (report, grads) = self.objective.evaluate(&self.models)?;
        let total = report.total;
        let initial = *self.initial_total.get_or_insert(total);
        if initial > 0.0 && total > 10.0 * initial {
            return Err(OptimizeError::DivergenceDetected { iteration: self.iteration, total, initial });
        }
        if self.best.as_ref().is_none_or(|(b, _, _)| total < *b) {
            self.best = Some((total, self.iteration, self.models.clone()));
        }
        let grad_norm = grads.each().iter().flat_map(|g| g.iter()).map(|g| g.norm_squared()).sum::<f64>().sqrt();
        self.trace.push(report.clone());

        let rate = self.cfg.step * self.cfg.step_decay.powi(self.iteration as i32);
        let momentum = self.cfg.momentum;
        let models = self.models.each_mut();
        let velocity = self.velocity.each_mut();
        let grads = grads.each();
        let coverage = self.coverage.each();
        for (((model, vel), grad), cov) in models.into_iter().zip(velocity).zip(grads).zip(coverage) {
            for (((p, v), g), c) in model.params_mut().iter_mut().zip(vel.iter_mut()).zip(grad).zip(cov) {
                if *c <= 0.0 {
                    continue;
                }
                *v = *v * momentum - g * ((1.0 - momentum) * rate / c);
                *p += *v;
            }
        }
        let step = StepReport { iteration: self.iteration, report, grad_norm };
        self.iteration += 1;
        Ok(step)
    }

    /// Runs until the iteration budget is spent or the gradient vanishes and
    /// returns the best iterate seen (never worse than the initialization).
    pub fn run(self) -> Result<OptimizeOutcome, OptimizeError> {
        self.run_observed(|_, _| {})
    }

    /// Like [`run`](Self::run), calling `observe` with every evaluated iterate and its report.
    pub fn run_observed(
        mut self,
        mut observe: impl FnMut(&Triplet<FlowModel>, &LossReport),
    ) -> Result<OptimizeOutcome, OptimizeError> {
        let mut stop = StopReason::Budget;
        for _ in 0..self.cfg.iterations {
            let before = self.models.clone();
            let s = self.step()?;
            observe(&before, &s.report);
            if s.grad_norm < self.cfg.grad_tol {
                stop = StopReason::SmallGradient;
                break;
            }
        }
        if stop == StopReason::Budget {
            // the last update has not been scored yet
            let (report, _) = self.objective.evaluate(&self.models)?;
            observe(&self.models, &report);
            if self.best.as_ref().is_none_or(|(b, _, _)| report.total < *b) {
                self.best = Some((report.total, self.iteration, self.models.clone()));
            }
            self.trace.push(report);
        }
        let (_, best_iteration, models) = self.best.expect("at least one iteration ran");
        Ok(OptimizeOutcome { models, trace: self.trace, best_iteration, stop })
    }
}

/// Fits the four triplet flows from `init` under the configured losses.
pub fn optimize_triplet(
    init: Triplet<FlowModel>,
    grid: PixelGrid,
    f: FundamentalMatrix,
    t: &TransformSpec,
    cfg: &OptimizerConfig,
    loss_cfg: &LossConfig,
) -> Result<OptimizeOutcome, OptimizeError> {
    cfg.validate()?;
    let objective = TripletObjective::new(grid, f, t, *loss_cfg, cfg.losses)?;
    TripletOptimizer::new(init, objective, *cfg)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{fundamental_from_pose, CameraIntrinsics, RelativePose};
    use nalgebra::{Matrix2x3, Matrix3, Vector3};

    fn grid(w: usize, h: usize) -> PixelGrid {
        PixelGrid::new(w, h).unwrap()
    }

    fn x_translation_f() -> FundamentalMatrix {
        let pose = RelativePose::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let id = CameraIntrinsics::identity();
        fundamental_from_pose(&id, &id, &pose).unwrap()
    }

    fn constant_models(v: Vec2) -> Triplet<FlowModel> {
        Triplet::from_fn(|_| FlowModel::Constant(v))
    }

    #[test]
    fn evaluate_model_cases() {
        let g = grid(17, 9);
        let c = evaluate_model(&FlowModel::Constant(Vec2::new(3.0, 4.0)), g);
        assert!(c.vectors().iter().all(|v| *v == Vec2::new(3.0, 4.0)));
        let flat = evaluate_model(&FlowModel::lattice(g, 8, Vec2::new(-1.0, 2.0)), g);
        assert!(flat.vectors().iter().all(|v| (v - Vec2::new(-1.0, 2.0)).norm() < 1e-15));
        assert_eq!(flat.count_valid(), g.len());

        let mut tent = FlowModel::lattice(g, 8, Vec2::zeros());
        // node (1, 1) sits at pixel (8, 8)
        tent.params_mut()[4] = Vec2::new(1.0, 0.0);
        let f = evaluate_model(&tent, g);
        assert_eq!(f.get(8, 8).unwrap(), Vec2::new(1.0, 0.0));
        assert!((f.get(4, 8).unwrap().x - 0.5).abs() < 1e-15);
        assert!((f.get(12, 6).unwrap().x - 0.5 * 0.75).abs() < 1e-15);
        assert_eq!(f.get(0, 0).unwrap(), Vec2::zeros());
    }

    #[test]
    fn lattice_param_count() {
        let m = FlowModel::lattice(grid(33, 17), 8, Vec2::zeros());
        assert_eq!(m.param_count(), 2 * 5 * 3);
        assert_eq!(FlowModel::Constant(Vec2::zeros()).param_count(), 2);
    }

    #[test]
    fn bit_only_recovers_translation() {
        let g = grid(40, 24);
        let t = TransformSpec::affine(Matrix2x3::new(1.0, 0.0, 5.0, 0.0, 1.0, 0.0), g).unwrap();
        let cfg = OptimizerConfig { losses: LossFlags::BIT, ..OptimizerConfig::default() };
        let out =
            optimize_triplet(constant_models(Vec2::zeros()), g, x_translation_f(), &t, &cfg, &LossConfig::default())
                .unwrap();
        assert!(out.trace.len() <= 501);
        let fwd = out.models.bp_from_b.params()[0];
        let bwd = out.models.b_from_bp.params()[0];
        assert!((fwd - Vec2::new(5.0, 0.0)).norm() < 1e-3, "{fwd:?}");
        assert!((bwd - Vec2::new(-5.0, 0.0)).norm() < 1e-3, "{bwd:?}");
    }

    #[test]
    fn sed_only_slides_along_epipolar_lines() {
        let g = grid(24, 16);
        let t = TransformSpec::identity(g);
        let cfg = OptimizerConfig { losses: LossFlags::SED, ..OptimizerConfig::default() };
        let out = optimize_triplet(
            constant_models(Vec2::new(2.0, 5.0)),
            g,
            x_translation_f(),
            &t,
            &cfg,
            &LossConfig::default(),
        )
        .unwrap();
        let fba = out.models.b_from_a.params()[0];
        assert!(fba.y.abs() < 1e-3, "{fba:?}");
        assert!((fba.x - 2.0).abs() < 0.5);
        let first = out.trace.first().unwrap().total;
        let last = out.trace.last().unwrap().total;
        assert!(last <= first);
    }

    #[test]
    fn no_loss_enabled_is_an_error() {
        let g = grid(8, 8);
        let cfg = OptimizerConfig { losses: LossFlags::NONE, ..OptimizerConfig::default() };
        let r = optimize_triplet(
            constant_models(Vec2::zeros()),
            g,
            x_translation_f(),
            &TransformSpec::identity(g),
            &cfg,
            &LossConfig::default(),
        );
        assert_eq!(r.unwrap_err(), OptimizeError::NoLossEnabled);
        let both = OptimizerConfig {
            losses: LossFlags { cyc_full: true, cyc_adaptive: true, ..LossFlags::NONE },
            ..OptimizerConfig::default()
        };
        assert_eq!(both.validate(), Err(OptimizeError::ConflictingCycleModes));
    }

    #[test]
    fn mismatched_lattice_is_rejected() {
        let g = grid(16, 16);
        let mut init = constant_models(Vec2::zeros());
        init.b_from_a = FlowModel::lattice(grid(32, 16), 8, Vec2::zeros());
        let cfg = OptimizerConfig::default();
        let r = optimize_triplet(init, g, x_translation_f(), &TransformSpec::identity(g), &cfg, &LossConfig::default());
        assert!(matches!(r, Err(OptimizeError::GridMismatch(_))));
    }

    #[test]
    fn config_keys_round_trip() {
        let mut cfg = OptimizerConfig::default();
        for (k, v) in [("step", "0.25"), ("iterations", "12"), ("cyc_adaptive", "0"), ("cyc_full", "true")] {
            assert!(cfg.set_key(k, v).unwrap());
        }
        assert!(!cfg.set_key("alpha", "1").unwrap());
        assert!(cfg.set_key("sed", "maybe").is_err());
        let mut again = OptimizerConfig::default();
        for (k, v) in cfg.entries() {
            again.set_key(k, &v).unwrap();
        }
        assert_eq!(again, cfg);
    }
}

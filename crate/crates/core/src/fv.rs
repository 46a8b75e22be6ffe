//! Upwind finite-volume scheme for `∂_t Ψ + div((v + h w, 𝒯) Ψ) = 0` with
//! dimensional splitting: every λ-axis first, then x.
//!
//! All velocities of one step are frozen at `Ψ^n`. Face velocities are stored
//! on the upper face of each cell (`cell → cell + stride`); outer faces and
//! faces touching a masked cell carry zero velocity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{total_mass, GridDensity, GridSpec};
use crate::model::Model;
use crate::state::{compensated_sum, ControlField, SimplexPoint, MAX_FREE, MAX_LABELS};

/// Cells below this value count as negative.
pub const NEGATIVE_TOL: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FvState {
    pub density: GridDensity,
    pub time: f64,
    pub dt: f64,
}

/// λ-dependent model quantities at every slice centre.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceTable {
    pub lambda: Vec<SimplexPoint>,
    pub membership: Vec<[f64; MAX_LABELS]>,
    /// Weights `g` entering the transition operator.
    pub label_weights: Vec<[f64; MAX_LABELS]>,
    pub activation: Vec<f64>,
    pub theta: Vec<f64>,
    pub mask: Vec<bool>,
    /// Slices inside the simplex, ascending.
    pub inside: Vec<usize>,
    /// Whether the slice has no lower neighbour along each λ-axis.
    pub lower_edge: Vec<[bool; MAX_FREE]>,
}

impl SliceTable {
    pub fn new(model: &Model, spec: &GridSpec) -> Self {
        let slices = spec.slices();
        let lambda: Vec<SimplexPoint> = (0..slices).map(|s| spec.lambda_center(s)).collect();
        let mask: Vec<bool> = (0..slices).map(|s| spec.slice_inside(s)).collect();
        let rates = model.rate_table();
        Self {
            membership: lambda.iter().map(|l| model.membership(l)).collect(),
            label_weights: lambda.iter().map(|l| rates.label_weights(l)).collect(),
            activation: lambda
                .iter()
                .zip(&mask)
                .map(|(l, &m)| if m { model.activation(l) } else { 0.0 })
                .collect(),
            theta: lambda.iter().map(|l| model.theta(l)).collect(),
            inside: (0..slices).filter(|&s| mask[s]).collect(),
            lower_edge: (0..slices)
                .map(|s| {
                    let idx = spec.slice_indices(s);
                    let mut edge = [false; MAX_FREE];
                    for (axis, e) in edge.iter_mut().enumerate().take(spec.lambda_dim) {
                        *e = idx[axis] == 0;
                    }
                    edge
                })
                .collect(),
            lambda,
            mask,
        }
    }

    /// Follower membership per slice.
    pub fn follower_weight(&self, model: &Model, slice: usize) -> f64 {
        self.membership[slice][model.follower_index()]
    }
}

/// Normal velocities on the upper face of every cell.
///
/// An x-face carries the mean of the uncontrolled cell velocities plus the
/// control term of the donor cell, so it has one value per side:
/// `x_lower` drives mass out of the cell below the face and `x_upper` mass
/// out of the cell above. Both coincide with the two-cell mean of
/// `v + h w` when `w` is the same on both cells.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceVelocities {
    pub x_lower: Vec<f64>,
    pub x_upper: Vec<f64>,
    pub lambda: Vec<Vec<f64>>,
}

impl FaceVelocities {
    /// Two-cell mean of the one-sided x-velocities.
    pub fn x_mean(&self) -> Vec<f64> {
        self.x_lower.iter().zip(&self.x_upper).map(|(a, b)| 0.5 * (a + b)).collect()
    }
}

/// Everything of one step that does not depend on the control.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub spec: GridSpec,
    pub dt: f64,
    /// Uncontrolled x-velocity at each cell centre.
    pub velocity: Vec<f64>,
    /// λ-face velocities per axis.
    pub lambda_faces: Vec<Vec<f64>>,
    /// Largest cell outflow speed along each λ-axis.
    pub lambda_outflow: Vec<f64>,
    /// Density after the λ-sweeps.
    pub intermediate: Vec<f64>,
    /// Follower barycentre of `Ψ^n`, if defined.
    pub barycenter: Option<f64>,
    pub follower_mass: f64,
}

/// Cell velocities `(v, 𝒯)` of a density, control excluded.
fn cell_velocities(model: &Model, g: &GridDensity, table: &SliceTable) -> Result<(Vec<f64>, Vec<Vec<f64>>, f64, f64)> {
    let spec = &g.spec;
    let slices = spec.slices();
    let dim = spec.lambda_dim;
    let field = model.field(g);
    let mut v = vec![0.0; spec.cells()];
    let mut tr = vec![vec![0.0; spec.cells()]; dim];
    let n_labels = model.n_labels();
    let rate_table = model.rate_table();
    for ix in 0..spec.nx {
        let sums = model.point_sums(&field, spec.x_center(ix));
        let rates = model.rates_from(&sums)?;
        let base = ix * slices;
        for &s in &table.inside {
            let f = &table.membership[s];
            v[base + s] = (0..n_labels).map(|k| f[k] * sums.velocity[k]).sum();
            let d = rate_table.full_drift(&rates, &table.label_weights[s]);
            for a in 0..dim {
                tr[a][base + s] = d[a];
            }
        }
    }
    Ok((v, tr, field.follower_total, field.follower_moment))
}

/// Upper λ-face velocities from cell-centred transitions, with the largest
/// outflow speed per axis.
fn lambda_faces(spec: &GridSpec, table: &SliceTable, tr: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let slices = spec.slices();
    let n = spec.n_lambda;
    (0..spec.lambda_dim)
        .map(|axis| {
            let stride = spec.slice_stride(axis);
            let mut faces = vec![0.0; spec.cells()];
            for &s in &table.inside {
                let idx = spec.slice_indices(s);
                if idx[axis] + 1 >= n || !table.mask[s + stride] {
                    continue;
                }
                for ix in 0..spec.nx {
                    let c = ix * slices + s;
                    faces[c] = 0.5 * (tr[axis][c] + tr[axis][c + stride]);
                }
            }
            let mut worst = 0.0f64;
            for &s in &table.inside {
                for ix in 0..spec.nx {
                    let c = ix * slices + s;
                    let low = if table.lower_edge[s][axis] { 0.0 } else { faces[c - stride] };
                    worst = worst.max(faces[c].max(0.0) + (-low).max(0.0));
                }
            }
            (faces, worst)
        })
        .unzip()
}

/// One-sided velocities on the upper x-face of `(ix, s)`.
#[inline]
pub fn x_face(plan: &StepPlan, h: f64, w: &[f64], c: usize, ix: usize) -> (f64, f64) {
    if ix + 1 >= plan.spec.nx {
        return (0.0, 0.0);
    }
    let up = c + plan.spec.slices();
    let mean = 0.5 * (plan.velocity[c] + plan.velocity[up]);
    (mean + h * w[c], mean + h * w[up])
}

/// Conservative upwind sweep along a λ-axis, in place. The grid is a
/// sequence of x-columns of `table.mask.len()` slices each; `faces[c]` is the
/// velocity on the upper face of cell `c` along the axis.
fn sweep_lambda(values: &mut [f64], faces: &[f64], table: &SliceTable, axis: usize, stride: usize, ratio: f64) -> Result<()> {
    let slices = table.mask.len();
    let mut flux = vec![0.0; slices];
    let mut worst = 0.0f64;
    for (col, face_col) in values.chunks_mut(slices).zip(faces.chunks(slices)) {
        for j in 0..slices {
            let a = face_col[j];
            let f = if a > 0.0 {
                a * col[j]
            } else if a < 0.0 {
                a * col[j + stride]
            } else {
                0.0
            };
            flux[j] = f;
            let (below, low) = if table.lower_edge[j][axis] {
                (0.0, 0.0)
            } else {
                (flux[j - stride], face_col[j - stride])
            };
            worst = worst.max(a.max(0.0) + (-low).max(0.0));
            col[j] -= ratio * (f - below);
        }
    }
    cfl_check(ratio, worst)
}

/// Conservative upwind x-sweep, in place, with one-sided face velocities
/// `side(c) = (as seen from c, as seen from c + slices)` on the upper face
/// of every cell below the last column.
fn sweep_x(values: &mut [f64], slices: usize, ratio: f64, side: impl Fn(usize) -> (f64, f64)) -> Result<()> {
    let columns = values.len() / slices;
    let mut below = vec![0.0; slices];
    let mut below_upper = vec![0.0f64; slices];
    let mut worst = 0.0f64;
    for ix in 0..columns {
        let base = ix * slices;
        let last = ix + 1 == columns;
        for j in 0..slices {
            let c = base + j;
            let (a, b) = if last { (0.0, 0.0) } else { side(c) };
            let mut f = 0.0;
            if a > 0.0 {
                f += a * values[c];
            }
            if b < 0.0 {
                f += b * values[c + slices];
            }
            worst = worst.max(a.max(0.0) + (-below_upper[j]).max(0.0));
            values[c] -= ratio * (f - below[j]);
            below[j] = f;
            below_upper[j] = b;
        }
    }
    cfl_check(ratio, worst)
}

fn cfl_check(ratio: f64, worst: f64) -> Result<()> {
    if ratio * worst > 1.0 + 1e-12 {
        return Err(Error::CflViolation {
            dt: ratio,
            limit: 1.0 / worst,
        });
    }
    Ok(())
}

fn rescale_cfl(e: Error, dt: f64, spacing: f64) -> Error {
    match e {
        // The sweep reports ratios dt/Δ; convert them back to times.
        Error::CflViolation { limit, .. } => Error::CflViolation {
            dt,
            limit: limit * spacing,
        },
        other => other,
    }
}

impl StepPlan {
    pub fn new(model: &Model, g: &GridDensity, table: &SliceTable, dt: f64) -> Result<Self> {
        let mut plan = Self::prepare(model, g, table)?;
        plan.set_dt(g, table, dt)?;
        Ok(plan)
    }

    /// Velocities of `g` without any λ-sweep; call [`StepPlan::set_dt`] next.
    pub fn prepare(model: &Model, g: &GridDensity, table: &SliceTable) -> Result<Self> {
        let spec = g.spec;
        let (velocity, tr, follower_mass, follower_moment) = cell_velocities(model, g, table)?;
        let (lambda_faces, lambda_outflow) = lambda_faces(&spec, table, &tr);
        Ok(Self {
            spec,
            dt: 0.0,
            velocity,
            lambda_faces,
            lambda_outflow,
            intermediate: g.values.clone(),
            barycenter: (follower_mass > 0.0).then(|| follower_moment / follower_mass),
            follower_mass,
        })
    }

    /// Fixes the step length and runs the λ-sweeps on `g`.
    pub fn set_dt(&mut self, g: &GridDensity, table: &SliceTable, dt: f64) -> Result<()> {
        let spec = self.spec;
        let ratio = dt / spec.dl();
        self.dt = dt;
        self.intermediate.clone_from(&g.values);
        for (axis, faces) in self.lambda_faces.iter().enumerate() {
            sweep_lambda(&mut self.intermediate, faces, table, axis, spec.slice_stride(axis), ratio)
                .map_err(|e| rescale_cfl(e, dt, spec.dl()))?;
        }
        Ok(())
    }

    /// One-sided x-face velocities for a control field.
    pub fn x_faces(&self, table: &SliceTable, w: &ControlField) -> (Vec<f64>, Vec<f64>) {
        let slices = self.spec.slices();
        let mut lower = Vec::with_capacity(self.spec.cells());
        let mut upper = Vec::with_capacity(self.spec.cells());
        for ix in 0..self.spec.nx {
            for s in 0..slices {
                let (a, b) = x_face(self, table.activation[s], &w.values, ix * slices + s, ix);
                lower.push(a);
                upper.push(b);
            }
        }
        (lower, upper)
    }

    /// Finishes the step with the x-sweep under control `w`.
    pub fn finish(&self, table: &SliceTable, w: &ControlField) -> Result<Vec<f64>> {
        if w.len() != self.spec.cells() {
            return Err(Error::DimensionMismatch(format!(
                "{} controls for {} cells",
                w.len(),
                self.spec.cells()
            )));
        }
        let mut out = self.intermediate.clone();
        let slices = self.spec.slices();
        let (velocity, control) = (&self.velocity, &w.values);
        sweep_x(&mut out, slices, self.dt / self.spec.dx(), |c| {
            let h = table.activation[c % slices];
            let mean = 0.5 * (velocity[c] + velocity[c + slices]);
            (mean + h * control[c], mean + h * control[c + slices])
        })
        .map_err(|e| rescale_cfl(e, self.dt, self.spec.dx()))?;
        Ok(out)
    }

    /// Largest stable time step for the x-sweep when `|w| ≤ u_max` anywhere.
    pub fn worst_case_x_limit(&self, table: &SliceTable, u_max: f64) -> f64 {
        worst_case_x_rate(&self.spec, &self.velocity, table, u_max)
            .map_or(f64::INFINITY, |rate| self.spec.dx() / rate)
    }
}

/// Max over cells of the outflow speed `a⁺_up + |a⁻_low|` on the x-faces
/// when every control ranges over `[-u_max, u_max]`. A cell's own control
/// drives both of its faces, and the outflow is convex in it, so the
/// extremes are attained at `±u_max`.
fn worst_case_x_rate(spec: &GridSpec, velocity: &[f64], table: &SliceTable, u_max: f64) -> Option<f64> {
    let slices = spec.slices();
    let mut worst = 0.0f64;
    for ix in 0..spec.nx {
        let base = ix * slices;
        for &s in &table.inside {
            let c = base + s;
            let hu = table.activation[s] * u_max;
            let up = (ix + 1 < spec.nx).then(|| 0.5 * (velocity[c] + velocity[c + slices]));
            let low = (ix > 0).then(|| 0.5 * (velocity[c - slices] + velocity[c]));
            let outflow = |push: f64| {
                up.map_or(0.0, |m| (m + push).max(0.0)) + low.map_or(0.0, |m| (-(m + push)).max(0.0))
            };
            worst = worst.max(outflow(hu)).max(outflow(-hu));
        }
    }
    (worst > 0.0).then_some(worst)
}

fn max_outflow(lower_side: &[f64], upper_side: &[f64], stride: usize, lower: impl Fn(usize) -> bool) -> f64 {
    let mut worst = 0.0f64;
    for c in 0..lower_side.len() {
        let low = if lower(c) { 0.0 } else { upper_side[c - stride] };
        worst = worst.max(lower_side[c].max(0.0) + (-low).max(0.0));
    }
    worst
}

/// Face velocities for the density `g` under control `w`.
pub fn interface_velocities(model: &Model, g: &GridDensity, w: &ControlField) -> Result<FaceVelocities> {
    let table = SliceTable::new(model, &g.spec);
    let plan = StepPlan::prepare(model, g, &table)?;
    let (x_lower, x_upper) = plan.x_faces(&table, w);
    Ok(FaceVelocities {
        x_lower,
        x_upper,
        lambda: plan.lambda_faces,
    })
}

/// `safety · min(Δx / max outflow_x, Δλ / max outflow_λ)`, or `horizon` when
/// nothing moves. The outflow of a cell is `a⁺` on its upper face plus `|a⁻|`
/// on its lower face, which reduces to `max |a|` for a uniform velocity.
pub fn cfl_dt_from_faces(spec: &GridSpec, faces: &FaceVelocities, safety: f64, horizon: f64) -> f64 {
    let slices = spec.slices();
    let mut dt = f64::INFINITY;
    let ox = max_outflow(&faces.x_lower, &faces.x_upper, slices, |c| c < slices);
    if ox > 0.0 {
        dt = dt.min(spec.dx() / ox);
    }
    for (axis, f) in faces.lambda.iter().enumerate() {
        let stride = spec.slice_stride(axis);
        let ol = max_outflow(f, f, stride, |c| spec.slice_indices(c % slices)[axis] == 0);
        if ol > 0.0 {
            dt = dt.min(spec.dl() / ol);
        }
    }
    if dt.is_finite() {
        safety * dt
    } else {
        horizon
    }
}

pub fn cfl_dt(model: &Model, g: &GridDensity, w: &ControlField, safety: f64, horizon: f64) -> Result<f64> {
    if !(safety > 0.0 && safety <= 1.0) {
        return Err(Error::Config(format!("CFL safety {safety} must lie in (0,1]")));
    }
    Ok(cfl_dt_from_faces(&g.spec, &interface_velocities(model, g, w)?, safety, horizon))
}

/// Step bound valid for every admissible control.
pub fn closed_loop_dt(plan: &StepPlan, table: &SliceTable, u_max: f64, safety: f64, horizon: f64) -> f64 {
    let mut dt = plan.worst_case_x_limit(table, u_max);
    for &ol in &plan.lambda_outflow {
        if ol > 0.0 {
            dt = dt.min(plan.spec.dl() / ol);
        }
    }
    if dt.is_finite() {
        safety * dt
    } else {
        horizon
    }
}

fn check_cells(g: &GridDensity) -> Result<()> {
    for (i, &v) in g.values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteState);
        }
        if v < -NEGATIVE_TOL {
            return Err(Error::NegativeCell { index: i, value: v });
        }
    }
    Ok(())
}

/// One split step of length `s.dt`.
pub fn fv_step(model: &Model, s: &FvState, w: &ControlField) -> Result<FvState> {
    let table = SliceTable::new(model, &s.density.spec);
    fv_step_with(model, &table, s, w)
}

fn fv_step_with(model: &Model, table: &SliceTable, s: &FvState, w: &ControlField) -> Result<FvState> {
    if !(s.dt > 0.0) {
        return Err(Error::Config(format!("time step {} must be > 0", s.dt)));
    }
    let plan = StepPlan::new(model, &s.density, table, s.dt)?;
    advance_with_plan(&plan, table, s, w)
}

fn advance_with_plan(plan: &StepPlan, table: &SliceTable, s: &FvState, w: &ControlField) -> Result<FvState> {
    let values = plan.finish(table, w)?;
    let density = GridDensity::from_values(s.density.spec, values)?;
    check_cells(&density)?;
    Ok(FvState {
        density,
        time: s.time + s.dt,
        dt: s.dt,
    })
}

/// Result of one controller invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutcome {
    pub field: ControlField,
    pub iterations: usize,
    pub converged: bool,
    pub objective_initial: f64,
    pub objective_final: f64,
}

impl ControlOutcome {
    pub fn zero(cells: usize) -> Self {
        Self {
            field: ControlField::zeros(cells),
            iterations: 0,
            converged: true,
            objective_initial: 0.0,
            objective_final: 0.0,
        }
    }
}

/// Closed-loop control policy for the grid backend.
pub trait GridController {
    fn control(&mut self, model: &Model, table: &SliceTable, plan: &StepPlan, state: &FvState) -> Result<ControlOutcome>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroGridControl;

impl GridController for ZeroGridControl {
    fn control(&mut self, _: &Model, _: &SliceTable, plan: &StepPlan, _: &FvState) -> Result<ControlOutcome> {
        Ok(ControlOutcome::zero(plan.spec.cells()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeOptions {
    pub dt_max: f64,
    pub cfl_safety: f64,
    /// Times at which full density snapshots are kept.
    pub snapshot_times: Vec<f64>,
    /// Cadence of the scalar series and marginal rasters.
    pub output_every: f64,
    /// Keep per-step diagnostics.
    pub record_steps: bool,
    /// Step with this `dt` instead of the CFL-limited one; an unstable
    /// choice surfaces as `CflViolation`.
    #[serde(default)]
    pub fixed_dt: Option<f64>,
}

impl Default for PdeOptions {
    fn default() -> Self {
        Self {
            dt_max: 0.01,
            cfl_safety: 0.5,
            snapshot_times: Vec::new(),
            output_every: 0.5,
            record_steps: false,
            fixed_dt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub time: f64,
    pub dt: f64,
    pub mass: f64,
    pub relative_mass_change: f64,
    pub min_cell: f64,
    pub masked_max: f64,
    pub mpc_iterations: usize,
    pub mpc_converged: bool,
    pub objective_initial: f64,
    pub objective_final: f64,
}

/// Scalar observables at an output time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub time: f64,
    pub mass: f64,
    pub fractions: Vec<f64>,
    pub follower_barycenter: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub max_relative_mass_change: f64,
    pub min_cell: f64,
    pub max_masked: f64,
    pub running_cost: f64,
    pub control_cost: f64,
    pub cost: f64,
    pub mpc_nonconverged_steps: usize,
    pub mpc_max_iterations: usize,
    pub objective_increases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeRun {
    pub snapshots: Vec<FvState>,
    /// Control applied on the step starting at each snapshot (zeros at the final time).
    pub snapshot_controls: Vec<ControlField>,
    pub series: Vec<SeriesPoint>,
    /// Spatial marginals per label at each series time.
    pub rasters: Vec<Vec<Vec<f64>>>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub summary: RunSummary,
    pub final_state: FvState,
}

/// Left-endpoint time quadrature of the mean-field cost.
#[derive(Debug, Clone, Default)]
pub struct CostAccumulator {
    running: Vec<f64>,
    control: Vec<f64>,
    horizon: f64,
}

impl CostAccumulator {
    pub fn add(&mut self, model: &Model, table: &SliceTable, state: &FvState, w: &ControlField) -> Result<()> {
        let (run, ctl) = instantaneous_cost(model, table, &state.density, w)?;
        self.running.push(state.dt * run);
        self.control.push(state.dt * ctl);
        self.horizon += state.dt;
        Ok(())
    }

    /// `(running, control, total)`, each averaged over the horizon.
    pub fn totals(&self) -> (f64, f64, f64) {
        if self.horizon <= 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let r = compensated_sum(self.running.iter().copied()) / self.horizon;
        let c = compensated_sum(self.control.iter().copied()) / self.horizon;
        (r, c, r + c)
    }
}

/// `(∫ ℒ(y, Ψ) dΨ, ∫ φ(w) dΨ)` by midpoint quadrature.
pub fn instantaneous_cost(model: &Model, table: &SliceTable, g: &GridDensity, w: &ControlField) -> Result<(f64, f64)> {
    let spec = &g.spec;
    let slices = spec.slices();
    let vol = spec.cell_volume();
    let gated: Vec<usize> = table.inside.iter().copied().filter(|&s| table.theta[s] != 0.0).collect();
    let running = if gated.is_empty() {
        0.0
    } else {
        let fi = model.follower_index();
        let mut mass_terms = Vec::with_capacity(spec.nx);
        let mut moment_terms = Vec::with_capacity(spec.nx);
        for ix in 0..spec.nx {
            let column = g.column(ix);
            let m = compensated_sum(table.inside.iter().map(|&s| column[s] * table.membership[s][fi]));
            mass_terms.push(m);
            moment_terms.push(m * spec.x_center(ix));
        }
        let total = compensated_sum(mass_terms) * vol;
        let moment = compensated_sum(moment_terms) * vol;
        let l = model.lagrangian_spec();
        let b = if total >= crate::model::MIN_FOLLOWER_MASS {
            moment / total
        } else if l.alpha < 1.0 {
            return Err(Error::DegenerateFollowerMass(total));
        } else {
            0.0
        };
        compensated_sum((0..spec.nx).map(|ix| {
            let column = g.column(ix);
            let x = spec.x_center(ix);
            let weight = l.alpha * (x - l.x_bar).powi(2) + (1.0 - l.alpha) * (x - b).powi(2);
            vol * weight * compensated_sum(gated.iter().map(|&s| column[s] * table.theta[s]))
        }))
    };
    let cost = model.control_cost_spec();
    let control = compensated_sum((0..spec.nx).map(|ix| {
        let base = ix * slices;
        vol * compensated_sum(table.inside.iter().map(|&s| {
            let u = w.values[base + s];
            if u == 0.0 {
                0.0
            } else {
                g.values[base + s] * cost.eval_scalar(u)
            }
        }))
    }));
    Ok((running, control))
}

/// Mean-field cost of stored states and the controls applied from each.
pub fn cost_meanfield(model: &Model, states: &[FvState], controls: &[ControlField]) -> Result<f64> {
    if states.len() != controls.len() || states.is_empty() {
        return Err(Error::DimensionMismatch("cost needs one control per state".into()));
    }
    let table = SliceTable::new(model, &states[0].density.spec);
    let mut acc = CostAccumulator::default();
    for (s, w) in states.iter().zip(controls) {
        acc.add(model, &table, s, w)?;
    }
    Ok(acc.totals().2)
}

fn series_point(model: &Model, g: &GridDensity) -> (SeriesPoint, Vec<Vec<f64>>) {
    let marg = model.marginals(g, &g.spec);
    let fractions = model.mass_fractions(g);
    let field = model.field(g);
    (
        SeriesPoint {
            time: 0.0,
            mass: total_mass(g),
            fractions,
            follower_barycenter: field.follower_barycenter(),
        },
        marg.spatial,
    )
}

/// Closed-loop march from `psi0` to `final_time`.
pub fn simulate_pde(
    model: &Model,
    psi0: &GridDensity,
    controller: &mut dyn GridController,
    final_time: f64,
    opts: &PdeOptions,
) -> Result<PdeRun> {
    if !(final_time > 0.0) || !(opts.dt_max > 0.0) || !(opts.output_every > 0.0) {
        return Err(Error::Config("simulate_pde needs T, dt_max and output cadence > 0".into()));
    }
    if !(opts.cfl_safety > 0.0 && opts.cfl_safety <= 1.0) {
        return Err(Error::Config(format!("CFL safety {} must lie in (0,1]", opts.cfl_safety)));
    }
    if opts.fixed_dt.is_some_and(|d| !(d > 0.0 && d.is_finite())) {
        return Err(Error::Config("a fixed time step must be finite and > 0".into()));
    }
    let table = SliceTable::new(model, &psi0.spec);
    let u_max = model.control_set().u_max;
    let mut snapshot_times: Vec<f64> = opts
        .snapshot_times
        .iter()
        .copied()
        .filter(|t| *t >= 0.0 && *t <= final_time)
        .collect();
    snapshot_times.sort_by(f64::total_cmp);
    snapshot_times.dedup();
    let output_count = (final_time / opts.output_every + 1e-9).floor() as usize;
    let mut output_times: Vec<f64> = (0..=output_count).map(|k| k as f64 * opts.output_every).collect();
    if (output_times.last().copied().unwrap_or(0.0) - final_time).abs() > 1e-12 {
        output_times.push(final_time);
    }
    let mut stops: Vec<f64> = output_times.iter().chain(&snapshot_times).copied().collect();
    stops.push(final_time);
    stops.sort_by(f64::total_cmp);
    stops.dedup_by(|a, b| (*a - *b).abs() < 1e-12);

    let mut state = FvState {
        density: psi0.clone(),
        time: 0.0,
        dt: 0.0,
    };
    let mut run = PdeRun {
        snapshots: Vec::new(),
        snapshot_controls: Vec::new(),
        series: Vec::new(),
        rasters: Vec::new(),
        diagnostics: Vec::new(),
        summary: RunSummary {
            steps: 0,
            max_relative_mass_change: 0.0,
            min_cell: psi0.min_value(),
            max_masked: psi0.masked_mass(),
            running_cost: 0.0,
            control_cost: 0.0,
            cost: 0.0,
            mpc_nonconverged_steps: 0,
            mpc_max_iterations: 0,
            objective_increases: 0,
        },
        final_state: state.clone(),
    };
    let mut acc = CostAccumulator::default();
    let mut next_stop = 0usize;
    let mut next_output = 0usize;
    let mut next_snapshot = 0usize;
    let near = |a: f64, b: f64| (a - b).abs() < 1e-9;

    loop {
        // Record observables at the current time.
        while next_output < output_times.len() && near(state.time, output_times[next_output]) {
            let (mut p, raster) = series_point(model, &state.density);
            p.time = output_times[next_output];
            run.series.push(p);
            run.rasters.push(raster);
            next_output += 1;
        }
        let at_snapshot = next_snapshot < snapshot_times.len() && near(state.time, snapshot_times[next_snapshot]);
        while next_stop < stops.len() && stops[next_stop] <= state.time + 1e-9 {
            next_stop += 1;
        }
        if state.time >= final_time - 1e-9 {
            if at_snapshot {
                run.snapshots.push(state.clone());
                run.snapshot_controls.push(ControlField::zeros(state.density.spec.cells()));
            }
            break;
        }
        let target = stops.get(next_stop).copied().unwrap_or(final_time);

        let mut plan = StepPlan::prepare(model, &state.density, &table)?;
        let mut dt = match opts.fixed_dt {
            Some(d) => d,
            None => closed_loop_dt(&plan, &table, u_max, opts.cfl_safety, final_time).min(opts.dt_max),
        };
        if state.time + dt >= target - 1e-9 {
            dt = target - state.time;
        }
        state.dt = dt;
        plan.set_dt(&state.density, &table, dt)?;
        let outcome = controller.control(model, &table, &plan, &state)?;
        if at_snapshot {
            run.snapshots.push(state.clone());
            run.snapshot_controls.push(outcome.field.clone());
            next_snapshot += 1;
        }
        acc.add(model, &table, &state, &outcome.field)?;
        let mass_before = total_mass(&state.density);
        let next = advance_with_plan(&plan, &table, &state, &outcome.field)?;
        let mass_after = total_mass(&next.density);
        let rel = ((mass_after - mass_before) / mass_before).abs();
        let min_cell = next.density.min_value();
        let masked = next.density.masked_mass();
        let s = &mut run.summary;
        s.steps += 1;
        s.max_relative_mass_change = s.max_relative_mass_change.max(rel);
        s.min_cell = s.min_cell.min(min_cell);
        s.max_masked = s.max_masked.max(masked);
        s.mpc_max_iterations = s.mpc_max_iterations.max(outcome.iterations);
        if !outcome.converged {
            s.mpc_nonconverged_steps += 1;
        }
        if outcome.objective_final > outcome.objective_initial {
            s.objective_increases += 1;
        }
        if opts.record_steps {
            run.diagnostics.push(StepDiagnostics {
                time: state.time,
                dt,
                mass: mass_after,
                relative_mass_change: rel,
                min_cell,
                masked_max: masked,
                mpc_iterations: outcome.iterations,
                mpc_converged: outcome.converged,
                objective_initial: outcome.objective_initial,
                objective_final: outcome.objective_final,
            });
        }
        let reached = state.time + dt;
        state = next;
        state.time = if near(reached, target) { target } else { reached };
    }
    let (r, c, total) = acc.totals();
    run.summary.running_cost = r;
    run.summary.control_cost = c;
    run.summary.cost = total;
    run.final_state = state;
    Ok(run)
}

#[cfg(test)]
mod tests;

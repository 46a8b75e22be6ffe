//! Instantaneous model predictive control: one step ahead, horizon `dt`.
//!
//! The objective of a step from `Ψ^n` is
//! `J(w) = ∫ ℒ(y, Ψ^{n+1}(w)) dΨ^{n+1}(w) + dt ∫ φ(w) dΨ^n`,
//! where `Ψ^{n+1}(w)` is one explicit step of the backend in use (forward
//! Euler for particles, the upwind split step for the grid). It is minimised
//! by diagonally scaled projected gradient descent onto `K`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fv::{ControlOutcome, FvState, GridController, SliceTable, StepPlan};
use crate::model::{Model, MIN_FOLLOWER_MASS};
use crate::particle::{particle_rhs, ParticleController};
use crate::state::{AdmissibleControlSet, ControlField, EmpiricalEnsemble};

const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-12;
/// A predicted decrease below this many ulps of `J` cannot be resolved by
/// evaluating `J`, so the iterate is stationary in floating point.
const RESOLVABLE_ULPS: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    Fixed,
    #[default]
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpcConfig {
    pub max_iters: usize,
    /// Tolerance on the sup-norm of the scaled projected step.
    pub grad_tol: f64,
    pub step_rule: StepRule,
    pub initial_step: f64,
    pub finite_diff_eps: f64,
    pub gradient: GradientMode,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            grad_tol: 1e-8,
            step_rule: StepRule::Backtracking,
            initial_step: 1.0,
            finite_diff_eps: 1e-6,
            gradient: GradientMode::Analytic,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || !(self.grad_tol > 0.0) || !(self.initial_step > 0.0) || !(self.finite_diff_eps > 0.0) {
            return Err(Error::Config(
                "mpc needs max_iters >= 1 and positive grad_tol, initial_step and finite_diff_eps".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcOutcome {
    pub controls: ControlField,
    pub iterations: usize,
    pub grad_norm: f64,
    pub objective_initial: f64,
    pub objective_final: f64,
    pub converged: bool,
}

impl MpcOutcome {
    /// Turns a non-converged solve into [`Error::NonConvergence`].
    pub fn strict(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NonConvergence {
                iterations: self.iterations,
                grad_norm: self.grad_norm,
            })
        }
    }

    fn into_control_outcome(self) -> ControlOutcome {
        ControlOutcome {
            field: self.controls,
            iterations: self.iterations,
            converged: self.converged,
            objective_initial: self.objective_initial,
            objective_final: self.objective_final,
        }
    }
}

/// Euclidean projection onto `K`.
pub fn project_to_k(set: &AdmissibleControlSet, u: &[f64]) -> Vec<f64> {
    set.project(u)
}

/// A smooth objective over the free (active) controls.
trait OneStep: Sync {
    fn len(&self) -> usize;
    fn objective(&self, w: &[f64]) -> Result<f64>;
    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>>;
    /// Positive diagonal curvature estimate.
    fn scaling(&self) -> Vec<f64>;
}

struct Descent {
    w: Vec<f64>,
    iterations: usize,
    grad_norm: f64,
    j0: f64,
    j: f64,
    converged: bool,
}

fn fd_gradient(p: &dyn OneStep, w: &[f64], eps: f64) -> Result<Vec<f64>> {
    (0..w.len())
        .into_par_iter()
        .map(|k| {
            let mut plus = w.to_vec();
            let mut minus = w.to_vec();
            plus[k] += eps;
            minus[k] -= eps;
            Ok((p.objective(&plus)? - p.objective(&minus)?) / (2.0 * eps))
        })
        .collect()
}

fn descend(p: &dyn OneStep, u_max: f64, cfg: &MpcConfig) -> Result<Descent> {
    cfg.validate()?;
    let n = p.len();
    let grad = |w: &[f64]| match cfg.gradient {
        GradientMode::Analytic => p.gradient(w),
        GradientMode::FiniteDifference => fd_gradient(p, w, cfg.finite_diff_eps),
    };
    let mut w = vec![0.0; n];
    let mut j = p.objective(&w)?;
    let j0 = j;
    if n == 0 {
        return Ok(Descent {
            w,
            iterations: 0,
            grad_norm: 0.0,
            j0,
            j,
            converged: true,
        });
    }
    let scale = p.scaling();
    let mut g = grad(&w)?;
    let (mut best_w, mut best_j) = (w.clone(), j);
    let clamp = |v: f64| v.clamp(-u_max, u_max);
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_norm = f64::INFINITY;
    while iterations < cfg.max_iters {
        grad_norm = (0..n)
            .map(|k| (clamp(w[k] - g[k] / scale[k]) - w[k]).abs())
            .fold(0.0, f64::max);
        if grad_norm <= cfg.grad_tol {
            converged = true;
            break;
        }
        let mut step = cfg.initial_step;
        let accepted = loop {
            let trial: Vec<f64> = (0..n).map(|k| clamp(w[k] - step * g[k] / scale[k])).collect();
            let jt = p.objective(&trial)?;
            let slope: f64 = (0..n).map(|k| g[k] * (trial[k] - w[k])).sum();
            if cfg.step_rule == StepRule::Fixed || jt <= j + ARMIJO * slope {
                break Some((trial, jt));
            }
            step *= 0.5;
            if step < MIN_STEP {
                break None;
            }
        };
        let Some((trial, jt)) = accepted else { break };
        iterations += 1;
        w = trial;
        j = jt;
        if j < best_j {
            best_j = j;
            best_w.clone_from(&w);
        }
        g = grad(&w)?;
    }
    if !converged && iterations == cfg.max_iters {
        grad_norm = (0..n)
            .map(|k| (clamp(w[k] - g[k] / scale[k]) - w[k]).abs())
            .fold(0.0, f64::max);
        converged = grad_norm <= cfg.grad_tol;
    }
    Ok(Descent {
        w: best_w,
        iterations,
        grad_norm,
        j0,
        j: best_j,
        converged,
    })
}

/// Quantities of one Euler prediction step for the particle system.
struct ParticleStep<'a> {
    model: &'a Model,
    dt: f64,
    weight: f64,
    /// Agents with `h > 0`, in the order of the free variables.
    active: Vec<usize>,
    x_free: Vec<f64>,
    h: Vec<f64>,
    theta: Vec<f64>,
    follower: Vec<f64>,
    fixed_x: Vec<f64>,
    fixed_theta: Vec<f64>,
    fixed_follower: Vec<f64>,
}

/// `Σ m θ`, `Σ m θ x`, `Σ m θ x²`, `Σ m θ (x - x̄)²`, `Σ m g`, `Σ m g x`.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    a0: f64,
    a1: f64,
    a2: f64,
    target: f64,
    mass: f64,
    moment: f64,
}

impl Moments {
    #[inline]
    fn add(&mut self, m: f64, x: f64, theta: f64, g: f64, x_bar: f64) {
        let mt = m * theta;
        self.a0 += mt;
        self.a1 += mt * x;
        self.a2 += mt * x * x;
        self.target += mt * (x - x_bar) * (x - x_bar);
        self.mass += m * g;
        self.moment += m * g * x;
    }

    fn merge(mut self, o: Moments) -> Self {
        self.a0 += o.a0;
        self.a1 += o.a1;
        self.a2 += o.a2;
        self.target += o.target;
        self.mass += o.mass;
        self.moment += o.moment;
        self
    }

    /// Running cost and the pieces needed by its gradient.
    fn running(&self, alpha: f64) -> Result<Running> {
        if self.a0 == 0.0 {
            return Ok(Running {
                value: 0.0,
                barycenter: 0.0,
                barycenter_weight: 0.0,
            });
        }
        if alpha >= 1.0 {
            return Ok(Running {
                value: self.target,
                barycenter: 0.0,
                barycenter_weight: 0.0,
            });
        }
        if self.mass < MIN_FOLLOWER_MASS {
            return Err(Error::DegenerateFollowerMass(self.mass));
        }
        let b = self.moment / self.mass;
        let spread = self.a2 - 2.0 * b * self.a1 + b * b * self.a0;
        let jb = -2.0 * (1.0 - alpha) * (self.a1 - b * self.a0);
        Ok(Running {
            value: alpha * self.target + (1.0 - alpha) * spread,
            barycenter: b,
            barycenter_weight: jb / self.mass,
        })
    }
}

struct Running {
    value: f64,
    barycenter: f64,
    /// `∂J/∂b` divided by the follower mass.
    barycenter_weight: f64,
}

impl<'a> ParticleStep<'a> {
    fn new(model: &'a Model, ens: &EmpiricalEnsemble, dt: f64) -> Result<Self> {
        let n = ens.len();
        let drift = particle_rhs(model, ens, &ControlField::zeros(n))?;
        let fi = model.follower_index();
        let mut s = Self {
            model,
            dt,
            weight: ens.weight(),
            active: Vec::new(),
            x_free: Vec::new(),
            h: Vec::new(),
            theta: Vec::new(),
            follower: Vec::new(),
            fixed_x: Vec::new(),
            fixed_theta: Vec::new(),
            fixed_follower: Vec::new(),
        };
        for (i, (a, d)) in ens.states().iter().zip(&drift).enumerate() {
            let mut next = a.lambda;
            for (c, dl) in next.coords_mut().iter_mut().zip(&d.lambda) {
                *c += dt * dl;
            }
            let x = a.x + dt * d.x;
            let theta = model.theta(&next);
            let g = model.membership(&next)[fi];
            let h = model.activation(&a.lambda);
            if h > 0.0 {
                s.active.push(i);
                s.x_free.push(x);
                s.h.push(h);
                s.theta.push(theta);
                s.follower.push(g);
            } else {
                s.fixed_x.push(x);
                s.fixed_theta.push(theta);
                s.fixed_follower.push(g);
            }
        }
        Ok(s)
    }

    fn positions<'s>(&'s self, w: &'s [f64]) -> impl Iterator<Item = (f64, f64, f64)> + 's {
        let dt = self.dt;
        (0..self.x_free.len())
            .map(move |k| (self.x_free[k] + dt * self.h[k] * w[k], self.theta[k], self.follower[k]))
            .chain((0..self.fixed_x.len()).map(|k| (self.fixed_x[k], self.fixed_theta[k], self.fixed_follower[k])))
    }

    fn moments(&self, w: &[f64]) -> Moments {
        let x_bar = self.model.lagrangian_spec().x_bar;
        let mut m = Moments::default();
        for (x, t, g) in self.positions(w) {
            m.add(self.weight, x, t, g, x_bar);
        }
        m
    }

    fn control_term(&self, w: &[f64]) -> f64 {
        let c = self.model.control_cost_spec();
        self.dt * self.weight * w.iter().map(|u| c.eval_scalar(*u)).sum::<f64>()
    }
}

impl OneStep for ParticleStep<'_> {
    fn len(&self) -> usize {
        self.active.len()
    }

    fn objective(&self, w: &[f64]) -> Result<f64> {
        let alpha = self.model.lagrangian_spec().alpha;
        Ok(self.moments(w).running(alpha)?.value + self.control_term(w))
    }

    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        let l = self.model.lagrangian_spec();
        let r = self.moments(w).running(l.alpha)?;
        let c = self.model.control_cost_spec();
        Ok((0..w.len())
            .map(|k| {
                let x = self.x_free[k] + self.dt * self.h[k] * w[k];
                let dx = self.theta[k] * (2.0 * l.alpha * (x - l.x_bar) + 2.0 * (1.0 - l.alpha) * (x - r.barycenter))
                    + r.barycenter_weight * self.follower[k];
                self.weight * (self.dt * self.h[k] * dx + self.dt * c.derivative_scalar(w[k]))
            })
            .collect())
    }

    fn scaling(&self) -> Vec<f64> {
        let gamma = self.model.control_cost_spec().gamma;
        (0..self.len())
            .map(|k| self.weight * (self.dt * gamma + 2.0 * self.dt * self.dt * self.h[k] * self.h[k] * self.theta[k]))
            .collect()
    }
}

/// `J(w)` for the particle backend.
pub fn one_step_objective_particles(model: &Model, ens: &EmpiricalEnsemble, w: &ControlField, dt: f64) -> Result<f64> {
    if w.len() != ens.len() {
        return Err(Error::DimensionMismatch(format!("{} controls for {} agents", w.len(), ens.len())));
    }
    let step = ParticleStep::new(model, ens, dt)?;
    // Controls on inactive agents do not move them but are still priced.
    let free: Vec<f64> = step.active.iter().map(|&i| w.values[i]).collect();
    let c = model.control_cost_spec();
    let idle: f64 = (0..ens.len())
        .filter(|i| !step.active.contains(i))
        .map(|i| c.eval_scalar(w.values[i]))
        .sum();
    Ok(step.objective(&free)? + dt * step.weight * idle)
}

/// Minimises `J` for the particle backend.
pub fn solve_step_particles(model: &Model, ens: &EmpiricalEnsemble, dt: f64, cfg: &MpcConfig) -> Result<MpcOutcome> {
    let step = ParticleStep::new(model, ens, dt)?;
    let d = descend(&step, model.control_set().u_max, cfg)?;
    let mut controls = ControlField::zeros(ens.len());
    for (k, &i) in step.active.iter().enumerate() {
        controls.values[i] = d.w[k];
    }
    Ok(MpcOutcome {
        controls,
        iterations: d.iterations,
        grad_norm: d.grad_norm,
        objective_initial: d.j0,
        objective_final: d.j,
        converged: d.converged,
    })
}

/// One split step on the grid with the x-sweep left open.
struct GridStep<'a> {
    model: &'a Model,
    nx: usize,
    dt: f64,
    ratio: f64,
    vol: f64,
    x: Vec<f64>,
    /// Active slices and, per slice, its activation, gate and follower weight.
    slices: Vec<usize>,
    h: Vec<f64>,
    theta: Vec<f64>,
    follower: Vec<f64>,
    /// Column data of active slices, `k = slot * nx + ix`.
    tilde: Vec<f64>,
    velocity: Vec<f64>,
    current: Vec<f64>,
    fixed: Moments,
}

/// Upwind x-sweep of one column; `faces` receives the one-sided velocities
/// of every upper face.
fn sweep_column(
    tilde: &[f64],
    velocity: &[f64],
    h: f64,
    w: &[f64],
    ratio: f64,
    out: &mut [f64],
    faces: &mut [(f64, f64)],
) {
    let nx = tilde.len();
    let mut below = 0.0;
    for i in 0..nx {
        let (sides, flux) = if i + 1 < nx {
            let mean = 0.5 * (velocity[i] + velocity[i + 1]);
            let (a, b) = (mean + h * w[i], mean + h * w[i + 1]);
            (
                (a, b),
                a.max(0.0) * tilde[i] + b.min(0.0) * tilde[i + 1],
            )
        } else {
            ((0.0, 0.0), 0.0)
        };
        faces[i] = sides;
        out[i] = tilde[i] - ratio * (flux - below);
        below = flux;
    }
}

/// Derivative of `max(a, 0)` in `a`, one half at the kink.
#[inline]
fn positive_part_slope(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else if a < 0.0 {
        0.0
    } else {
        0.5
    }
}

impl<'a> GridStep<'a> {
    fn new(model: &'a Model, table: &SliceTable, plan: &StepPlan, state: &FvState) -> Self {
        let spec = plan.spec;
        let nx = spec.nx;
        let s_count = spec.slices();
        let fi = model.follower_index();
        let l = model.lagrangian_spec();
        let ratio = plan.dt / spec.dx();
        let vol = spec.cell_volume();
        let x = spec.x_centers();
        let mut step = Self {
            model,
            nx,
            dt: plan.dt,
            ratio,
            vol,
            x: x.clone(),
            slices: Vec::new(),
            h: Vec::new(),
            theta: Vec::new(),
            follower: Vec::new(),
            tilde: Vec::new(),
            velocity: Vec::new(),
            current: Vec::new(),
            fixed: Moments::default(),
        };
        let zeros = vec![0.0; nx];
        let mut col = vec![0.0; nx];
        let mut vel = vec![0.0; nx];
        let mut out = vec![0.0; nx];
        let mut faces = vec![(0.0, 0.0); nx];
        for s in 0..s_count {
            if !table.mask[s] {
                continue;
            }
            for ix in 0..nx {
                col[ix] = plan.intermediate[ix * s_count + s];
                vel[ix] = plan.velocity[ix * s_count + s];
            }
            let h = table.activation[s];
            let theta = table.theta[s];
            let g = table.membership[s][fi];
            let occupied = col.iter().any(|v| *v != 0.0) || (0..nx).any(|ix| state.density.values[ix * s_count + s] != 0.0);
            if h > 0.0 && occupied {
                step.slices.push(s);
                step.h.push(h);
                step.theta.push(theta);
                step.follower.push(g);
                step.tilde.extend_from_slice(&col);
                step.velocity.extend_from_slice(&vel);
                step.current.extend((0..nx).map(|ix| state.density.values[ix * s_count + s]));
            } else if occupied {
                sweep_column(&col, &vel, 0.0, &zeros, ratio, &mut out, &mut faces);
                for ix in 0..nx {
                    step.fixed.add(vol * out[ix], x[ix], theta, g, l.x_bar);
                }
            }
        }
        step
    }

    fn slot_moments(&self, slot: usize, w: &[f64], out: &mut [f64], faces: &mut [(f64, f64)]) -> Moments {
        let nx = self.nx;
        let r = slot * nx..(slot + 1) * nx;
        sweep_column(
            &self.tilde[r.clone()],
            &self.velocity[r.clone()],
            self.h[slot],
            &w[r],
            self.ratio,
            out,
            faces,
        );
        let x_bar = self.model.lagrangian_spec().x_bar;
        let mut m = Moments::default();
        for ix in 0..nx {
            m.add(self.vol * out[ix], self.x[ix], self.theta[slot], self.follower[slot], x_bar);
        }
        m
    }

    fn moments(&self, w: &[f64]) -> Moments {
        let nx = self.nx;
        (0..self.slices.len())
            .into_par_iter()
            .map_init(
                || (vec![0.0; nx], vec![(0.0, 0.0); nx]),
                |(out, faces), slot| self.slot_moments(slot, w, out, faces),
            )
            .reduce(Moments::default, Moments::merge)
            .merge(self.fixed)
    }

    fn control_term(&self, w: &[f64]) -> f64 {
        let c = self.model.control_cost_spec();
        self.dt
            * self.vol
            * self
                .current
                .iter()
                .zip(w)
                .map(|(m, u)| if *m == 0.0 || *u == 0.0 { 0.0 } else { m * c.eval_scalar(*u) })
                .sum::<f64>()
    }
}

impl OneStep for GridStep<'_> {
    fn len(&self) -> usize {
        self.tilde.len()
    }

    fn objective(&self, w: &[f64]) -> Result<f64> {
        let alpha = self.model.lagrangian_spec().alpha;
        Ok(self.moments(w).running(alpha)?.value + self.control_term(w))
    }

    fn gradient(&self, w: &[f64]) -> Result<Vec<f64>> {
        let r = self.moments(w).running(self.model.lagrangian_spec().alpha)?;
        let c = self.model.control_cost_spec();
        let nx = self.nx;
        let mut grad = vec![0.0; w.len()];
        grad.par_chunks_mut(nx).enumerate().for_each(|(slot, gs)| {
            let base = slot * nx;
            let mut out = vec![0.0; nx];
            let mut faces = vec![(0.0, 0.0); nx];
            let h = self.h[slot];
            sweep_column(
                &self.tilde[base..base + nx],
                &self.velocity[base..base + nx],
                h,
                &w[base..base + nx],
                self.ratio,
                &mut out,
                &mut faces,
            );
            let sens = self.sensitivities(slot, &r);
            let tilde = &self.tilde[base..base + nx];
            // A cell's control enters the flux through its upper face when
            // that side points up and through its lower face when it points down.
            for ix in 0..nx {
                let mut run = 0.0;
                if ix + 1 < nx {
                    let dj_df = self.ratio * (sens[ix + 1] - sens[ix]);
                    run += dj_df * positive_part_slope(faces[ix].0) * tilde[ix];
                }
                if ix > 0 {
                    let dj_df = self.ratio * (sens[ix] - sens[ix - 1]);
                    run += dj_df * positive_part_slope(-faces[ix - 1].1) * tilde[ix];
                }
                let m = self.current[base + ix];
                let ctl = if m == 0.0 { 0.0 } else { self.dt * self.vol * m * c.derivative_scalar(w[base + ix]) };
                gs[ix] = h * run + ctl;
            }
        });
        Ok(grad)
    }

    fn scaling(&self) -> Vec<f64> {
        let gamma = self.model.control_cost_spec().gamma;
        let nx = self.nx;
        let raw: Vec<f64> = (0..self.len())
            .map(|k| {
                let slot = k / nx;
                let m = self.current[k].max(self.tilde[k]);
                self.vol * m * (self.dt * gamma + 2.0 * self.dt * self.dt * self.h[slot].powi(2) * self.theta[slot])
            })
            .collect();
        let top = raw.iter().copied().fold(0.0, f64::max);
        let floor = if top > 0.0 { top * 1e-12 } else { 1.0 };
        raw.into_iter().map(|d| d.max(floor)).collect()
    }
}

impl GridStep<'_> {
    /// `∂J/∂Ψ^{n+1}` on the cells of one active slice, barycentre included.
    fn sensitivities(&self, slot: usize, r: &Running) -> Vec<f64> {
        let l = self.model.lagrangian_spec();
        (0..self.nx)
            .map(|ix| {
                let x = self.x[ix];
                self.vol
                    * (self.theta[slot] * (l.alpha * (x - l.x_bar).powi(2) + (1.0 - l.alpha) * (x - r.barycenter).powi(2))
                        + r.barycenter_weight * self.follower[slot] * (x - r.barycenter))
            })
            .collect()
    }

    /// Per-cell minimisers of `J` linearised in `Ψ^{n+1}` at `w`, and the
    /// total decrease they promise.
    ///
    /// With the barycentre frozen the running cost is linear in the fluxes
    /// and every flux out of a cell is driven by that cell's own control,
    /// so the model splits into one piecewise quadratic per cell.
    fn cellwise_model(&self, w: &[f64], u_max: f64) -> Result<(Vec<f64>, f64)> {
        let r = self.moments(w).running(self.model.lagrangian_spec().alpha)?;
        let cost = *self.model.control_cost_spec();
        let nx = self.nx;
        let mut target = vec![0.0; w.len()];
        let decrease: f64 = target
            .par_chunks_mut(nx)
            .enumerate()
            .map(|(slot, ts)| {
                let base = slot * nx;
                let sens = self.sensitivities(slot, &r);
                let h = self.h[slot];
                let v = &self.velocity[base..base + nx];
                let mut gain = 0.0;
                for ix in 0..nx {
                    let tau = self.tilde[base + ix];
                    let up = if ix + 1 < nx {
                        Some((0.5 * (v[ix] + v[ix + 1]), self.ratio * tau * (sens[ix + 1] - sens[ix])))
                    } else {
                        None
                    };
                    let down = if ix > 0 {
                        Some((0.5 * (v[ix - 1] + v[ix]), self.ratio * tau * (sens[ix - 1] - sens[ix])))
                    } else {
                        None
                    };
                    let price = self.dt * self.vol * self.current[base + ix];
                    let f = |u: f64| {
                        let mut val = price * cost.eval_scalar(u);
                        if let Some((vb, c)) = up {
                            val += c * (vb + h * u).max(0.0);
                        }
                        if let Some((vb, c)) = down {
                            val += c * (-(vb + h * u)).max(0.0);
                        }
                        val
                    };
                    let best = minimise_piecewise(&f, up, down, h, price, cost.gamma, cost.p, u_max);
                    gain += f(w[base + ix]) - f(best);
                    ts[ix] = best;
                }
                gain
            })
            .sum();
        Ok((target, decrease.max(0.0)))
    }
}

/// Minimiser over `[-u_max, u_max]` of `price φ(u) + Σ c (±(v̄ + h u))⁺`.
#[allow(clippy::too_many_arguments)]
fn minimise_piecewise(
    f: &dyn Fn(f64) -> f64,
    up: Option<(f64, f64)>,
    down: Option<(f64, f64)>,
    h: f64,
    price: f64,
    gamma: f64,
    p: f64,
    u_max: f64,
) -> f64 {
    let mut knots = [-u_max, u_max, 0.0, 0.0];
    let mut count = 2;
    for (vb, _) in [up, down].into_iter().flatten() {
        let k = -vb / h;
        if k > -u_max && k < u_max {
            knots[count] = k;
            count += 1;
        }
    }
    let knots = &mut knots[..count];
    knots.sort_by(f64::total_cmp);
    let mut candidates = [0.0; 8];
    candidates[..count].copy_from_slice(knots);
    let mut n_candidates = count + 1;
    for pair in knots.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        let mid = 0.5 * (lo + hi);
        // Slope of the piecewise-linear part on this interval.
        let mut slope = 0.0;
        if let Some((vb, c)) = up {
            if vb + h * mid > 0.0 {
                slope += c * h;
            }
        }
        if let Some((vb, c)) = down {
            if vb + h * mid < 0.0 {
                slope -= c * h;
            }
        }
        if price > 0.0 {
            // Stationary point of slope·u + price γ/p |u|^p.
            let scale = price * gamma;
            let ratio = slope.abs() / scale;
            let magnitude = if p == 2.0 { ratio } else { ratio.powf(1.0 / (p - 1.0)) };
            candidates[n_candidates] = (-slope.signum() * magnitude).clamp(lo, hi);
            n_candidates += 1;
        }
    }
    let mut best = 0.0f64;
    let mut best_val = f(0.0);
    for &u in &candidates[..n_candidates] {
        let val = f(u);
        if val < best_val || (val == best_val && u.abs() < best.abs()) {
            best = u;
            best_val = val;
        }
    }
    best
}

fn unresolvable(decrease: f64, objective: f64) -> bool {
    decrease <= RESOLVABLE_ULPS * f64::EPSILON * objective.abs()
}

/// Sequential linearisation with exact per-cell minimisation of the model
/// and Armijo backtracking on the true objective.
fn descend_cellwise(step: &GridStep, u_max: f64, cfg: &MpcConfig) -> Result<Descent> {
    cfg.validate()?;
    let n = step.len();
    let mut w = vec![0.0; n];
    let mut j = step.objective(&w)?;
    let j0 = j;
    let (mut best_w, mut best_j) = (w.clone(), j);
    let mut iterations = 0;
    let mut converged = n == 0;
    let mut grad_norm = 0.0;
    while !converged && iterations < cfg.max_iters {
        let (target, decrease) = step.cellwise_model(&w, u_max)?;
        grad_norm = w.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if grad_norm <= cfg.grad_tol || unresolvable(decrease, j) {
            converged = true;
            break;
        }
        let mut s = cfg.initial_step.min(1.0);
        let accepted = loop {
            let trial: Vec<f64> = w.iter().zip(&target).map(|(a, b)| a + s * (b - a)).collect();
            let jt = step.objective(&trial)?;
            if cfg.step_rule == StepRule::Fixed || jt <= j - ARMIJO * s * decrease {
                break Some((trial, jt));
            }
            s *= 0.5;
            if s < MIN_STEP {
                break None;
            }
        };
        let Some((trial, jt)) = accepted else { break };
        iterations += 1;
        w = trial;
        j = jt;
        if j < best_j {
            best_j = j;
            best_w.clone_from(&w);
        }
    }
    if !converged && n > 0 && iterations == cfg.max_iters {
        let (target, decrease) = step.cellwise_model(&w, u_max)?;
        grad_norm = w.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        converged = grad_norm <= cfg.grad_tol || unresolvable(decrease, j);
    }
    Ok(Descent {
        w: best_w,
        iterations,
        grad_norm,
        j0,
        j: best_j,
        converged,
    })
}

fn grid_controls(step: &GridStep, w: &[f64], cells: usize, slices: usize) -> ControlField {
    let mut out = ControlField::zeros(cells);
    for (slot, &s) in step.slices.iter().enumerate() {
        for ix in 0..step.nx {
            out.values[ix * slices + s] = w[slot * step.nx + ix];
        }
    }
    out
}

/// `J(w)` for the grid backend; the step length is `state.dt`.
pub fn one_step_objective_grid(model: &Model, state: &FvState, w: &ControlField) -> Result<f64> {
    let spec = state.density.spec;
    if w.len() != spec.cells() {
        return Err(Error::DimensionMismatch(format!("{} controls for {} cells", w.len(), spec.cells())));
    }
    let table = SliceTable::new(model, &spec);
    let plan = StepPlan::new(model, &state.density, &table, state.dt)?;
    let values = plan.finish(&table, w)?;
    let next = crate::grid::GridDensity::from_values(spec, values)?;
    let (running, _) = crate::fv::instantaneous_cost(model, &table, &next, &ControlField::zeros(spec.cells()))?;
    let (_, control) = crate::fv::instantaneous_cost(model, &table, &state.density, w)?;
    Ok(running + state.dt * control)
}

/// Minimises `J` for the grid backend given a prepared step.
pub fn solve_step_grid_with(
    model: &Model,
    table: &SliceTable,
    plan: &StepPlan,
    state: &FvState,
    cfg: &MpcConfig,
) -> Result<MpcOutcome> {
    let step = GridStep::new(model, table, plan, state);
    let u_max = model.control_set().u_max;
    let d = match cfg.gradient {
        GradientMode::Analytic => descend_cellwise(&step, u_max, cfg)?,
        GradientMode::FiniteDifference => descend(&step, u_max, cfg)?,
    };
    let spec = plan.spec;
    Ok(MpcOutcome {
        controls: grid_controls(&step, &d.w, spec.cells(), spec.slices()),
        iterations: d.iterations,
        grad_norm: d.grad_norm,
        objective_initial: d.j0,
        objective_final: d.j,
        converged: d.converged,
    })
}

/// Minimises `J` for the grid backend; the step length is `state.dt`.
pub fn solve_step_grid(model: &Model, state: &FvState, cfg: &MpcConfig) -> Result<MpcOutcome> {
    let table = SliceTable::new(model, &state.density.spec);
    let plan = StepPlan::new(model, &state.density, &table, state.dt)?;
    solve_step_grid_with(model, &table, &plan, state, cfg)
}

/// Per-step solver record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcLogEntry {
    pub time: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub objective_initial: f64,
    pub objective_final: f64,
    pub converged: bool,
}

impl MpcLogEntry {
    fn new(time: f64, o: &MpcOutcome) -> Self {
        Self {
            time,
            iterations: o.iterations,
            grad_norm: o.grad_norm,
            objective_initial: o.objective_initial,
            objective_final: o.objective_final,
            converged: o.converged,
        }
    }
}

/// Writes a solver log as CSV.
pub fn write_log<W: std::io::Write>(log: &[MpcLogEntry], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in log {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

/// MPC feedback for the particle backend.
#[derive(Debug, Clone, Default)]
pub struct ParticleMpc {
    pub config: MpcConfig,
    pub log: Vec<MpcLogEntry>,
}

impl ParticleMpc {
    pub fn new(config: MpcConfig) -> Self {
        Self { config, log: Vec::new() }
    }
}

impl ParticleController for ParticleMpc {
    fn control(&mut self, model: &Model, ensemble: &EmpiricalEnsemble, t: f64, dt: f64) -> Result<ControlField> {
        let o = solve_step_particles(model, ensemble, dt, &self.config)?;
        self.log.push(MpcLogEntry::new(t, &o));
        Ok(o.controls)
    }
}

/// MPC feedback for the grid backend.
#[derive(Debug, Clone, Default)]
pub struct GridMpc {
    pub config: MpcConfig,
    pub log: Vec<MpcLogEntry>,
    /// Keep the per-step log (it grows with the number of steps).
    pub record: bool,
}

impl GridMpc {
    pub fn new(config: MpcConfig) -> Self {
        Self {
            config,
            log: Vec::new(),
            record: true,
        }
    }
}

impl GridController for GridMpc {
    fn control(&mut self, model: &Model, table: &SliceTable, plan: &StepPlan, state: &FvState) -> Result<ControlOutcome> {
        let o = solve_step_grid_with(model, table, plan, state, &self.config)?;
        if self.record {
            self.log.push(MpcLogEntry::new(state.time, &o));
        }
        Ok(o.into_control_outcome())
    }
}

/// Minimiser of the single-agent objective `(x + dt(v + h w) - x̄)² + dt γ/2 w²`
/// over `|w| ≤ u_max`.
pub fn single_agent_closed_form(x: f64, v: f64, h: f64, x_bar: f64, dt: f64, gamma: f64, u_max: f64) -> f64 {
    let w = h * (x_bar - x - dt * v) / (dt * h * h + 0.5 * gamma);
    w.clamp(-u_max, u_max)
}

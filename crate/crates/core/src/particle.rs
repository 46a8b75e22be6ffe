//! Finite-N controlled dynamics `ẋ = v + h u`, `λ̇ = 𝒯`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::state::{compensated_sum, AgentState, ControlField, EmpiricalEnsemble, SimplexPoint, MAX_FREE, SIMPLEX_TOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    #[default]
    Rk4,
}

/// Time derivative of one agent.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StateDerivative {
    pub x: f64,
    pub lambda: [f64; MAX_FREE],
}

/// Derivatives of all agents, with the activation each one saw.
pub fn particle_rhs(model: &Model, ensemble: &EmpiricalEnsemble, controls: &ControlField) -> Result<Vec<StateDerivative>> {
    Ok(rhs_with_activation(model, ensemble, controls)?.into_iter().map(|(d, _)| d).collect())
}

fn rhs_with_activation(
    model: &Model,
    ensemble: &EmpiricalEnsemble,
    controls: &ControlField,
) -> Result<Vec<(StateDerivative, f64)>> {
    if controls.len() != ensemble.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} controls for {} agents",
            controls.len(),
            ensemble.len()
        )));
    }
    let field = model.field(ensemble);
    ensemble
        .states()
        .par_iter()
        .zip(controls.values.par_iter())
        .map(|(s, &u)| {
            let sums = model.point_sums(&field, s.x);
            let rates = model.rates_from(&sums)?;
            let h = model.activation(&s.lambda);
            let drive = if h == 0.0 { 0.0 } else { h * u };
            Ok((
                StateDerivative {
                    x: model.velocity_from(&sums, &s.lambda) + drive,
                    lambda: model.transition_from(&rates, &s.lambda),
                },
                h,
            ))
        })
        .collect()
}

fn advance(base: &EmpiricalEnsemble, k: &[StateDerivative], dt: f64) -> EmpiricalEnsemble {
    let states = base
        .states()
        .iter()
        .zip(k)
        .map(|(s, d)| {
            let mut lambda = s.lambda;
            for (c, dl) in lambda.coords_mut().iter_mut().zip(&d.lambda) {
                *c += dt * dl;
            }
            AgentState { x: s.x + dt * d.x, lambda }
        })
        .collect();
    EmpiricalEnsemble::from_unchecked(states)
}

/// Clamps roundoff overshoots of the simplex and rejects real ones.
fn finalize(ens: EmpiricalEnsemble) -> Result<EmpiricalEnsemble> {
    let mut states = ens.states().to_vec();
    for s in &mut states {
        if !s.x.is_finite() || s.lambda.coords().iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFiniteState);
        }
        let v = s.lambda.violation();
        if v > SIMPLEX_TOL {
            return Err(Error::SimplexOvershoot(v));
        }
        if v > 0.0 {
            s.lambda.clamp_into_simplex();
        }
    }
    Ok(EmpiricalEnsemble::from_unchecked(states))
}

/// One step with controls held constant.
pub fn step(
    model: &Model,
    ensemble: &EmpiricalEnsemble,
    controls: &ControlField,
    dt: f64,
    scheme: Integrator,
) -> Result<EmpiricalEnsemble> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("time step {dt} must be > 0")));
    }
    let next = match scheme {
        Integrator::Euler => {
            let k1 = particle_rhs(model, ensemble, controls)?;
            advance(ensemble, &k1, dt)
        }
        Integrator::Rk4 => {
            let k1 = particle_rhs(model, ensemble, controls)?;
            let k2 = particle_rhs(model, &advance(ensemble, &k1, dt / 2.0), controls)?;
            let k3 = particle_rhs(model, &advance(ensemble, &k2, dt / 2.0), controls)?;
            let k4 = particle_rhs(model, &advance(ensemble, &k3, dt), controls)?;
            let combined: Vec<StateDerivative> = (0..ensemble.len())
                .map(|i| {
                    let mut d = StateDerivative {
                        x: (k1[i].x + 2.0 * k2[i].x + 2.0 * k3[i].x + k4[i].x) / 6.0,
                        ..Default::default()
                    };
                    for c in 0..MAX_FREE {
                        d.lambda[c] =
                            (k1[i].lambda[c] + 2.0 * k2[i].lambda[c] + 2.0 * k3[i].lambda[c] + k4[i].lambda[c]) / 6.0;
                    }
                    d
                })
                .collect();
            advance(ensemble, &combined, dt)
        }
    };
    finalize(next)
}

/// Closed-loop control policy for the particle system.
pub trait ParticleController {
    fn control(&mut self, model: &Model, ensemble: &EmpiricalEnsemble, t: f64, dt: f64) -> Result<ControlField>;
}

/// `u ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroControl;

impl ParticleController for ZeroControl {
    fn control(&mut self, _: &Model, ensemble: &EmpiricalEnsemble, _: f64, _: f64) -> Result<ControlField> {
        Ok(ControlField::zeros(ensemble.len()))
    }
}

impl<F> ParticleController for F
where
    F: FnMut(&Model, &EmpiricalEnsemble, f64, f64) -> Result<ControlField>,
{
    fn control(&mut self, model: &Model, ensemble: &EmpiricalEnsemble, t: f64, dt: f64) -> Result<ControlField> {
        self(model, ensemble, t, dt)
    }
}

/// States at every step and the controls applied on `[t_n, t_{n+1})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleTrajectory {
    pub times: Vec<f64>,
    pub snapshots: Vec<EmpiricalEnsemble>,
    pub controls: Vec<ControlField>,
}

impl ParticleTrajectory {
    pub fn final_state(&self) -> &EmpiricalEnsemble {
        self.snapshots.last().expect("trajectories hold the initial state")
    }

    /// Snapshot at the last recorded time not after `t`.
    pub fn at_time(&self, t: f64) -> &EmpiricalEnsemble {
        let i = self.times.partition_point(|&s| s <= t + 1e-12).max(1) - 1;
        &self.snapshots[i]
    }

    /// `sup_t max_i ‖y_i(t)‖`.
    pub fn max_norm(&self) -> f64 {
        self.snapshots.iter().map(EmpiricalEnsemble::max_norm).fold(0.0, f64::max)
    }

    /// Rows `t, agent_id, x, lambda_*, u, h` for every `cadence`-th step.
    pub fn write_csv<W: Write>(&self, model: &Model, out: W, cadence: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.snapshots[0].lambda_dim();
        let mut header = vec!["t".to_string(), "agent_id".into(), "x".into()];
        header.extend((1..=dim).map(|k| format!("lambda_{k}")));
        header.extend(["u".to_string(), "h".into()]);
        w.write_record(&header)?;
        let cadence = cadence.max(1);
        for (n, (t, ens)) in self.times.iter().zip(&self.snapshots).enumerate() {
            if n % cadence != 0 && n + 1 != self.times.len() {
                continue;
            }
            for (i, s) in ens.states().iter().enumerate() {
                let u = self.controls.get(n).map_or(0.0, |c| c.values[i]);
                let mut row = vec![t.to_string(), i.to_string(), s.x.to_string()];
                row.extend(s.lambda.coords().iter().map(|c| c.to_string()));
                row.push(u.to_string());
                row.push(model.activation(&s.lambda).to_string());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Closed-loop integration to `final_time` in `⌈T/dt⌉` steps.
pub fn simulate(
    model: &Model,
    y0: &EmpiricalEnsemble,
    controller: &mut dyn ParticleController,
    final_time: f64,
    dt: f64,
    scheme: Integrator,
) -> Result<ParticleTrajectory> {
    if !(final_time > 0.0) || !(dt > 0.0) {
        return Err(Error::Config("simulate needs T > 0 and dt > 0".into()));
    }
    let steps = (final_time / dt - 1e-9).ceil().max(1.0) as usize;
    let mut times = vec![0.0];
    let mut snapshots = vec![y0.clone()];
    let mut controls = Vec::with_capacity(steps);
    let mut t = 0.0;
    for n in 0..steps {
        let h = if n + 1 == steps { final_time - t } else { dt };
        let current = snapshots.last().expect("nonempty");
        let mut u = controller.control(model, current, t, h)?;
        let set = model.control_set();
        for v in &mut u.values {
            *v = set.project_scalar(*v);
        }
        let next = step(model, current, &u, h, scheme)?;
        t = if n + 1 == steps { final_time } else { (n + 1) as f64 * dt };
        times.push(t);
        snapshots.push(next);
        controls.push(u);
    }
    Ok(ParticleTrajectory {
        times,
        snapshots,
        controls,
    })
}

/// Time average of running cost plus control cost, left-endpoint rule.
pub fn cost_en(model: &Model, traj: &ParticleTrajectory) -> Result<f64> {
    let horizon = traj.times.last().copied().unwrap_or(0.0) - traj.times[0];
    if !(horizon > 0.0) {
        return Err(Error::Config("cost needs a trajectory of positive duration".into()));
    }
    let mut terms = Vec::with_capacity(traj.controls.len());
    for (n, u) in traj.controls.iter().enumerate() {
        let dt = traj.times[n + 1] - traj.times[n];
        let ens = &traj.snapshots[n];
        terms.push(dt * (running_cost(model, ens)? + control_cost_mean(model, u)));
    }
    Ok(compensated_sum(terms) / horizon)
}

/// `(1/N) Σ ℒ(y_i, Ψ^N)`.
pub fn running_cost(model: &Model, ens: &EmpiricalEnsemble) -> Result<f64> {
    let any_gate = ens.states().iter().any(|s| model.theta(&s.lambda) != 0.0);
    if !any_gate {
        return Ok(0.0);
    }
    let b = model.barycenter(&model.field(ens))?;
    let w = ens.weight();
    Ok(compensated_sum(ens.states().iter().map(|s| w * model.lagrangian_with(s.x, &s.lambda, b))))
}

fn control_cost_mean(model: &Model, u: &ControlField) -> f64 {
    let c = model.control_cost_spec();
    let w = 1.0 / u.len().max(1) as f64;
    compensated_sum(u.values.iter().map(|v| w * c.eval_scalar(*v)))
}

/// Convenience constructor used by tests and drivers.
pub fn agent(x: f64, lambda: &[f64]) -> AgentState {
    AgentState {
        x,
        lambda: SimplexPoint::raw(lambda),
    }
}

//! Bundled invariant checks for one configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::audit::{assumption_audit, AuditConfig};
use crate::error::Result;
use crate::fv::{closed_loop_dt, simulate_pde, FvState, GridController, SliceTable, StepPlan, ZeroGridControl, NEGATIVE_TOL};
use crate::grid::GridDensity;
use crate::model::Model;
use crate::mpc::{project_to_k, GridMpc};
use crate::particle::{simulate, ZeroControl};
use crate::state::{make_empirical, SIMPLEX_TOL};
use crate::transport::{w1_exact_small, DiscreteMeasure, Metric};

/// Horizon of the short runs used by the checks.
pub const VALIDATION_HORIZON: f64 = 0.25;
/// Relative mass drift allowed per step.
pub const MASS_TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub config_name: String,
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    fn record(&mut self, name: &str, outcome: Result<(bool, String)>) {
        match outcome {
            Ok((passed, detail)) => self.checks.push(ValidationCheck {
                name: name.into(),
                passed,
                detail,
            }),
            Err(e) => self.checks.push(ValidationCheck {
                name: name.into(),
                passed: false,
                detail: format!("{e:?}"),
            }),
        }
    }
}

fn short_pde(cfg: &ExperimentConfig, model: &Model, psi0: &GridDensity, controlled: bool) -> Result<(bool, String)> {
    let mut opts = cfg.pde_options();
    opts.snapshot_times.clear();
    let mut mpc = GridMpc::new(cfg.mpc.solver);
    let controller: &mut dyn GridController = if controlled { &mut mpc } else { &mut ZeroGridControl };
    let run = simulate_pde(model, psi0, controller, VALIDATION_HORIZON.min(cfg.time.final_time), &opts)?;
    let s = &run.summary;
    let passed = s.max_relative_mass_change <= MASS_TOL && s.min_cell >= -NEGATIVE_TOL && s.max_masked == 0.0;
    Ok((
        passed,
        format!(
            "{} steps, mass drift {:e}, min cell {:e}, masked mass {:e}",
            s.steps, s.max_relative_mass_change, s.min_cell, s.max_masked
        ),
    ))
}

fn control_support(cfg: &ExperimentConfig, model: &Model, psi0: &GridDensity) -> Result<(bool, String)> {
    let table = SliceTable::new(model, &psi0.spec);
    let mut plan = StepPlan::prepare(model, psi0, &table)?;
    let dt = closed_loop_dt(&plan, &table, model.control_set().u_max, cfg.time.cfl_safety, 1.0)
        .min(cfg.time.dt_max);
    plan.set_dt(psi0, &table, dt)?;
    let state = FvState {
        density: psi0.clone(),
        time: 0.0,
        dt,
    };
    let outcome = GridMpc::new(cfg.mpc.solver).control(model, &table, &plan, &state)?;
    let slices = psi0.spec.slices();
    let mut leaks = 0usize;
    let mut active = 0usize;
    for (c, w) in outcome.field.values.iter().enumerate() {
        if table.activation[c % slices] == 0.0 {
            leaks += usize::from(*w != 0.0);
        } else {
            active += usize::from(*w != 0.0);
        }
    }
    Ok((leaks == 0, format!("{leaks} nonzero controls where h = 0, {active} nonzero elsewhere")))
}

fn simplex_invariance(cfg: &ExperimentConfig, model: &Model, psi0: &GridDensity) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let y0 = make_empirical(psi0.sample(200, &mut rng)?)?;
    let traj = simulate(model, &y0, &mut ZeroControl, VALIDATION_HORIZON, cfg.particle.dt, cfg.particle.integrator)?;
    let worst = traj
        .snapshots
        .iter()
        .flat_map(|e| e.states().iter().map(|s| s.lambda.violation()))
        .fold(0.0, f64::max);
    Ok((worst <= SIMPLEX_TOL, format!("largest simplex violation {worst:e}")))
}

fn projection(model: &Model) -> (bool, String) {
    let set = model.control_set();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..1000 {
        let u: Vec<f64> = (0..2).map(|_| rng.random_range(-3.0 * set.u_max..3.0 * set.u_max)).collect();
        let p = project_to_k(set, &u);
        ok &= set.contains(&p) && project_to_k(set, &p) == p;
        if set.contains(&u) {
            worst = worst.max(u.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
    }
    (ok && worst == 0.0, format!("idempotent and inside K: {ok}, largest move of an admissible point {worst:e}"))
}

fn metric_axioms() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let metric = Metric::Agents { lambda_dim: 1 };
    let draw = |rng: &mut ChaCha8Rng| {
        let pts: Vec<Vec<f64>> = (0..5).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0)]).collect();
        DiscreteMeasure::uniform(metric, pts)
    };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (a, b, c) = (draw(&mut rng)?, draw(&mut rng)?, draw(&mut rng)?);
        let ab = w1_exact_small(&a, &b)?;
        worst = worst
            .max((ab - w1_exact_small(&b, &a)?).abs())
            .max(w1_exact_small(&a, &a)?)
            .max(ab - w1_exact_small(&a, &c)? - w1_exact_small(&c, &b)?);
    }
    Ok((worst <= 1e-9, format!("largest axiom defect {worst:e}")))
}

fn audit(cfg: &ExperimentConfig) -> Result<(bool, String)> {
    let report = assumption_audit(&cfg.model, &AuditConfig::default())?;
    let flagged = report.flagged();
    let passed = report.all_finite() && flagged.is_empty();
    Ok((passed, format!("all finite: {}, flagged: {flagged:?}", report.all_finite())))
}

/// Runs every invariant check; failures are reported, never raised.
pub fn validate(cfg: &ExperimentConfig) -> ValidationReport {
    let mut report = ValidationReport {
        config_name: cfg.name.clone(),
        checks: Vec::new(),
    };
    let prepared = super::run::prepare(cfg);
    report.record("config", prepared.as_ref().map(|_| (true, "valid".to_string())).map_err(Clone::clone));
    let Ok((model, psi0)) = prepared else {
        return report;
    };
    report.record("uncontrolled mass, positivity and simplex mask", short_pde(cfg, &model, &psi0, false));
    report.record("controlled mass, positivity and simplex mask", short_pde(cfg, &model, &psi0, true));
    report.record("control support", control_support(cfg, &model, &psi0));
    report.record("particle simplex invariance", simplex_invariance(cfg, &model, &psi0));
    report.record("projection onto K", Ok(projection(&model)));
    report.record("metric axioms", metric_axioms());
    report.record("assumption audit", audit(cfg));
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::model::RateLayout;

    fn coarse() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::test1();
        cfg.grid.nx = 32;
        cfg.grid.n_lambda = 16;
        cfg
    }

    #[test]
    fn default_config_passes() {
        let report = validate(&coarse());
        assert!(report.passed(), "{report:#?}");
        assert_eq!(report.checks.len(), 8);
    }

    #[test]
    fn forced_step_above_cfl_is_reported() {
        let mut cfg = coarse();
        cfg.time.fixed_dt = Some(1.0);
        let report = validate(&cfg);
        assert!(!report.passed());
        let bad: Vec<&ValidationCheck> = report.checks.iter().filter(|c| !c.passed).collect();
        assert!(bad.iter().any(|c| c.detail.contains("CflViolation")), "{bad:#?}");
    }

    #[test]
    fn negative_rate_is_reported() {
        let mut cfg = coarse();
        if let RateLayout::TwoLabel { rate_follower, .. } = &mut cfg.model.transition.rates {
            *rate_follower = -0.025;
        }
        let report = validate(&cfg);
        assert!(!report.passed());
        assert_eq!(report.checks.len(), 1);
        assert!(report.checks[0].detail.contains("NegativeRate"), "{:?}", report.checks[0]);
        assert!(matches!(cfg.validate(), Err(Error::NegativeRate { .. })));
    }
}

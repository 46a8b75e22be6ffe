//! Uncontrolled and controlled grid runs of the shipped experiments.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{Experiment, ExperimentConfig};
use crate::error::{Error, Result};
use crate::fv::{simulate_pde, GridController, PdeRun, ZeroGridControl};
use crate::grid::GridDensity;
use crate::model::Model;
use crate::mpc::{GridMpc, MpcLogEntry, ParticleMpc};
use crate::particle::{cost_en, simulate, ParticleController, ParticleTrajectory, ZeroControl};
use crate::state::make_empirical;

/// Which closed-loop regimes to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlMode {
    Off,
    On,
    Both,
}

impl ControlMode {
    pub fn regimes(self) -> &'static [bool] {
        match self {
            ControlMode::Off => &[false],
            ControlMode::On => &[true],
            ControlMode::Both => &[false, true],
        }
    }
}

/// Scalar observables extracted from one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    /// Follower barycentre at the check time.
    pub barycenter_at_check: Option<f64>,
    /// Separated maxima of the total spatial density at the check time.
    pub clusters_at_check: usize,
    /// Follower mass within the check radius of the target at the final time.
    pub follower_mass_near_target: f64,
    /// Follower mass within the check radius of the rival opinion at the final time.
    pub follower_mass_near_rival: f64,
    /// Largest `|Σ fractions - 1|` over all outputs.
    pub fraction_sum_error: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunBundle {
    pub controlled: bool,
    pub seconds: f64,
    pub metrics: RunMetrics,
    pub run: PdeRun,
    pub mpc_log: Vec<MpcLogEntry>,
}

/// One pass/fail comparison with the value that decided it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn new(name: &str, value: f64, threshold: f64, passed: bool) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            passed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config_name: String,
    pub config_hash: String,
    pub runs: Vec<RunBundle>,
    pub checks: Vec<CheckOutcome>,
}

impl ExperimentResult {
    pub fn run(&self, controlled: bool) -> Option<&RunBundle> {
        self.runs.iter().find(|r| r.controlled == controlled)
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Compiled model calibrated on the initial grid density.
pub fn prepare(cfg: &ExperimentConfig) -> Result<(Model, GridDensity)> {
    cfg.validate()?;
    let mut model = cfg.model.compile()?;
    let psi0 = cfg.initial.on_grid(cfg.grid)?;
    model.calibrate_on_grid(&psi0, &cfg.grid);
    Ok((model, psi0))
}

/// Count of strict local maxima above `fraction` of the peak; plateaus count once.
pub fn count_clusters(density: &[f64], fraction: f64) -> usize {
    let peak = density.iter().copied().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return 0;
    }
    let floor = fraction * peak;
    let n = density.len();
    let mut count = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && density[j + 1] == density[i] {
            j += 1;
        }
        let left_lower = i == 0 || density[i - 1] < density[i];
        let right_lower = j + 1 == n || density[j + 1] < density[i];
        if left_lower && right_lower && density[i] > floor {
            count += 1;
        }
        i = j + 1;
    }
    count
}

/// Mass of a cell-averaged density within `radius` of `center`, by cell centre.
pub fn mass_near(density: &[f64], centers: &[f64], dx: f64, center: f64, radius: f64) -> f64 {
    density
        .iter()
        .zip(centers)
        .filter(|(_, x)| (*x - center).abs() <= radius + 1e-12)
        .map(|(d, _)| d * dx)
        .sum()
}

fn metrics(cfg: &ExperimentConfig, model: &Model, run: &PdeRun) -> RunMetrics {
    let checks = &cfg.checks;
    let centers = cfg.grid.x_centers();
    let dx = cfg.grid.dx();
    let fi = model.follower_index();
    let at_check = run.series.iter().position(|p| (p.time - checks.barycenter_time).abs() < 1e-9);
    let clusters_at_check = at_check.map_or(0, |k| {
        let total: Vec<f64> = (0..cfg.grid.nx).map(|ix| run.rasters[k].iter().map(|m| m[ix]).sum()).collect();
        count_clusters(&total, checks.cluster_fraction)
    });
    let last = run.rasters.last().map(|r| r[fi].clone()).unwrap_or_default();
    let x_bar = cfg.model.lagrangian.x_bar;
    RunMetrics {
        barycenter_at_check: at_check.and_then(|k| run.series[k].follower_barycenter),
        clusters_at_check,
        follower_mass_near_target: mass_near(&last, &centers, dx, x_bar, checks.neighbourhood_radius),
        follower_mass_near_rival: mass_near(&last, &centers, dx, checks.rival_opinion, checks.neighbourhood_radius),
        fraction_sum_error: run
            .series
            .iter()
            .map(|p| (p.fractions.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max),
        cost: run.summary.cost,
    }
}

/// One closed-loop grid run to the configured final time.
pub fn run_pde(cfg: &ExperimentConfig, model: &Model, psi0: &GridDensity, controlled: bool) -> Result<RunBundle> {
    let opts = cfg.pde_options();
    let start = Instant::now();
    let mut mpc = GridMpc::new(cfg.mpc.solver);
    let controller: &mut dyn GridController = if controlled { &mut mpc } else { &mut ZeroGridControl };
    let run = simulate_pde(model, psi0, controller, cfg.time.final_time, &opts)?;
    Ok(RunBundle {
        controlled,
        seconds: start.elapsed().as_secs_f64(),
        metrics: metrics(cfg, model, &run),
        run,
        mpc_log: std::mem::take(&mut mpc.log),
    })
}

/// Particle run from `n` agents drawn from the initial grid density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleBundle {
    pub controlled: bool,
    pub n: usize,
    pub seed: u64,
    pub seconds: f64,
    pub cost: f64,
    pub trajectory: ParticleTrajectory,
}

/// Particle counterpart of [`run_pde`] with the configured integrator and step.
pub fn run_particles(
    cfg: &ExperimentConfig,
    model: &Model,
    psi0: &GridDensity,
    n: usize,
    seed: u64,
    controlled: bool,
) -> Result<ParticleBundle> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64);
    let y0 = make_empirical(psi0.sample(n, &mut rng)?)?;
    let start = Instant::now();
    let mut mpc = ParticleMpc::new(cfg.mpc.solver);
    let controller: &mut dyn ParticleController = if controlled { &mut mpc } else { &mut ZeroControl };
    let trajectory = simulate(model, &y0, controller, cfg.time.final_time, cfg.particle.dt, cfg.particle.integrator)?;
    Ok(ParticleBundle {
        controlled,
        n,
        seed,
        seconds: start.elapsed().as_secs_f64(),
        cost: cost_en(model, &trajectory)?,
        trajectory,
    })
}

fn run_modes(cfg: &ExperimentConfig, mode: ControlMode) -> Result<ExperimentResult> {
    let (model, psi0) = prepare(cfg)?;
    let mut runs = Vec::new();
    for &controlled in mode.regimes() {
        if controlled && !cfg.mpc.enabled {
            continue;
        }
        runs.push(run_pde(cfg, &model, &psi0, controlled)?);
    }
    let mut result = ExperimentResult {
        config_name: cfg.name.clone(),
        config_hash: cfg.hash(),
        runs,
        checks: Vec::new(),
    };
    result.checks = match cfg.experiment {
        Experiment::Test1 => test1_checks(cfg, &result),
        Experiment::Test2 => test2_checks(cfg, &result),
    };
    Ok(result)
}

fn fraction_checks(result: &ExperimentResult, out: &mut Vec<CheckOutcome>) {
    for r in &result.runs {
        let name = if r.controlled {
            "controlled fractions sum to one"
        } else {
            "uncontrolled fractions sum to one"
        };
        out.push(CheckOutcome::new(name, r.metrics.fraction_sum_error, 1e-12, r.metrics.fraction_sum_error <= 1e-12));
    }
}

fn test1_checks(cfg: &ExperimentConfig, result: &ExperimentResult) -> Vec<CheckOutcome> {
    let c = &cfg.checks;
    let x_bar = cfg.model.lagrangian.x_bar;
    let mut out = Vec::new();
    let offset = |r: &RunBundle| r.metrics.barycenter_at_check.map_or(f64::INFINITY, |b| (b - x_bar).abs());
    if let Some(off) = result.run(false) {
        let n = off.metrics.clusters_at_check as f64;
        out.push(CheckOutcome::new("uncontrolled clusters stay separated", n, 2.0, n >= 2.0));
        let d = offset(off);
        out.push(CheckOutcome::new(
            "uncontrolled barycentre away from target",
            d,
            c.uncontrolled_offset,
            d > c.uncontrolled_offset,
        ));
    }
    if let Some(on) = result.run(true) {
        let d = offset(on);
        out.push(CheckOutcome::new(
            "controlled barycentre near target",
            d,
            c.barycenter_tolerance,
            d <= c.barycenter_tolerance,
        ));
    }
    if let (Some(off), Some(on)) = (result.run(false), result.run(true)) {
        out.push(CheckOutcome::new(
            "control lowers the cost",
            on.metrics.cost,
            off.metrics.cost,
            on.metrics.cost <= off.metrics.cost,
        ));
    }
    fraction_checks(result, &mut out);
    out
}

fn test2_checks(_cfg: &ExperimentConfig, result: &ExperimentResult) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    if let Some(off) = result.run(false) {
        let m = &off.metrics;
        out.push(CheckOutcome::new(
            "uncontrolled followers drift to the rival leaders",
            m.follower_mass_near_rival,
            m.follower_mass_near_target,
            m.follower_mass_near_rival > m.follower_mass_near_target,
        ));
    }
    if let (Some(off), Some(on)) = (result.run(false), result.run(true)) {
        out.push(CheckOutcome::new(
            "control gathers more followers at the target",
            on.metrics.follower_mass_near_target,
            off.metrics.follower_mass_near_target,
            on.metrics.follower_mass_near_target > off.metrics.follower_mass_near_target,
        ));
    }
    fraction_checks(result, &mut out);
    out
}

/// Two-label experiment in the requested regimes, with its qualitative checks.
pub fn run_test1(cfg: &ExperimentConfig, mode: ControlMode) -> Result<ExperimentResult> {
    if cfg.experiment != Experiment::Test1 {
        return Err(Error::Config(format!("{} is not a two-label experiment config", cfg.name)));
    }
    run_modes(cfg, mode)
}

/// Three-label experiment in the requested regimes, with its qualitative checks.
pub fn run_test2(cfg: &ExperimentConfig, mode: ControlMode) -> Result<ExperimentResult> {
    if cfg.experiment != Experiment::Test2 {
        return Err(Error::Config(format!("{} is not a three-label experiment config", cfg.name)));
    }
    run_modes(cfg, mode)
}

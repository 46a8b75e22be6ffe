//! Particle ensembles against the grid solution at fixed probe times.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::prepare;
use crate::error::{Error, Result};
use crate::fv::{simulate_pde, FvState, GridController, ZeroGridControl};
use crate::grid::GridDensity;
use crate::model::Model;
use crate::mpc::{GridMpc, ParticleMpc};
use crate::particle::{cost_en, simulate, ParticleController, ZeroControl};
use crate::state::make_empirical;
use crate::transport::{ensemble_lambda_marginal, ensemble_x_marginal, grid_lambda_marginal, grid_x_marginal, w1_1d};

/// One `(regime, N, seed, probe)` comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub controlled: bool,
    pub n: usize,
    pub seed: u64,
    pub probe_time: f64,
    pub w1_x: f64,
    pub w1_lambda: f64,
    pub cost_particles: f64,
    pub cost_meanfield: f64,
    pub cost_gap: f64,
}

/// Medians over seeds for one `(regime, N, probe)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceSummary {
    pub controlled: bool,
    pub n: usize,
    pub probe_time: f64,
    pub median_w1_x: f64,
    pub median_w1_lambda: f64,
    pub median_cost_gap: f64,
}

/// Least-squares slope of `log median W1` against `log N` for one regime and probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceFit {
    pub controlled: bool,
    pub probe_time: f64,
    pub slope_w1_x: f64,
    pub slope_w1_lambda: f64,
    pub w1_x_decreasing: bool,
    pub cost_gap_decreasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub config_hash: String,
    pub rows: Vec<ConvergenceRow>,
    pub summary: Vec<ConvergenceSummary>,
    pub fits: Vec<ConvergenceFit>,
    pub seconds: f64,
}

/// Median of a nonempty sample.
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    cov / var
}

struct Reference {
    controlled: bool,
    snapshots: Vec<FvState>,
    cost: f64,
}

fn reference(cfg: &ExperimentConfig, model: &Model, psi0: &GridDensity, controlled: bool, horizon: f64) -> Result<Reference> {
    let mut opts = cfg.pde_options();
    opts.snapshot_times = cfg.particle.probe_times.clone();
    let mut mpc = GridMpc::new(cfg.mpc.solver);
    mpc.record = false;
    let controller: &mut dyn GridController = if controlled { &mut mpc } else { &mut ZeroGridControl };
    let run = simulate_pde(model, psi0, controller, horizon, &opts)?;
    Ok(Reference {
        controlled,
        snapshots: run.snapshots,
        cost: run.summary.cost,
    })
}

fn job(
    cfg: &ExperimentConfig,
    model: &Model,
    psi0: &GridDensity,
    reference: &Reference,
    n: usize,
    seed: u64,
    horizon: f64,
) -> Result<Vec<ConvergenceRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n as u64);
    let y0 = make_empirical(psi0.sample(n, &mut rng)?)?;
    let p = &cfg.particle;
    let mut mpc = ParticleMpc::new(cfg.mpc.solver);
    let controller: &mut dyn ParticleController = if reference.controlled { &mut mpc } else { &mut ZeroControl };
    let traj = simulate(model, &y0, controller, horizon, p.dt, p.integrator)?;
    let cost_particles = cost_en(model, &traj)?;
    let mut rows = Vec::with_capacity(p.probe_times.len());
    for (probe, snap) in p.probe_times.iter().zip(&reference.snapshots) {
        let ens = traj.at_time(*probe);
        let w1_x = w1_1d(&ensemble_x_marginal(ens)?, &grid_x_marginal(&snap.density, p.subcell_atoms)?)?;
        let w1_lambda = w1_1d(
            &ensemble_lambda_marginal(ens, 0)?,
            &grid_lambda_marginal(&snap.density, 0, p.subcell_atoms)?,
        )?;
        rows.push(ConvergenceRow {
            controlled: reference.controlled,
            n,
            seed,
            probe_time: *probe,
            w1_x,
            w1_lambda,
            cost_particles,
            cost_meanfield: reference.cost,
            cost_gap: (cost_particles - reference.cost).abs(),
        });
    }
    Ok(rows)
}

fn summarise(cfg: &ExperimentConfig, rows: &[ConvergenceRow], regimes: &[bool]) -> (Vec<ConvergenceSummary>, Vec<ConvergenceFit>) {
    let mut summary = Vec::new();
    let mut fits = Vec::new();
    for &controlled in regimes {
        for &probe in &cfg.particle.probe_times {
            let mut block = Vec::new();
            for &n in &cfg.particle.sizes {
                let pick = |f: fn(&ConvergenceRow) -> f64| -> Vec<f64> {
                    rows.iter()
                        .filter(|r| r.controlled == controlled && r.n == n && r.probe_time == probe)
                        .map(f)
                        .collect()
                };
                block.push(ConvergenceSummary {
                    controlled,
                    n,
                    probe_time: probe,
                    median_w1_x: median(&mut pick(|r| r.w1_x)),
                    median_w1_lambda: median(&mut pick(|r| r.w1_lambda)),
                    median_cost_gap: median(&mut pick(|r| r.cost_gap)),
                });
            }
            let sizes: Vec<f64> = block.iter().map(|s| s.n as f64).collect();
            let wx: Vec<f64> = block.iter().map(|s| s.median_w1_x).collect();
            let wl: Vec<f64> = block.iter().map(|s| s.median_w1_lambda).collect();
            let strictly_down = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
            let gaps: Vec<f64> = block.iter().map(|s| s.median_cost_gap).collect();
            fits.push(ConvergenceFit {
                controlled,
                probe_time: probe,
                slope_w1_x: loglog_slope(&sizes, &wx),
                slope_w1_lambda: loglog_slope(&sizes, &wl),
                w1_x_decreasing: strictly_down(&wx),
                cost_gap_decreasing: strictly_down(&gaps),
            });
            summary.extend(block);
        }
    }
    (summary, fits)
}

/// Runs every `(regime, N, seed)` job in parallel against one grid reference
/// per regime, computed on the grid refined by `reference_refinement`.
pub fn convergence_study(cfg: &ExperimentConfig, regimes: &[bool]) -> Result<ConvergenceTable> {
    let p = &cfg.particle;
    if p.sizes.len() < 3 || p.seeds.len() < 5 {
        return Err(Error::Config("the convergence study needs at least 3 sizes and 5 seeds".into()));
    }
    let start = std::time::Instant::now();
    // Particles are drawn from, and compared against, the refined grid.
    let mut fine = cfg.clone();
    fine.grid = cfg.grid.refined(p.reference_refinement);
    let (model, psi0) = prepare(&fine)?;
    let horizon = p.probe_times.iter().copied().fold(0.0, f64::max);
    let references = regimes
        .iter()
        .map(|&c| reference(cfg, &model, &psi0, c, horizon))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize, u64)> = (0..references.len())
        .flat_map(|r| p.sizes.iter().flat_map(move |&n| p.seeds.iter().map(move |&s| (r, n, s))))
        .collect();
    let chunks = jobs
        .par_iter()
        .map(|&(r, n, seed)| job(cfg, &model, &psi0, &references[r], n, seed, horizon))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<ConvergenceRow> = chunks.into_iter().flatten().collect();
    let (summary, fits) = summarise(cfg, &rows, regimes);
    Ok(ConvergenceTable {
        config_hash: cfg.hash(),
        rows,
        summary,
        fits,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_slope_helpers() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        let x = [100.0, 400.0, 1600.0];
        let y: Vec<f64> = x.iter().map(|n: &f64| 3.0 * n.powf(-0.5)).collect();
        assert!((loglog_slope(&x, &y) + 0.5).abs() < 1e-12);
    }

    #[test]
    fn needs_enough_sizes_and_seeds() {
        let mut cfg = ExperimentConfig::test1();
        cfg.particle.sizes = vec![10, 20];
        assert!(convergence_study(&cfg, &[false]).is_err());
        let mut cfg = ExperimentConfig::test1();
        cfg.particle.seeds = vec![0, 1];
        assert!(convergence_study(&cfg, &[false]).is_err());
    }

    #[test]
    fn small_study_is_reproducible() {
        let mut cfg = ExperimentConfig::test1();
        cfg.grid.nx = 32;
        cfg.grid.n_lambda = 16;
        cfg.particle.sizes = vec![10, 20, 40];
        cfg.particle.seeds = (0..5).collect();
        cfg.particle.probe_times = vec![0.1, 0.2];
        cfg.particle.dt = 0.05;
        cfg.particle.reference_refinement = 1;
        let a = convergence_study(&cfg, &[false, true]).unwrap();
        let b = convergence_study(&cfg, &[false, true]).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.rows.len(), 2 * 3 * 5 * 2);
        assert_eq!(a.summary.len(), 2 * 2 * 3);
        assert_eq!(a.fits.len(), 4);
        assert!(a.rows.iter().all(|r| r.w1_x.is_finite() && r.cost_gap >= 0.0));
    }
}

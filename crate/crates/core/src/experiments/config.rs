//! Serializable experiment configuration with the published defaults.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::presets::{
    default_grid, test1_initial, test1_initial_verbatim, test1_model, test2_initial, test2_initial_verbatim, test2_model,
};
use crate::error::{Error, Result};
use crate::fv::PdeOptions;
use crate::grid::{GridSpec, InitialDensity};
use crate::model::ModelSpec;
use crate::mpc::MpcConfig;
use crate::particle::Integrator;

/// Final time of both shipped experiments.
pub const FINAL_TIME: f64 = 50.0;
/// Figure frames of the two-label experiment, with the initial frame.
pub const TEST1_SNAPSHOTS: [f64; 5] = [0.0, 0.5, 2.0, 3.5, 10.0];
/// Figure frames of the three-label experiment, with the initial frame.
pub const TEST2_SNAPSHOTS: [f64; 5] = [0.0, 5.0, 15.0, 27.5, 50.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Test1,
    Test2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub final_time: f64,
    pub dt_max: f64,
    pub cfl_safety: f64,
    pub output_every: f64,
    pub snapshot_times: Vec<f64>,
    /// Forces every step to this size, bypassing the CFL-limited choice.
    #[serde(default)]
    pub fixed_dt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSettings {
    pub enabled: bool,
    pub solver: MpcConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSettings {
    /// Ensemble sizes of the convergence study, ascending.
    pub sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub integrator: Integrator,
    pub dt: f64,
    /// Times at which particle and grid marginals are compared.
    pub probe_times: Vec<f64>,
    /// Equally spaced atoms per grid cell when a grid marginal becomes a measure.
    pub subcell_atoms: usize,
    /// Factor by which the convergence study refines the grid of its
    /// mean-field reference, so the reference error stays below the
    /// sampling error of the largest ensemble.
    #[serde(default = "default_reference_refinement")]
    pub reference_refinement: usize,
}

fn default_reference_refinement() -> usize {
    4
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<OutputFormat>,
}

/// Thresholds of the qualitative checks, fixed from converged self-runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckThresholds {
    /// Time at which the two-label barycentre is judged.
    pub barycenter_time: f64,
    /// Controlled follower barycentre must lie this close to the target.
    pub barycenter_tolerance: f64,
    /// Uncontrolled follower barycentre must lie further than this from the target.
    pub uncontrolled_offset: f64,
    /// A local maximum counts as a cluster above this fraction of the peak.
    pub cluster_fraction: f64,
    /// Radius of the follower neighbourhoods compared in the three-label run.
    pub neighbourhood_radius: f64,
    /// Opinion the uncontrolled followers drift to in the three-label run.
    pub rival_opinion: f64,
}

impl Default for CheckThresholds {
    fn default() -> Self {
        Self {
            barycenter_time: 10.0,
            barycenter_tolerance: 0.15,
            uncontrolled_offset: 0.3,
            cluster_fraction: 0.1,
            neighbourhood_radius: 0.25,
            rival_opinion: 0.65,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub experiment: Experiment,
    pub model: ModelSpec,
    pub initial: InitialDensity,
    pub grid: GridSpec,
    pub time: TimeConfig,
    pub mpc: MpcSettings,
    pub particle: ParticleSettings,
    pub outputs: OutputConfig,
    #[serde(default)]
    pub checks: CheckThresholds,
}

fn base(name: &str, experiment: Experiment, model: ModelSpec, initial: InitialDensity, snapshots: &[f64]) -> ExperimentConfig {
    let grid = default_grid(model.lambda_dim());
    ExperimentConfig {
        name: name.into(),
        experiment,
        model,
        initial,
        grid,
        time: TimeConfig {
            final_time: FINAL_TIME,
            dt_max: 0.01,
            cfl_safety: 0.5,
            output_every: 0.5,
            snapshot_times: snapshots.to_vec(),
            fixed_dt: None,
        },
        mpc: MpcSettings {
            enabled: true,
            solver: MpcConfig::default(),
        },
        particle: ParticleSettings {
            sizes: vec![100, 400, 1600, 6400],
            seeds: (0..10).collect(),
            integrator: Integrator::Rk4,
            dt: 0.01,
            probe_times: vec![2.0],
            subcell_atoms: crate::transport::SUBCELL_ATOMS,
            reference_refinement: default_reference_refinement(),
        },
        outputs: OutputConfig {
            directory: PathBuf::from("results").join(name),
            formats: vec![OutputFormat::Csv, OutputFormat::Json],
        },
        checks: CheckThresholds::default(),
    }
}

impl ExperimentConfig {
    /// Two-label experiment with label means inside the simplex.
    pub fn test1() -> Self {
        base("test1", Experiment::Test1, test1_model(), test1_initial(), &TEST1_SNAPSHOTS)
    }

    /// Two-label experiment with the label means exactly as printed.
    pub fn test1_verbatim() -> Self {
        base(
            "test1_verbatim",
            Experiment::Test1,
            test1_model(),
            test1_initial_verbatim(),
            &TEST1_SNAPSHOTS,
        )
    }

    /// Three-label experiment with each leader bump on its own side.
    pub fn test2() -> Self {
        base("test2", Experiment::Test2, test2_model(), test2_initial(), &TEST2_SNAPSHOTS)
    }

    /// Three-label experiment with the leader label means exactly as printed.
    pub fn test2_verbatim() -> Self {
        base(
            "test2_verbatim",
            Experiment::Test2,
            test2_model(),
            test2_initial_verbatim(),
            &TEST2_SNAPSHOTS,
        )
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "test1" => Ok(Self::test1()),
            "test1_verbatim" => Ok(Self::test1_verbatim()),
            "test2" => Ok(Self::test2()),
            "test2_verbatim" => Ok(Self::test2_verbatim()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    /// Schema check only; values are checked by [`Self::validate`].
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs always serialise")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("configs always serialise");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Checks every block for consistency, including the model itself.
    pub fn validate(&self) -> Result<()> {
        self.model.compile()?;
        self.grid.validate()?;
        if self.grid.lambda_dim != self.model.lambda_dim() {
            return Err(Error::DimensionMismatch(format!(
                "grid has {} label axes, model has {}",
                self.grid.lambda_dim,
                self.model.lambda_dim()
            )));
        }
        self.initial.validate(self.grid.lambda_dim)?;
        let t = &self.time;
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(t.final_time) || !positive(t.dt_max) || !positive(t.output_every) {
            return Err(Error::Config("final time, dt_max and output cadence must be > 0".into()));
        }
        if !(t.cfl_safety > 0.0 && t.cfl_safety <= 1.0) {
            return Err(Error::Config(format!("CFL safety {} must lie in (0,1]", t.cfl_safety)));
        }
        if t.fixed_dt.is_some_and(|d| !positive(d)) {
            return Err(Error::Config("a fixed time step must be > 0".into()));
        }
        if t.snapshot_times.iter().any(|s| !(0.0..=t.final_time).contains(s)) {
            return Err(Error::Config("snapshot times must lie in [0, T]".into()));
        }
        self.mpc.solver.validate()?;
        let p = &self.particle;
        if p.sizes.is_empty() || p.sizes.contains(&0) || p.sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("particle sizes must be positive and strictly ascending".into()));
        }
        if p.seeds.is_empty() || !positive(p.dt) || p.subcell_atoms == 0 || p.reference_refinement == 0 {
            return Err(Error::Config(
                "particle block needs seeds, dt > 0, subcell atoms > 0 and reference refinement >= 1".into(),
            ));
        }
        if p.probe_times.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("probe times must be > 0".into()));
        }
        if self.outputs.formats.is_empty() {
            return Err(Error::Config("at least one output format is required".into()));
        }
        Ok(())
    }

    pub fn pde_options(&self) -> PdeOptions {
        PdeOptions {
            dt_max: self.time.dt_max,
            cfl_safety: self.time.cfl_safety,
            snapshot_times: self.time.snapshot_times.clone(),
            output_every: self.time.output_every,
            record_steps: false,
            fixed_dt: self.time.fixed_dt,
        }
    }

    pub fn writes(&self, format: OutputFormat) -> bool {
        self.outputs.formats.contains(&format)
    }
}

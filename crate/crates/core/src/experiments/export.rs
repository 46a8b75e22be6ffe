//! CSV/JSON artifacts and the manifest that ties them to their configs.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{CheckThresholds, Experiment, ExperimentConfig, OutputFormat};
use super::convergence::ConvergenceTable;
use super::run::{prepare, ExperimentResult, ParticleBundle, RunBundle};
use super::validate::ValidationReport;
use crate::audit::AuditReport;
use crate::error::Result;
use crate::fv::FvState;
use crate::grid::GridSpec;
use crate::model::Model;
use crate::mpc::write_log;

pub const MANIFEST: &str = "MANIFEST.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the output directory, `/`-separated.
    pub path: String,
    pub description: String,
    /// Figure numbers this file reproduces.
    pub figures: Vec<u32>,
    pub config_name: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: Vec<Artifact>,
    /// Check thresholds in force for each config hash.
    pub thresholds: BTreeMap<String, CheckThresholds>,
}

struct Sink<'a> {
    root: &'a Path,
    cfg: &'a ExperimentConfig,
    hash: String,
    artifacts: Vec<Artifact>,
}

impl<'a> Sink<'a> {
    fn new(root: &'a Path, cfg: &'a ExperimentConfig) -> Self {
        Self {
            root,
            cfg,
            hash: cfg.hash(),
            artifacts: Vec::new(),
        }
    }

    fn file(&mut self, rel: &str, description: String, figures: &[u32]) -> Result<BufWriter<File>> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.artifacts.push(Artifact {
            path: rel.into(),
            description,
            figures: figures.to_vec(),
            config_name: self.cfg.name.clone(),
            config_hash: self.hash.clone(),
        });
        Ok(BufWriter::new(File::create(path)?))
    }

    fn csv(&mut self, rel: &str, description: String, figures: &[u32], header: &[String], rows: &[Vec<f64>]) -> Result<()> {
        if !self.cfg.writes(OutputFormat::Csv) {
            return Ok(());
        }
        let mut w = csv::Writer::from_writer(self.file(rel, description, figures)?);
        w.write_record(header)?;
        for row in rows {
            w.write_record(row.iter().map(f64::to_string))?;
        }
        w.flush()?;
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, description: String, figures: &[u32], value: &T) -> Result<()> {
        if !self.cfg.writes(OutputFormat::Json) {
            return Ok(());
        }
        let w = self.file(rel, description, figures)?;
        serde_json::to_writer_pretty(w, value)?;
        Ok(())
    }

    fn finish(self) -> Result<Vec<Artifact>> {
        update_manifest(self.root, self.cfg, &self.artifacts)?;
        Ok(self.artifacts)
    }
}

/// Merges `artifacts` into the directory manifest, replacing entries with the same path.
pub fn update_manifest(root: &Path, cfg: &ExperimentConfig, artifacts: &[Artifact]) -> Result<Manifest> {
    let path = root.join(MANIFEST);
    let mut manifest: Manifest = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)?,
        Err(_) => Manifest::default(),
    };
    manifest.artifacts.retain(|a| artifacts.iter().all(|b| b.path != a.path));
    manifest.artifacts.extend_from_slice(artifacts);
    manifest.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
    manifest.thresholds.insert(cfg.hash(), cfg.checks.clone());
    fs::create_dir_all(root)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(&path)?), &manifest)?;
    Ok(manifest)
}

/// Figure numbers of the initial frame, the uncontrolled frames, the
/// controlled frames and the time series.
fn figures(experiment: Experiment) -> [u32; 4] {
    match experiment {
        Experiment::Test1 => [1, 2, 3, 4],
        Experiment::Test2 => [5, 6, 7, 8],
    }
}

fn label_header(prefix: &str, model: &Model) -> Vec<String> {
    model.spec().label_space.labels.iter().map(|l| format!("{prefix}_{l}")).collect()
}

fn spatial_rows(model: &Model, spec: &GridSpec, state: &FvState) -> Vec<Vec<f64>> {
    let m = model.marginals(&state.density, spec);
    (0..spec.nx)
        .map(|ix| {
            let mut row = vec![m.x_centers[ix]];
            row.extend(m.spatial.iter().map(|s| s[ix]));
            row.push(m.spatial.iter().map(|s| s[ix]).sum());
            row
        })
        .collect()
}

fn label_rows(model: &Model, spec: &GridSpec, state: &FvState) -> Vec<Vec<f64>> {
    let m = model.marginals(&state.density, spec);
    let axis = spec.lambda_axis();
    (0..spec.slices())
        .map(|slice| {
            let idx = spec.slice_indices(slice);
            let mut row: Vec<f64> = (0..spec.lambda_dim).map(|k| axis[idx[k]]).collect();
            row.extend(m.label_weighted.iter().map(|v| v[slice]));
            row.push(m.label_total[slice]);
            row
        })
        .collect()
}

fn write_run(sink: &mut Sink, model: &Model, bundle: &RunBundle) -> Result<()> {
    let cfg = sink.cfg;
    let spec = cfg.grid;
    let tag = if bundle.controlled { "controlled" } else { "uncontrolled" };
    let [initial_fig, off_fig, on_fig, series_fig] = figures(cfg.experiment);
    let frame_fig = if bundle.controlled { on_fig } else { off_fig };
    let run = &bundle.run;

    let mut header = vec!["time".to_string(), "mass".into()];
    header.extend(label_header("fraction", model));
    header.push("follower_barycenter".into());
    let rows: Vec<Vec<f64>> = run
        .series
        .iter()
        .map(|p| {
            let mut row = vec![p.time, p.mass];
            row.extend(&p.fractions);
            row.push(p.follower_barycenter.unwrap_or(f64::NAN));
            row
        })
        .collect();
    sink.csv(&format!("{tag}/series.csv"), format!("{tag} label fractions and follower barycentre over time"), &[series_fig], &header, &rows)?;

    let mut header = vec!["time".to_string(), "x".into()];
    header.extend(label_header("mu", model));
    let centers = spec.x_centers();
    let mut rows = Vec::with_capacity(run.series.len() * spec.nx);
    for (p, raster) in run.series.iter().zip(&run.rasters) {
        for (ix, x) in centers.iter().enumerate() {
            let mut row = vec![p.time, *x];
            row.extend(raster.iter().map(|m| m[ix]));
            rows.push(row);
        }
    }
    let raster_figs: &[u32] = if cfg.experiment == Experiment::Test1 { &[series_fig] } else { &[] };
    sink.csv(&format!("{tag}/raster.csv"), format!("{tag} space-time opinion marginals per label"), raster_figs, &header, &rows)?;

    for snap in &run.snapshots {
        let t = snap.time;
        let figs: Vec<u32> = if t == 0.0 { vec![initial_fig, frame_fig] } else { vec![frame_fig] };
        let mut header = vec!["x".to_string()];
        header.extend(label_header("mu", model));
        header.push("mu_total".into());
        sink.csv(
            &format!("{tag}/opinion_t{t}.csv"),
            format!("{tag} opinion marginals per label at t = {t}"),
            &figs,
            &header,
            &spatial_rows(model, &spec, snap),
        )?;
        let mut header: Vec<String> = (1..=spec.lambda_dim).map(|k| format!("lambda_{k}")).collect();
        header.extend(label_header("nu", model));
        header.push("nu_total".into());
        sink.csv(
            &format!("{tag}/labels_t{t}.csv"),
            format!("{tag} label-space marginals at t = {t}"),
            &figs,
            &header,
            &label_rows(model, &spec, snap),
        )?;
    }

    #[derive(Serialize)]
    struct Summary<'a> {
        controlled: bool,
        seconds: f64,
        metrics: &'a super::run::RunMetrics,
        summary: &'a crate::fv::RunSummary,
    }
    sink.json(
        &format!("{tag}/summary.json"),
        format!("{tag} run diagnostics, cost and check metrics"),
        &[],
        &Summary {
            controlled: bundle.controlled,
            seconds: bundle.seconds,
            metrics: &bundle.metrics,
            summary: &run.summary,
        },
    )?;
    if bundle.controlled && cfg.writes(OutputFormat::Csv) {
        let w = sink.file(&format!("{tag}/mpc_log.csv"), "per-step MPC solver log".into(), &[])?;
        write_log(&bundle.mpc_log, w)?;
    }
    Ok(())
}

/// Writes every artifact of an experiment run under `root`.
pub fn write_experiment(root: &Path, cfg: &ExperimentConfig, result: &ExperimentResult) -> Result<Vec<Artifact>> {
    let (model, _) = prepare(cfg)?;
    let mut sink = Sink::new(root, cfg);
    sink.json("config.json", "configuration of the runs in this directory".into(), &[], cfg)?;
    for bundle in &result.runs {
        write_run(&mut sink, &model, bundle)?;
    }
    sink.json("checks.json", "qualitative checks with deciding values and thresholds".into(), &[], &result.checks)?;
    sink.finish()
}

/// Agent trajectories at the output cadence plus per-output fractions and barycentre.
pub fn write_particles(root: &Path, cfg: &ExperimentConfig, bundle: &ParticleBundle) -> Result<Vec<Artifact>> {
    let (model, _) = prepare(cfg)?;
    let mut sink = Sink::new(root, cfg);
    let tag = if bundle.controlled { "controlled" } else { "uncontrolled" };
    let dir = format!("particles_{tag}_n{}_seed{}", bundle.n, bundle.seed);
    let traj = &bundle.trajectory;
    let cadence = ((cfg.time.output_every / cfg.particle.dt).round() as usize).max(1);
    let outputs: Vec<usize> = (0..traj.times.len())
        .filter(|k| k % cadence == 0 || k + 1 == traj.times.len())
        .collect();
    if cfg.writes(OutputFormat::Csv) {
        let w = sink.file(&format!("{dir}/agents.csv"), format!("{tag} agent states and controls"), &[])?;
        traj.write_csv(&model, w, cadence)?;
        let mut header = vec!["time".to_string()];
        header.extend(label_header("fraction", &model));
        header.push("follower_barycenter".into());
        let rows: Vec<Vec<f64>> = outputs
            .iter()
            .map(|&k| {
                let ens = &traj.snapshots[k];
                let mut row = vec![traj.times[k]];
                row.extend(model.mass_fractions(ens));
                row.push(model.field(ens).follower_barycenter().unwrap_or(f64::NAN));
                row
            })
            .collect();
        sink.csv(&format!("{dir}/series.csv"), format!("{tag} particle label fractions and follower barycentre"), &[], &header, &rows)?;
    }
    #[derive(Serialize)]
    struct Summary {
        controlled: bool,
        n: usize,
        seed: u64,
        seconds: f64,
        cost: f64,
        max_norm: f64,
    }
    sink.json(
        &format!("{dir}/summary.json"),
        format!("{tag} particle run cost and support bound"),
        &[],
        &Summary {
            controlled: bundle.controlled,
            n: bundle.n,
            seed: bundle.seed,
            seconds: bundle.seconds,
            cost: bundle.cost,
            max_norm: traj.max_norm(),
        },
    )?;
    sink.finish()
}

pub fn write_convergence(root: &Path, cfg: &ExperimentConfig, table: &ConvergenceTable) -> Result<Vec<Artifact>> {
    let mut sink = Sink::new(root, cfg);
    let header: Vec<String> = ["controlled", "n", "seed", "probe_time", "w1_x", "w1_lambda", "cost_particles", "cost_meanfield", "cost_gap"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<Vec<f64>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                f64::from(u8::from(r.controlled)),
                r.n as f64,
                r.seed as f64,
                r.probe_time,
                r.w1_x,
                r.w1_lambda,
                r.cost_particles,
                r.cost_meanfield,
                r.cost_gap,
            ]
        })
        .collect();
    sink.csv("convergence/rows.csv", "particle against grid distances and cost gaps per job".into(), &[], &header, &rows)?;
    sink.json("convergence/table.json", "convergence medians and fitted log-log slopes".into(), &[], table)?;
    sink.finish()
}

pub fn write_validation(root: &Path, cfg: &ExperimentConfig, report: &ValidationReport) -> Result<Vec<Artifact>> {
    let mut sink = Sink::new(root, cfg);
    sink.json("validation.json", "invariant checks of the configuration".into(), &[], report)?;
    sink.finish()
}

pub fn write_audit(root: &Path, cfg: &ExperimentConfig, report: &AuditReport) -> Result<Vec<Artifact>> {
    let mut sink = Sink::new(root, cfg);
    sink.json("audit.json", "estimated growth and Lipschitz constants of the model".into(), &[], report)?;
    sink.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::run::{run_test1, ControlMode};

    fn coarse() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::test1();
        cfg.grid.nx = 32;
        cfg.grid.n_lambda = 16;
        cfg.time.final_time = 1.0;
        cfg.time.snapshot_times = vec![0.0, 0.5, 1.0];
        cfg.checks.barycenter_time = 1.0;
        cfg
    }

    fn read_all(root: &Path, manifest: &Manifest) -> Vec<(String, Vec<u8>)> {
        manifest
            .artifacts
            .iter()
            .filter(|a| !a.path.ends_with("summary.json"))
            .map(|a| (a.path.clone(), fs::read(root.join(&a.path)).unwrap()))
            .collect()
    }

    #[test]
    fn identical_configs_write_identical_files() {
        let cfg = coarse();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for dir in [a.path(), b.path()] {
            let result = run_test1(&cfg, ControlMode::Both).unwrap();
            write_experiment(dir, &cfg, &result).unwrap();
        }
        let load = |p: &Path| -> Manifest { serde_json::from_str(&fs::read_to_string(p.join(MANIFEST)).unwrap()).unwrap() };
        let (ma, mb) = (load(a.path()), load(b.path()));
        assert_eq!(ma, mb);
        assert_eq!(read_all(a.path(), &ma), read_all(b.path(), &mb));
        for fig in 1..=4 {
            assert!(ma.artifacts.iter().any(|x| x.figures.contains(&fig)), "figure {fig}");
        }
        assert!(ma.thresholds.contains_key(&cfg.hash()));
        assert!(ma.artifacts.iter().all(|x| x.config_hash == cfg.hash()));
        let series = fs::read_to_string(a.path().join("controlled/series.csv")).unwrap();
        assert!(series.starts_with("time,mass,fraction_F,fraction_L,follower_barycenter"));
    }

    #[test]
    fn manifest_merges_by_path() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = coarse();
        let art = |path: &str| Artifact {
            path: path.into(),
            description: String::new(),
            figures: vec![],
            config_name: cfg.name.clone(),
            config_hash: cfg.hash(),
        };
        update_manifest(dir.path(), &cfg, &[art("a.csv"), art("b.csv")]).unwrap();
        let m = update_manifest(dir.path(), &cfg, &[art("b.csv"), art("c.csv")]).unwrap();
        let paths: Vec<&str> = m.artifacts.iter().map(|a| a.path.as_str()).collect();
        assert_eq!(paths, vec!["a.csv", "b.csv", "c.csv"]);
    }

    #[test]
    fn formats_gate_the_files() {
        let mut cfg = coarse();
        cfg.outputs.formats = vec![OutputFormat::Json];
        let dir = tempfile::tempdir().unwrap();
        let result = run_test1(&cfg, ControlMode::Off).unwrap();
        let arts = write_experiment(dir.path(), &cfg, &result).unwrap();
        assert!(arts.iter().all(|a| a.path.ends_with(".json")));
        assert!(dir.path().join("checks.json").exists());
    }
}

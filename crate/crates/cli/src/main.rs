//! Command-line front end for the opinion-dynamics experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use transient_leaders::audit::{assumption_audit, AuditConfig};
use transient_leaders::experiments::export::{write_audit, write_convergence, write_experiment, write_particles, write_validation};
use transient_leaders::experiments::run::{prepare, run_particles};
use transient_leaders::experiments::{
    convergence_study, run_test1, run_test2, validate, ControlMode, Experiment, ExperimentConfig, ExperimentResult,
};

#[derive(Parser)]
#[command(name = "tleaders", version, about = "Mean-field opinion dynamics with transient leadership")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Two-label experiment: uncontrolled and controlled runs to the final time.
    RunTest1(RunArgs),
    /// Three-label experiment: uncontrolled and controlled runs to the final time.
    RunTest2(RunArgs),
    /// Particle ensembles against the grid solution.
    Converge(CommonArgs),
    /// Invariant checks of a configuration; exits nonzero on any failure.
    Validate(CommonArgs),
    /// Growth and Lipschitz estimates of the model ingredients.
    Audit(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON experiment config; a built-in preset is used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset: test1, test1_verbatim, test2 or test2_verbatim.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; replaces the config seeds with consecutive ones.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = Controlled::Both)]
    controlled: Controlled,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum, default_value_t = Backend::Pde)]
    backend: Backend,
    /// Agents in a particle-backend run.
    #[arg(long, default_value_t = 1000)]
    particles: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Controlled {
    On,
    Off,
    Both,
}

impl From<Controlled> for ControlMode {
    fn from(c: Controlled) -> Self {
        match c {
            Controlled::On => ControlMode::On,
            Controlled::Off => ControlMode::Off,
            Controlled::Both => ControlMode::Both,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Backend {
    Pde,
    Particle,
    Both,
}

fn load(args: &CommonArgs, default_preset: &str, checked: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::parse(&text)?
        }
        None => ExperimentConfig::preset(args.preset.as_deref().unwrap_or(default_preset))?,
    };
    if let Some(out) = &args.out {
        cfg.outputs.directory = out.clone();
    }
    if let Some(seed) = args.seed {
        let count = cfg.particle.seeds.len() as u64;
        cfg.particle.seeds = (seed..seed + count).collect();
    }
    if checked {
        cfg.validate()?;
    }
    Ok(cfg)
}

fn print_checks(result: &ExperimentResult) {
    for run in &result.runs {
        let s = &run.run.summary;
        println!(
            "{:>12}: {} steps in {:.1} s, cost {:.6}, mass drift {:e}",
            if run.controlled { "controlled" } else { "uncontrolled" },
            s.steps,
            run.seconds,
            s.cost,
            s.max_relative_mass_change
        );
    }
    for c in &result.checks {
        println!("{} {} (value {}, threshold {})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.threshold);
    }
}

fn run_test(args: &RunArgs, experiment: Experiment) -> Result<ExitCode> {
    let preset = match experiment {
        Experiment::Test1 => "test1",
        Experiment::Test2 => "test2",
    };
    let cfg = load(&args.common, preset, true)?;
    let root = cfg.outputs.directory.clone();
    let mode = ControlMode::from(args.common.controlled);
    let mut ok = true;
    if args.backend != Backend::Particle {
        let result = match experiment {
            Experiment::Test1 => run_test1(&cfg, mode)?,
            Experiment::Test2 => run_test2(&cfg, mode)?,
        };
        print_checks(&result);
        write_experiment(&root, &cfg, &result)?;
        ok &= result.passed();
    }
    if args.backend != Backend::Pde {
        let (model, psi0) = prepare(&cfg)?;
        let seed = cfg.particle.seeds[0];
        for &controlled in mode.regimes() {
            let bundle = run_particles(&cfg, &model, &psi0, args.particles, seed, controlled)?;
            println!(
                "particles ({}): N = {}, cost {:.6}, {:.1} s",
                if controlled { "controlled" } else { "uncontrolled" },
                bundle.n,
                bundle.cost,
                bundle.seconds
            );
            write_particles(&root, &cfg, &bundle)?;
        }
    }
    println!("artifacts in {}", root.display());
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn converge(args: &CommonArgs) -> Result<ExitCode> {
    let cfg = load(args, "test1", true)?;
    let table = convergence_study(&cfg, ControlMode::from(args.controlled).regimes())?;
    for s in &table.summary {
        println!(
            "{:>12} N = {:>6} t = {}: median W1(x) {:.5}, W1(lambda) {:.5}, cost gap {:.3e}",
            if s.controlled { "controlled" } else { "uncontrolled" },
            s.n,
            s.probe_time,
            s.median_w1_x,
            s.median_w1_lambda,
            s.median_cost_gap
        );
    }
    for f in &table.fits {
        println!(
            "{:>12} t = {}: slope W1(x) {:.3}, slope W1(lambda) {:.3}, W1 decreasing {}, cost gap decreasing {}",
            if f.controlled { "controlled" } else { "uncontrolled" },
            f.probe_time,
            f.slope_w1_x,
            f.slope_w1_lambda,
            f.w1_x_decreasing,
            f.cost_gap_decreasing
        );
    }
    write_convergence(&cfg.outputs.directory, &cfg, &table)?;
    println!("{:.1} s; artifacts in {}", table.seconds, cfg.outputs.directory.display());
    Ok(ExitCode::SUCCESS)
}

fn validate_cmd(args: &CommonArgs) -> Result<ExitCode> {
    let cfg = load(args, "test1", false)?;
    let report = validate(&cfg);
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    write_validation(&cfg.outputs.directory, &cfg, &report)?;
    Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn audit_cmd(args: &CommonArgs) -> Result<ExitCode> {
    let cfg = load(args, "test1", true)?;
    let report = assumption_audit(&cfg.model, &AuditConfig::default())?;
    for (key, entry) in &report.entries {
        println!(
            "{key:>3} {:>12.6} {}{}",
            entry.value,
            entry.description,
            if entry.flagged { "  [flagged]" } else { "" }
        );
    }
    write_audit(&cfg.outputs.directory, &cfg, &report)?;
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::RunTest1(args) => run_test(args, Experiment::Test1),
        Command::RunTest2(args) => run_test(args, Experiment::Test2),
        Command::Converge(args) => converge(args),
        Command::Validate(args) => validate_cmd(args),
        Command::Audit(args) => audit_cmd(args),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

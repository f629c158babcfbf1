use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use platoon_core::decomposition::{decompose_pd, stage_blocks, DeltaRule};
use platoon_core::sim::{self, NoiseSpec, ScenarioSpec};
use platoon_core::solvers::{self, WarmStart};
use platoon_core::{
    build_closed_loop, build_qcqp, DistributedProblem, LeaderProfile, PlatoonConfig, PlatoonState, SolverParams,
    StabilityReport, Variant, WeightSchedule,
};

#[derive(Parser)]
#[command(name = "platoon", version, about = "Distributed MPC for CAV platoons")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a closed-loop scenario and write CSV/JSON results.
    Simulate {
        /// `s1`, `s2`, `s3-synthetic`, a ScenarioSpec `.json` or a `t,accel` leader `.csv`.
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Add process noise to realized accelerations.
        #[arg(long)]
        noise: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Start each step from the unconstrained warm-up projection.
        #[arg(long)]
        warmup: bool,
        /// Override the number of steps.
        #[arg(long)]
        duration: Option<usize>,
        /// Solve each step centrally too and report the relative error.
        #[arg(long)]
        oracle: bool,
    },
    /// Print the closed-loop stability report as JSON.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Solve one step from a state file and compare with the centralized solve.
    SolveOnce {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        variant: Option<Variant>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    platoon: Option<PlatoonConfig>,
    weights: Option<WeightSchedule>,
    solver: Option<SolverParams>,
}

struct Setup {
    cfg: PlatoonConfig,
    weights: WeightSchedule,
    solver: SolverParams,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn setup(config: Option<&Path>, horizon: Option<usize>, variant: Option<Variant>) -> anyhow::Result<Setup> {
    let file: ConfigFile = match config {
        Some(path) => read_json(path)?,
        None => ConfigFile::default(),
    };
    let p = horizon
        .or(file.weights.as_ref().map(|w| w.horizon()))
        .or(file.platoon.as_ref().map(|c| c.p))
        .unwrap_or(1);
    let cfg = file.platoon.unwrap_or_else(|| PlatoonConfig::reference(p)).with_horizon(p);
    cfg.validate()?;
    let weights = match file.weights {
        Some(w) => w,
        None if cfg.n == 10 => WeightSchedule::reference(p),
        None => bail!("no weight schedule given and the built-in one is for 10 vehicles"),
    };
    weights.validate(cfg.n, p)?;
    let mut solver = file.solver.unwrap_or_else(|| SolverParams::reference(p));
    if let Some(v) = variant {
        solver.variant = v;
    }
    solver.validate()?;
    Ok(Setup { cfg, weights, solver })
}

fn scenario(name: &str, s: &Setup) -> anyhow::Result<ScenarioSpec> {
    let path = Path::new(name);
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => read_json(path),
        Some("csv") => {
            let leader = LeaderProfile::from_csv(path, s.cfg.tau)?;
            let LeaderProfile::TrajectoryFile { samples } = &leader else { unreachable!() };
            let duration = samples.len().saturating_sub(1).max(1);
            let name = path.file_stem().map_or("file".into(), |s| s.to_string_lossy().into_owned());
            Ok(ScenarioSpec {
                name,
                leader,
                duration,
                v_init: 25.0,
                noise: None,
                solver: s.solver.clone(),
                seed: 0,
                a_max: None,
                oracle: false,
            })
        }
        _ => Ok(ScenarioSpec { solver: s.solver.clone(), ..sim::scenario_builtin(name, s.cfg.p)? }),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Simulate { scenario: name, horizon, variant, config, out, noise, seed, warmup, duration, oracle } => {
            let s = setup(config.as_deref(), horizon, variant)?;
            let mut spec = scenario(&name, &s)?;
            if noise {
                spec.noise = Some(NoiseSpec::reference());
            }
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            if warmup {
                spec.solver.warm_start = WarmStart::WarmupProjection;
            }
            if let Some(d) = duration {
                spec.duration = d;
            }
            spec.oracle |= oracle;
            let result = sim::run_scenario(&spec, &s.cfg, &s.weights)?;
            sim::emit_results(&result, &out)?;
            let m = &result.metrics;
            println!(
                "{}: max |S01 - delta| = {:.4} m, max |S(i-1,i) - delta| (i >= 2) = {:.2e} m, min safety margin = {:.4}, median iterations = {}",
                result.name, m.max_dev_01, m.max_dev_rest, m.min_safety_margin, m.median_iterations
            );
            if let Some(t) = m.settling_time {
                println!("settling time after last leader acceleration: {t} s");
            }
            if let Some(e) = m.mean_rel_error {
                println!("mean relative error vs centralized: {e:.3e}");
            }
            println!("results written to {}", out.display());
        }
        Cmd::Analyze { config, horizon } => {
            let s = setup(config.as_deref(), horizon, None)?;
            let model = build_closed_loop(&s.cfg, &s.weights)?;
            println!("{}", serde_json::to_string_pretty(&StabilityReport::from(&model))?);
        }
        Cmd::SolveOnce { state, config, horizon, variant } => {
            let s = setup(config.as_deref(), horizon, variant)?;
            let state: PlatoonState = read_json(&state)?;
            state.validate(&s.cfg)?;
            let prob = build_qcqp(&state, &s.cfg, &s.weights)?;
            let dec = decompose_pd(&stage_blocks(&s.weights, &s.cfg)?, DeltaRule::default())?;
            let dp = DistributedProblem::new(&prob, &dec)?;
            let central = solvers::solve_centralized(&prob, 1e-10)?;
            let rep = solvers::solve_with_warm_start(&dp, &s.solver, None)?.with_oracle(&central.u);
            let report = serde_json::json!({
                "distributed": rep,
                "centralized": central.u,
                "centralized_kkt": central.kkt.max(),
                "objective": prob.eval_objective(&rep.u_star),
                "objective_centralized": prob.eval_objective(&central.u),
            });
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !rep.converged {
                bail!("distributed solve did not converge in {} iterations", rep.iterations);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

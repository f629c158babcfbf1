//! Receding-horizon closed-loop runs.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::decomposition::{decompose_pd, stage_blocks, DeltaRule};
use crate::error::{Error, Result};
use crate::mpc::{build_with_blocks, safety_margins, WeightSchedule};
use crate::platoon::{step_dynamics, AccelSegment, LeaderProfile, PlatoonConfig, PlatoonState};
use crate::solvers::{self, DistributedProblem, SolverParams};

/// Band used for the settling time of the first spacing.
pub const SETTLE_BAND: f64 = 0.05;
/// Tolerance on the realized safety margin.
pub const SAFETY_TOL: f64 = 1e-6;

/// Zero-mean process noise on realized accelerations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub mean: f64,
    /// Standard deviation for the first CAV.
    pub first_std: f64,
    /// Standard deviation for the others.
    pub rest_std: f64,
}

impl NoiseSpec {
    pub fn reference() -> Self {
        Self { mean: 0.0, first_std: 0.04, rest_std: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub leader: LeaderProfile,
    /// Number of simulated steps.
    pub duration: usize,
    pub v_init: f64,
    pub noise: Option<NoiseSpec>,
    pub solver: SolverParams,
    pub seed: u64,
    /// Overrides the configured acceleration bound.
    pub a_max: Option<f64>,
    /// Also solve each step centrally and record the relative error.
    pub oracle: bool,
}

impl ScenarioSpec {
    pub fn validate(&self, cfg: &PlatoonConfig) -> Result<()> {
        if self.duration == 0 {
            return Err(Error::InvalidParams("duration must be at least one step".into()));
        }
        if let Some(nz) = &self.noise {
            if !(nz.first_std >= 0.0 && nz.rest_std >= 0.0 && nz.mean.is_finite()) {
                return Err(Error::InvalidParams("noise deviations must be nonnegative".into()));
            }
        }
        self.solver.validate()?;
        self.leader.validate(cfg, self.v_init, self.duration)
    }

    pub fn config(&self, cfg: &PlatoonConfig) -> PlatoonConfig {
        PlatoonConfig { a_max: self.a_max.unwrap_or(cfg.a_max), ..cfg.clone() }
    }
}

/// Built-in scenarios for horizon `p`: `s1`, `s2`, `s3-synthetic`.
pub fn scenario_builtin(name: &str, p: usize) -> Result<ScenarioSpec> {
    let base = |leader, duration| ScenarioSpec {
        name: name.to_string(),
        leader,
        duration,
        v_init: 25.0,
        noise: None,
        solver: SolverParams::reference(p),
        seed: 0,
        a_max: None,
        oracle: false,
    };
    match name {
        "s1" => Ok(base(
            LeaderProfile::PiecewiseConstantAccel {
                segments: vec![
                    AccelSegment { start: 51, end: 54, accel: -2.0 },
                    AccelSegment { start: 101, end: 108, accel: 1.0 },
                ],
            },
            200,
        )),
        "s2" => Ok(base(LeaderProfile::PeriodicAccel { start: 51, end: 100, period: 4, amplitude: 1.0 }, 200)),
        "s3-synthetic" => {
            let mut spec = base(synthetic_oscillation(0, 45), 45);
            spec.a_max = Some(2.0);
            Ok(spec)
        }
        _ => Err(Error::UnknownScenario(name.to_string())),
    }
}

/// Seeded mean-reverting random walk of leader accelerations in `[-2, 2]`.
/// The speed starts at 25 m/s and stays inside `[12, 25]`: above roughly
/// 27 m/s the 50 m gap no longer satisfies the safety constraint.
pub fn synthetic_oscillation(seed: u64, steps: usize) -> LeaderProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kick = Normal::new(0.0, 0.8).expect("valid deviation");
    let (mut v, mut a) = (25.0f64, 0.0f64);
    let mut samples = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        a = (0.6 * a + kick.sample(&mut rng) - 0.1 * (v - 22.0)).clamp(-2.0, 2.0);
        a = a.clamp(12.0 - v, 25.0 - v);
        samples.push(a);
        v += a;
    }
    LeaderProfile::TrajectoryFile { samples }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepStats {
    pub k: usize,
    pub iterations: usize,
    pub warmup_iterations: usize,
    pub converged: bool,
    pub residual: f64,
    pub constrained_solves: usize,
    pub rel_error: Option<f64>,
    /// Relative error of the applied first-stage controls only.
    pub rel_error_first: Option<f64>,
    /// Euclidean norm of the centralized solution.
    pub oracle_norm: Option<f64>,
    /// Worst constraint violation of the stacked solution.
    pub membership_violation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Metrics {
    pub max_dev_01: f64,
    /// Over `i >= 2`.
    pub max_dev_rest: f64,
    /// Last step with a nonzero leader acceleration.
    pub disturbance_end: Option<usize>,
    /// Seconds after `disturbance_end` until `|S_01 - delta| < 0.05` for good.
    pub settling_time: Option<f64>,
    pub min_safety_margin: f64,
    pub max_membership_violation: f64,
    pub mean_iterations: f64,
    pub median_iterations: f64,
    pub mean_warmup_iterations: f64,
    pub nonconverged_steps: usize,
    pub mean_rel_error: Option<f64>,
    pub max_rel_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimResult {
    pub name: String,
    pub n: usize,
    pub p: usize,
    pub tau: f64,
    pub delta: f64,
    /// `spacings[k][i] = x_{i}(k) - x_{i+1}(k)` for CAV `i + 1`.
    pub spacings: Vec<Vec<f64>>,
    /// `speeds[k]` includes the leader at index 0.
    pub speeds: Vec<Vec<f64>>,
    /// First-stage commands, one row per solved step.
    pub controls: Vec<Vec<f64>>,
    pub leader_accel: Vec<f64>,
    pub steps: Vec<StepStats>,
    pub safety_margins: Vec<Vec<f64>>,
    pub metrics: Metrics,
}

pub fn run_scenario(spec: &ScenarioSpec, cfg: &PlatoonConfig, weights: &WeightSchedule) -> Result<SimResult> {
    let cfg = spec.config(cfg);
    cfg.validate()?;
    weights.validate(cfg.n, cfg.p)?;
    spec.validate(&cfg)?;
    let (n, p) = (cfg.n, cfg.p);
    let blocks = stage_blocks(weights, &cfg)?;
    let dec = decompose_pd(&blocks, DeltaRule::default())?;

    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let noise = match spec.noise {
        Some(nz) => Some((
            Normal::new(nz.mean, nz.first_std).map_err(|e| Error::InvalidParams(e.to_string()))?,
            Normal::new(nz.mean, nz.rest_std).map_err(|e| Error::InvalidParams(e.to_string()))?,
        )),
        None => None,
    };

    let mut state = PlatoonState::steady(&cfg, spec.v_init);
    state.u0 = spec.leader.accel(0);
    let mut prev: Option<Vec<f64>> = None;
    let mut out = SimResult {
        name: spec.name.clone(),
        n,
        p,
        tau: cfg.tau,
        delta: cfg.delta,
        spacings: Vec::new(),
        speeds: Vec::new(),
        controls: Vec::new(),
        leader_accel: Vec::new(),
        steps: Vec::new(),
        safety_margins: Vec::new(),
        metrics: empty_metrics(),
    };

    for k in 0..=spec.duration {
        let margins = safety_margins(&state, &cfg);
        if let Some((i, &m)) = margins.iter().enumerate().find(|(_, &m)| m < -SAFETY_TOL) {
            return Err(Error::SafetyViolation { step: k, vehicle: i + 1, margin: m });
        }
        out.spacings.push((1..=n).map(|i| state.x[i - 1] - state.x[i]).collect());
        out.speeds.push(state.v.clone());
        out.leader_accel.push(state.u0);
        out.safety_margins.push(margins);

        let at_step = |e: Error| Error::Step { step: k, source: Box::new(e) };
        let prob = build_with_blocks(&state, &cfg, weights, &blocks);
        let dp = DistributedProblem::new(&prob, &dec).map_err(at_step)?;
        let mut rep = solvers::solve_with_warm_start(&dp, &spec.solver, prev.as_deref()).map_err(at_step)?;
        if !rep.converged {
            return Err(at_step(Error::NotConverged { iterations: rep.iterations, residual: rep.residual }));
        }
        let mut oracle_norm = None;
        let mut rel_error_first = None;
        if spec.oracle {
            let central = solvers::solve_centralized(&prob, 1e-10).map_err(at_step)?;
            oracle_norm = Some(central.u.iter().map(|x| x * x).sum::<f64>().sqrt());
            let first = |u: &[f64]| (0..n).map(|i| u[i * p]).collect::<Vec<_>>();
            rel_error_first = Some(solvers::relative_error(&first(&rep.u_star), &first(&central.u)));
            rep = rep.with_oracle(&central.u);
        }
        // Each agent's own block is exactly in its local set, but the safety
        // rows read the predecessor's own block rather than the local copy,
        // so the stacked solution is feasible only up to consensus accuracy.
        let memb = prob.check_membership(&rep.u_star, membership_tol(&spec.solver));
        if !memb.feasible {
            return Err(Error::InfeasibleControl { step: k, residual: memb.worst_violation });
        }
        let u: Vec<f64> = (0..n).map(|i| rep.u_star[i * p]).collect();
        out.steps.push(StepStats {
            k,
            iterations: rep.iterations,
            warmup_iterations: rep.warmup_iterations,
            converged: rep.converged,
            residual: rep.residual,
            constrained_solves: rep.agents.iter().map(|a| a.constrained).sum(),
            rel_error: rep.rel_error,
            rel_error_first,
            oracle_norm,
            membership_violation: memb.worst_violation,
        });
        out.controls.push(u.clone());
        prev = Some(rep.u_star);

        if k < spec.duration {
            let applied: Vec<f64> = match &noise {
                Some((first, rest)) => u
                    .iter()
                    .enumerate()
                    .map(|(i, ui)| ui + if i == 0 { first.sample(&mut noise_rng) } else { rest.sample(&mut noise_rng) })
                    .collect(),
                None => u,
            };
            state = step_dynamics(&state, cfg.tau, &applied, spec.leader.accel(k + 1));
        }
    }
    out.metrics = compute_metrics(&out, spec.leader.last_active_step(spec.duration));
    Ok(out)
}

/// Allowed constraint violation of the stacked distributed solution.
pub fn membership_tol(params: &SolverParams) -> f64 {
    SAFETY_TOL.max(params.tol)
}

fn empty_metrics() -> Metrics {
    Metrics {
        max_dev_01: 0.0,
        max_dev_rest: 0.0,
        disturbance_end: None,
        settling_time: None,
        min_safety_margin: f64::INFINITY,
        max_membership_violation: 0.0,
        mean_iterations: 0.0,
        median_iterations: 0.0,
        mean_warmup_iterations: 0.0,
        nonconverged_steps: 0,
        mean_rel_error: None,
        max_rel_error: None,
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn compute_metrics(r: &SimResult, disturbance_end: Option<usize>) -> Metrics {
    let dev01: Vec<f64> = r.spacings.iter().map(|s| (s[0] - r.delta).abs()).collect();
    let max_dev_rest = r
        .spacings
        .iter()
        .flat_map(|s| s[1..].iter().map(|x| (x - r.delta).abs()))
        .fold(0.0, f64::max);
    let iters: Vec<f64> = r.steps.iter().map(|s| s.iterations as f64).collect();
    let rel: Vec<f64> = r.steps.iter().filter_map(|s| s.rel_error).collect();
    Metrics {
        max_dev_01: dev01.iter().copied().fold(0.0, f64::max),
        max_dev_rest,
        disturbance_end,
        settling_time: disturbance_end.and_then(|end| r.settle_after(end, SETTLE_BAND)),
        min_safety_margin: r.safety_margins.iter().flatten().copied().fold(f64::INFINITY, f64::min),
        max_membership_violation: r.steps.iter().map(|s| s.membership_violation).fold(0.0, f64::max),
        mean_iterations: iters.iter().sum::<f64>() / iters.len().max(1) as f64,
        median_iterations: median(&iters),
        mean_warmup_iterations: r.steps.iter().map(|s| s.warmup_iterations as f64).sum::<f64>()
            / r.steps.len().max(1) as f64,
        nonconverged_steps: r.steps.iter().filter(|s| !s.converged).count(),
        mean_rel_error: (!rel.is_empty()).then(|| rel.iter().sum::<f64>() / rel.len() as f64),
        max_rel_error: rel.iter().copied().reduce(f64::max),
    }
}

impl SimResult {
    /// Seconds after step `end` until `|S_01 - delta|` stays below `band`.
    pub fn settle_after(&self, end: usize, band: f64) -> Option<f64> {
        let dev: Vec<f64> = self.spacings.iter().map(|s| (s[0] - self.delta).abs()).collect();
        if dev.last().is_none_or(|&d| d >= band) {
            return None;
        }
        let last_out = (end..dev.len()).rev().find(|&k| dev[k] >= band);
        let k = last_out.map_or(end, |k| k + 1);
        Some((k - end) as f64 * self.tau)
    }

    /// Largest `|S_01 - delta|` over steps `lo..=hi`.
    pub fn max_dev_01_between(&self, lo: usize, hi: usize) -> f64 {
        self.spacings[lo..=hi.min(self.spacings.len() - 1)]
            .iter()
            .map(|s| (s[0] - self.delta).abs())
            .fold(0.0, f64::max)
    }
}

fn write_series(path: &Path, prefix: &str, rows: &[Vec<f64>], first: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let width = rows.first().map_or(0, |r| r.len());
    let mut header = vec!["k".to_string()];
    header.extend((0..width).map(|i| format!("{prefix}{}", i + first)));
    w.write_record(&header)?;
    for (k, row) in rows.iter().enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(row.iter().map(|x| format!("{x}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

const PLOT_SCRIPT: &str = r#"import csv
import sys

import matplotlib.pyplot as plt


def load(name):
    with open(name) as f:
        rows = list(csv.reader(f))
    head, body = rows[0], rows[1:]
    k = [int(r[0]) for r in body]
    cols = {h: [float(r[j]) for r in body] for j, h in enumerate(head) if j > 0}
    return k, cols


fig, axes = plt.subplots(3, 1, sharex=True, figsize=(8, 9))
for ax, (name, label) in zip(axes, [("spacings.csv", "spacing [m]"), ("speeds.csv", "speed [m/s]"), ("controls.csv", "control [m/s^2]")]):
    k, cols = load(name)
    for h, ys in cols.items():
        ax.plot(k, ys, label=h, linewidth=0.8)
    ax.set_ylabel(label)
axes[-1].set_xlabel("k [s]")
axes[0].legend(ncol=5, fontsize="small")
fig.tight_layout()
fig.savefig(sys.argv[1] if len(sys.argv) > 1 else "platoon.png", dpi=150)
"#;

/// Write `spacings.csv`, `speeds.csv`, `controls.csv`, `metrics.json` and `plot.py`.
pub fn emit_results(result: &SimResult, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_series(&dir.join("spacings.csv"), "s", &result.spacings, 1)?;
    write_series(&dir.join("speeds.csv"), "v", &result.speeds, 0)?;
    write_series(&dir.join("controls.csv"), "u", &result.controls, 1)?;
    let metrics = serde_json::json!({
        "scenario": result.name,
        "n": result.n,
        "p": result.p,
        "max_dev": result.metrics.max_dev_01,
        "metrics": result.metrics,
        "steps": result.steps,
    });
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)?)?;
    fs::write(dir.join("plot.py"), PLOT_SCRIPT)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn s1_leader_speed() {
        let spec = scenario_builtin("s1", 1).unwrap();
        let v = spec.leader.speeds(25.0, 1.0, 120);
        assert_eq!(v[55], 17.0);
        assert_eq!(v[109], 25.0);
    }

    #[test]
    fn s2_period_is_speed_neutral() {
        let spec = scenario_builtin("s2", 1).unwrap();
        let v = spec.leader.speeds(25.0, 1.0, 120);
        assert_eq!(v[55], v[51]);
        assert_eq!(v[101], 25.0);
    }

    #[test]
    fn s3_is_seeded() {
        assert_eq!(synthetic_oscillation(7, 45), synthetic_oscillation(7, 45));
        let spec = scenario_builtin("s3-synthetic", 1).unwrap();
        let cfg = spec.config(&PlatoonConfig::reference(1));
        spec.validate(&cfg).unwrap();
        if let LeaderProfile::TrajectoryFile { samples } = &spec.leader {
            assert!(samples.iter().all(|a| a.abs() <= 2.0));
        }
    }

    #[test]
    fn unknown_scenario() {
        assert!(matches!(scenario_builtin("s9", 1), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

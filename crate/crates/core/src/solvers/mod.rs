//! Distributed splitting solvers for the consensus form of the per-step
//! program, plus a centralized reference solve.

mod centralized;
mod dr;
mod local;
mod three_op;
mod warmup;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use centralized::{solve_centralized, CentralizedSolution};
pub use dr::solve_dr;
pub use local::{agent_problems, LocalAgentProblem, LocalSolve, LOCAL_KKT_TOL};
pub use three_op::{accel_step_size, solve_three_op, solve_three_op_accel};
pub use warmup::warmup_initial_guess;

use crate::consensus::{AugmentedLayout, AugmentedVar, Fabric, VehicleGraph};
use crate::decomposition::Decomposition;
use crate::error::{Error, Result};
use crate::mpc::QcqpProblem;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Dr,
    ThreeOp,
    ThreeOpAccel,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dr" => Ok(Self::Dr),
            "three-op" => Ok(Self::ThreeOp),
            "three-op-accel" => Ok(Self::ThreeOpAccel),
            _ => Err(Error::InvalidParams(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarmStart {
    /// Lift the previous step's solution into the consensus space.
    PrevSolution,
    /// Unconstrained distributed solve, then one local projection.
    WarmupProjection,
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopRule {
    /// Every agent has `|z_i^{k+1} - z_i^k| <= tol / n`, agreed by flag flooding.
    Local,
    /// `|z^{k+1} - z^k| <= tol`.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exec {
    #[default]
    Sequential,
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverParams {
    pub variant: Variant,
    /// DR relaxation, in `(0, 1)`.
    pub alpha: f64,
    /// DR prox scaling.
    pub rho: f64,
    /// Three-operator step size; `None` picks `1.9 / L` (or `1.9 / (0.8 L)`
    /// for the accelerated scheme).
    pub gamma: Option<f64>,
    /// Three-operator relaxation.
    pub lambda: f64,
    /// Acceleration fraction of the strong convexity modulus.
    pub eta: f64,
    pub tol: f64,
    pub stop: StopRule,
    pub max_iters: usize,
    pub warm_start: WarmStart,
    /// Stopping tolerance of the unconstrained warm-up run.
    pub warmup_tol: f64,
    pub exec: Exec,
    /// Record `|z^{k+1} - z^k|` per iteration.
    pub trace: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self::reference(1)
    }
}

impl SolverParams {
    /// DR settings used in the reference experiments for horizon `p`.
    pub fn reference(p: usize) -> Self {
        let (alpha, rho, tol) = match p {
            1 => (0.95, 0.3, 1e-3),
            2 => (0.95, 0.3, 2e-3),
            3 => (0.95, 0.3, 5e-3),
            4 => (0.8, 0.1, 7e-3),
            _ => (0.8, 0.1, 1.25e-2),
        };
        Self {
            variant: Variant::Dr,
            alpha,
            rho,
            gamma: None,
            lambda: 1.0,
            eta: 0.2,
            tol,
            stop: StopRule::Local,
            max_iters: 5000,
            warm_start: WarmStart::PrevSolution,
            warmup_tol: if p == 1 { 5e-4 } else { 1e-3 },
            exec: Exec::Sequential,
            trace: false,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    /// Checks that do not depend on the problem data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParams(m.into()));
        if !(self.tol > 0.0 && self.warmup_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        match self.variant {
            Variant::Dr => {
                if !(self.alpha > 0.0 && self.alpha < 1.0) {
                    return bad("alpha must lie in (0, 1)");
                }
                if !(self.rho > 0.0 && self.rho.is_finite()) {
                    return bad("rho must be positive");
                }
            }
            Variant::ThreeOp => {}
            Variant::ThreeOpAccel => {
                if !(self.eta > 0.0 && self.eta < 1.0) {
                    return bad("eta must lie in (0, 1)");
                }
            }
        }
        if self.warm_start == WarmStart::WarmupProjection
            && !(self.alpha > 0.0 && self.alpha < 1.0 && self.rho > 0.0)
        {
            return bad("warm-up uses alpha in (0, 1) and rho > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentStats {
    /// Local prox or projection solves.
    pub solves: usize,
    /// Solves that needed the interior point method.
    pub constrained: usize,
    pub ipm_iterations: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub variant: Variant,
    /// Stacked own blocks of the last iterate that lies in every `P_i`.
    pub u_star: Vec<f64>,
    pub iterations: usize,
    pub warmup_iterations: usize,
    pub converged: bool,
    /// Last `|z^{k+1} - z^k|`.
    pub residual: f64,
    pub comm_rounds: usize,
    pub agents: Vec<AgentStats>,
    pub rel_error: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub trace: Vec<f64>,
    /// Final consensus iterate `w`.
    #[serde(skip)]
    pub w: Option<AugmentedVar>,
}

impl SolveReport {
    pub fn write_trace_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "iter,residual")?;
        for (k, r) in self.trace.iter().enumerate() {
            writeln!(out, "{},{r:e}", k + 1)?;
        }
        Ok(())
    }

    pub fn with_oracle(mut self, oracle: &[f64]) -> Self {
        self.rel_error = Some(relative_error(&self.u_star, oracle));
        self
    }
}

/// `|a - b| / |b|`, or `|a|` when `b` is zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if nb > 0.0 {
        diff / nb
    } else {
        diff
    }
}

/// The per-step program split across agents over the chain graph.
#[derive(Debug, Clone)]
pub struct DistributedProblem {
    pub layout: AugmentedLayout,
    pub agents: Vec<LocalAgentProblem>,
    /// `max_i |W^i|_2`
    pub lipschitz: f64,
    /// `min_i lambda_min(W^i)`
    pub mu: f64,
}

impl DistributedProblem {
    pub fn new(prob: &QcqpProblem, dec: &Decomposition) -> Result<Self> {
        let layout = AugmentedLayout::new(VehicleGraph::chain(prob.n), prob.p);
        let agents = agent_problems(prob, dec)?;
        for (i, a) in agents.iter().enumerate() {
            if a.members != layout.members[i] {
                return Err(Error::LayoutMismatch(format!("agent {i} members differ from the graph")));
            }
        }
        Ok(Self { layout, agents, lipschitz: dec.lipschitz(), mu: dec.strong_convexity() })
    }

    pub fn n(&self) -> usize {
        self.agents.len()
    }

    /// Run `f` for every agent, sequentially or on the rayon pool; results
    /// come back in agent order either way.
    pub(crate) fn per_agent<T: Send>(&self, exec: Exec, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        match exec {
            Exec::Sequential => (0..self.n()).map(f).collect(),
            Exec::Parallel => (0..self.n()).into_par_iter().map(f).collect(),
        }
    }

    pub(crate) fn own_blocks(&self, x: &[nalgebra::DVector<f64>]) -> Vec<f64> {
        let p = self.layout.p;
        self.agents
            .iter()
            .zip(x)
            .flat_map(|(a, xi)| xi.rows(a.own_offset(), p).iter().copied().collect::<Vec<_>>())
            .collect()
    }
}

/// Shared stopping logic: per-agent step norms, combined through the fabric
/// for the local rule.
pub(crate) fn should_stop(
    fabric: &mut Fabric,
    params: &SolverParams,
    step_norms: &[f64],
) -> Result<(bool, f64)> {
    let global = step_norms.iter().map(|s| s * s).sum::<f64>().sqrt();
    let stop = match params.stop {
        StopRule::Global => global <= params.tol,
        StopRule::Local => {
            let eps = params.tol / step_norms.len() as f64;
            let flags: Vec<bool> = step_norms.iter().map(|&s| s <= eps).collect();
            fabric.all_reduce_and(&flags)?[0]
        }
    };
    Ok((stop, global))
}

/// Solve the distributed problem with the configured variant from `z0`.
pub fn solve(dp: &DistributedProblem, params: &SolverParams, z0: &AugmentedVar) -> Result<SolveReport> {
    match params.variant {
        Variant::Dr => solve_dr(dp, params, z0),
        Variant::ThreeOp => solve_three_op(dp, params, z0),
        Variant::ThreeOpAccel => solve_three_op_accel(dp, params, z0),
    }
}

/// Build the starting point from the warm-start policy and solve.
pub fn solve_with_warm_start(
    dp: &DistributedProblem,
    params: &SolverParams,
    prev: Option<&[f64]>,
) -> Result<SolveReport> {
    params.validate()?;
    let (z0, warm_iters) = match params.warm_start {
        WarmStart::Zero => (AugmentedVar::zeros(&dp.layout), 0),
        WarmStart::PrevSolution => match prev {
            Some(u) => (AugmentedVar::from_controls(&dp.layout, u), 0),
            None => (AugmentedVar::zeros(&dp.layout), 0),
        },
        WarmStart::WarmupProjection => warmup_initial_guess(dp, params)?,
    };
    let mut rep = solve(dp, params, &z0)?;
    rep.warmup_iterations = warm_iters;
    Ok(rep)
}

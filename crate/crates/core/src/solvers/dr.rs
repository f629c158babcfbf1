use nalgebra::DVector;

use super::{should_stop, AgentStats, DistributedProblem, SolveReport, SolverParams, Variant};
use crate::consensus::{AugmentedVar, Fabric};
use crate::error::{Error, Result};

/// Generalized Douglas-Rachford:
/// `w = P_A(z)`, `z <- z + 2 alpha (prox_{rho J_i}(2w - z) - w)`.
pub fn solve_dr(dp: &DistributedProblem, params: &SolverParams, z0: &AugmentedVar) -> Result<SolveReport> {
    params.validate()?;
    z0.check(&dp.layout)?;
    let mut fabric = Fabric::new(dp.layout.graph.clone());
    let mut z = z0.clone();
    let mut stats = vec![AgentStats::default(); dp.n()];
    let mut trace = Vec::new();
    let mut x_last: Vec<DVector<f64>> = Vec::new();
    let mut w = fabric.project(&z, &dp.layout)?;
    let mut residual = f64::INFINITY;

    for it in 1..=params.max_iters {
        let solves = dp.per_agent(params.exec, |i| {
            let point = &w.blocks[i] * 2.0 - &z.blocks[i];
            dp.agents[i].prox(&point, params.rho)
        });
        let mut x = Vec::with_capacity(dp.n());
        let mut steps = Vec::with_capacity(dp.n());
        for (i, s) in solves.into_iter().enumerate() {
            let s = s.map_err(|source| Error::Agent { agent: i + 1, source })?;
            stats[i].solves += 1;
            if s.iterations > 0 {
                stats[i].constrained += 1;
                stats[i].ipm_iterations += s.iterations;
            }
            let dz = (&s.x - &w.blocks[i]) * (2.0 * params.alpha);
            steps.push(dz.norm());
            z.blocks[i] += dz;
            x.push(s.x);
        }
        x_last = x;
        let (stop, global) = should_stop(&mut fabric, params, &steps)?;
        residual = global;
        if params.trace {
            trace.push(global);
        }
        w = fabric.project(&z, &dp.layout)?;
        if stop {
            return Ok(report(dp, x_last, it, true, residual, fabric.rounds(), stats, trace, w));
        }
    }
    Ok(report(dp, x_last, params.max_iters, false, residual, fabric.rounds(), stats, trace, w))
}

#[allow(clippy::too_many_arguments)]
pub(super) fn report(
    dp: &DistributedProblem,
    x: Vec<DVector<f64>>,
    iterations: usize,
    converged: bool,
    residual: f64,
    comm_rounds: usize,
    agents: Vec<AgentStats>,
    trace: Vec<f64>,
    w: AugmentedVar,
) -> SolveReport {
    SolveReport {
        variant: Variant::Dr,
        u_star: dp.own_blocks(&x),
        iterations,
        warmup_iterations: 0,
        converged,
        residual,
        comm_rounds,
        agents,
        rel_error: None,
        trace,
        w: Some(w),
    }
}

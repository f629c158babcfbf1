use nalgebra::DVector;

use super::dr::report;
use super::{should_stop, AgentStats, DistributedProblem, SolveReport, SolverParams, Variant};
use crate::consensus::{AugmentedVar, Fabric};
use crate::error::{Error, Result};
use crate::qcqp::QcqpError;

fn project_all(
    dp: &DistributedProblem,
    params: &SolverParams,
    stats: &mut [AgentStats],
    point: impl Fn(usize) -> DVector<f64> + Sync + Send,
) -> Result<Vec<DVector<f64>>> {
    let solves = dp.per_agent(params.exec, |i| dp.agents[i].project(&point(i)));
    solves
        .into_iter()
        .enumerate()
        .map(|(i, s): (usize, Result<_, QcqpError>)| {
            let s = s.map_err(|source| Error::Agent { agent: i + 1, source })?;
            stats[i].solves += 1;
            if s.iterations > 0 {
                stats[i].constrained += 1;
                stats[i].ipm_iterations += s.iterations;
            }
            Ok(s.x)
        })
        .collect()
}

/// Davis-Yin three-operator splitting:
/// `w = P_A(z)`, `z <- z + lambda (P_P(2w - z - gamma grad J(w)) - w)`.
pub fn solve_three_op(dp: &DistributedProblem, params: &SolverParams, z0: &AugmentedVar) -> Result<SolveReport> {
    params.validate()?;
    z0.check(&dp.layout)?;
    let l = dp.lipschitz;
    let gamma = params.gamma.unwrap_or(1.9 / l);
    if !(gamma > 0.0 && gamma < 2.0 / l) {
        return Err(Error::InvalidParams(format!("gamma = {gamma} outside (0, 2/L = {})", 2.0 / l)));
    }
    let lam = params.lambda;
    if !(lam > 0.0 && lam < 2.0 - gamma * l / 2.0) {
        return Err(Error::InvalidParams(format!(
            "lambda = {lam} outside (0, {})",
            2.0 - gamma * l / 2.0
        )));
    }

    let mut fabric = Fabric::new(dp.layout.graph.clone());
    let mut z = z0.clone();
    let mut stats = vec![AgentStats::default(); dp.n()];
    let mut trace = Vec::new();
    let mut x_last = Vec::new();
    let mut residual = f64::INFINITY;
    let mut w = fabric.project(&z, &dp.layout)?;

    for it in 1..=params.max_iters {
        let x = project_all(dp, params, &mut stats, |i| {
            let wi = &w.blocks[i];
            wi * 2.0 - &z.blocks[i] - dp.agents[i].grad(wi) * gamma
        })?;
        let mut steps = Vec::with_capacity(dp.n());
        for i in 0..dp.n() {
            let dz = (&x[i] - &w.blocks[i]) * lam;
            steps.push(dz.norm());
            z.blocks[i] += dz;
        }
        x_last = x;
        let (stop, global) = should_stop(&mut fabric, params, &steps)?;
        residual = global;
        if params.trace {
            trace.push(global);
        }
        w = fabric.project(&z, &dp.layout)?;
        if stop {
            return Ok(finish(report(dp, x_last, it, true, residual, fabric.rounds(), stats, trace, w), Variant::ThreeOp));
        }
    }
    Ok(finish(
        report(dp, x_last, params.max_iters, false, residual, fabric.rounds(), stats, trace, w),
        Variant::ThreeOp,
    ))
}

fn finish(mut r: SolveReport, v: Variant) -> SolveReport {
    r.variant = v;
    r
}

/// `gamma_{k+1} = -mu g^2 + sqrt((mu g^2)^2 + g^2)`.
pub fn accel_step_size(gamma: f64, mu_tilde: f64) -> f64 {
    let a = mu_tilde * gamma * gamma;
    -a + (a * a + gamma * gamma).sqrt()
}

/// Accelerated three-operator splitting for a strongly convex smooth term.
pub fn solve_three_op_accel(
    dp: &DistributedProblem,
    params: &SolverParams,
    z0: &AugmentedVar,
) -> Result<SolveReport> {
    params.validate()?;
    z0.check(&dp.layout)?;
    let l = dp.lipschitz;
    let bound = 2.0 / (l * (1.0 - params.eta));
    let mut gamma = params.gamma.unwrap_or(1.9 / (0.8 * l));
    if !(gamma > 0.0 && gamma < bound) {
        return Err(Error::InvalidParams(format!("gamma0 = {gamma} outside (0, {bound})")));
    }
    let mu_tilde = params.eta * dp.mu;

    let mut fabric = Fabric::new(dp.layout.graph.clone());
    let mut z = z0.clone();
    let w0 = fabric.project(&z, &dp.layout)?;
    let mut v = AugmentedVar {
        blocks: (0..dp.n()).map(|i| (&z.blocks[i] - &w0.blocks[i]) / gamma).collect(),
    };
    let mut stats = vec![AgentStats::default(); dp.n()];
    let mut trace = Vec::new();
    let mut residual = f64::INFINITY;
    let mut w = w0;

    for it in 1..=params.max_iters {
        // P_A is linear, so P_A(z) + gamma P_A(v) takes one projection.
        let shifted = AugmentedVar {
            blocks: (0..dp.n()).map(|i| &z.blocks[i] + &v.blocks[i] * gamma).collect(),
        };
        w = fabric.project(&shifted, &dp.layout)?;
        let v_next: Vec<DVector<f64>> = (0..dp.n()).map(|i| (&shifted.blocks[i] - &w.blocks[i]) / gamma).collect();
        let g_next = accel_step_size(gamma, mu_tilde);
        let z_next = project_all(dp, params, &mut stats, |i| {
            let wi = &w.blocks[i];
            wi - &v_next[i] * g_next - dp.agents[i].grad(wi) * g_next
        })?;
        let steps: Vec<f64> = (0..dp.n()).map(|i| (&z_next[i] - &z.blocks[i]).norm()).collect();
        z = AugmentedVar { blocks: z_next };
        v = AugmentedVar { blocks: v_next };
        gamma = g_next;
        let (stop, global) = should_stop(&mut fabric, params, &steps)?;
        residual = global;
        if params.trace {
            trace.push(global);
        }
        if stop {
            let x = z.blocks.clone();
            return Ok(finish(
                report(dp, x, it, true, residual, fabric.rounds(), stats, trace, w),
                Variant::ThreeOpAccel,
            ));
        }
    }
    let x = z.blocks.clone();
    Ok(finish(
        report(dp, x, params.max_iters, false, residual, fabric.rounds(), stats, trace, w),
        Variant::ThreeOpAccel,
    ))
}

use super::{should_stop, DistributedProblem, SolverParams};
use crate::consensus::{AugmentedVar, Fabric};
use crate::error::{Error, Result};

/// Unconstrained DR (closed-form prox) from zero, then one projection of each
/// agent's consensus block onto its `P_i`. Returns the start point and the
/// number of unconstrained iterations.
///
/// The start point is the unconstrained DR state shifted by the projection
/// step, `z + (P_i(w_i) - w_i)`. Its consensus part is the projected solution,
/// and when nothing binds it is already a fixed point of the constrained
/// scheme; restarting from the bare projected `w` would throw away the
/// off-consensus part of `z` that DR needs to rebuild.
pub fn warmup_initial_guess(dp: &DistributedProblem, params: &SolverParams) -> Result<(AugmentedVar, usize)> {
    let mut fabric = Fabric::new(dp.layout.graph.clone());
    let mut z = AugmentedVar::zeros(&dp.layout);
    let mut w = fabric.project(&z, &dp.layout)?;
    let warm = SolverParams { tol: params.warmup_tol, ..params.clone() };
    let mut iters = params.max_iters;
    for it in 1..=params.max_iters {
        let x = dp.per_agent(params.exec, |i| {
            let point = &w.blocks[i] * 2.0 - &z.blocks[i];
            dp.agents[i].prox_free(&point, params.rho)
        });
        let mut steps = Vec::with_capacity(dp.n());
        for (i, xi) in x.iter().enumerate() {
            let dz = (xi - &w.blocks[i]) * (2.0 * params.alpha);
            steps.push(dz.norm());
            z.blocks[i] += dz;
        }
        w = fabric.project(&z, &dp.layout)?;
        if should_stop(&mut fabric, &warm, &steps)?.0 {
            iters = it;
            break;
        }
    }
    let projected = dp.per_agent(params.exec, |i| dp.agents[i].project(&w.blocks[i]));
    let blocks = projected
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.map(|s| &z.blocks[i] + s.x - &w.blocks[i])
                .map_err(|source| Error::Agent { agent: i + 1, source })
        })
        .collect::<Result<_>>()?;
    Ok((AugmentedVar { blocks }, iters))
}

//! Splitting of the block-tridiagonal Hessian into locally coupled blocks.
//!
//! Agent `i` owns a dense block over the controls of `members(i)`, which is
//! `(i-1, i, i+1)` clipped to valid indices, always in ascending order.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpc::{QcqpProblem, WeightSchedule};
use crate::platoon::PlatoonConfig;

/// Per-vehicle stage blocks `U_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBlocks {
    pub u: Vec<DMatrix<f64>>,
}

impl StageBlocks {
    pub fn n(&self) -> usize {
        self.u.len()
    }

    pub fn p(&self) -> usize {
        self.u[0].nrows()
    }
}

/// `U_i(r, c) = sum_{s >= max(r,c)} (tau^4/4 (2(s-r)+1)(2(s-c)+1) alpha^s_i
/// + tau^2 beta^s_i) + [r == c] tau^2 zeta^r_i`.
pub fn stage_blocks(weights: &WeightSchedule, cfg: &PlatoonConfig) -> Result<StageBlocks> {
    weights.validate(cfg.n, cfg.p)?;
    let (p, tau) = (cfg.p, cfg.tau);
    let t2 = tau * tau;
    let mut u = Vec::with_capacity(cfg.n);
    for veh in 0..cfg.n {
        let m = DMatrix::from_fn(p, p, |r, c| {
            let mut acc = 0.0;
            for s in r.max(c)..p {
                let cr = (2 * (s - r) + 1) as f64;
                let cc = (2 * (s - c) + 1) as f64;
                acc += t2 * t2 / 4.0 * cr * cc * weights.alpha[s][veh] + t2 * weights.beta[s][veh];
            }
            if r == c {
                acc += t2 * weights.zeta[r][veh];
            }
            acc
        });
        if lambda_min(&m) <= 0.0 {
            return Err(Error::StageBlockNotPd { vehicle: veh + 1 });
        }
        u.push(m);
    }
    Ok(StageBlocks { u })
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn lambda_min(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.min()
}

pub fn lambda_max(m: &DMatrix<f64>) -> f64 {
    m.clone().symmetric_eigen().eigenvalues.max()
}

/// Vehicles whose controls agent `i` reads, ascending.
pub fn members(i: usize, n: usize) -> Vec<usize> {
    (i.saturating_sub(1)..=(i + 1).min(n - 1)).collect()
}

/// `delta_s = fraction * lambda_min` of the current positive definite block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaRule {
    pub fraction: f64,
}

impl Default for DeltaRule {
    fn default() -> Self {
        Self { fraction: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalHessian {
    pub agent: usize,
    pub members: Vec<usize>,
    pub block: DMatrix<f64>,
    pub lambda_min: f64,
}

impl LocalHessian {
    pub fn own_pos(&self) -> usize {
        self.members.iter().position(|&m| m == self.agent).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub locals: Vec<LocalHessian>,
    /// `delta_1 .. delta_{n-1}`; empty for the PSD-only split.
    pub deltas: Vec<f64>,
}

fn tridiag(blocks: &[(usize, usize, DMatrix<f64>)], nb: usize, p: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(nb * p, nb * p);
    for (r, c, b) in blocks {
        m.view_mut((r * p, c * p), (p, p)).copy_from(b);
    }
    m
}

fn pair(a: &DMatrix<f64>, b: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    // [[a + b, -b], [-b, b]]
    tridiag(&[(0, 0, a + b), (0, 1, -b), (1, 0, -b), (1, 1, b.clone())], 2, p)
}

fn triple(a: &DMatrix<f64>, b: &DMatrix<f64>, c: &DMatrix<f64>, p: usize) -> DMatrix<f64> {
    // [[a, -b, 0], [-b, b + c, -c], [0, -c, c]]
    tridiag(
        &[
            (0, 0, a.clone()),
            (0, 1, -b),
            (1, 0, -b),
            (1, 1, b + c),
            (1, 2, -c),
            (2, 1, -c),
            (2, 2, c.clone()),
        ],
        3,
        p,
    )
}

fn shift(m: &mut DMatrix<f64>, from_block: usize, to_block: usize, p: usize, delta: f64) {
    for k in from_block * p..to_block * p {
        m[(k, k)] += delta;
    }
}

/// Positive definite split with the halving construction and a δ-chain.
pub fn decompose_pd(blocks: &StageBlocks, rule: DeltaRule) -> Result<Decomposition> {
    let (n, p) = (blocks.n(), blocks.p());
    if !(rule.fraction > 0.0 && rule.fraction < 1.0) {
        return Err(Error::InvalidParams(format!(
            "delta fraction must lie in (0, 1), got {}",
            rule.fraction
        )));
    }
    let u = &blocks.u;
    let mut mats: Vec<DMatrix<f64>> = Vec::with_capacity(n);
    let mut deltas = Vec::with_capacity(n - 1);
    if n == 2 {
        let half = pair(&u[0], &u[1], p) * 0.5;
        let d = rule.fraction * checked_lambda_min(&half, 1)?;
        let mut a = half.clone();
        shift(&mut a, 0, 2, p, -d);
        let mut b = half;
        shift(&mut b, 0, 2, p, d);
        mats.push(a);
        mats.push(b);
        deltas.push(d);
    } else {
        let zero = DMatrix::zeros(p, p);
        for s in 0..n {
            let mut m = if s == 0 {
                pair(&u[0], &u[1], p) * 0.5
            } else if s == 1 {
                triple(&(&u[0] + &u[1]), &u[1], &u[2], p) * 0.5
            } else if s + 1 < n {
                triple(&u[s], &u[s], &u[s + 1], p) * 0.5
            } else {
                pair(&zero, &u[s], p) * 0.5
            };
            if s + 1 == n {
                shift(&mut m, 0, 2, p, deltas[s - 1]);
            } else {
                if s > 0 {
                    shift(&mut m, 0, 2, p, deltas[s - 1]);
                }
                let d = rule.fraction * checked_lambda_min(&m, s + 1)?;
                if s == 0 {
                    shift(&mut m, 0, 2, p, -d);
                } else {
                    shift(&mut m, 1, 3, p, -d);
                }
                deltas.push(d);
            }
            mats.push(m);
        }
    }
    let locals = mats
        .into_iter()
        .enumerate()
        .map(|(i, block)| {
            let lm = lambda_min(&block);
            if lm > 0.0 {
                Ok(LocalHessian { agent: i, members: members(i, n), block, lambda_min: lm })
            } else {
                Err(Error::DecompositionNotPd { index: i + 1, lambda_min: lm })
            }
        })
        .collect::<Result<_>>()?;
    Ok(Decomposition { locals, deltas })
}

fn checked_lambda_min(m: &DMatrix<f64>, index: usize) -> Result<f64> {
    let lm = lambda_min(m);
    if lm > 0.0 {
        Ok(lm)
    } else {
        Err(Error::DecompositionNotPd { index, lambda_min: lm })
    }
}

/// PSD-only split: agent 1 holds `U_1` on its own block and agent `s >= 2`
/// holds `[[U_s, -U_s], [-U_s, U_s]]` on `(s-1, s)`.
pub fn decompose_psd(blocks: &StageBlocks) -> Decomposition {
    let (n, p) = (blocks.n(), blocks.p());
    let zero = DMatrix::zeros(p, p);
    let locals = (0..n)
        .map(|s| {
            let mem = members(s, n);
            let mut block = DMatrix::zeros(mem.len() * p, mem.len() * p);
            if s == 0 {
                block.view_mut((0, 0), (p, p)).copy_from(&blocks.u[0]);
            } else {
                block
                    .view_mut((0, 0), (2 * p, 2 * p))
                    .copy_from(&pair(&zero, &blocks.u[s], p));
            }
            let lambda_min = lambda_min(&block);
            LocalHessian { agent: s, members: mem, block, lambda_min }
        })
        .collect();
    Decomposition { locals, deltas: Vec::new() }
}

impl Decomposition {
    pub fn n(&self) -> usize {
        self.locals.len()
    }

    pub fn p(&self) -> usize {
        self.locals[0].block.nrows() / self.locals[0].members.len()
    }

    /// `sum_i W~^i`, each local block embedded at its members' positions.
    pub fn dense_sum(&self) -> DMatrix<f64> {
        let (n, p) = (self.n(), self.p());
        let mut w = DMatrix::zeros(n * p, n * p);
        for l in &self.locals {
            for (a, &ma) in l.members.iter().enumerate() {
                for (b, &mb) in l.members.iter().enumerate() {
                    let mut v = w.view_mut((ma * p, mb * p), (p, p));
                    v += l.block.view((a * p, b * p), (p, p));
                }
            }
        }
        w
    }

    /// `max_i ||W^i||_2`, the gradient Lipschitz constant of the split objective.
    pub fn lipschitz(&self) -> f64 {
        self.locals.iter().map(|l| lambda_max(&l.block)).fold(0.0, f64::max)
    }

    /// `min_i lambda_min(W^i)`, the strong convexity modulus.
    pub fn strong_convexity(&self) -> f64 {
        self.locals.iter().map(|l| l.lambda_min).fold(f64::INFINITY, f64::min)
    }
}

/// `J_i(x) = 1/2 x' W^i x + c_{I_i}' x_own` over the agent's member blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalObjective {
    pub agent: usize,
    pub members: Vec<usize>,
    pub hess: DMatrix<f64>,
    /// Linear term over the member blocks (zero outside the own block).
    pub lin: DVector<f64>,
}

impl LocalObjective {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hess * x)) + self.lin.dot(x)
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.hess * x + &self.lin
    }

    /// Gather this agent's member blocks out of a stacked control vector.
    pub fn gather(&self, u: &[f64]) -> DVector<f64> {
        let p = self.hess.nrows() / self.members.len();
        DVector::from_iterator(
            self.members.len() * p,
            self.members.iter().flat_map(|&m| u[m * p..(m + 1) * p].iter().copied()),
        )
    }
}

pub fn local_objectives(dec: &Decomposition, prob: &QcqpProblem) -> Vec<LocalObjective> {
    let p = prob.p;
    dec.locals
        .iter()
        .map(|l| {
            let mut lin = DVector::zeros(l.members.len() * p);
            lin.rows_mut(l.own_pos() * p, p).copy_from(&prob.c[l.agent]);
            LocalObjective {
                agent: l.agent,
                members: l.members.clone(),
                hess: l.block.clone(),
                lin,
            }
        })
        .collect()
}

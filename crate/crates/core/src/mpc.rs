//! Per-step MPC program: a convex QCQP in the stacked controls
//! `u = (u_1, .., u_n)`, `u_i = (u_i(k), .., u_i(k+p-1))`.
//!
//! The Hessian is block tridiagonal and is kept in that form: `W_ii = U_i +
//! U_{i+1}`, `W_{i,i+1} = -U_{i+1}`, `W_nn = U_n`, with the per-vehicle stage
//! blocks `U_i` from [`crate::decomposition::stage_blocks`]. The constant term
//! of the objective is dropped.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::decomposition::{stage_blocks, StageBlocks};
use crate::error::{Error, Result};
use crate::platoon::{error_coords, s_inv_t_apply, PlatoonConfig, PlatoonState};

/// Default absolute tolerance for feasibility reporting.
pub const DEFAULT_FEAS_TOL: f64 = 1e-8;

/// Diagonal weights per stage and vehicle: `alpha[s][i]` weighs the spacing
/// error, `beta[s][i]` the relative speed and `zeta[s][i]` the control
/// difference of vehicle `i` at stage `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub alpha: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub zeta: Vec<Vec<f64>>,
}

impl WeightSchedule {
    /// The same stage weights for every vehicle and stage.
    pub fn uniform(n: usize, p: usize, alpha: f64, beta: f64, zeta: f64) -> Self {
        Self {
            alpha: vec![vec![alpha; n]; p],
            beta: vec![vec![beta; n]; p],
            zeta: vec![vec![zeta; n]; p],
        }
    }

    /// Weights of the reference experiments for ten vehicles and horizon `p`.
    pub fn reference(p: usize) -> Self {
        crate::stability::reference_schedule(p)
    }

    pub fn horizon(&self) -> usize {
        self.alpha.len()
    }

    pub fn scaled(&self, k: f64) -> Self {
        let sc = |m: &Vec<Vec<f64>>| m.iter().map(|r| r.iter().map(|x| x * k).collect()).collect();
        Self {
            alpha: sc(&self.alpha),
            beta: sc(&self.beta),
            zeta: sc(&self.zeta),
        }
    }

    pub fn validate(&self, n: usize, p: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidWeights(m));
        for (name, m) in [("alpha", &self.alpha), ("beta", &self.beta), ("zeta", &self.zeta)] {
            if m.len() != p {
                return bad(format!("{name} has {} stages, expected {p}", m.len()));
            }
            if m.iter().any(|r| r.len() != n) {
                return bad(format!("{name} rows must have {n} entries"));
            }
            if m.iter().flatten().any(|x| !x.is_finite()) {
                return bad(format!("{name} has non-finite entries"));
            }
        }
        if self.alpha.iter().chain(&self.beta).flatten().any(|&x| x < 0.0) {
            return bad("spacing and speed weights must be nonnegative".into());
        }
        if self.zeta.iter().flatten().any(|&x| x <= 0.0) {
            return bad("control weights must be positive".into());
        }
        Ok(())
    }
}

/// Speed band and acceleration bounds of one vehicle over the horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalBox {
    pub a_min: f64,
    pub a_max: f64,
    pub tau: f64,
    /// `v_min - v_i(k)`
    pub dv_low: f64,
    /// `v_max - v_i(k)`
    pub dv_high: f64,
}

impl LocalBox {
    /// Rows `A u <= b` over the vehicle's own `p` controls: upper accel,
    /// lower accel, upper speed, lower speed, each stage in turn.
    pub fn rows(&self, p: usize) -> (DMatrix<f64>, DVector<f64>) {
        let mut a = DMatrix::zeros(4 * p, p);
        let mut b = DVector::zeros(4 * p);
        for r in 0..p {
            a[(4 * r, r)] = 1.0;
            b[4 * r] = self.a_max;
            a[(4 * r + 1, r)] = -1.0;
            b[4 * r + 1] = -self.a_min;
            for j in 0..=r {
                a[(4 * r + 2, j)] = self.tau;
                a[(4 * r + 3, j)] = -self.tau;
            }
            b[4 * r + 2] = self.dv_high;
            b[4 * r + 3] = -self.dv_low;
        }
        (a, b)
    }

    /// Slacks of the accel and speed rows (positive means satisfied).
    pub fn slacks(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut accel = Vec::with_capacity(u.len());
        let mut speed = Vec::with_capacity(u.len());
        let mut dv = 0.0;
        for &ur in u {
            accel.push((ur - self.a_min).min(self.a_max - ur));
            dv += self.tau * ur;
            speed.push((dv - self.dv_low).min(self.dv_high - dv));
        }
        (accel, speed)
    }
}

/// Safety-distance constraint of one vehicle at one stage, written as
/// `quad * (sum_{j<s} u_i(k+j))^2 + lin_own . u_i + lin_pred . u_{i-1} + constant <= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyQuadratic {
    /// Stage `s` (1-based); the first `s` own controls enter the square.
    pub stage: usize,
    pub quad: f64,
    pub lin_own: Vec<f64>,
    /// Empty for the first CAV, whose predecessor is the leader.
    pub lin_pred: Vec<f64>,
    pub constant: f64,
}

impl SafetyQuadratic {
    pub fn eval(&self, u_pred: Option<&[f64]>, u_own: &[f64]) -> f64 {
        let sigma: f64 = u_own[..self.stage].iter().sum();
        let mut g = self.quad * sigma * sigma + self.constant;
        g += self.lin_own.iter().zip(u_own).map(|(a, b)| a * b).sum::<f64>();
        if let Some(up) = u_pred {
            g += self.lin_pred.iter().zip(up).map(|(a, b)| a * b).sum::<f64>();
        }
        g
    }

    /// Indicator of the controls inside the square.
    pub fn direction(&self, p: usize) -> Vec<f64> {
        (0..p).map(|j| if j < self.stage { 1.0 } else { 0.0 }).collect()
    }
}

/// The assembled per-step program.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QcqpProblem {
    pub n: usize,
    pub p: usize,
    /// `W_ii`, one per vehicle.
    pub w_diag: Vec<DMatrix<f64>>,
    /// `W_{i,i+1}`, one per adjacent pair.
    pub w_off: Vec<DMatrix<f64>>,
    /// `c_{I_i}`, one per vehicle.
    pub c: Vec<DVector<f64>>,
    pub boxes: Vec<LocalBox>,
    /// `safety[i][s]`
    pub safety: Vec<Vec<SafetyQuadratic>>,
    pub u0: f64,
}

/// Assemble the program at the current state.
pub fn build_qcqp(
    state: &PlatoonState,
    cfg: &PlatoonConfig,
    weights: &WeightSchedule,
) -> Result<QcqpProblem> {
    cfg.validate()?;
    weights.validate(cfg.n, cfg.p)?;
    state.validate(cfg)?;
    let blocks = stage_blocks(weights, cfg)?;
    Ok(build_with_blocks(state, cfg, weights, &blocks))
}

/// Assembly with precomputed stage blocks (they depend only on the weights).
pub fn build_with_blocks(
    state: &PlatoonState,
    cfg: &PlatoonConfig,
    weights: &WeightSchedule,
    blocks: &StageBlocks,
) -> QcqpProblem {
    let (n, p) = (cfg.n, cfg.p);
    let (w_diag, w_off) = hessian_blocks(blocks);
    QcqpProblem {
        n,
        p,
        w_diag,
        w_off,
        c: linear_term(state, cfg, weights),
        boxes: (1..=n)
            .map(|i| LocalBox {
                a_min: cfg.a_min,
                a_max: cfg.a_max,
                tau: cfg.tau,
                dv_low: cfg.v_min - state.v[i],
                dv_high: cfg.v_max - state.v[i],
            })
            .collect(),
        safety: (1..=n)
            .map(|i| (1..=p).map(|s| safety_quadratic(state, cfg, i, s)).collect())
            .collect(),
        u0: state.u0,
    }
}

pub fn hessian_blocks(blocks: &StageBlocks) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
    let u = &blocks.u;
    let n = u.len();
    let diag = (0..n)
        .map(|i| if i + 1 < n { &u[i] + &u[i + 1] } else { u[i].clone() })
        .collect();
    let off = (0..n.saturating_sub(1)).map(|i| -&u[i + 1]).collect();
    (diag, off)
}

fn linear_term(state: &PlatoonState, cfg: &PlatoonConfig, weights: &WeightSchedule) -> Vec<DVector<f64>> {
    let (n, p, tau) = (cfg.n, cfg.p, cfg.tau);
    let e = error_coords(state, cfg);
    let u0 = state.u0;
    // d_s and f_s for s = 1..=p: predicted errors under zero CAV control.
    let d: Vec<Vec<f64>> = (1..=p)
        .map(|s| {
            let sf = s as f64;
            (0..n)
                .map(|i| {
                    let lead = if i == 0 { 0.5 * tau * tau * sf * sf * u0 } else { 0.0 };
                    e.z[i] + sf * tau * e.zp[i] + lead
                })
                .collect()
        })
        .collect();
    let f: Vec<Vec<f64>> = (1..=p)
        .map(|s| {
            (0..n)
                .map(|i| e.zp[i] + if i == 0 { tau * s as f64 * u0 } else { 0.0 })
                .collect()
        })
        .collect();
    let mut c = vec![DVector::zeros(p); n];
    for r in 0..p {
        let g: Vec<f64> = (0..n)
            .map(|i| {
                (r..p)
                    .map(|s| {
                        let coef = 0.5 * tau * tau * (2 * (s - r) + 1) as f64;
                        coef * weights.alpha[s][i] * d[s][i] + tau * weights.beta[s][i] * f[s][i]
                    })
                    .sum()
            })
            .collect();
        for (i, ci) in s_inv_t_apply(&g).into_iter().enumerate() {
            c[i][r] = -ci;
        }
    }
    c
}

/// Safety quadratic of CAV `veh` (1-based) at stage `s` (1-based).
fn safety_quadratic(state: &PlatoonState, cfg: &PlatoonConfig, veh: usize, s: usize) -> SafetyQuadratic {
    let (p, tau) = (cfg.p, cfg.tau);
    let sf = s as f64;
    let (x_pred, v_pred) = (state.x[veh - 1], state.v[veh - 1]);
    let (x, v) = (state.x[veh], state.v[veh]);
    let dv = v - cfg.v_min;
    let mut constant = -(x_pred - x) - sf * tau * (v_pred - v) + cfg.veh_len + cfg.reaction * v
        - dv * dv / (2.0 * cfg.a_min);
    if veh == 1 {
        // Leader assumed to hold u0 over the horizon.
        constant -= 0.5 * tau * tau * sf * sf * state.u0;
    }
    let pos = |j: usize| if j < s { 0.5 * tau * tau * (2 * (s - j) - 1) as f64 } else { 0.0 };
    let lin_own = (0..p)
        .map(|j| {
            if j < s {
                pos(j) + cfg.reaction * tau - tau * dv / cfg.a_min
            } else {
                0.0
            }
        })
        .collect();
    let lin_pred = if veh == 1 { Vec::new() } else { (0..p).map(|j| -pos(j)).collect() };
    SafetyQuadratic {
        stage: s,
        quad: -tau * tau / (2.0 * cfg.a_min),
        lin_own,
        lin_pred,
        constant,
    }
}

impl QcqpProblem {
    pub fn dim(&self) -> usize {
        self.n * self.p
    }

    pub fn block<'a>(&self, u: &'a [f64], i: usize) -> &'a [f64] {
        &u[i * self.p..(i + 1) * self.p]
    }

    /// `W u` using the tridiagonal block structure.
    pub fn hess_mul(&self, u: &[f64]) -> Vec<f64> {
        let (n, p) = (self.n, self.p);
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let mut acc = &self.w_diag[i] * DVector::from_column_slice(self.block(u, i));
            if i + 1 < n {
                acc += &self.w_off[i] * DVector::from_column_slice(self.block(u, i + 1));
            }
            if i > 0 {
                acc += self.w_off[i - 1].transpose() * DVector::from_column_slice(self.block(u, i - 1));
            }
            out[i * p..(i + 1) * p].copy_from_slice(acc.as_slice());
        }
        out
    }

    pub fn gradient(&self, u: &[f64]) -> Vec<f64> {
        let mut g = self.hess_mul(u);
        for (i, ci) in self.c.iter().enumerate() {
            for r in 0..self.p {
                g[i * self.p + r] += ci[r];
            }
        }
        g
    }

    /// Dense `W`, for the centralized solver and for tests.
    pub fn dense_hessian(&self) -> DMatrix<f64> {
        let (n, p) = (self.n, self.p);
        let mut w = DMatrix::zeros(n * p, n * p);
        for i in 0..n {
            w.view_mut((i * p, i * p), (p, p)).copy_from(&self.w_diag[i]);
            if i + 1 < n {
                w.view_mut((i * p, (i + 1) * p), (p, p)).copy_from(&self.w_off[i]);
                w.view_mut(((i + 1) * p, i * p), (p, p))
                    .copy_from(&self.w_off[i].transpose());
            }
        }
        w
    }

    pub fn dense_c(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.c.iter().flat_map(|c| c.iter().copied()))
    }

    /// Objective `1/2 u'Wu + c'u` (constant term dropped).
    pub fn eval_objective(&self, u: &[f64]) -> f64 {
        let wu = self.hess_mul(u);
        let quad: f64 = wu.iter().zip(u).map(|(a, b)| a * b).sum();
        let lin: f64 = self
            .c
            .iter()
            .enumerate()
            .map(|(i, ci)| ci.iter().zip(self.block(u, i)).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        0.5 * quad + lin
    }

    /// Evaluate every constraint at `u`.
    pub fn check_membership(&self, u: &[f64], tol: f64) -> MembershipReport {
        let mut vehicles = Vec::with_capacity(self.n);
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.n {
            let own = self.block(u, i);
            let pred = (i > 0).then(|| self.block(u, i - 1));
            let (accel, speed) = self.boxes[i].slacks(own);
            let safety: Vec<f64> = self.safety[i].iter().map(|q| -q.eval(pred, own)).collect();
            for &s in accel.iter().chain(&speed).chain(&safety) {
                worst = worst.max(-s);
            }
            vehicles.push(VehicleResiduals { accel, speed, safety });
        }
        let worst_violation = worst.max(0.0);
        MembershipReport {
            vehicles,
            worst_violation,
            feasible: worst_violation <= tol,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Constraint slacks per vehicle and stage; negative entries are violations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VehicleResiduals {
    pub accel: Vec<f64>,
    pub speed: Vec<f64>,
    pub safety: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MembershipReport {
    pub vehicles: Vec<VehicleResiduals>,
    pub worst_violation: f64,
    pub feasible: bool,
}

/// Realized safety margin per CAV:
/// `x_{i-1} - x_i - L - r v_i + (v_i - v_min)^2 / (2 a_min)`.
pub fn safety_margins(state: &PlatoonState, cfg: &PlatoonConfig) -> Vec<f64> {
    (1..state.x.len())
        .map(|i| {
            let dv = state.v[i] - cfg.v_min;
            state.x[i - 1] - state.x[i] - cfg.veh_len - cfg.reaction * state.v[i]
                + dv * dv / (2.0 * cfg.a_min)
        })
        .collect()
}

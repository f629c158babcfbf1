//! Closed-loop analysis of the unconstrained MPC law.
//!
//! Without constraints the first-stage control difference is linear in the
//! error state, `w(k) = K (z; z') + u_0 d`, and the loop
//! `(z; z')^+ = A_c (z; z') + B d u_0` decouples into one 2x2 block per vehicle.

use nalgebra::{DMatrix, DVector, Matrix2};
use serde::{Deserialize, Serialize};

use crate::decomposition::stage_blocks;
use crate::error::{Error, Result};
use crate::mpc::WeightSchedule;
use crate::platoon::PlatoonConfig;

/// Stage-1 spacing weights of the reference ten-vehicle platoon.
pub const REF_ALPHA: [f64; 10] = [38.85, 40.2, 41.55, 42.90, 44.25, 45.60, 46.95, 48.30, 49.65, 51.00];
pub const REF_BETA: [f64; 10] =
    [130.61, 136.21, 141.82, 147.42, 153.03, 158.64, 164.24, 169.85, 175.46, 181.06];
pub const REF_ZETA: [f64; 10] = [62.0, 74.0, 90.0, 92.0, 106.0, 194.0, 298.0, 402.0, 454.0, 480.0];

/// Decay factors `(kappa_z, kappa_z', kappa_w)` for stages `s >= 2`.
///
/// With these the ten-vehicle loop has spectral radius 0.8376 for every
/// `p` in `2..=5` (0.8375 to 0.8376). A spacing factor of 0.0228 ([`ALT_KAPPA`]) gives
/// 0.8463 to 0.8467 instead.
pub const REF_KAPPA: [f64; 3] = [0.228, 0.044, 0.0026];
pub const ALT_KAPPA: [f64; 3] = [0.0228, 0.044, 0.0026];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub base_alpha: Vec<f64>,
    pub base_beta: Vec<f64>,
    pub base_zeta: Vec<f64>,
    pub eta: f64,
    pub kappa: [f64; 3],
    /// Subtracted from the stage-1 vectors when `p >= 2`.
    pub stage1_offset: f64,
}

impl ScheduleSpec {
    pub fn reference() -> Self {
        Self {
            base_alpha: REF_ALPHA.to_vec(),
            base_beta: REF_BETA.to_vec(),
            base_zeta: REF_ZETA.to_vec(),
            eta: 4.0,
            kappa: REF_KAPPA,
            stage1_offset: 1.0,
        }
    }

    pub fn alt() -> Self {
        Self { kappa: ALT_KAPPA, ..Self::reference() }
    }
}

/// `kappa / (s - 1)^eta` for stage `s >= 2`.
pub fn decay_factor(kappa: f64, s: usize, eta: f64) -> f64 {
    kappa / ((s - 1) as f64).powf(eta)
}

pub fn gen_weight_schedule(spec: &ScheduleSpec, p: usize) -> Result<WeightSchedule> {
    if spec.eta <= 1.0 {
        return Err(Error::InvalidWeights(format!("decay exponent must exceed 1, got {}", spec.eta)));
    }
    let n = spec.base_alpha.len();
    if spec.base_beta.len() != n || spec.base_zeta.len() != n {
        return Err(Error::InvalidWeights("base vectors differ in length".into()));
    }
    let off = if p >= 2 { spec.stage1_offset } else { 0.0 };
    let stage = |base: &[f64], kappa: f64, s: usize| -> Vec<f64> {
        if s == 1 {
            base.iter().map(|b| b - off).collect()
        } else {
            let f = decay_factor(kappa, s, spec.eta);
            base.iter().map(|b| b * f).collect()
        }
    };
    let w = WeightSchedule {
        alpha: (1..=p).map(|s| stage(&spec.base_alpha, spec.kappa[0], s)).collect(),
        beta: (1..=p).map(|s| stage(&spec.base_beta, spec.kappa[1], s)).collect(),
        zeta: (1..=p).map(|s| stage(&spec.base_zeta, spec.kappa[2], s)).collect(),
    };
    w.validate(n, p)?;
    Ok(w)
}

/// The reference ten-vehicle schedule for horizon `p`.
pub fn reference_schedule(p: usize) -> WeightSchedule {
    gen_weight_schedule(&ScheduleSpec::reference(), p).expect("reference schedule is valid")
}

/// Per-vehicle `G~_i` (`p x 2`).
pub fn stage_gradient(weights: &WeightSchedule, tau: f64, veh: usize) -> DMatrix<f64> {
    let p = weights.horizon();
    DMatrix::from_fn(p, 2, |r, col| {
        (r..p)
            .map(|s| {
                let c = (2 * (s - r) + 1) as f64 / 2.0;
                let a = weights.alpha[s][veh];
                if col == 0 {
                    tau * tau * c * a
                } else {
                    tau.powi(3) * (s + 1) as f64 * c * a + tau * weights.beta[s][veh]
                }
            })
            .sum()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleLoop {
    /// `H~_i`
    pub hess: DMatrix<f64>,
    /// `G~_i`
    pub grad: DMatrix<f64>,
    /// `K~_i = -e_1' H~_i^{-1} G~_i`
    pub gain: [f64; 2],
    /// `A~_i`
    pub block: Matrix2<f64>,
    pub eigenvalues: [(f64, f64); 2],
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopModel {
    pub n: usize,
    pub p: usize,
    pub tau: f64,
    /// `(z; z')` ordering, `2n x 2n`.
    pub a_c: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// Leader feed-through; only the first entry is nonzero.
    pub d: DVector<f64>,
    pub vehicles: Vec<VehicleLoop>,
    pub rho: f64,
}

/// Eigenvalues `(re, im)` of a real 2x2 matrix from trace and determinant.
pub fn eig2(m: &Matrix2<f64>) -> [(f64, f64); 2] {
    let half_tr = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let det = m.determinant();
    let disc = half_tr * half_tr - det;
    if disc < 0.0 {
        let im = (-disc).sqrt();
        [(half_tr, im), (half_tr, -im)]
    } else {
        let r = disc.sqrt();
        [(half_tr + r, 0.0), (half_tr - r, 0.0)]
    }
}

fn modulus((re, im): (f64, f64)) -> f64 {
    re.hypot(im)
}

pub fn build_closed_loop(cfg: &PlatoonConfig, weights: &WeightSchedule) -> Result<ClosedLoopModel> {
    cfg.validate()?;
    let (n, p, tau) = (cfg.n, cfg.p, cfg.tau);
    let blocks = stage_blocks(weights, cfg)?;
    let mut vehicles = Vec::with_capacity(n);
    let mut k = DMatrix::zeros(n, 2 * n);
    let mut d = DVector::zeros(n);
    for (i, h) in blocks.u.into_iter().enumerate() {
        let chol = h.clone().cholesky().ok_or(Error::StageBlockNotPd { vehicle: i + 1 })?;
        let g = stage_gradient(weights, tau, i);
        let hg = chol.solve(&g);
        let gain = [-hg[(0, 0)], -hg[(0, 1)]];
        if i == 0 {
            let forcing = DVector::from_fn(p, |s, _| tau * tau * weights.zeta[s][0]);
            d[0] = chol.solve(&forcing)[0];
        }
        let block = Matrix2::new(
            1.0 + tau * tau / 2.0 * gain[0],
            tau + tau * tau / 2.0 * gain[1],
            tau * gain[0],
            1.0 + tau * gain[1],
        );
        let eigenvalues = eig2(&block);
        let rho = modulus(eigenvalues[0]).max(modulus(eigenvalues[1]));
        k[(i, i)] = gain[0];
        k[(i, n + i)] = gain[1];
        vehicles.push(VehicleLoop { hess: h, grad: g, gain, block, eigenvalues, rho });
    }
    let mut a_c = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        a_c[(i, i)] = 1.0;
        a_c[(i, n + i)] = tau;
        a_c[(n + i, n + i)] = 1.0;
    }
    let mut b = DMatrix::zeros(2 * n, n);
    for i in 0..n {
        b[(i, i)] = tau * tau / 2.0;
        b[(n + i, i)] = tau;
    }
    a_c += b * &k;
    let rho = vehicles.iter().map(|v| v.rho).fold(0.0, f64::max);
    Ok(ClosedLoopModel { n, p, tau, a_c, k, d, vehicles, rho })
}

/// Permutation taking `(z_1, z'_1, .., z_n, z'_n)` to `(z; z')`.
pub fn e_tilde(n: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        e[(i, 2 * i)] = 1.0;
        e[(n + i, 2 * i + 1)] = 1.0;
    }
    e
}

impl ClosedLoopModel {
    /// One step of the error dynamics.
    pub fn step(&self, z: &[f64], zp: &[f64], u0: f64) -> (Vec<f64>, Vec<f64>) {
        let n = self.n;
        let x = DVector::from_iterator(2 * n, z.iter().chain(zp).copied());
        let mut next = &self.a_c * x;
        next[0] += self.tau * self.tau / 2.0 * self.d[0] * u0;
        next[n] += self.tau * self.d[0] * u0;
        (next.rows(0, n).iter().copied().collect(), next.rows(n, n).iter().copied().collect())
    }

    /// Spectral radius from a dense eigensolve of `A_c`.
    pub fn rho_dense(&self) -> f64 {
        self.a_c
            .complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(0.0, f64::max)
    }

    pub fn is_schur_stable(&self) -> bool {
        self.rho < 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenBound {
    pub vehicle: usize,
    pub complex: bool,
    pub eigenvalues: [(f64, f64); 2],
    /// `zeta / d` for a complex pair.
    pub modulus_sq: Option<f64>,
    /// Open interval holding real eigenvalues.
    pub interval: Option<(f64, f64)>,
    /// Largest deviation from the prediction (modulus error, or distance
    /// outside the interval; zero when inside).
    pub error: f64,
    pub holds: bool,
}

/// Check the single-stage eigenvalue predictions per vehicle.
pub fn eigen_bounds_check(model: &ClosedLoopModel, weights: &WeightSchedule, tol: f64) -> Result<Vec<EigenBound>> {
    if model.p != 1 {
        return Err(Error::InvalidParams("eigenvalue bounds apply to p = 1".into()));
    }
    let t2 = model.tau * model.tau;
    Ok(model
        .vehicles
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let (a, b, z) = (weights.alpha[0][i], weights.beta[0][i], weights.zeta[0][i]);
            let d = a * t2 / 4.0 + b + z;
            let complex = v.eigenvalues[0].1 != 0.0;
            if complex {
                let pred = z / d;
                let got = v.eigenvalues[0].0.powi(2) + v.eigenvalues[0].1.powi(2);
                let error = (got - pred).abs();
                EigenBound {
                    vehicle: i + 1,
                    complex,
                    eigenvalues: v.eigenvalues,
                    modulus_sq: Some(pred),
                    interval: None,
                    error,
                    holds: error <= tol,
                }
            } else {
                let lo = 1.0 - (a * t2 / 2.0 + b) / d;
                let hi = 1.0 - a * t2 / (4.0 * d);
                let error = v
                    .eigenvalues
                    .iter()
                    .map(|&(re, _)| (lo - re).max(re - hi).max(0.0))
                    .fold(0.0, f64::max);
                let inside = v.eigenvalues.iter().all(|&(re, _)| re > lo - tol && re < hi + tol);
                EigenBound {
                    vehicle: i + 1,
                    complex,
                    eigenvalues: v.eigenvalues,
                    modulus_sq: None,
                    interval: Some((lo, hi)),
                    error,
                    holds: inside,
                }
            }
        })
        .collect())
}

/// `(alpha^s, beta^s)` for `s >= 3` multiplied by `scale`.
pub fn scale_tail(weights: &WeightSchedule, scale: f64) -> WeightSchedule {
    let mut w = weights.clone();
    for s in 2..w.horizon() {
        for x in w.alpha[s].iter_mut().chain(w.beta[s].iter_mut()) {
            *x *= scale;
        }
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchurMargin {
    /// Largest tested tail scale with `rho < 1`.
    pub scale: f64,
    pub rho_at_scale: f64,
    /// `rho` with the tail weights removed.
    pub rho_at_zero: f64,
    /// No instability found up to `max_scale`.
    pub unbounded: bool,
}

pub const MARGIN_TOL: f64 = 1e-4;

/// Bisect the tail scale on `[0, max_scale]` for the stability boundary.
pub fn schur_margin(cfg: &PlatoonConfig, weights: &WeightSchedule, max_scale: f64) -> Result<SchurMargin> {
    if cfg.p < 3 {
        return Err(Error::InvalidParams("the tail margin needs p >= 3".into()));
    }
    let rho_at = |t: f64| build_closed_loop(cfg, &scale_tail(weights, t)).map(|m| m.rho);
    let rho_at_zero = rho_at(0.0)?;
    let top = rho_at(max_scale)?;
    if top < 1.0 {
        return Ok(SchurMargin { scale: max_scale, rho_at_scale: top, rho_at_zero, unbounded: true });
    }
    let (mut lo, mut hi) = (0.0, max_scale);
    let mut rho_lo = rho_at_zero;
    while hi - lo > MARGIN_TOL {
        let mid = 0.5 * (lo + hi);
        let r = rho_at(mid)?;
        if r < 1.0 {
            lo = mid;
            rho_lo = r;
        } else {
            hi = mid;
        }
    }
    Ok(SchurMargin { scale: lo, rho_at_scale: rho_lo, rho_at_zero, unbounded: false })
}

/// Two-stage reduction `(alpha', beta', gamma', d')` of one vehicle, where
/// `d' = det(H~) / tau^4`.
pub fn two_stage_reduction(tau: f64, s1: [f64; 3], s2: [f64; 3]) -> [f64; 4] {
    let [a1, b1, z1] = s1;
    let [a2, b2, z2] = s2;
    let t2 = tau * tau;
    let d1 = t2 / 4.0 * a1 + b1 + z1;
    let d2 = t2 / 4.0 * a2 + b2 + z2;
    let alpha = d2 * a1 + a2 * (2.0 * b2 + 3.0 * z2);
    let beta = d2 * b1 + t2 / 2.0 * a2 * b2 + z2 * (1.5 * t2 * a2 + b2);
    let gamma = d2 * z1;
    let dp = d1 * d2 + t2 * a2 * (b2 + 2.25 * z2) + b2 * z2;
    [alpha, beta, gamma, dp]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityReport {
    pub rho: f64,
    pub per_vehicle_blocks: Vec<[[f64; 2]; 2]>,
    pub eigenvalues: Vec<[(f64, f64); 2]>,
    /// `1 - rho(A~_i)` per vehicle.
    pub margins: Vec<f64>,
}

impl From<&ClosedLoopModel> for StabilityReport {
    fn from(m: &ClosedLoopModel) -> Self {
        Self {
            rho: m.rho,
            per_vehicle_blocks: m
                .vehicles
                .iter()
                .map(|v| [[v.block[(0, 0)], v.block[(0, 1)]], [v.block[(1, 0)], v.block[(1, 1)]]])
                .collect(),
            eigenvalues: m.vehicles.iter().map(|v| v.eigenvalues).collect(),
            margins: m.vehicles.iter().map(|v| 1.0 - v.rho).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_factors() {
        assert_eq!(decay_factor(0.0228, 2, 4.0), 0.0228);
        assert!((decay_factor(0.0228, 3, 4.0) - 0.001425).abs() < 1e-15);
    }

    #[test]
    fn rejects_slow_decay() {
        let spec = ScheduleSpec { eta: 1.0, ..ScheduleSpec::reference() };
        assert!(gen_weight_schedule(&spec, 3).is_err());
    }

    #[test]
    fn stage_one_offset_only_for_longer_horizons() {
        assert_eq!(reference_schedule(1).alpha[0][0], 38.85);
        assert!((reference_schedule(2).alpha[0][0] - 37.85).abs() < 1e-12);
    }

    #[test]
    fn unit_weights_complex_pair() {
        let cfg = PlatoonConfig { n: 2, ..PlatoonConfig::reference(1) };
        let w = WeightSchedule::uniform(2, 1, 1.0, 1.0, 1.0);
        let m = build_closed_loop(&cfg, &w).unwrap();
        let (re, im) = m.vehicles[0].eigenvalues[0];
        assert!(im != 0.0);
        assert!((re * re + im * im - 1.0 / 2.25).abs() < 1e-12);
    }

    #[test]
    fn block_diagonalization() {
        let cfg = PlatoonConfig::reference(3);
        let m = build_closed_loop(&cfg, &reference_schedule(3)).unwrap();
        let e = e_tilde(cfg.n);
        let t = e.transpose() * &m.a_c * &e;
        for r in 0..2 * cfg.n {
            for c in 0..2 * cfg.n {
                if r / 2 != c / 2 {
                    assert!(t[(r, c)].abs() < 1e-12);
                }
            }
        }
        for (i, v) in m.vehicles.iter().enumerate() {
            assert!((t.fixed_view::<2, 2>(2 * i, 2 * i) - v.block).norm() < 1e-14);
        }
    }
}

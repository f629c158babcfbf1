//! Dense reference constructions.
//!
//! Production code never materializes these matrices; they exist so tests can
//! check the structured O(n) and block-tridiagonal routes against the plain
//! matrix definitions.

use nalgebra::DMatrix;

use crate::mpc::WeightSchedule;
use crate::platoon::PlatoonConfig;

/// Lower-triangular all-ones matrix.
pub fn s_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| if j <= i { 1.0 } else { 0.0 })
}

/// Bidiagonal inverse of [`s_matrix`].
pub fn s_inv_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else if j + 1 == i {
            -1.0
        } else {
            0.0
        }
    })
}

/// Permutation mapping the vehicle-major stacking `(u_1, .., u_n)` to the
/// time-major stacking `(u(k), .., u(k+p-1))`.
pub fn permutation_e(n: usize, p: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(n * p, n * p);
    for k in 0..p {
        for s in 0..n {
            e[(n * k + s, p * s + k)] = 1.0;
        }
    }
    e
}

/// The time-major Hessian `V` built directly from its stage-sum definition.
pub fn v_matrix(cfg: &PlatoonConfig, weights: &WeightSchedule) -> DMatrix<f64> {
    let (n, p, tau) = (cfg.n, cfg.p, cfg.tau);
    let sinv = s_inv_matrix(n);
    let mut v = DMatrix::zeros(n * p, n * p);
    for i in 0..p {
        for j in 0..p {
            let mut theta = DMatrix::<f64>::zeros(n, n);
            for s in i.max(j)..p {
                let ci = (2 * (s - i) + 1) as f64;
                let cj = (2 * (s - j) + 1) as f64;
                for veh in 0..n {
                    theta[(veh, veh)] += tau.powi(4) / 4.0 * ci * cj * weights.alpha[s][veh]
                        + tau * tau * weights.beta[s][veh];
                }
            }
            if i == j {
                for veh in 0..n {
                    theta[(veh, veh)] += tau * tau * weights.zeta[i][veh];
                }
            }
            let block = sinv.transpose() * theta * &sinv;
            v.view_mut((i * n, j * n), (n, n)).copy_from(&block);
        }
    }
    v
}

/// `W = E^T V E`.
pub fn w_matrix(cfg: &PlatoonConfig, weights: &WeightSchedule) -> DMatrix<f64> {
    let e = permutation_e(cfg.n, cfg.p);
    e.transpose() * v_matrix(cfg, weights) * e
}

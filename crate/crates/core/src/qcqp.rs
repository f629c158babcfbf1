//! Small dense convex QCQP solver.
//!
//! Solves `min 1/2 x'Hx + g'x` subject to `Ax <= b` and rank-one convex
//! quadratic rows `w (d'x)^2 + l'x + c <= 0` with a primal-dual interior point
//! method (Mehrotra predictor-corrector, slack form). When the unconstrained
//! minimizer is feasible it is returned directly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadRow {
    pub weight: f64,
    pub dir: DVector<f64>,
    pub lin: DVector<f64>,
    pub constant: f64,
}

impl QuadRow {
    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        let t = self.dir.dot(x);
        self.weight * t * t + self.lin.dot(x) + self.constant
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.lin + &self.dir * (2.0 * self.weight * self.dir.dot(x))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Qcqp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub quads: Vec<QuadRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcqpOptions {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for QcqpOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_iters: 200 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.feasibility).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcqpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the linear rows, then of the quadratic rows.
    pub multipliers: DVector<f64>,
    pub iterations: usize,
    pub kkt: KktResidual,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QcqpError {
    #[error("constraint set appears empty (primal residual {primal:e} after {iterations} iterations)")]
    Infeasible { iterations: usize, primal: f64 },
    #[error("no convergence in {iterations} iterations (kkt residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("objective Hessian is not positive definite")]
    NotConvex,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

impl Qcqp {
    pub fn dim(&self) -> usize {
        self.g.len()
    }

    pub fn n_rows(&self) -> usize {
        self.b.len() + self.quads.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    /// Constraint values (`<= 0` when satisfied).
    pub fn constraints(&self, x: &DVector<f64>) -> DVector<f64> {
        let lin = &self.a * x - &self.b;
        DVector::from_iterator(
            self.n_rows(),
            lin.iter().copied().chain(self.quads.iter().map(|q| q.eval(x))),
        )
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.n_rows(), self.dim());
        j.view_mut((0, 0), (self.b.len(), self.dim())).copy_from(&self.a);
        for (k, q) in self.quads.iter().enumerate() {
            j.row_mut(self.b.len() + k).copy_from(&q.grad(x).transpose());
        }
        j
    }

    /// Hessian of the Lagrangian.
    fn lagrangian_hessian(&self, lam: &DVector<f64>) -> DMatrix<f64> {
        let mut h = self.h.clone();
        let off = self.b.len();
        for (k, q) in self.quads.iter().enumerate() {
            h += (&q.dir * q.dir.transpose()) * (2.0 * q.weight * lam[off + k]);
        }
        h
    }

    pub fn kkt_residual(&self, x: &DVector<f64>, lam: &DVector<f64>) -> KktResidual {
        let f = self.constraints(x);
        let grad = &self.h * x + &self.g + self.jacobian(x).transpose() * lam;
        KktResidual {
            stationarity: grad.amax(),
            feasibility: f.iter().fold(0.0f64, |m, &v| m.max(v)),
            complementarity: f
                .iter()
                .zip(lam.iter())
                .fold(0.0f64, |m, (&fi, &li)| m.max((fi * li).abs()).max(-li)),
        }
    }

    fn check_dims(&self) -> Result<(), QcqpError> {
        let d = self.dim();
        if self.h.shape() != (d, d) || self.a.ncols() != d || self.a.nrows() != self.b.len() {
            return Err(QcqpError::Dimension(format!(
                "H {:?}, A {:?}, b {}, g {d}",
                self.h.shape(),
                self.a.shape(),
                self.b.len()
            )));
        }
        if self.quads.iter().any(|q| q.dir.len() != d || q.lin.len() != d || q.weight < 0.0) {
            return Err(QcqpError::Dimension("quadratic row size or sign".into()));
        }
        Ok(())
    }

    pub fn solve(&self, opts: QcqpOptions) -> Result<QcqpSolution, QcqpError> {
        self.check_dims()?;
        let chol = self.h.clone().cholesky().ok_or(QcqpError::NotConvex)?;
        let x_free = -chol.solve(&self.g);
        let m = self.n_rows();
        if self.constraints(&x_free).iter().all(|&v| v <= 0.0) {
            let lam = DVector::zeros(m);
            let kkt = self.kkt_residual(&x_free, &lam);
            return Ok(QcqpSolution { x: x_free, multipliers: lam, iterations: 0, kkt });
        }
        self.interior_point(x_free, opts)
    }

    /// Norm of the primal-dual residual with complementarity target `target`.
    fn merit(&self, x: &DVector<f64>, s: &DVector<f64>, lam: &DVector<f64>, target: f64) -> f64 {
        let r_d = &self.h * x + &self.g + self.jacobian(x).transpose() * lam;
        let r_p = self.constraints(x) + s;
        let r_c = s.component_mul(lam).add_scalar(-target);
        (r_d.norm_squared() + r_p.norm_squared() + r_c.norm_squared()).sqrt()
    }

    fn interior_point(&self, x0: DVector<f64>, opts: QcqpOptions) -> Result<QcqpSolution, QcqpError> {
        let m = self.n_rows();
        let mf = m as f64;
        let mut x = x0;
        let f0 = self.constraints(&x);
        let mut s = f0.map(|v| (-v).max(1.0));
        let mut lam = DVector::from_element(m, 1.0);
        let mut best: Option<(f64, DVector<f64>, DVector<f64>)> = None;

        for it in 1..=opts.max_iters {
            let f = self.constraints(&x);
            let jac = self.jacobian(&x);
            let r_d = &self.h * &x + &self.g + jac.transpose() * &lam;
            let r_p = &f + &s;
            let mu = s.dot(&lam) / mf;

            let kkt = self.kkt_residual(&x, &lam);
            if best.as_ref().is_none_or(|(r, _, _)| kkt.max() < *r) {
                best = Some((kkt.max(), x.clone(), lam.clone()));
            }
            if kkt.max() <= opts.tol && r_p.amax() <= opts.tol {
                return Ok(QcqpSolution { x, multipliers: lam, iterations: it - 1, kkt });
            }

            let d = lam.component_div(&s);
            let mut k = self.lagrangian_hessian(&lam) + jac.transpose() * DMatrix::from_diagonal(&d) * &jac;
            let scale = k.diagonal().amax().max(1.0);
            let chol = match k.clone().cholesky() {
                Some(c) => c,
                None => {
                    for i in 0..k.nrows() {
                        k[(i, i)] += 1e-12 * scale;
                    }
                    k.cholesky().ok_or(QcqpError::NotConvex)?
                }
            };

            // Newton direction for a given complementarity target `r_c`.
            let direction = |r_c: &DVector<f64>| {
                let t = (r_c + lam.component_mul(&r_p)).component_div(&s);
                let dx = chol.solve(&(-&r_d - jac.transpose() * &t));
                let ds = -&r_p - &jac * &dx;
                let dl = &t + d.component_mul(&(&jac * &dx));
                (dx, ds, dl)
            };

            let r_aff = -lam.component_mul(&s);
            let (_, ds_a, dl_a) = direction(&r_aff);
            let a_aff = max_step(&s, &ds_a).min(max_step(&lam, &dl_a));
            let mu_aff = (&s + &ds_a * a_aff).dot(&(&lam + &dl_a * a_aff)) / mf;
            let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
            let r_c = &r_aff - ds_a.component_mul(&dl_a) + DVector::from_element(m, sigma * mu);
            // Curvature of the quadratic rows can make the step overshoot, so
            // backtrack on the residual of the perturbed system. The corrector
            // is not always a descent direction for it; the plain Newton step
            // toward the same target is.
            let target = sigma * mu;
            let merit0 = self.merit(&x, &s, &lam, target);
            let r_plain = DVector::from_element(m, target) - lam.component_mul(&s);
            let mut accepted = None;
            for r in [&r_c, &r_plain] {
                let (dx, ds, dl) = direction(r);
                let mut step = (0.995 * max_step(&s, &ds).min(max_step(&lam, &dl))).min(1.0);
                while step > 1e-10 {
                    let xn = &x + &dx * step;
                    let sn = &s + &ds * step;
                    let ln = &lam + &dl * step;
                    if self.merit(&xn, &sn, &ln, target) <= (1.0 - 1e-4 * step) * merit0 {
                        accepted = Some((xn, sn, ln));
                        break;
                    }
                    step *= 0.5;
                }
                if accepted.is_some() {
                    break;
                }
            }
            let Some((xn, sn, ln)) = accepted else { break };
            x = xn;
            s = sn;
            lam = ln;
            if !x.iter().all(|v| v.is_finite()) {
                break;
            }
        }

        let (res, x, lam) = best.expect("at least one iterate");
        let kkt = self.kkt_residual(&x, &lam);
        if kkt.feasibility > 1e-6 {
            Err(QcqpError::Infeasible { iterations: opts.max_iters, primal: kkt.feasibility })
        } else {
            Err(QcqpError::NotConverged { iterations: opts.max_iters, residual: res })
        }
    }
}

/// Largest step keeping `v + a dv > 0`, capped so that `0.995 a <= 1`.
fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, &d)| d < 0.0)
        .map(|(&vi, &di)| -vi / di)
        .fold(1.0 / 0.995, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn boxed(lo: f64, hi: f64, target: &[f64]) -> Qcqp {
        let d = target.len();
        let mut a = DMatrix::zeros(2 * d, d);
        let mut b = DVector::zeros(2 * d);
        for i in 0..d {
            a[(2 * i, i)] = 1.0;
            b[2 * i] = hi;
            a[(2 * i + 1, i)] = -1.0;
            b[2 * i + 1] = -lo;
        }
        Qcqp {
            h: DMatrix::identity(d, d),
            g: -DVector::from_column_slice(target),
            a,
            b,
            quads: Vec::new(),
        }
    }

    #[test]
    fn interior_minimizer_is_returned() {
        let sol = boxed(-1.0, 1.0, &[0.3, -0.2]).solve(QcqpOptions::default()).unwrap();
        assert_eq!(sol.iterations, 0);
        assert!((sol.x[0] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn box_projection() {
        let sol = boxed(-1.0, 1.0, &[2.0, -0.5, -3.0]).solve(QcqpOptions::default()).unwrap();
        let want = [1.0, -0.5, -1.0];
        for i in 0..3 {
            assert!((sol.x[i] - want[i]).abs() < 1e-9, "{:?}", sol.x);
        }
        assert!(sol.kkt.max() <= 1e-10);
    }

    #[test]
    fn disc_projection() {
        // Project (2, 0) onto x^2 <= 1 combined with y free.
        let q = QuadRow {
            weight: 1.0,
            dir: DVector::from_vec(vec![1.0, 0.0]),
            lin: DVector::zeros(2),
            constant: -1.0,
        };
        let prob = Qcqp {
            h: DMatrix::identity(2, 2),
            g: DVector::from_vec(vec![-2.0, -0.5]),
            a: DMatrix::zeros(0, 2),
            b: DVector::zeros(0),
            quads: vec![q],
        };
        let sol = prob.solve(QcqpOptions::default()).unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-9);
        assert!((sol.x[1] - 0.5).abs() < 1e-9);
        assert!((sol.multipliers[0] - 0.5).abs() < 1e-8);
    }

    #[test]
    fn empty_set_reported() {
        let mut prob = boxed(-1.0, 1.0, &[3.0]);
        prob.b[1] = -2.0; // x >= 2 and x <= 1
        assert!(matches!(prob.solve(QcqpOptions::default()), Err(QcqpError::Infeasible { .. })));
    }
}

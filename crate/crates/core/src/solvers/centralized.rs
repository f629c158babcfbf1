use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mpc::QcqpProblem;
use crate::qcqp::{KktResidual, Qcqp, QcqpOptions, QuadRow};

#[derive(Debug, Clone)]
pub struct CentralizedSolution {
    pub u: Vec<f64>,
    pub kkt: KktResidual,
    pub iterations: usize,
}

/// The whole program as one dense QCQP.
pub fn as_qcqp(prob: &QcqpProblem) -> Qcqp {
    let (n, p) = (prob.n, prob.p);
    let dim = n * p;
    let mut a = DMatrix::zeros(4 * p * n, dim);
    let mut b = DVector::zeros(4 * p * n);
    for (i, bx) in prob.boxes.iter().enumerate() {
        let (ai, bi) = bx.rows(p);
        a.view_mut((4 * p * i, p * i), (4 * p, p)).copy_from(&ai);
        b.rows_mut(4 * p * i, 4 * p).copy_from(&bi);
    }
    let mut quads = Vec::with_capacity(n * p);
    for (i, row) in prob.safety.iter().enumerate() {
        for q in row {
            let mut dir = DVector::zeros(dim);
            let mut lin = DVector::zeros(dim);
            for j in 0..p {
                dir[i * p + j] = if j < q.stage { 1.0 } else { 0.0 };
                lin[i * p + j] = q.lin_own[j];
                if i > 0 {
                    lin[(i - 1) * p + j] = q.lin_pred[j];
                }
            }
            quads.push(QuadRow { weight: q.quad, dir, lin, constant: q.constant });
        }
    }
    Qcqp { h: prob.dense_hessian(), g: prob.dense_c(), a, b, quads }
}

/// High-accuracy interior point solve of the full program (KKT residual `<= tol`).
pub fn solve_centralized(prob: &QcqpProblem, tol: f64) -> Result<CentralizedSolution> {
    let sol = as_qcqp(prob)
        .solve(QcqpOptions { tol, max_iters: 300 })
        .map_err(Error::Centralized)?;
    Ok(CentralizedSolution { u: sol.x.iter().copied().collect(), kkt: sol.kkt, iterations: sol.iterations })
}

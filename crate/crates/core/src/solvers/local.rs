use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::decomposition::{Decomposition, LocalHessian};
use crate::error::{Error, Result};
use crate::mpc::{LocalBox, QcqpProblem, SafetyQuadratic};
use crate::qcqp::{Qcqp, QcqpError, QcqpOptions, QuadRow};

/// KKT tolerance of the local subproblems.
pub const LOCAL_KKT_TOL: f64 = 1e-10;

/// One vehicle's share of the program: its Hessian block over its member
/// controls, its linear term and its constraint set `P_i`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalAgentProblem {
    pub agent: usize,
    pub members: Vec<usize>,
    pub p: usize,
    pub hess: DMatrix<f64>,
    pub lin: DVector<f64>,
    pub bounds: LocalBox,
    pub safety: Vec<SafetyQuadratic>,
    rows_a: DMatrix<f64>,
    rows_b: DVector<f64>,
    quads: Vec<QuadRow>,
}

impl LocalAgentProblem {
    pub fn new(local: &LocalHessian, prob: &QcqpProblem) -> Self {
        let p = prob.p;
        let i = local.agent;
        let dim = local.members.len() * p;
        let own = local.own_pos() * p;
        let pred = local.members.iter().position(|&m| m + 1 == i).map(|k| k * p);

        let mut lin = DVector::zeros(dim);
        lin.rows_mut(own, p).copy_from(&prob.c[i]);

        let (a_own, b) = prob.boxes[i].rows(p);
        let mut rows_a = DMatrix::zeros(a_own.nrows(), dim);
        rows_a.view_mut((0, own), (a_own.nrows(), p)).copy_from(&a_own);

        let quads = prob.safety[i]
            .iter()
            .map(|q| {
                let mut dir = DVector::zeros(dim);
                let mut l = DVector::zeros(dim);
                for j in 0..p {
                    dir[own + j] = if j < q.stage { 1.0 } else { 0.0 };
                    l[own + j] = q.lin_own[j];
                }
                if let Some(pp) = pred {
                    for j in 0..p {
                        l[pp + j] = q.lin_pred[j];
                    }
                }
                QuadRow { weight: q.quad, dir, lin: l, constant: q.constant }
            })
            .collect();

        Self {
            agent: i,
            members: local.members.clone(),
            p,
            hess: local.block.clone(),
            lin,
            bounds: prob.boxes[i].clone(),
            safety: prob.safety[i].clone(),
            rows_a,
            rows_b: b,
            quads,
        }
    }

    pub fn dim(&self) -> usize {
        self.lin.len()
    }

    pub fn own_offset(&self) -> usize {
        self.members.iter().position(|&m| m == self.agent).unwrap() * self.p
    }

    pub fn grad(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.hess * x + &self.lin
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hess * x)) + self.lin.dot(x)
    }

    /// `P_i` as a QCQP feasible set with the given objective.
    fn qcqp(&self, h: DMatrix<f64>, g: DVector<f64>) -> Qcqp {
        Qcqp { h, g, a: self.rows_a.clone(), b: self.rows_b.clone(), quads: self.quads.clone() }
    }

    pub fn constraint_values(&self, x: &DVector<f64>) -> DVector<f64> {
        self.qcqp(DMatrix::identity(self.dim(), self.dim()), DVector::zeros(self.dim()))
            .constraints(x)
    }

    /// `argmin_{z in P_i} J_i(z) + |z - point|^2 / (2 rho)`.
    pub fn prox(&self, point: &DVector<f64>, rho: f64) -> Result<LocalSolve, QcqpError> {
        let h = &self.hess * rho + DMatrix::identity(self.dim(), self.dim());
        let g = &self.lin * rho - point;
        let sol = self.qcqp(h, g).solve(QcqpOptions { tol: LOCAL_KKT_TOL, ..Default::default() })?;
        Ok(LocalSolve { x: sol.x, iterations: sol.iterations })
    }

    /// Closed-form prox with `P_i` replaced by the whole space.
    pub fn prox_free(&self, point: &DVector<f64>, rho: f64) -> DVector<f64> {
        let h = &self.hess * rho + DMatrix::identity(self.dim(), self.dim());
        let rhs = point - &self.lin * rho;
        h.cholesky().expect("rho W + I is positive definite").solve(&rhs)
    }

    /// Euclidean projection onto `P_i`.
    pub fn project(&self, point: &DVector<f64>) -> Result<LocalSolve, QcqpError> {
        let sol = self
            .qcqp(DMatrix::identity(self.dim(), self.dim()), -point)
            .solve(QcqpOptions { tol: LOCAL_KKT_TOL, ..Default::default() })?;
        Ok(LocalSolve { x: sol.x, iterations: sol.iterations })
    }
}

#[derive(Debug, Clone)]
pub struct LocalSolve {
    pub x: DVector<f64>,
    /// Interior point iterations; zero when the unconstrained point was feasible.
    pub iterations: usize,
}

pub fn agent_problems(prob: &QcqpProblem, dec: &Decomposition) -> Result<Vec<LocalAgentProblem>> {
    if dec.n() != prob.n || dec.p() != prob.p {
        return Err(Error::LayoutMismatch(format!(
            "decomposition is {}x{}, program is {}x{}",
            dec.n(),
            dec.p(),
            prob.n,
            prob.p
        )));
    }
    Ok(dec.locals.iter().map(|l| LocalAgentProblem::new(l, prob)).collect())
}

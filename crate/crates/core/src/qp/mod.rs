//! Dense convex QP for the projection step.
//!
//! Problems have the form
//!
//! ```text
//! minimize    (w + g)ᵀ G (w + g)
//! subject to  A w ≤ b
//! ```
//!
//! with `G` symmetric positive definite. The solver is a dual active-set
//! method (Goldfarb–Idnani): it starts from the unconstrained minimizer
//! `w = -g` and adds the most violated constraint until the iterate is
//! primal feasible, so no phase-one feasibility problem is needed and
//! infeasibility is detected directly.

mod active_set;
mod projection;

pub use active_set::{solve_qp, solve_qp_with, QpOptions};
pub use projection::{
    build_projection_qp, solve_projection, CompositeGradient, ConstraintSpec, ProjectionQp,
    ProjectionResult, RowKind, SOFT_PENALTY,
};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Smallest admissible eigenvalue of the metric.
pub const MIN_METRIC_EIGENVALUE: f64 = 1e-10;

/// KKT residual below which a solution is certified optimal.
pub const KKT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub metric: DMatrix<f64>,
    pub gradient_term: DVector<f64>,
    pub ineq_a: DMatrix<f64>,
    pub ineq_b: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        metric: DMatrix<f64>,
        gradient_term: DVector<f64>,
        ineq_a: DMatrix<f64>,
        ineq_b: DVector<f64>,
    ) -> Result<QpProblem> {
        let m = gradient_term.len();
        if metric.nrows() != m || metric.ncols() != m {
            return Err(Error::Dimension(format!(
                "metric is {}x{}, gradient term has length {m}",
                metric.nrows(),
                metric.ncols()
            )));
        }
        if ineq_a.nrows() != ineq_b.len() || (ineq_a.nrows() > 0 && ineq_a.ncols() != m) {
            return Err(Error::Dimension(format!(
                "constraint matrix is {}x{}, right-hand side has length {}",
                ineq_a.nrows(),
                ineq_a.ncols(),
                ineq_b.len()
            )));
        }
        check_metric(&metric)?;
        Ok(QpProblem {
            metric,
            gradient_term,
            ineq_a,
            ineq_b,
        })
    }

    /// Unconstrained problem.
    pub fn unconstrained(metric: DMatrix<f64>, gradient_term: DVector<f64>) -> Result<QpProblem> {
        let m = gradient_term.len();
        QpProblem::new(
            metric,
            gradient_term,
            DMatrix::zeros(0, m),
            DVector::zeros(0),
        )
    }

    pub fn dim(&self) -> usize {
        self.gradient_term.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.ineq_b.len()
    }

    /// `(w + g)ᵀ G (w + g)`.
    pub fn objective(&self, w: &DVector<f64>) -> f64 {
        let z = w + &self.gradient_term;
        z.dot(&(&self.metric * &z))
    }
}

/// Symmetric positive definite check.
pub fn check_metric(metric: &DMatrix<f64>) -> Result<()> {
    if !metric.is_square() {
        return Err(Error::Parameter("metric must be square".into()));
    }
    let scale = metric.amax().max(1.0);
    if (metric - metric.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Parameter("metric must be symmetric".into()));
    }
    if metric.nrows() > 0 {
        let lmin = SymmetricEigen::new(metric.clone()).eigenvalues.min();
        if !(lmin > MIN_METRIC_EIGENVALUE) {
            return Err(Error::Parameter(format!(
                "metric must be positive definite (smallest eigenvalue {lmin:.3e})"
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::Infeasible => "infeasible",
            QpStatus::MaxIter => "max_iter",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub w: DVector<f64>,
    /// Indices of binding constraints, ascending.
    pub active_set: Vec<usize>,
    /// One multiplier per constraint row (zero off the active set).
    pub multipliers: DVector<f64>,
    pub kkt_residual: f64,
    pub status: QpStatus,
    pub iterations: usize,
}

/// Largest of the stationarity, primal feasibility, dual feasibility and
/// complementarity residuals of `(w, λ)`.
pub fn kkt_residual(problem: &QpProblem, w: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
    let z = w + &problem.gradient_term;
    let mut stat = &problem.metric * z;
    if problem.n_constraints() > 0 {
        stat += problem.ineq_a.transpose() * lambda;
    }
    let mut res = stat.amax();
    for i in 0..problem.n_constraints() {
        let slack = problem.ineq_a.row(i).transpose().dot(w) - problem.ineq_b[i];
        res = res.max(slack.max(0.0));
        res = res.max((-lambda[i]).max(0.0));
        res = res.max((lambda[i] * slack).abs());
    }
    res
}

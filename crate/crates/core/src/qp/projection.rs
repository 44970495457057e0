//! Assembly of the projection QP from controller quantities.

use nalgebra::{DMatrix, DVector};

use super::{solve_qp, QpProblem, QpSolution, QpStatus};
use crate::error::{Error, Result};
use crate::grid::Network;
use crate::powerflow::{OutputSpec, SensitivityMatrix};

/// Quadratic weight on the shared output slack of a softened QP.
pub const SOFT_PENALTY: f64 = 1e4;

/// Input boxes and output bands enforced by the projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    pub input_lower: DVector<f64>,
    pub input_upper: DVector<f64>,
    /// `(lower, upper)` per monitored output; `None` leaves a side open.
    pub output_bounds: Vec<(Option<f64>, Option<f64>)>,
}

impl ConstraintSpec {
    pub fn from_network(network: &Network, outputs: &OutputSpec) -> Result<ConstraintSpec> {
        let (input_lower, input_upper) = network.input_bounds();
        Ok(ConstraintSpec {
            input_lower,
            input_upper,
            output_bounds: outputs.bounds(network)?,
        })
    }
}

/// Cost gradient split into its input and output parts.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeGradient {
    pub du: DVector<f64>,
    pub dy: DVector<f64>,
}

impl CompositeGradient {
    pub fn zeros(n_inputs: usize, n_outputs: usize) -> Self {
        CompositeGradient {
            du: DVector::zeros(n_inputs),
            dy: DVector::zeros(n_outputs),
        }
    }

    /// Reduced gradient `du + Sᵀ dy` with respect to the inputs.
    pub fn reduced(&self, sens: &SensitivityMatrix) -> DVector<f64> {
        &self.du + sens.matrix.transpose() * &self.dy
    }
}

/// Origin of each constraint row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    InputUpper(usize),
    InputLower(usize),
    OutputUpper(usize),
    OutputLower(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionQp {
    pub problem: QpProblem,
    pub rows: Vec<RowKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    /// Solution restricted to the input components.
    pub solution: QpSolution,
    /// True when the hard QP was infeasible and output rows were relaxed.
    pub softened: bool,
    /// Value of the shared output slack (zero unless softened).
    pub slack: f64,
}

pub fn build_projection_qp(
    grad: &CompositeGradient,
    sens: &SensitivityMatrix,
    u: &DVector<f64>,
    y: &DVector<f64>,
    limits: &ConstraintSpec,
    alpha: f64,
    metric: &DMatrix<f64>,
) -> Result<ProjectionQp> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Parameter(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    let m = u.len();
    let n_out = y.len();
    if grad.du.len() != m
        || grad.dy.len() != n_out
        || sens.nrows() != n_out
        || sens.ncols() != m
        || limits.input_lower.len() != m
        || limits.input_upper.len() != m
        || limits.output_bounds.len() != n_out
        || metric.nrows() != m
    {
        return Err(Error::Dimension(format!(
            "projection QP: {m} inputs, {n_out} outputs, sensitivity {}x{}, metric {}x{}",
            sens.nrows(),
            sens.ncols(),
            metric.nrows(),
            metric.ncols()
        )));
    }
    super::check_metric(metric)?;

    let mut coeffs: Vec<DVector<f64>> = Vec::new();
    let mut rhs = Vec::new();
    let mut rows = Vec::new();
    for i in 0..m {
        let mut e = DVector::zeros(m);
        e[i] = alpha;
        coeffs.push(e.clone());
        rhs.push(limits.input_upper[i] - u[i]);
        rows.push(RowKind::InputUpper(i));
        coeffs.push(-e);
        rhs.push(u[i] - limits.input_lower[i]);
        rows.push(RowKind::InputLower(i));
    }
    for (j, &(lo, hi)) in limits.output_bounds.iter().enumerate() {
        let s_row: DVector<f64> = sens.matrix.row(j).transpose() * alpha;
        if let Some(hi) = hi {
            coeffs.push(s_row.clone());
            rhs.push(hi - y[j]);
            rows.push(RowKind::OutputUpper(j));
        }
        if let Some(lo) = lo {
            coeffs.push(-s_row);
            rhs.push(y[j] - lo);
            rows.push(RowKind::OutputLower(j));
        }
    }

    let mut a = DMatrix::zeros(rows.len(), m);
    for (r, c) in coeffs.iter().enumerate() {
        a.set_row(r, &c.transpose());
    }
    let g = metric
        .clone()
        .cholesky()
        .expect("metric checked positive definite")
        .solve(&grad.reduced(sens));
    let problem = QpProblem::new(metric.clone(), g, a, DVector::from_vec(rhs))?;
    Ok(ProjectionQp { problem, rows })
}

/// Solve the projection; if infeasible, retry with one shared slack on every
/// output row, penalized by [`SOFT_PENALTY`].
pub fn solve_projection(qp: &ProjectionQp) -> Result<ProjectionResult> {
    let hard = solve_qp(&qp.problem);
    if hard.status != QpStatus::Infeasible {
        return Ok(ProjectionResult {
            solution: hard,
            softened: false,
            slack: 0.0,
        });
    }

    let p = &qp.problem;
    let m = p.dim();
    let nr = p.n_constraints();
    let mut metric = DMatrix::zeros(m + 1, m + 1);
    metric.view_mut((0, 0), (m, m)).copy_from(&p.metric);
    metric[(m, m)] = SOFT_PENALTY;
    let gradient_term = p.gradient_term.clone().insert_row(m, 0.0);
    let mut a = DMatrix::zeros(nr + 1, m + 1);
    a.view_mut((0, 0), (nr, m)).copy_from(&p.ineq_a);
    for (r, kind) in qp.rows.iter().enumerate() {
        if matches!(kind, RowKind::OutputUpper(_) | RowKind::OutputLower(_)) {
            a[(r, m)] = -1.0;
        }
    }
    a[(nr, m)] = -1.0;
    let b = p.ineq_b.clone().insert_row(nr, 0.0);
    let soft = solve_qp(&QpProblem::new(metric, gradient_term, a, b)?);
    if soft.status != QpStatus::Optimal {
        return Err(Error::QpInfeasible);
    }
    let slack = soft.w[m];
    let solution = QpSolution {
        w: soft.w.rows(0, m).into_owned(),
        active_set: soft.active_set.into_iter().filter(|&i| i < nr).collect(),
        multipliers: soft.multipliers.rows(0, nr).into_owned(),
        kkt_residual: soft.kkt_residual,
        status: soft.status,
        iterations: soft.iterations,
    };
    Ok(ProjectionResult {
        solution,
        softened: true,
        slack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sens(rows: &[f64], n_out: usize, m: usize) -> SensitivityMatrix {
        SensitivityMatrix {
            matrix: DMatrix::from_row_slice(n_out, m, rows),
            row_labels: (0..n_out).map(|i| format!("y{i}")).collect(),
            col_labels: (0..m).map(|i| format!("u{i}")).collect(),
        }
    }

    fn limits(m: usize, bounds: Vec<(Option<f64>, Option<f64>)>) -> ConstraintSpec {
        ConstraintSpec {
            input_lower: DVector::from_element(m, -1.0),
            input_upper: DVector::from_element(m, 1.0),
            output_bounds: bounds,
        }
    }

    #[test]
    fn alpha_outside_unit_interval_is_rejected() {
        let s = sens(&[1.0], 1, 1);
        let grad = CompositeGradient::zeros(1, 1);
        for alpha in [0.0, -0.1, 1.5, f64::NAN] {
            let err = build_projection_qp(
                &grad,
                &s,
                &DVector::zeros(1),
                &DVector::zeros(1),
                &limits(1, vec![(None, None)]),
                alpha,
                &DMatrix::identity(1, 1),
            )
            .unwrap_err();
            assert!(matches!(err, Error::Parameter(_)));
        }
    }

    #[test]
    fn upper_bound_blocks_further_increase() {
        let s = sens(&[0.0, 0.0], 1, 2);
        let grad = CompositeGradient {
            du: DVector::from_vec(vec![-1.0, 0.0]),
            dy: DVector::zeros(1),
        };
        let u = DVector::from_vec(vec![1.0, 0.0]);
        let qp = build_projection_qp(
            &grad,
            &s,
            &u,
            &DVector::zeros(1),
            &limits(2, vec![(None, None)]),
            0.5,
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        let sol = solve_projection(&qp).unwrap().solution;
        assert!(sol.w[0] <= 1e-12);
        assert!(sol
            .active_set
            .iter()
            .any(|&r| qp.rows[r] == RowKind::InputUpper(0)));
    }

    #[test]
    fn voltage_violation_is_pulled_back_in_one_step() {
        let s = sens(&[0.05, 0.1], 1, 2);
        let y = DVector::from_vec(vec![1.07]);
        let alpha = 0.8;
        let qp = build_projection_qp(
            &CompositeGradient::zeros(2, 1),
            &s,
            &DVector::zeros(2),
            &y,
            &limits(2, vec![(Some(0.95), Some(1.05))]),
            alpha,
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        let k = qp
            .rows
            .iter()
            .position(|r| *r == RowKind::OutputUpper(0))
            .unwrap();
        assert!((qp.problem.ineq_b[k] + 0.02).abs() < 1e-15);
        let res = solve_projection(&qp).unwrap();
        assert!(!res.softened);
        let y_next = y[0] + alpha * (s.matrix.row(0) * &res.solution.w)[0];
        assert!(y_next <= 1.05 + 1e-9);
    }

    #[test]
    fn zero_gradient_with_slack_limits_gives_zero_step() {
        let s = sens(&[0.3, -0.2, 0.1, 0.4], 2, 2);
        let qp = build_projection_qp(
            &CompositeGradient::zeros(2, 2),
            &s,
            &DVector::zeros(2),
            &DVector::from_vec(vec![1.0, 1.0]),
            &limits(2, vec![(Some(0.9), Some(1.1)), (Some(0.9), Some(1.1))]),
            1.0,
            &DMatrix::identity(2, 2),
        )
        .unwrap();
        let sol = solve_projection(&qp).unwrap().solution;
        assert_eq!(sol.w, DVector::zeros(2));
    }

    #[test]
    fn gradient_term_composes_input_and_output_parts() {
        let s = sens(&[2.0, 0.0, 0.0, 3.0], 2, 2);
        let grad = CompositeGradient {
            du: DVector::from_vec(vec![1.0, 1.0]),
            dy: DVector::from_vec(vec![1.0, -1.0]),
        };
        let metric = DMatrix::identity(2, 2) * 2.0;
        let qp = build_projection_qp(
            &grad,
            &s,
            &DVector::zeros(2),
            &DVector::zeros(2),
            &limits(2, vec![(None, None), (None, None)]),
            1.0,
            &metric,
        )
        .unwrap();
        assert!((qp.problem.gradient_term[0] - 1.5).abs() < 1e-15);
        assert!((qp.problem.gradient_term[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn unreachable_output_band_is_softened() {
        // Inputs can move the output by at most 0.1 but it sits 0.5 above the band.
        let s = sens(&[0.1], 1, 1);
        let qp = build_projection_qp(
            &CompositeGradient::zeros(1, 1),
            &s,
            &DVector::zeros(1),
            &DVector::from_vec(vec![1.55]),
            &limits(1, vec![(Some(0.95), Some(1.05))]),
            1.0,
            &DMatrix::identity(1, 1),
        )
        .unwrap();
        assert_eq!(solve_qp(&qp.problem).status, QpStatus::Infeasible);
        let res = solve_projection(&qp).unwrap();
        assert!(res.softened);
        assert!((res.solution.w[0] + 1.0).abs() < 1e-9);
        assert!(res.slack > 0.0);
    }
}

//! One iteration of the feedback optimizer: gradient, momentum mixing,
//! projection and gain-scaled actuation.

mod objective;

pub use objective::{evaluate_gradient, objective_value, ObjectiveSpec};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::powerflow::SensitivityMatrix;
use crate::qp::{
    build_projection_qp, check_metric, solve_projection, CompositeGradient, ConstraintSpec,
    QpStatus, RowKind,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SensitivityPolicy {
    /// Re-linearize the plant at every measurement.
    #[default]
    RecomputeEachStep,
    /// Keep the sensitivities of the first operating point.
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub alpha: f64,
    pub beta: f64,
    pub metric: DMatrix<f64>,
    pub objective: ObjectiveSpec,
    pub limits: ConstraintSpec,
    pub sensitivity_policy: SensitivityPolicy,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        check_gain(self.alpha)?;
        check_momentum(self.beta)?;
        let m = self.limits.input_lower.len();
        if self.metric.nrows() != m || self.limits.input_upper.len() != m {
            return Err(Error::Dimension(format!(
                "metric {}x{} for {m} inputs",
                self.metric.nrows(),
                self.metric.ncols()
            )));
        }
        check_metric(&self.metric)?;
        self.objective
            .validate(m / 2, self.limits.output_bounds.len())
    }
}

fn check_gain(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )))
    }
}

fn check_momentum(beta: f64) -> Result<()> {
    if beta > 0.0 && beta <= 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "beta must lie in (0, 1], got {beta}"
        )))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    /// Stacked `[p; q]` set points [pu].
    pub u: DVector<f64>,
    /// Raw gradient of the previous iteration.
    pub prev_gradient: Option<CompositeGradient>,
    pub k: usize,
}

impl ControllerState {
    pub fn new(u: DVector<f64>) -> Self {
        ControllerState {
            u,
            prev_gradient: None,
            k: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub sigma: DVector<f64>,
    pub sigma_norm: f64,
    /// Objective at the measured point `(u_k, y_k)`.
    pub phi: f64,
    pub active: Vec<RowKind>,
    pub qp_status: QpStatus,
    pub kkt_residual: f64,
    pub softened: bool,
    /// Largest `C u_{k+1} - b` over the input rows.
    pub input_violation: f64,
    /// Largest `D (y_k + α S σ) - d` over the output rows.
    pub linearized_output_violation: f64,
}

/// `β·current + (1-β)·previous`, or `current` when there is no previous gradient.
pub fn momentum_combine(
    current: &CompositeGradient,
    previous: Option<&CompositeGradient>,
    beta: f64,
) -> Result<CompositeGradient> {
    check_momentum(beta)?;
    let weight = 1.0 - beta;
    match previous {
        Some(prev) if weight != 0.0 => {
            if prev.du.len() != current.du.len() || prev.dy.len() != current.dy.len() {
                return Err(Error::Dimension(
                    "previous gradient has a different shape".into(),
                ));
            }
            Ok(CompositeGradient {
                du: &current.du * beta + &prev.du * weight,
                dy: &current.dy * beta + &prev.dy * weight,
            })
        }
        _ => Ok(current.clone()),
    }
}

/// Momentum-accelerated step.
pub fn controller_step(
    state: &ControllerState,
    y: &DVector<f64>,
    sens: &SensitivityMatrix,
    config: &ControllerConfig,
) -> Result<(ControllerState, StepRecord)> {
    let grad = evaluate_gradient(&config.objective, &state.u, y);
    let mixed = momentum_combine(&grad, state.prev_gradient.as_ref(), config.beta)?;
    project_and_actuate(state, y, sens, config, grad, &mixed)
}

/// Plain projected-gradient step without any momentum bookkeeping.
pub fn pgd_step(
    state: &ControllerState,
    y: &DVector<f64>,
    sens: &SensitivityMatrix,
    config: &ControllerConfig,
) -> Result<(ControllerState, StepRecord)> {
    let grad = evaluate_gradient(&config.objective, &state.u, y);
    let (mut next, record) = project_and_actuate(state, y, sens, config, grad.clone(), &grad)?;
    next.prev_gradient = None;
    Ok((next, record))
}

fn project_and_actuate(
    state: &ControllerState,
    y: &DVector<f64>,
    sens: &SensitivityMatrix,
    config: &ControllerConfig,
    raw: CompositeGradient,
    direction: &CompositeGradient,
) -> Result<(ControllerState, StepRecord)> {
    let alpha = config.alpha;
    let qp = build_projection_qp(
        direction,
        sens,
        &state.u,
        y,
        &config.limits,
        alpha,
        &config.metric,
    )?;
    let result = solve_projection(&qp)?;
    let sigma = result.solution.w.clone();
    let u_next = &state.u + &sigma * alpha;

    let lin = &qp.problem.ineq_a * &sigma - &qp.problem.ineq_b;
    let mut input_violation = f64::NEG_INFINITY;
    let mut linearized_output_violation = f64::NEG_INFINITY;
    for (r, kind) in qp.rows.iter().enumerate() {
        match kind {
            RowKind::InputUpper(i) => {
                input_violation = input_violation.max(u_next[*i] - config.limits.input_upper[*i]);
            }
            RowKind::InputLower(i) => {
                input_violation = input_violation.max(config.limits.input_lower[*i] - u_next[*i]);
            }
            RowKind::OutputUpper(_) | RowKind::OutputLower(_) => {
                linearized_output_violation = linearized_output_violation.max(lin[r]);
            }
        }
    }

    let record = StepRecord {
        k: state.k,
        sigma_norm: sigma.norm(),
        sigma,
        phi: objective_value(&config.objective, &state.u, y),
        active: result
            .solution
            .active_set
            .iter()
            .map(|&r| qp.rows[r])
            .collect(),
        qp_status: result.solution.status,
        kkt_residual: result.solution.kkt_residual,
        softened: result.softened,
        input_violation: input_violation.max(0.0),
        linearized_output_violation: linearized_output_violation.max(0.0),
    };
    let next = ControllerState {
        u: u_next,
        prev_gradient: Some(raw),
        k: state.k + 1,
    };
    Ok((next, record))
}

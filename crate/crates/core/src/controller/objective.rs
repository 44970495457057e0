use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::qp::CompositeGradient;

/// Cost function of one controller.
#[derive(Debug, Clone, PartialEq)]
pub enum ObjectiveSpec {
    /// `(p - p_nom)ᵀ A (p - p_nom) + qᵀ B q` over the actuator set points.
    Congestion {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        p_nominal: DVector<f64>,
    },
    /// `(p_pcc - p_set)² + (q_pcc - q_set)²`, read from the given output rows.
    Tracking {
        p_set: f64,
        q_set: f64,
        pcc_rows: (usize, usize),
    },
}

impl ObjectiveSpec {
    /// Congestion objective with `A = I` and `B = 0.1·I`.
    pub fn congestion_default(p_nominal: DVector<f64>) -> ObjectiveSpec {
        let m = p_nominal.len();
        ObjectiveSpec::Congestion {
            a: DMatrix::identity(m, m),
            b: DMatrix::identity(m, m) * 0.1,
            p_nominal,
        }
    }

    pub fn validate(&self, n_actuators: usize, n_outputs: usize) -> Result<()> {
        match self {
            ObjectiveSpec::Congestion { a, b, p_nominal } => {
                if p_nominal.len() != n_actuators
                    || a.shape() != (n_actuators, n_actuators)
                    || b.shape() != (n_actuators, n_actuators)
                {
                    return Err(Error::Dimension(format!(
                        "congestion weights must be {n_actuators}x{n_actuators}"
                    )));
                }
                check_psd(a, "A")?;
                check_psd(b, "B")
            }
            ObjectiveSpec::Tracking {
                p_set,
                q_set,
                pcc_rows: (rp, rq),
            } => {
                if *rp >= n_outputs || *rq >= n_outputs {
                    return Err(Error::Dimension(
                        "tracking PCC rows outside output vector".into(),
                    ));
                }
                if !p_set.is_finite() || !q_set.is_finite() {
                    return Err(Error::Parameter("tracking set point must be finite".into()));
                }
                Ok(())
            }
        }
    }

    /// Current tracking reference, if any.
    pub fn setpoint(&self) -> Option<(f64, f64)> {
        match self {
            ObjectiveSpec::Tracking { p_set, q_set, .. } => Some((*p_set, *q_set)),
            ObjectiveSpec::Congestion { .. } => None,
        }
    }
}

fn check_psd(w: &DMatrix<f64>, name: &str) -> Result<()> {
    let scale = w.amax().max(1.0);
    if (w - w.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Parameter(format!("weight {name} must be symmetric")));
    }
    if w.nrows() > 0 && SymmetricEigen::new(w.clone()).eigenvalues.min() < -1e-12 * scale {
        return Err(Error::Parameter(format!(
            "weight {name} must be positive semidefinite"
        )));
    }
    Ok(())
}

fn split(u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let m = u.len() / 2;
    (u.rows(0, m).into_owned(), u.rows(m, m).into_owned())
}

/// Partial derivatives of the objective with respect to inputs and outputs.
pub fn evaluate_gradient(
    objective: &ObjectiveSpec,
    u: &DVector<f64>,
    y: &DVector<f64>,
) -> CompositeGradient {
    let mut grad = CompositeGradient::zeros(u.len(), y.len());
    match objective {
        ObjectiveSpec::Congestion { a, b, p_nominal } => {
            let m = u.len() / 2;
            let (p, q) = split(u);
            grad.du
                .rows_mut(0, m)
                .copy_from(&(a * (p - p_nominal) * 2.0));
            grad.du.rows_mut(m, m).copy_from(&(b * q * 2.0));
        }
        ObjectiveSpec::Tracking {
            p_set,
            q_set,
            pcc_rows: (rp, rq),
        } => {
            grad.dy[*rp] = 2.0 * (y[*rp] - p_set);
            grad.dy[*rq] = 2.0 * (y[*rq] - q_set);
        }
    }
    grad
}

/// Objective value.
pub fn objective_value(objective: &ObjectiveSpec, u: &DVector<f64>, y: &DVector<f64>) -> f64 {
    match objective {
        ObjectiveSpec::Congestion { a, b, p_nominal } => {
            let (p, q) = split(u);
            let dp = p - p_nominal;
            dp.dot(&(a * &dp)) + q.dot(&(b * &q))
        }
        ObjectiveSpec::Tracking {
            p_set,
            q_set,
            pcc_rows: (rp, rq),
        } => (y[*rp] - p_set).powi(2) + (y[*rq] - q_set).powi(2),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn congestion_minimizer_has_zero_gradient() {
        let pn = DVector::from_vec(vec![0.3, -0.2]);
        let obj = ObjectiveSpec::congestion_default(pn.clone());
        let u = DVector::from_vec(vec![0.3, -0.2, 0.0, 0.0]);
        let g = evaluate_gradient(&obj, &u, &DVector::zeros(3));
        assert_eq!(g.du, DVector::zeros(4));
        assert_eq!(g.dy, DVector::zeros(3));
        assert_eq!(objective_value(&obj, &u, &DVector::zeros(3)), 0.0);
    }

    #[test]
    fn congestion_gradient_is_twice_weighted_deviation() {
        let obj = ObjectiveSpec::congestion_default(DVector::from_vec(vec![0.5]));
        let u = DVector::from_vec(vec![0.6, 0.2]);
        let g = evaluate_gradient(&obj, &u, &DVector::zeros(0));
        assert!((g.du[0] - 0.2).abs() < 1e-15);
        assert!((g.du[1] - 0.04).abs() < 1e-15);
    }

    #[test]
    fn tracking_at_reference_has_zero_gradient() {
        let obj = ObjectiveSpec::Tracking {
            p_set: 10.0,
            q_set: 3.0,
            pcc_rows: (1, 2),
        };
        let y = DVector::from_vec(vec![1.0, 10.0, 3.0]);
        let g = evaluate_gradient(&obj, &DVector::zeros(2), &y);
        assert_eq!(g.dy, DVector::zeros(3));
        assert_eq!(g.du, DVector::zeros(2));
        let y = DVector::from_vec(vec![1.0, 11.0, 2.5]);
        let g = evaluate_gradient(&obj, &DVector::zeros(2), &y);
        assert_eq!(g.dy, DVector::from_vec(vec![0.0, 2.0, -1.0]));
        assert_eq!(objective_value(&obj, &DVector::zeros(2), &y), 1.25);
    }

    #[test]
    fn indefinite_weight_is_rejected() {
        let obj = ObjectiveSpec::Congestion {
            a: DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            b: DMatrix::identity(2, 2),
            p_nominal: DVector::zeros(2),
        };
        assert!(matches!(obj.validate(2, 0), Err(Error::Parameter(_))));
        assert!(ObjectiveSpec::congestion_default(DVector::zeros(2))
            .validate(2, 0)
            .is_ok());
    }
}

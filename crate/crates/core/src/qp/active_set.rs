use nalgebra::{Cholesky, DMatrix, DVector};

use super::{kkt_residual, QpProblem, QpSolution, QpStatus, KKT_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// Cap on constraint additions plus removals. `None` picks a size-based cap.
    pub max_iterations: Option<usize>,
    /// Relative threshold below which a row counts as satisfied.
    pub feasibility_tolerance: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        QpOptions {
            max_iterations: None,
            feasibility_tolerance: 1e-12,
        }
    }
}

pub fn solve_qp(problem: &QpProblem) -> QpSolution {
    solve_qp_with(problem, &QpOptions::default())
}

pub fn solve_qp_with(problem: &QpProblem, opts: &QpOptions) -> QpSolution {
    let m = problem.dim();
    let nc = problem.n_constraints();
    let cap = opts.max_iterations.unwrap_or(10 * (m + nc) + 50);
    let chol = Cholesky::new(problem.metric.clone()).expect("metric checked positive definite");
    let l = chol.l();

    let mut x = -&problem.gradient_term;
    let mut active: Vec<usize> = Vec::new();
    let mut lambda: Vec<f64> = Vec::new();
    let mut iterations = 0;

    let violation = |x: &DVector<f64>, i: usize| -> f64 {
        let ax = problem.ineq_a.row(i).transpose().dot(x);
        ax - problem.ineq_b[i]
    };
    let threshold = |x: &DVector<f64>, i: usize| -> f64 {
        let row = problem.ineq_a.row(i);
        let scale = 1.0_f64
            .max(problem.ineq_b[i].abs())
            .max(row.amax() * x.amax());
        opts.feasibility_tolerance * scale
    };

    'outer: loop {
        // Most violated row enters; strict comparison keeps the lowest index on ties.
        let mut entering = None;
        let mut worst = 0.0;
        for i in 0..nc {
            if active.contains(&i) {
                continue;
            }
            let v = violation(&x, i);
            if v > threshold(&x, i) && v > worst {
                worst = v;
                entering = Some(i);
            }
        }
        let Some(p) = entering else {
            break;
        };
        let mut lambda_p = 0.0;

        loop {
            if iterations >= cap {
                return finish(problem, x, &active, &lambda, QpStatus::MaxIter, iterations);
            }
            iterations += 1;

            let n_p = problem.ineq_a.row(p).transpose();
            let d = lower_solve(&l, &n_p);
            let (r, resid) = if active.is_empty() {
                (DVector::zeros(0), d.clone())
            } else {
                let mut n_act = DMatrix::zeros(m, active.len());
                for (c, &i) in active.iter().enumerate() {
                    n_act.set_column(c, &problem.ineq_a.row(i).transpose());
                }
                let b = l
                    .solve_lower_triangular(&n_act)
                    .expect("cholesky factor is regular");
                let r = b
                    .clone()
                    .svd(true, true)
                    .solve(&d, 1e-14 * b.amax().max(1.0))
                    .expect("svd with both factors");
                let resid = &d - &b * &r;
                (r, resid)
            };
            let z = -l
                .transpose()
                .solve_upper_triangular(&resid)
                .expect("cholesky factor is regular");

            // Partial step: largest t keeping active multipliers non-negative.
            let mut t1 = f64::INFINITY;
            let mut leaving = None;
            for (c, &ri) in r.iter().enumerate() {
                if ri > 0.0 {
                    let t = lambda[c] / ri;
                    if t < t1 {
                        t1 = t;
                        leaving = Some(c);
                    }
                }
            }
            let rn2 = resid.norm_squared();
            let t2 = if rn2.sqrt() <= 1e-10 * d.norm() {
                f64::INFINITY
            } else {
                violation(&x, p) / rn2
            };

            if t1.is_infinite() && t2.is_infinite() {
                return finish(
                    problem,
                    x,
                    &active,
                    &lambda,
                    QpStatus::Infeasible,
                    iterations,
                );
            }
            let t = t1.min(t2);
            if t2.is_finite() {
                x += t * &z;
            }
            for (c, ri) in r.iter().enumerate() {
                lambda[c] -= t * ri;
            }
            lambda_p += t;

            if t2 <= t1 {
                active.push(p);
                lambda.push(lambda_p);
                continue 'outer;
            }
            let c = leaving.expect("partial step has a leaving row");
            active.remove(c);
            lambda.remove(c);
        }
    }

    finish(problem, x, &active, &lambda, QpStatus::Optimal, iterations)
}

fn lower_solve(l: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(rhs)
        .expect("cholesky factor is regular")
}

fn finish(
    problem: &QpProblem,
    x: DVector<f64>,
    active: &[usize],
    lambda: &[f64],
    status: QpStatus,
    iterations: usize,
) -> QpSolution {
    let nc = problem.n_constraints();
    let mut multipliers = DVector::zeros(nc);
    for (&i, &li) in active.iter().zip(lambda) {
        multipliers[i] = li.max(0.0);
    }
    let mut w = x;
    if status == QpStatus::Optimal && !active.is_empty() {
        if let Some((pw, pl)) = polish(problem, active) {
            let mut pm = DVector::zeros(nc);
            for (&i, &li) in active.iter().zip(pl.iter()) {
                pm[i] = li;
            }
            if kkt_residual(problem, &pw, &pm) < kkt_residual(problem, &w, &multipliers) {
                w = pw;
                multipliers = pm;
            }
        }
    }
    let kkt = kkt_residual(problem, &w, &multipliers);
    let status = match status {
        QpStatus::Optimal if kkt >= KKT_TOLERANCE => QpStatus::MaxIter,
        s => s,
    };
    let mut active_set = active.to_vec();
    active_set.sort_unstable();
    QpSolution {
        w,
        active_set,
        multipliers,
        kkt_residual: kkt,
        status,
        iterations,
    }
}

/// Re-solve the equality-constrained problem on the final working set.
fn polish(problem: &QpProblem, active: &[usize]) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = problem.dim();
    let na = active.len();
    let mut kkt = DMatrix::zeros(m + na, m + na);
    kkt.view_mut((0, 0), (m, m)).copy_from(&problem.metric);
    let mut rhs = DVector::zeros(m + na);
    rhs.rows_mut(0, m)
        .copy_from(&(-(&problem.metric * &problem.gradient_term)));
    for (c, &i) in active.iter().enumerate() {
        for j in 0..m {
            let a = problem.ineq_a[(i, j)];
            kkt[(j, m + c)] = a;
            kkt[(m + c, j)] = a;
        }
        rhs[m + c] = problem.ineq_b[i];
    }
    let sol = kkt.lu().solve(&rhs)?;
    let w = sol.rows(0, m).into_owned();
    let lambda: DVector<f64> = sol.rows(m, na).into_owned();
    if lambda.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return None;
    }
    Some((w, lambda))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spd(seed: &[f64], m: usize) -> DMatrix<f64> {
        let a = DMatrix::from_fn(m, m, |i, j| seed[(i * m + j) % seed.len()]);
        &a * a.transpose() + DMatrix::identity(m, m) * 0.5
    }

    /// Projected gradient on the dual: max over λ ≥ 0 of
    /// -½ λᵀ A G⁻¹ Aᵀ λ - λᵀ(b + A g), then w = -g - G⁻¹Aᵀλ.
    fn dual_projected_gradient(problem: &QpProblem) -> DVector<f64> {
        let g_inv = problem.metric.clone().try_inverse().unwrap();
        let a = &problem.ineq_a;
        let q = a * &g_inv * a.transpose();
        let c = &problem.ineq_b + a * &problem.gradient_term;
        let step = 1.0 / q.norm().max(1e-12);
        let mut lambda = DVector::zeros(problem.n_constraints());
        for _ in 0..2_000_000 {
            let grad = &q * &lambda + &c;
            let next = (&lambda - step * &grad).map(|v: f64| v.max(0.0));
            let moved = (&next - &lambda).amax();
            lambda = next;
            if moved < 1e-13 {
                break;
            }
        }
        -&problem.gradient_term - &g_inv * a.transpose() * lambda
    }

    #[test]
    fn unconstrained_returns_negative_gradient_term() {
        let g = DVector::from_vec(vec![0.3, -1.2, 4.0]);
        let p = QpProblem::unconstrained(DMatrix::identity(3, 3) * 2.0, g.clone()).unwrap();
        let sol = solve_qp(&p);
        assert_eq!(sol.w, -g);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!(sol.active_set.is_empty());
    }

    #[test]
    fn scalar_clip() {
        let p = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::from_vec(vec![-2.0]),
            DMatrix::from_vec(1, 1, vec![1.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let sol = solve_qp(&p);
        assert!((sol.w[0] - 1.0).abs() < 1e-14);
        assert_eq!(sol.active_set, vec![0]);
        // ½-scaled stationarity: (w + g) + λ = 0.
        assert!((sol.multipliers[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        let p = QpProblem::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::from_vec(2, 1, vec![1.0, -1.0]),
            DVector::from_vec(vec![-1.0, -1.0]),
        )
        .unwrap();
        assert_eq!(solve_qp(&p).status, QpStatus::Infeasible);
    }

    #[test]
    fn ties_pick_lowest_row() {
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-1.0, -1.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            DVector::zeros(2),
        )
        .unwrap();
        let sol = solve_qp(&p);
        assert_eq!(sol.active_set, vec![0, 1]);
        assert!(sol.w.amax() < 1e-14);
    }

    #[test]
    fn degenerate_duplicate_rows_are_handled() {
        let p = QpProblem::new(
            DMatrix::identity(2, 2),
            DVector::from_vec(vec![-1.0, -1.0]),
            DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 2.0, 0.0]),
            DVector::from_vec(vec![0.5, 0.5, 1.0]),
        )
        .unwrap();
        let sol = solve_qp(&p);
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.w[0] - 0.5).abs() < 1e-12 && (sol.w[1] - 1.0).abs() < 1e-12);
    }

    fn random_problem() -> impl Strategy<Value = QpProblem> {
        (1usize..=6, 0usize..=12).prop_flat_map(|(m, rows)| {
            (
                prop::collection::vec(-1.0f64..1.0, m * m),
                prop::collection::vec(-2.0f64..2.0, m),
                prop::collection::vec(-1.0f64..1.0, rows * m),
                prop::collection::vec(0.0f64..1.0, rows),
            )
                .prop_map(move |(gs, g, a, b)| {
                    // Non-negative right-hand side keeps w = 0 feasible.
                    QpProblem::new(
                        spd(&gs, m),
                        DVector::from_vec(g),
                        DMatrix::from_row_slice(rows, m, &a),
                        DVector::from_vec(b),
                    )
                    .unwrap()
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn optimal_returns_carry_kkt_certificate(p in random_problem()) {
            let sol = solve_qp(&p);
            prop_assert_eq!(sol.status, QpStatus::Optimal);
            prop_assert!(sol.kkt_residual < KKT_TOLERANCE);
            let slack = &p.ineq_a * &sol.w - &p.ineq_b;
            prop_assert!(slack.iter().all(|s| *s <= 1e-9));
        }

        #[test]
        fn agrees_with_dual_projected_gradient(p in random_problem()) {
            let sol = solve_qp(&p);
            let oracle = dual_projected_gradient(&p);
            prop_assert!((&sol.w - &oracle).amax() < 1e-6, "{} vs {}", sol.w, oracle);
        }

        #[test]
        fn adding_a_row_never_lowers_the_optimum(p in random_problem(), extra in prop::collection::vec(-1.0f64..1.0, 6), rhs in 0.0f64..1.0) {
            let m = p.dim();
            let base = solve_qp(&p);
            let mut a = p.ineq_a.clone().insert_row(p.n_constraints(), 0.0);
            for j in 0..m {
                a[(p.n_constraints(), j)] = extra[j];
            }
            let b = p.ineq_b.clone().insert_row(p.n_constraints(), rhs);
            let tighter = QpProblem::new(p.metric.clone(), p.gradient_term.clone(), a, b).unwrap();
            let sol = solve_qp(&tighter);
            let (f0, f1) = (p.objective(&base.w), tighter.objective(&sol.w));
            prop_assert!(f1 >= f0 - 1e-9 * f0.abs().max(1.0));
        }

        #[test]
        fn consistent_metric_rescaling_keeps_minimizer(p in random_problem(), c in 0.1f64..10.0) {
            // Metric and raw gradient scaled together: the rebuilt gradient term
            // is unchanged and the objective only picks up the factor c.
            let raw = &p.metric * &p.gradient_term * c;
            let metric = &p.metric * c;
            let g = metric.clone().cholesky().unwrap().solve(&raw);
            let scaled = QpProblem::new(metric, g, p.ineq_a.clone(), p.ineq_b.clone()).unwrap();
            let (a, b) = (solve_qp(&p), solve_qp(&scaled));
            prop_assert!((&a.w - &b.w).amax() < 1e-10);
        }
    }
}

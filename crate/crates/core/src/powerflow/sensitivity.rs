//! Input-output sensitivities `∂y/∂u` at a converged operating point.
//!
//! Each actuator input perturbs the specified injection at one bus, so a
//! column of `∂[θ; |V|]/∂u` is a single solve with the power-flow Jacobian
//! against a unit right-hand side. Branch and PCC rows follow by the chain
//! rule through the complex voltages.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::newton::jacobian;
use super::PowerFlowSolution;
use crate::error::{Error, Result};
use crate::grid::{branch_admittances, build_admittance, BranchAdmittance, BusKind, Network};

/// Smallest admissible ratio of LU pivots before the Jacobian is treated as
/// singular.
const PIVOT_RATIO_MIN: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputKind {
    /// Voltage magnitude at a bus id.
    Voltage {
        bus: usize,
    },
    /// Sending-end apparent power of a branch index.
    BranchFlow {
        branch: usize,
    },
    PccP,
    PccQ,
}

/// Ordered set of monitored outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub rows: Vec<OutputKind>,
}

impl OutputSpec {
    /// Every non-slack voltage, every branch with a thermal limit, and the
    /// PCC active/reactive flow when the network marks one.
    pub fn default_for(network: &Network) -> OutputSpec {
        let mut rows: Vec<OutputKind> = network
            .buses
            .iter()
            .filter(|b| b.kind != BusKind::Slack)
            .map(|b| OutputKind::Voltage { bus: b.id })
            .collect();
        rows.extend(
            network
                .branches
                .iter()
                .enumerate()
                .filter(|(_, br)| br.s_max.is_some())
                .map(|(k, _)| OutputKind::BranchFlow { branch: k }),
        );
        if network.pcc_branch.is_some() {
            rows.push(OutputKind::PccP);
            rows.push(OutputKind::PccQ);
        }
        OutputSpec { rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row positions of the PCC `(p, q)` outputs.
    pub fn pcc_rows(&self) -> Option<(usize, usize)> {
        let p = self.rows.iter().position(|r| *r == OutputKind::PccP)?;
        let q = self.rows.iter().position(|r| *r == OutputKind::PccQ)?;
        Some((p, q))
    }

    pub fn labels(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| match r {
                OutputKind::Voltage { bus } => format!("vm_{bus}"),
                OutputKind::BranchFlow { branch } => format!("s_{branch}"),
                OutputKind::PccP => "pcc_p".into(),
                OutputKind::PccQ => "pcc_q".into(),
            })
            .collect()
    }

    /// Read the monitored outputs off a solution.
    pub fn measure(&self, network: &Network, sol: &PowerFlowSolution) -> Result<DVector<f64>> {
        let mut y = DVector::zeros(self.rows.len());
        for (i, row) in self.rows.iter().enumerate() {
            y[i] = match *row {
                OutputKind::Voltage { bus } => sol.v[network.bus_pos(bus)?].norm(),
                OutputKind::BranchFlow { branch } => sol.branch_flows[branch].s,
                OutputKind::PccP => pcc(sol)?.0,
                OutputKind::PccQ => pcc(sol)?.1,
            };
        }
        Ok(y)
    }

    /// `(lower, upper)` limits per row; PCC rows are unconstrained.
    pub fn bounds(&self, network: &Network) -> Result<Vec<(Option<f64>, Option<f64>)>> {
        self.rows
            .iter()
            .map(|row| {
                Ok(match *row {
                    OutputKind::Voltage { bus } => {
                        let b = &network.buses[network.bus_pos(bus)?];
                        (Some(b.v_min), Some(b.v_max))
                    }
                    OutputKind::BranchFlow { branch } => (None, network.branches[branch].s_max),
                    OutputKind::PccP | OutputKind::PccQ => (None, None),
                })
            })
            .collect()
    }
}

fn pcc(sol: &PowerFlowSolution) -> Result<(f64, f64)> {
    sol.pcc_flow.ok_or_else(|| {
        Error::Dimension("PCC output requested but network has no pcc_branch".into())
    })
}

/// Linear map from stacked actuator inputs `[p; q]` to monitored outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrix {
    pub matrix: DMatrix<f64>,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
}

impl SensitivityMatrix {
    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }
}

pub fn compute_sensitivities(
    network: &Network,
    sol: &PowerFlowSolution,
    outputs: &OutputSpec,
) -> Result<SensitivityMatrix> {
    let n = network.buses.len();
    if sol.v.len() != n {
        return Err(Error::Dimension("solution does not match network".into()));
    }
    let y = build_admittance(network)?;
    let slack = network.slack_position().expect("validated");
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let np = pq.len();
    // position of each bus in the reduced unknown vector
    let mut reduced = vec![None; n];
    for (r, &i) in pq.iter().enumerate() {
        reduced[i] = Some(r);
    }

    let lu = jacobian(&y, &sol.v, &pq).lu();
    let pivots = lu.u().diagonal().map(f64::abs);
    let (pmin, pmax) = (pivots.min(), pivots.max());
    if np > 0 && !(pmin > PIVOT_RATIO_MIN * pmax) {
        return Err(Error::IllConditioned(format!(
            "power-flow Jacobian pivot ratio {:.3e}",
            pmin / pmax
        )));
    }

    let m = network.actuators.len();
    let mut rhs = DMatrix::zeros(2 * np, 2 * m);
    for (a, act) in network.actuators.iter().enumerate() {
        let r = reduced[network.bus_pos(act.bus)?].ok_or_else(|| {
            Error::InvalidNetwork(format!("actuator '{}' sits on the slack bus", act.label))
        })?;
        rhs[(r, a)] = 1.0;
        rhs[(np + r, m + a)] = 1.0;
    }
    let dx = lu
        .solve(&rhs)
        .ok_or_else(|| Error::IllConditioned("singular power-flow Jacobian".into()))?;

    let branches = branch_admittances(network)?;
    let j = Complex64::new(0.0, 1.0);
    let mut matrix = DMatrix::zeros(outputs.len(), 2 * m);
    let mut dv = vec![Complex64::new(0.0, 0.0); n];
    for c in 0..2 * m {
        for (r, &i) in pq.iter().enumerate() {
            let unit = sol.v[i] / sol.v[i].norm();
            dv[i] = j * sol.v[i] * dx[(r, c)] + unit * dx[(np + r, c)];
        }
        for (row, kind) in outputs.rows.iter().enumerate() {
            matrix[(row, c)] = match *kind {
                OutputKind::Voltage { bus } => match reduced[network.bus_pos(bus)?] {
                    Some(r) => dx[(np + r, c)],
                    None => 0.0,
                },
                OutputKind::BranchFlow { branch } => {
                    let ds = flow_derivative(&branches[branch], &sol.v, &dv);
                    let f = sol.branch_flows[branch];
                    if f.s > 0.0 {
                        (f.p * ds.re + f.q * ds.im) / f.s
                    } else {
                        0.0
                    }
                }
                OutputKind::PccP | OutputKind::PccQ => {
                    let k = network.pcc_branch.ok_or_else(|| {
                        Error::Dimension(
                            "PCC output requested but network has no pcc_branch".into(),
                        )
                    })?;
                    let ds = flow_derivative(&branches[k], &sol.v, &dv);
                    if *kind == OutputKind::PccP {
                        ds.re
                    } else {
                        ds.im
                    }
                }
            };
        }
    }
    if matrix.iter().any(|x| !x.is_finite()) {
        return Err(Error::IllConditioned("non-finite sensitivity".into()));
    }

    let col_labels = ["p", "q"]
        .iter()
        .flat_map(|pre| {
            network
                .actuators
                .iter()
                .map(move |a| format!("{pre}_{}", a.label))
        })
        .collect();
    Ok(SensitivityMatrix {
        matrix,
        row_labels: outputs.labels(),
        col_labels,
    })
}

/// Directional derivative of the sending-end complex power for voltage
/// perturbation `dv`.
fn flow_derivative(ba: &BranchAdmittance, v: &[Complex64], dv: &[Complex64]) -> Complex64 {
    let current = ba.y_ff * v[ba.from] + ba.y_ft * v[ba.to];
    let dcurrent = ba.y_ff * dv[ba.from] + ba.y_ft * dv[ba.to];
    dv[ba.from] * current.conj() + v[ba.from] * dcurrent.conj()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{cigre_mv_fixture, Actuator, Branch, Bus, Injection};
    use crate::powerflow::{solve_power_flow_with, PowerFlowOptions};

    fn tight() -> PowerFlowOptions {
        PowerFlowOptions {
            tolerance: 1e-12,
            max_iterations: 30,
        }
    }

    fn two_bus_with_actuators(n_act: usize) -> Network {
        Network {
            name: String::new(),
            base_mva: 1.0,
            buses: vec![Bus::slack(0, 1.0), Bus::pq(1, 1.0)],
            branches: vec![Branch::line(0, 1, Complex64::new(0.0, 0.1))],
            actuators: (0..n_act)
                .map(|i| Actuator {
                    bus: 1,
                    p_min: -1.0,
                    p_max: 1.0,
                    q_min: -1.0,
                    q_max: 1.0,
                    p_nominal: 0.0,
                    label: format!("a{i}"),
                })
                .collect(),
            injections: vec![Injection {
                bus: 1,
                p: 0.0,
                q: -0.1,
            }],
            pcc_branch: Some(0),
        }
    }

    #[test]
    fn two_bus_reactive_sensitivity() {
        // Injection convention: dV/dq_inj = x / (2V - 1) ≈ x / |V| near 1 pu
        // (a load increase has the opposite sign).
        let net = two_bus_with_actuators(1);
        let u = net.nominal_inputs();
        let sol = solve_power_flow_with(&net, &u, None, &tight()).unwrap();
        let spec = OutputSpec::default_for(&net);
        let sens = compute_sensitivities(&net, &sol, &spec).unwrap();
        let v2 = sol.v[1].norm();
        let approx = 0.1 / v2;
        let dv_dq = sens.matrix[(0, 1)];
        assert!(
            ((dv_dq - approx) / approx).abs() < 0.05,
            "{dv_dq} vs {approx}"
        );
        let exact = 0.1 / (2.0 * v2 - 1.0);
        assert!((dv_dq - exact).abs() < 1e-10);
    }

    #[test]
    fn duplicate_actuators_give_identical_columns() {
        let net = two_bus_with_actuators(2);
        let sol = solve_power_flow_with(&net, &net.nominal_inputs(), None, &tight()).unwrap();
        let sens = compute_sensitivities(&net, &sol, &OutputSpec::default_for(&net)).unwrap();
        assert_eq!(sens.matrix.column(0), sens.matrix.column(1));
        assert_eq!(sens.matrix.column(2), sens.matrix.column(3));
    }

    #[test]
    fn default_outputs_cover_voltages_limits_and_pcc() {
        let net = cigre_mv_fixture();
        let spec = OutputSpec::default_for(&net);
        let n_v = net.buses.len() - 1;
        let n_s = net.branches.iter().filter(|b| b.s_max.is_some()).count();
        assert_eq!(spec.len(), n_v + n_s + 2);
        assert_eq!(spec.pcc_rows(), Some((n_v + n_s, n_v + n_s + 1)));
    }

    #[test]
    fn central_differences_agree_on_fixture() {
        let net = cigre_mv_fixture();
        let u = net.nominal_inputs();
        let spec = OutputSpec::default_for(&net);
        let sol = solve_power_flow_with(&net, &u, None, &tight()).unwrap();
        let sens = compute_sensitivities(&net, &sol, &spec).unwrap();
        // Large enough that the solver's mismatch floor (~1e-12 on stiff MV
        // branches) stays well below the difference quotient.
        let h = 1e-4;
        for c in 0..u.len() {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[c] += h;
            dn[c] -= h;
            let yp = spec
                .measure(
                    &net,
                    &solve_power_flow_with(&net, &up, Some(&sol.v), &tight()).unwrap(),
                )
                .unwrap();
            let yn = spec
                .measure(
                    &net,
                    &solve_power_flow_with(&net, &dn, Some(&sol.v), &tight()).unwrap(),
                )
                .unwrap();
            let col_scale = sens.matrix.column(c).amax();
            for r in 0..spec.len() {
                let fd = (yp[r] - yn[r]) / (2.0 * h);
                let an = sens.matrix[(r, c)];
                let rel = (fd - an).abs() / an.abs().max(1e-3 * col_scale);
                assert!(
                    rel < 1e-4,
                    "{} / {}: fd {fd} vs {an}",
                    sens.row_labels[r],
                    sens.col_labels[c]
                );
            }
        }
    }
}

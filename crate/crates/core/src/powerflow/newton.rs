//! Polar Newton–Raphson AC power flow.
//!
//! Unknowns are the angles and magnitudes of every non-slack bus; the
//! mismatch is `S_calc(V) - S_spec(u)` on the same buses. The full Jacobian
//! is rebuilt and LU-factorized each iteration (dense, partial pivoting).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{BranchFlow, PowerFlowSolution};
use crate::error::{Error, Result};
use crate::grid::{branch_admittances, build_admittance, Network};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerFlowOptions {
    /// Convergence threshold on the ∞-norm of the power mismatch [pu].
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        PowerFlowOptions {
            tolerance: 1e-10,
            max_iterations: 30,
        }
    }
}

/// Solve with default options.
pub fn solve_power_flow(
    network: &Network,
    u: &DVector<f64>,
    start: Option<&[Complex64]>,
) -> Result<PowerFlowSolution> {
    solve_power_flow_with(network, u, start, &PowerFlowOptions::default())
}

pub fn solve_power_flow_with(
    network: &Network,
    u: &DVector<f64>,
    start: Option<&[Complex64]>,
    opts: &PowerFlowOptions,
) -> Result<PowerFlowSolution> {
    let y = build_admittance(network)?;
    let s_spec = network.bus_injections(u)?;
    let n = network.buses.len();
    let slack = network
        .slack_position()
        .expect("validated network has a slack");
    let pq: Vec<usize> = (0..n).filter(|&i| i != slack).collect();
    let np = pq.len();

    let v_slack = network.buses[slack].v_nominal;
    let (mut vm, mut va): (Vec<f64>, Vec<f64>) = match start {
        Some(v0) if v0.len() == n => v0.iter().map(|v| (v.norm(), v.arg())).unzip(),
        _ => network.buses.iter().map(|_| (1.0, 0.0)).unzip(),
    };
    vm[slack] = v_slack;
    va[slack] = 0.0;

    let mut iterations = 0;
    loop {
        let v: Vec<Complex64> = (0..n)
            .map(|i| Complex64::from_polar(vm[i], va[i]))
            .collect();
        let current = &y * DVector::from_column_slice(&v);
        let mut mismatch = DVector::zeros(2 * np);
        for (r, &i) in pq.iter().enumerate() {
            let s = v[i] * current[i].conj() - s_spec[i];
            mismatch[r] = s.re;
            mismatch[np + r] = s.im;
        }
        let norm = mismatch.amax();
        if !norm.is_finite() {
            return Err(Error::Diverged {
                iterations,
                residual: norm,
            });
        }
        if norm < opts.tolerance {
            return finish(network, &v, norm, iterations);
        }
        if iterations == opts.max_iterations {
            return Err(Error::Diverged {
                iterations,
                residual: norm,
            });
        }

        let jac = jacobian(&y, &v, &pq);
        let dx = jac.lu().solve(&(-mismatch)).ok_or(Error::Diverged {
            iterations,
            residual: norm,
        })?;
        for (r, &i) in pq.iter().enumerate() {
            va[i] += dx[r];
            vm[i] += dx[np + r];
        }
        iterations += 1;
    }
}

fn finish(
    network: &Network,
    v: &[Complex64],
    mismatch_norm: f64,
    iterations: usize,
) -> Result<PowerFlowSolution> {
    let branch_flows: Vec<BranchFlow> = branch_admittances(network)?
        .iter()
        .map(|ba| {
            let s = v[ba.from] * (ba.y_ff * v[ba.from] + ba.y_ft * v[ba.to]).conj();
            BranchFlow {
                p: s.re,
                q: s.im,
                s: s.norm(),
            }
        })
        .collect();
    let pcc_flow = network
        .pcc_branch
        .map(|k| (branch_flows[k].p, branch_flows[k].q));
    Ok(PowerFlowSolution {
        v: v.to_vec(),
        branch_flows,
        pcc_flow,
        mismatch_norm,
        iterations,
    })
}

/// Power-flow Jacobian `∂[P; Q]/∂[θ; |V|]` restricted to the buses in `pq`.
pub(crate) fn jacobian(y: &DMatrix<Complex64>, v: &[Complex64], pq: &[usize]) -> DMatrix<f64> {
    let n = v.len();
    let np = pq.len();
    let current: Vec<Complex64> = (0..n)
        .map(|i| (0..n).map(|k| y[(i, k)] * v[k]).sum())
        .collect();
    let unit: Vec<Complex64> = v.iter().map(|vi| vi / vi.norm()).collect();
    let j = Complex64::new(0.0, 1.0);

    let mut jac = DMatrix::zeros(2 * np, 2 * np);
    for (r, &i) in pq.iter().enumerate() {
        for (c, &k) in pq.iter().enumerate() {
            let diag = if i == k {
                current[i]
            } else {
                Complex64::new(0.0, 0.0)
            };
            let ds_dva = j * v[i] * (diag - y[(i, k)] * v[k]).conj();
            let mut ds_dvm = v[i] * (y[(i, k)] * unit[k]).conj();
            if i == k {
                ds_dvm += current[i].conj() * unit[i];
            }
            jac[(r, c)] = ds_dva.re;
            jac[(r, np + c)] = ds_dvm.re;
            jac[(np + r, c)] = ds_dva.im;
            jac[(np + r, np + c)] = ds_dvm.im;
        }
    }
    jac
}

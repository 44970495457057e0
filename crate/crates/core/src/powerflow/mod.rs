//! AC power flow (the plant) and its linearization.

mod newton;
mod sensitivity;

pub use newton::{solve_power_flow, solve_power_flow_with, PowerFlowOptions};
pub use sensitivity::{compute_sensitivities, OutputKind, OutputSpec, SensitivityMatrix};

use num_complex::Complex64;

/// Sending-end flow of one branch [pu].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchFlow {
    pub p: f64,
    pub q: f64,
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowSolution {
    /// Complex bus voltages in bus order.
    pub v: Vec<Complex64>,
    pub branch_flows: Vec<BranchFlow>,
    /// `(p, q)` entering the network through the PCC branch, if marked.
    pub pcc_flow: Option<(f64, f64)>,
    pub mismatch_norm: f64,
    pub iterations: usize,
}

impl PowerFlowSolution {
    pub fn vm(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.norm()).collect()
    }
}

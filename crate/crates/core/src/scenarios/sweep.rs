use rayon::prelude::*;

use super::{run_scenario_with, RunOptions, Scenario};
use crate::error::{Error, Result};

/// `α ∈ {0.009, 0.018, …, 0.09}`.
pub fn default_alphas() -> Vec<f64> {
    (1..=10).map(|i| f64::from(9 * i) / 1000.0).collect()
}

/// `β ∈ {0.4, 0.5, …, 1.0}`.
pub fn default_betas() -> Vec<f64> {
    (4..=10).map(|i| f64::from(i) / 10.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub settled_at: Option<usize>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Alpha-major: all betas of the first alpha come first.
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, alpha_idx: usize, beta_idx: usize) -> &SweepCell {
        &self.cells[alpha_idx * self.betas.len() + beta_idx]
    }
}

/// Run the root layer of `base` at every `(α, β)` pair; everything else stays
/// fixed. Cells are independent and run in parallel.
pub fn parameter_sweep(base: &Scenario, alphas: &[f64], betas: &[f64]) -> Result<SweepResult> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(Error::Parameter(
            "sweep needs at least one alpha and one beta".into(),
        ));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a <= 1.0)) {
        return Err(Error::Parameter(format!(
            "alpha must lie in (0, 1], got {a}"
        )));
    }
    if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
        return Err(Error::Parameter(format!(
            "beta must lie in (0, 1], got {b}"
        )));
    }
    if base.final_setpoint().is_none() {
        return Err(Error::Scenario("sweeps need a tracking root layer".into()));
    }
    let grid: Vec<(f64, f64)> = alphas
        .iter()
        .flat_map(|&a| betas.iter().map(move |&b| (a, b)))
        .collect();
    let cells = grid
        .par_iter()
        .map(|&(alpha, beta)| run_cell(base, alpha, beta))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        cells,
    })
}

fn run_cell(base: &Scenario, alpha: f64, beta: f64) -> Result<SweepCell> {
    let mut sc = base.clone();
    let root = sc.root_layer_mut();
    root.alpha = alpha;
    root.beta = beta;
    let traj = run_scenario_with(
        &sc,
        &RunOptions {
            stop_when_settled: true,
        },
    )?;
    Ok(SweepCell {
        alpha,
        beta,
        settled_at: traj.settled_at,
        converged: traj.converged(),
    })
}

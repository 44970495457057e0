use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::build::{build_tree, objective_for};
use super::{Event, EventKind, ObjectiveConfig, Scenario};
use crate::controller::{objective_value, ObjectiveSpec, StepRecord};
use crate::error::{Error, Result};
use crate::grid::Injection;
use crate::hierarchy::{hierarchy_tick, InterfaceMessage, LayerTree, MeasurementNoise};
use crate::qp::{ConstraintSpec, QpStatus};

/// Slack on output bounds when counting violations [pu].
pub const BAND_TOLERANCE: f64 = 1e-6;

/// Factor on total actuator capacity beyond which a run counts as diverged.
const DIVERGENCE_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct StepSummary {
    pub sigma_norm: f64,
    pub qp_status: QpStatus,
    pub softened: bool,
    pub kkt_residual: f64,
    pub input_violation: f64,
    pub linearized_output_violation: f64,
    pub active_count: usize,
}

impl From<&StepRecord> for StepSummary {
    fn from(r: &StepRecord) -> Self {
        StepSummary {
            sigma_norm: r.sigma_norm,
            qp_status: r.qp_status,
            softened: r.softened,
            kkt_residual: r.kkt_residual,
            input_violation: r.input_violation,
            linearized_output_violation: r.linearized_output_violation,
            active_count: r.active.len(),
        }
    }
}

/// State of one layer at iteration `k`, plus the step taken from it.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub k: usize,
    pub u: Vec<f64>,
    /// True monitored outputs.
    pub y: Vec<f64>,
    pub vm: Vec<f64>,
    pub pcc: Option<(f64, f64)>,
    pub setpoint: Option<(f64, f64)>,
    pub phi: f64,
    pub violation_count: usize,
    /// Absent on the final row and when the step failed.
    pub step: Option<StepSummary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrajectory {
    pub name: String,
    pub bus_ids: Vec<usize>,
    pub actuator_labels: Vec<String>,
    pub output_labels: Vec<String>,
    pub output_bounds: Vec<(Option<f64>, Option<f64>)>,
    pub records: Vec<IterationRecord>,
}

impl LayerTrajectory {
    pub fn pcc_series(&self) -> Vec<(f64, f64)> {
        self.records.iter().filter_map(|r| r.pcc).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// One entry per layer, in scenario order.
    pub layers: Vec<LayerTrajectory>,
    pub root: usize,
    pub interfaces: Vec<InterfaceMessage>,
    /// Plant or controller broke down, or inputs blew past the guard.
    pub diverged: bool,
    pub failure: Option<String>,
    /// Settle index of the root PCC flow for tracking scenarios.
    pub settled_at: Option<usize>,
    pub reference: Option<(f64, f64)>,
}

impl Trajectory {
    pub fn root(&self) -> &LayerTrajectory {
        &self.layers[self.root]
    }

    pub fn layer(&self, name: &str) -> Option<&LayerTrajectory> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Tracking runs must settle; every run must stay clear of the guard.
    pub fn converged(&self) -> bool {
        !self.diverged && (self.reference.is_none() || self.settled_at.is_some())
    }

    pub fn softened_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| &l.records)
            .filter(|r| r.step.as_ref().is_some_and(|s| s.softened))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// End the run once the root settle index is known.
    pub stop_when_settled: bool,
}

/// First `k` with `‖pcc_j - reference‖ ≤ eps` for all `j` in `k..k+hold`.
fn settle_index(pcc: &[(f64, f64)], reference: (f64, f64), eps: f64, hold: usize) -> Option<usize> {
    let hold = hold.max(1);
    let mut run = 0;
    for (k, &(p, q)) in pcc.iter().enumerate() {
        if (p - reference.0).hypot(q - reference.1) <= eps {
            run += 1;
            if run == hold {
                return Some(k + 1 - hold);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// Settle index of the root PCC flow.
pub fn detect_settled(
    trajectory: &Trajectory,
    reference: (f64, f64),
    eps: f64,
    hold: usize,
) -> Option<usize> {
    settle_index(&trajectory.root().pcc_series(), reference, eps, hold)
}

struct GaussianNoise {
    rng: ChaCha8Rng,
    dist: Normal<f64>,
}

impl MeasurementNoise for GaussianNoise {
    fn perturb(&mut self, _layer: usize, y: &mut DVector<f64>) {
        for v in y.iter_mut() {
            *v += self.dist.sample(&mut self.rng);
        }
    }
}

pub fn run_scenario(scenario: &Scenario) -> Result<Trajectory> {
    run_scenario_with(scenario, &RunOptions::default())
}

pub fn run_scenario_with(scenario: &Scenario, opts: &RunOptions) -> Result<Trajectory> {
    let mut tree = build_tree(scenario)?;
    let mut noise = match scenario.noise {
        Some(n) if n.std > 0.0 => Some(GaussianNoise {
            rng: ChaCha8Rng::seed_from_u64(n.seed),
            dist: Normal::new(0.0, n.std).map_err(|e| Error::Scenario(e.to_string()))?,
        }),
        _ => None,
    };
    let reference = scenario.final_setpoint();
    let eps = scenario.settle_eps();
    let hold = scenario.settle.hold;

    let mut layers: Vec<LayerTrajectory> = tree
        .nodes
        .iter()
        .map(|n| LayerTrajectory {
            name: n.name.clone(),
            bus_ids: n.network.buses.iter().map(|b| b.id).collect(),
            actuator_labels: n
                .network
                .actuators
                .iter()
                .map(|a| a.label.clone())
                .collect(),
            output_labels: n.outputs.labels(),
            output_bounds: n.config.limits.output_bounds.clone(),
            records: Vec::new(),
        })
        .collect();
    let mut diverged = false;
    let mut failure = None;
    let mut settled_at = None;

    for k in 0..=scenario.max_iterations {
        for ev in scenario.events.iter().filter(|e| e.at_iteration == k) {
            apply_event(&mut tree, scenario, ev)?;
        }
        let solved = tree.solve_plants(k, noise.as_mut().map(|n| n as &mut dyn MeasurementNoise));
        if let Err(e) = solved {
            if is_breakdown(&e) {
                diverged = true;
                failure = Some(format!("k = {k}: {e}"));
                break;
            }
            return Err(e);
        }
        for (node, traj) in tree.nodes.iter().zip(layers.iter_mut()) {
            let sol = node.solution.as_ref().expect("plants solved");
            let y = node.measured.as_ref().expect("plants solved");
            traj.records.push(IterationRecord {
                k,
                u: node.state.u.iter().copied().collect(),
                y: y.iter().copied().collect(),
                vm: sol.vm(),
                pcc: sol.pcc_flow,
                setpoint: node.config.objective.setpoint(),
                phi: objective_value(&node.config.objective, &node.state.u, y),
                violation_count: count_violations(y, &node.config.limits.output_bounds),
                step: None,
            });
        }
        if let (Some(r), Some(e)) = (reference, eps) {
            if settled_at.is_none() {
                settled_at = settle_index(&layers[tree.root].pcc_series(), r, e, hold);
            }
            if opts.stop_when_settled && settled_at.is_some() {
                break;
            }
        }
        if k == scenario.max_iterations {
            break;
        }
        match hierarchy_tick(&mut tree, k) {
            Ok(records) => {
                for (traj, rec) in layers.iter_mut().zip(&records) {
                    traj.records.last_mut().expect("row pushed").step =
                        Some(StepSummary::from(rec));
                }
            }
            Err(e) if is_breakdown(&e) => {
                diverged = true;
                failure = Some(format!("k = {k}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        }
        if let Some(node) = tree.nodes.iter().find(|n| beyond_guard(n)) {
            diverged = true;
            failure = Some(format!(
                "k = {k}: inputs of layer '{}' left the divergence guard",
                node.name
            ));
            break;
        }
    }

    Ok(Trajectory {
        layers,
        root: tree.root,
        interfaces: tree.log,
        diverged,
        failure,
        settled_at,
        reference,
    })
}

fn is_breakdown(e: &Error) -> bool {
    matches!(
        e,
        Error::Diverged { .. } | Error::IllConditioned(_) | Error::QpInfeasible
    )
}

fn beyond_guard(node: &crate::hierarchy::LayerNode) -> bool {
    let capacity: f64 = node
        .network
        .actuators
        .iter()
        .map(|a| a.p_min.abs().max(a.p_max.abs()) + a.q_min.abs().max(a.q_max.abs()))
        .sum();
    let norm = node.state.u.norm();
    !norm.is_finite() || (norm > 0.0 && norm > DIVERGENCE_FACTOR * capacity)
}

fn count_violations(y: &DVector<f64>, bounds: &[(Option<f64>, Option<f64>)]) -> usize {
    y.iter()
        .zip(bounds)
        .filter(|(v, (lo, hi))| {
            lo.is_some_and(|lo| **v < lo - BAND_TOLERANCE)
                || hi.is_some_and(|hi| **v > hi + BAND_TOLERANCE)
        })
        .count()
}

fn apply_event(tree: &mut LayerTree, scenario: &Scenario, ev: &Event) -> Result<()> {
    let name = ev
        .layer
        .clone()
        .unwrap_or_else(|| scenario.root_layer().name.clone());
    let idx = tree
        .nodes
        .iter()
        .position(|n| n.name == name)
        .ok_or_else(|| Error::Scenario(format!("event refers to unknown layer '{name}'")))?;
    let spec = scenario
        .layers
        .iter()
        .find(|l| l.name == name)
        .expect("layer names match the scenario");
    let node = &mut tree.nodes[idx];
    match ev.kind {
        EventKind::ActuatorDisconnect => {
            let pos = node.network.actuator_position(&ev.target).ok_or_else(|| {
                Error::Scenario(format!("layer '{name}' has no actuator '{}'", ev.target))
            })?;
            if node.children.iter().any(|c| c.actuator == pos) {
                return Err(Error::Scenario(format!(
                    "'{}' is a child layer, not a device",
                    ev.target
                )));
            }
            let m = node.network.actuator_count();
            node.network.actuators[pos].disconnect();
            node.state.u[pos] = 0.0;
            node.state.u[m + pos] = 0.0;
            node.config.limits = ConstraintSpec::from_network(&node.network, &node.outputs)?;
            if let ObjectiveConfig::Congestion { .. } = spec.objective {
                node.config.objective =
                    objective_for(&node.network, &node.outputs, &spec.objective)?;
            }
        }
        EventKind::LoadStep => {
            let bus: usize = ev.target.parse().map_err(|_| {
                Error::Scenario(format!("load step target '{}' is not a bus id", ev.target))
            })?;
            node.network.bus_pos(bus)?;
            node.network.injections.push(Injection {
                bus,
                p: ev.payload[0],
                q: ev.payload[1],
            });
        }
        EventKind::SetpointChange => {
            if node.parent.is_some() {
                return Err(Error::Scenario(format!(
                    "layer '{name}' receives its set point from its parent"
                )));
            }
            match &mut node.config.objective {
                ObjectiveSpec::Tracking { p_set, q_set, .. } => {
                    *p_set = ev.payload[0];
                    *q_set = ev.payload[1];
                }
                ObjectiveSpec::Congestion { .. } => {
                    return Err(Error::Scenario(format!(
                        "layer '{name}' does not track a set point"
                    )));
                }
            }
        }
    }
    Ok(())
}

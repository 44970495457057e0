//! Cascaded controllers across grid layers.
//!
//! Every layer runs its own controller on its own network. A parent sees each
//! child as one `(p, q)` actuator at the coupling bus; its box is the child's
//! aggregated flexibility. Per tick, plants are solved children first (a
//! parent's plant carries each child as a lumped injection equal to the
//! child's measured PCC exchange), measurements travel up, every controller
//! steps, and the parent's new child inputs travel down as next-tick set
//! points.

use nalgebra::DVector;

use crate::controller::{
    controller_step, pgd_step, ControllerConfig, ControllerState, ObjectiveSpec, SensitivityPolicy,
    StepRecord,
};
use crate::error::{Error, Result};
use crate::grid::Network;
use crate::powerflow::{
    compute_sensitivities, solve_power_flow, OutputSpec, PowerFlowSolution, SensitivityMatrix,
};

/// A child layer and the position of its actuator in the parent's actuator list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChildLink {
    pub node: usize,
    pub actuator: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub network: Network,
    pub outputs: OutputSpec,
    pub config: ControllerConfig,
    pub state: ControllerState,
    pub parent: Option<usize>,
    pub children: Vec<ChildLink>,
    /// Latest plant solution at `state.u`.
    pub solution: Option<PowerFlowSolution>,
    /// Latest true outputs.
    pub measured: Option<DVector<f64>>,
    /// Outputs handed to the controller (noise included).
    pub observed: Option<DVector<f64>>,
    frozen: Option<SensitivityMatrix>,
    /// Latest `(p, q)` import reported by each child, in `children` order.
    child_flows: Vec<(f64, f64)>,
}

impl LayerNode {
    pub fn new(
        name: impl Into<String>,
        network: Network,
        outputs: OutputSpec,
        config: ControllerConfig,
        state: ControllerState,
    ) -> LayerNode {
        LayerNode {
            name: name.into(),
            network,
            outputs,
            config,
            state,
            parent: None,
            children: Vec::new(),
            solution: None,
            measured: None,
            observed: None,
            frozen: None,
            child_flows: Vec::new(),
        }
    }

    /// Input vector seen by the physical plant: child actuators are replaced
    /// by the reported child exchange.
    fn plant_inputs(&self) -> DVector<f64> {
        let m = self.network.actuator_count();
        let mut u = self.state.u.clone();
        for (link, &(p, q)) in self.children.iter().zip(&self.child_flows) {
            u[link.actuator] = -p;
            u[m + link.actuator] = -q;
        }
        u
    }

    /// PCC exchange `(p, q)` of the latest plant solution.
    pub fn pcc_flow(&self) -> Option<(f64, f64)> {
        self.solution.as_ref().and_then(|s| s.pcc_flow)
    }

    /// Drop the frozen linearization so the next tick re-linearizes.
    pub fn invalidate_sensitivities(&mut self) {
        self.frozen = None;
    }
}

/// Box `(p_min, p_max, q_min, q_max)` a child can offer at its PCC, in the
/// parent's injection convention: sum of actuator boxes plus uncontrolled
/// injections (losses neglected).
pub fn aggregate_child_flexibility(child: &LayerNode) -> (f64, f64, f64, f64) {
    aggregate_flexibility(&child.network)
}

pub fn aggregate_flexibility(net: &Network) -> (f64, f64, f64, f64) {
    let base_p: f64 = net.injections.iter().map(|i| i.p).sum();
    let base_q: f64 = net.injections.iter().map(|i| i.q).sum();
    net.actuators
        .iter()
        .fold((base_p, base_p, base_q, base_q), |acc, a| {
            (
                acc.0 + a.p_min,
                acc.1 + a.p_max,
                acc.2 + a.q_min,
                acc.3 + a.q_max,
            )
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    SetpointDown,
    MeasurementUp,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::SetpointDown => "setpoint_down",
            Direction::MeasurementUp => "measurement_up",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceMessage {
    pub tick: usize,
    /// Node id of the child end of the link.
    pub link: usize,
    pub direction: Direction,
    pub p: f64,
    pub q: f64,
}

/// Measurement perturbation applied to controller inputs.
pub trait MeasurementNoise {
    fn perturb(&mut self, layer: usize, y: &mut DVector<f64>);
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTree {
    pub nodes: Vec<LayerNode>,
    pub root: usize,
    pub log: Vec<InterfaceMessage>,
    /// Run the momentum-free projected-gradient step instead.
    pub plain_pgd: bool,
    /// Children before parents.
    order: Vec<usize>,
}

impl LayerTree {
    /// Single layer without children.
    pub fn single(node: LayerNode) -> Result<LayerTree> {
        LayerTree::new(vec![node])
    }

    /// Link `nodes` by their `parent`/`children` fields and check the tree.
    pub fn new(nodes: Vec<LayerNode>) -> Result<LayerTree> {
        let n = nodes.len();
        let roots: Vec<usize> = (0..n).filter(|&i| nodes[i].parent.is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::Hierarchy(format!(
                "expected one root layer, found {}",
                roots.len()
            )));
        }
        let root = roots[0];
        for (i, node) in nodes.iter().enumerate() {
            if let Some(p) = node.parent {
                if p >= n || p == i {
                    return Err(Error::Hierarchy(format!(
                        "layer '{}' has an invalid parent",
                        node.name
                    )));
                }
                if !nodes[p].children.iter().any(|c| c.node == i) {
                    return Err(Error::Hierarchy(format!(
                        "layer '{}' is not listed as a child of '{}'",
                        node.name, nodes[p].name
                    )));
                }
            }
            let mut seen = std::collections::BTreeSet::new();
            for link in &node.children {
                if link.node >= n || nodes[link.node].parent != Some(i) {
                    return Err(Error::Hierarchy(format!(
                        "layer '{}' lists a foreign child",
                        node.name
                    )));
                }
                if link.actuator >= node.network.actuator_count() || !seen.insert(link.actuator) {
                    return Err(Error::Hierarchy(format!(
                        "layer '{}' has an invalid child actuator index {}",
                        node.name, link.actuator
                    )));
                }
            }
            if node.parent.is_some() && node.network.pcc_branch.is_none() {
                return Err(Error::Hierarchy(format!(
                    "child layer '{}' has no PCC branch",
                    node.name
                )));
            }
        }
        // Post-order walk from the root; anything unreached sits on a cycle.
        let mut order = Vec::with_capacity(n);
        let mut stack = vec![(root, false)];
        while let Some((i, expanded)) = stack.pop() {
            if expanded {
                order.push(i);
                continue;
            }
            if order.len() + stack.len() > n {
                return Err(Error::Hierarchy("layer graph contains a cycle".into()));
            }
            stack.push((i, true));
            for link in nodes[i].children.iter().rev() {
                stack.push((link.node, false));
            }
        }
        if order.len() != n {
            return Err(Error::Hierarchy("layer graph is not a tree".into()));
        }
        let mut nodes = nodes;
        for node in &mut nodes {
            node.child_flows = vec![(0.0, 0.0); node.children.len()];
        }
        Ok(LayerTree {
            nodes,
            root,
            log: Vec::new(),
            plain_pgd: false,
            order,
        })
    }

    /// Children-first evaluation order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Solve every plant at its current inputs, children first, and deliver
    /// the PCC measurements upward. Fails if any plant diverges.
    pub fn solve_plants(
        &mut self,
        tick: usize,
        mut noise: Option<&mut dyn MeasurementNoise>,
    ) -> Result<()> {
        for idx in self.order.clone() {
            let node = &self.nodes[idx];
            let u = node.plant_inputs();
            let start = node.solution.as_ref().map(|s| s.v.clone());
            let sol = solve_power_flow(&node.network, &u, start.as_deref())?;
            let y = node.outputs.measure(&node.network, &sol)?;
            let mut observed = y.clone();
            if let Some(n) = noise.as_deref_mut() {
                n.perturb(idx, &mut observed);
            }
            let pcc = sol.pcc_flow;
            let node = &mut self.nodes[idx];
            node.solution = Some(sol);
            node.measured = Some(y);
            node.observed = Some(observed);
            if let Some(parent) = node.parent {
                let (p, q) =
                    pcc.ok_or_else(|| Error::Hierarchy("child plant without PCC flow".into()))?;
                let slot = self.nodes[parent]
                    .children
                    .iter()
                    .position(|c| c.node == idx)
                    .expect("tree validated");
                self.nodes[parent].child_flows[slot] = (p, q);
                self.log.push(InterfaceMessage {
                    tick,
                    link: idx,
                    direction: Direction::MeasurementUp,
                    p,
                    q,
                });
            }
        }
        Ok(())
    }

    /// Align each parent's child inputs with what the child currently
    /// exchanges (clamped into the aggregated box) and make that the child's
    /// set point. Intended right after the first plant solve.
    pub fn align_child_inputs(&mut self) -> Result<()> {
        for idx in self.order.clone() {
            let links = self.nodes[idx].children.clone();
            for (slot, link) in links.iter().enumerate() {
                let (p, q) = self.nodes[idx].child_flows[slot];
                let node = &mut self.nodes[idx];
                let m = node.network.actuator_count();
                let a = link.actuator;
                let lo = &node.config.limits.input_lower;
                let hi = &node.config.limits.input_upper;
                let up = (-p).clamp(lo[a], hi[a]);
                let uq = (-q).clamp(lo[m + a], hi[m + a]);
                node.state.u[a] = up;
                node.state.u[m + a] = uq;
                set_tracking(&mut self.nodes[link.node], -up, -uq)?;
            }
        }
        Ok(())
    }

    /// Sensitivities for one layer according to its policy.
    fn sensitivities(&mut self, idx: usize) -> Result<SensitivityMatrix> {
        let node = &self.nodes[idx];
        if node.config.sensitivity_policy == SensitivityPolicy::Frozen {
            if let Some(s) = &node.frozen {
                return Ok(s.clone());
            }
        }
        let sol = node.solution.as_ref().ok_or_else(|| {
            Error::Hierarchy(format!("layer '{}' has no plant solution", node.name))
        })?;
        let sens = compute_sensitivities(&node.network, sol, &node.outputs)?;
        if node.config.sensitivity_policy == SensitivityPolicy::Frozen {
            self.nodes[idx].frozen = Some(sens.clone());
        }
        Ok(sens)
    }
}

fn set_tracking(node: &mut LayerNode, p: f64, q: f64) -> Result<()> {
    match &mut node.config.objective {
        ObjectiveSpec::Tracking { p_set, q_set, .. } => {
            *p_set = p;
            *q_set = q;
            Ok(())
        }
        ObjectiveSpec::Congestion { .. } => Err(Error::Hierarchy(format!(
            "child layer '{}' must track its PCC set point",
            node.name
        ))),
    }
}

/// One synchronous iteration over all layers. Requires
/// [`LayerTree::solve_plants`] for the current inputs. Returns one record per
/// layer in node order.
pub fn hierarchy_tick(tree: &mut LayerTree, k: usize) -> Result<Vec<StepRecord>> {
    let n = tree.nodes.len();
    let mut records = Vec::with_capacity(n);
    let mut next_states = Vec::with_capacity(n);
    for idx in 0..n {
        let sens = tree.sensitivities(idx)?;
        let node = &tree.nodes[idx];
        let y = node
            .observed
            .as_ref()
            .ok_or_else(|| Error::Hierarchy(format!("layer '{}' was not measured", node.name)))?;
        let (next, rec) = if tree.plain_pgd {
            pgd_step(&node.state, y, &sens, &node.config)?
        } else {
            controller_step(&node.state, y, &sens, &node.config)?
        };
        next_states.push(next);
        records.push(rec);
    }
    for (node, next) in tree.nodes.iter_mut().zip(next_states) {
        node.state = next;
    }
    for idx in 0..n {
        let links = tree.nodes[idx].children.clone();
        let m = tree.nodes[idx].network.actuator_count();
        for link in links {
            let u = &tree.nodes[idx].state.u;
            let (p, q) = (-u[link.actuator], -u[m + link.actuator]);
            set_tracking(&mut tree.nodes[link.node], p, q)?;
            tree.log.push(InterfaceMessage {
                tick: k,
                link: link.node,
                direction: Direction::SetpointDown,
                p,
                q,
            });
        }
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{lv_feeder_fixture, Actuator};
    use crate::qp::ConstraintSpec;
    use nalgebra::DMatrix;

    fn tracking_layer(name: &str, net: Network, p: f64, q: f64, alpha: f64) -> LayerNode {
        let outputs = OutputSpec::default_for(&net);
        let m = net.actuator_count();
        let config = ControllerConfig {
            alpha,
            beta: 1.0,
            metric: DMatrix::identity(2 * m, 2 * m),
            objective: ObjectiveSpec::Tracking {
                p_set: p,
                q_set: q,
                pcc_rows: outputs.pcc_rows().unwrap(),
            },
            limits: ConstraintSpec::from_network(&net, &outputs).unwrap(),
            sensitivity_policy: SensitivityPolicy::RecomputeEachStep,
        };
        let state = ControllerState::new(net.nominal_inputs());
        LayerNode::new(name, net, outputs, config, state)
    }

    #[test]
    fn single_layer_tick_equals_controller_step() {
        let net = lv_feeder_fixture(3);
        let node = tracking_layer("lv", net, 0.1, 0.02, 0.1);
        let mut tree = LayerTree::single(node.clone()).unwrap();
        tree.solve_plants(0, None).unwrap();
        let rec = hierarchy_tick(&mut tree, 0).unwrap();

        let sol = solve_power_flow(&node.network, &node.state.u, None).unwrap();
        let y = node.outputs.measure(&node.network, &sol).unwrap();
        let sens = compute_sensitivities(&node.network, &sol, &node.outputs).unwrap();
        let (next, direct) = controller_step(&node.state, &y, &sens, &node.config).unwrap();
        assert_eq!(rec[0], direct);
        assert_eq!(tree.nodes[0].state, next);
        assert!(tree.log.is_empty());
    }

    #[test]
    fn aggregate_sums_boxes_and_baseline() {
        let mut net = lv_feeder_fixture(1);
        net.actuators = vec![
            Actuator {
                bus: 3,
                p_min: 0.0,
                p_max: 0.5,
                q_min: -0.1,
                q_max: 0.1,
                p_nominal: 0.2,
                label: "a".into(),
            },
            Actuator {
                bus: 4,
                p_min: 0.0,
                p_max: 0.3,
                q_min: -0.2,
                q_max: 0.0,
                p_nominal: 0.1,
                label: "b".into(),
            },
        ];
        let base_p: f64 = net.injections.iter().map(|i| i.p).sum();
        let base_q: f64 = net.injections.iter().map(|i| i.q).sum();
        let node = tracking_layer("lv", net.clone(), 0.0, 0.0, 0.1);
        let (p_lo, p_hi, q_lo, q_hi) = aggregate_child_flexibility(&node);
        assert!((p_hi - (0.8 + base_p)).abs() < 1e-15);
        assert!((p_lo - base_p).abs() < 1e-15);
        assert!((q_lo - (base_q - 0.3)).abs() < 1e-15);
        assert!((q_hi - (base_q + 0.1)).abs() < 1e-15);

        net.actuators.clear();
        let node = tracking_layer("bare", net, 0.0, 0.0, 0.1);
        let (p_lo, p_hi, q_lo, q_hi) = aggregate_child_flexibility(&node);
        assert_eq!((p_lo, q_lo), (p_hi, q_hi));
        assert_eq!((p_lo, q_lo), (base_p, base_q));
    }

    #[test]
    fn two_roots_are_rejected() {
        let a = tracking_layer("a", lv_feeder_fixture(1), 0.0, 0.0, 0.1);
        let b = tracking_layer("b", lv_feeder_fixture(2), 0.0, 0.0, 0.1);
        assert!(matches!(
            LayerTree::new(vec![a, b]),
            Err(Error::Hierarchy(_))
        ));
    }

    #[test]
    fn cycles_are_rejected() {
        let mut a = tracking_layer("a", lv_feeder_fixture(1), 0.0, 0.0, 0.1);
        let mut b = tracking_layer("b", lv_feeder_fixture(2), 0.0, 0.0, 0.1);
        let root = tracking_layer("root", lv_feeder_fixture(3), 0.0, 0.0, 0.1);
        a.parent = Some(1);
        b.parent = Some(0);
        a.children = vec![ChildLink {
            node: 1,
            actuator: 0,
        }];
        b.children = vec![ChildLink {
            node: 0,
            actuator: 0,
        }];
        assert!(matches!(
            LayerTree::new(vec![a, b, root]),
            Err(Error::Hierarchy(_))
        ));
    }
}

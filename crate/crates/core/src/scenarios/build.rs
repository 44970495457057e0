use nalgebra::DMatrix;

use super::{ObjectiveConfig, Scenario, ViolationSpec};
use crate::controller::{ControllerConfig, ControllerState, ObjectiveSpec};
use crate::error::{Error, Result};
use crate::grid::{Actuator, BusKind, Network};
use crate::hierarchy::{aggregate_flexibility, ChildLink, LayerNode, LayerTree};
use crate::powerflow::{solve_power_flow, OutputSpec};
use crate::qp::ConstraintSpec;

/// Scale every load by `spec.step` until the nominal operating point has a
/// bus voltage outside its band. Returns the applied factor.
pub fn engineer_violation(network: &mut Network, spec: &ViolationSpec) -> Result<f64> {
    if !(spec.step > 1.0) || !(spec.max_factor >= 1.0) {
        return Err(Error::Scenario(
            "violation search needs step > 1 and max_factor ≥ 1".into(),
        ));
    }
    let u = network.nominal_inputs();
    let mut factor = 1.0;
    let mut start = None;
    loop {
        let sol = solve_power_flow(network, &u, start.as_deref())?;
        let outside = network
            .buses
            .iter()
            .zip(&sol.v)
            .any(|(b, v)| b.kind == BusKind::Pq && (v.norm() < b.v_min || v.norm() > b.v_max));
        if outside {
            return Ok(factor);
        }
        if factor * spec.step > spec.max_factor {
            return Err(Error::Scenario(format!(
                "no voltage-band violation up to a load factor of {}",
                spec.max_factor
            )));
        }
        network.scale_loads(spec.step);
        factor *= spec.step;
        start = Some(sol.v);
    }
}

pub(crate) fn objective_for(
    network: &Network,
    outputs: &OutputSpec,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveSpec> {
    let m = network.actuator_count();
    Ok(match *cfg {
        ObjectiveConfig::Congestion {
            active_weight,
            reactive_weight,
        } => ObjectiveSpec::Congestion {
            a: DMatrix::identity(m, m) * active_weight,
            b: DMatrix::identity(m, m) * reactive_weight,
            p_nominal: network.nominal_inputs().rows(0, m).into_owned(),
        },
        ObjectiveConfig::Tracking { p_set, q_set } => ObjectiveSpec::Tracking {
            p_set,
            q_set,
            pcc_rows: outputs.pcc_rows().ok_or_else(|| {
                Error::Scenario(format!("network '{}' has no PCC to track", network.name))
            })?,
        },
    })
}

/// Distance from each layer to the root.
fn depths(scenario: &Scenario) -> Result<Vec<usize>> {
    let index = |name: &str| scenario.layers.iter().position(|l| l.name == name);
    let n = scenario.layers.len();
    let mut out = Vec::with_capacity(n);
    for layer in &scenario.layers {
        let mut d = 0;
        let mut cur = layer;
        while let Some(p) = &cur.parent {
            d += 1;
            if d > n {
                return Err(Error::Scenario("layer parents form a cycle".into()));
            }
            cur = &scenario.layers[index(&p.layer).expect("validated parent")];
        }
        out.push(d);
    }
    Ok(out)
}

/// Instantiate the layer tree, solve the initial plants and align every
/// parent's child inputs with the exchange the child currently realizes.
pub fn build_tree(scenario: &Scenario) -> Result<LayerTree> {
    scenario.validate()?;
    let n = scenario.layers.len();
    let mut nets = Vec::with_capacity(n);
    for layer in &scenario.layers {
        let mut net = layer.network.load(&scenario.base_dir)?;
        if layer.load_scale != 1.0 {
            net.scale_loads(layer.load_scale);
        }
        if let Some(spec) = &layer.initial_violation {
            engineer_violation(&mut net, spec)?;
        }
        nets.push(net);
    }

    // Deepest layers first so a layer's box includes its own children.
    let depth = depths(scenario)?;
    let mut by_depth: Vec<usize> = (0..n).collect();
    by_depth.sort_by_key(|&i| std::cmp::Reverse(depth[i]));
    let parent_of = |i: usize| -> Option<(usize, usize)> {
        scenario.layers[i].parent.as_ref().map(|p| {
            let j = scenario
                .layers
                .iter()
                .position(|l| l.name == p.layer)
                .expect("validated");
            (j, p.bus)
        })
    };
    for &i in &by_depth {
        let Some((j, bus)) = parent_of(i) else {
            continue;
        };
        let (p_min, p_max, q_min, q_max) = aggregate_flexibility(&nets[i]);
        let base: f64 = nets[i].injections.iter().map(|x| x.p).sum::<f64>()
            + nets[i].actuators.iter().map(|a| a.p_nominal).sum::<f64>();
        let actuator = Actuator {
            bus,
            p_min,
            p_max,
            q_min,
            q_max,
            p_nominal: base.clamp(p_min, p_max),
            label: scenario.layers[i].name.clone(),
        };
        nets[j].actuators.push(actuator);
    }

    let mut nodes = Vec::with_capacity(n);
    for (layer, net) in scenario.layers.iter().zip(nets) {
        net.validate()?;
        let outputs = OutputSpec::default_for(&net);
        let m = net.actuator_count();
        let mut metric = DMatrix::identity(2 * m, 2 * m) * layer.metric_scale;
        for (i, a) in net.actuators.iter().enumerate() {
            let is_child = scenario.layers.iter().any(|l| {
                l.name == a.label && l.parent.as_ref().is_some_and(|p| p.layer == layer.name)
            });
            if is_child {
                metric[(i, i)] *= layer.child_metric_weight;
                metric[(m + i, m + i)] *= layer.child_metric_weight;
            }
        }
        let config = ControllerConfig {
            alpha: layer.alpha,
            beta: layer.beta,
            metric,
            objective: objective_for(&net, &outputs, &layer.objective)?,
            limits: ConstraintSpec::from_network(&net, &outputs)?,
            sensitivity_policy: layer.sensitivity_policy,
        };
        config
            .validate()
            .map_err(|e| Error::Scenario(format!("layer '{}': {e}", layer.name)))?;
        let state = ControllerState::new(net.nominal_inputs());
        nodes.push(LayerNode::new(
            layer.name.clone(),
            net,
            outputs,
            config,
            state,
        ));
    }
    for i in 0..n {
        if let Some((j, _)) = parent_of(i) {
            let actuator = nodes[j]
                .network
                .actuator_position(&scenario.layers[i].name)
                .expect("child actuator was added");
            nodes[i].parent = Some(j);
            nodes[j].children.push(ChildLink { node: i, actuator });
        }
    }

    let mut tree = LayerTree::new(nodes)?;
    tree.plain_pgd = scenario.plain_pgd;
    tree.solve_plants(0, None)?;
    tree.align_child_inputs()?;
    tree.log.clear();
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::cigre_mv_fixture;

    #[test]
    fn violation_search_leaves_the_band() {
        let mut net = cigre_mv_fixture();
        let factor = engineer_violation(&mut net, &ViolationSpec::default()).unwrap();
        assert!(factor > 1.0);
        let sol = solve_power_flow(&net, &net.nominal_inputs(), None).unwrap();
        let vmin = sol.vm()[1..].iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(vmin < 0.95);
        // One step earlier the point was still admissible.
        let mut prev = cigre_mv_fixture();
        prev.scale_loads(factor / 1.02);
        let sol = solve_power_flow(&prev, &prev.nominal_inputs(), None).unwrap();
        assert!(sol.vm()[1..].iter().all(|v| (0.95..=1.05).contains(v)));
    }

    #[test]
    fn case2_tree_has_two_children_on_the_mv_layer() {
        let tree = build_tree(&Scenario::case2()).unwrap();
        let root = &tree.nodes[tree.root];
        assert_eq!(root.name, "mv");
        assert_eq!(root.children.len(), 2);
        for link in &root.children {
            let child = &tree.nodes[link.node];
            let (p, q) = child.pcc_flow().unwrap();
            let m = root.network.actuator_count();
            let ObjectiveSpec::Tracking { p_set, q_set, .. } = child.config.objective else {
                panic!("child must track");
            };
            // Zero initial tracking error unless the realized flow was clamped.
            assert!((p_set + root.state.u[link.actuator]).abs() < 1e-15);
            assert!((q_set + root.state.u[m + link.actuator]).abs() < 1e-15);
            assert!((p_set - p).abs() < 1e-9 && (q_set - q).abs() < 1e-9);
        }
    }

    #[test]
    fn child_requests_carry_the_extra_metric_weight() {
        let sc = Scenario::case2();
        let tree = build_tree(&sc).unwrap();
        let root = &tree.nodes[tree.root];
        let m = root.network.actuator_count();
        let layer = sc.root_layer();
        for (i, a) in root.network.actuators.iter().enumerate() {
            let expected = if a.label.starts_with("lv") {
                layer.metric_scale * layer.child_metric_weight
            } else {
                layer.metric_scale
            };
            assert_eq!(root.config.metric[(i, i)], expected, "{}", a.label);
            assert_eq!(root.config.metric[(m + i, m + i)], expected, "{}", a.label);
        }
    }
}

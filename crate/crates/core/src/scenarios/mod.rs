//! Closed-loop experiments: scenario files, the simulation loop, the settle
//! metric and the `(α, β)` sweep.

mod build;
mod run;
mod sweep;

pub use build::{build_tree, engineer_violation};
pub use run::{
    detect_settled, run_scenario, run_scenario_with, IterationRecord, LayerTrajectory, RunOptions,
    StepSummary, Trajectory, BAND_TOLERANCE,
};
pub use sweep::{default_alphas, default_betas, parameter_sweep, SweepCell, SweepResult};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::SensitivityPolicy;
use crate::error::{Error, Result};
use crate::grid::{cigre_mv_fixture, lv_feeder_fixture, Network};

pub const DEFAULT_MAX_ITERATIONS: usize = 300;

/// Where a layer's network comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkSource {
    Fixture {
        fixture: String,
        #[serde(default)]
        seed: u64,
    },
    File {
        path: PathBuf,
    },
    Inline(Box<Network>),
}

impl NetworkSource {
    /// Relative paths resolve against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<Network> {
        match self {
            NetworkSource::Fixture { fixture, seed } => match fixture.as_str() {
                "cigre_mv" => Ok(cigre_mv_fixture()),
                "lv_feeder" => Ok(lv_feeder_fixture(*seed)),
                other => Err(Error::Scenario(format!("unknown fixture '{other}'"))),
            },
            NetworkSource::File { path } => Network::load_json(&base_dir.join(path)),
            NetworkSource::Inline(net) => {
                net.validate()?;
                Ok((**net).clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectiveConfig {
    /// Diagonal weights `A = active_weight·I`, `B = reactive_weight·I`.
    Congestion {
        #[serde(default = "one")]
        active_weight: f64,
        #[serde(default = "default_reactive_weight")]
        reactive_weight: f64,
    },
    /// PCC reference [pu]; child layers receive theirs from the parent.
    Tracking {
        #[serde(default)]
        p_set: f64,
        #[serde(default)]
        q_set: f64,
    },
}

/// Attachment of a child layer to its parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParentLink {
    pub layer: String,
    /// Bus id of the coupling point in the parent network.
    pub bus: usize,
}

/// Scale all loads until the nominal operating point leaves the voltage band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViolationSpec {
    #[serde(default = "default_violation_step")]
    pub step: f64,
    #[serde(default = "default_violation_limit")]
    pub max_factor: f64,
}

impl Default for ViolationSpec {
    fn default() -> Self {
        ViolationSpec {
            step: default_violation_step(),
            max_factor: default_violation_limit(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub network: NetworkSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<ParentLink>,
    pub objective: ObjectiveConfig,
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    /// Metric `G = metric_scale·I`, with the diagonal entries of child
    /// request inputs further multiplied by `child_metric_weight`.
    #[serde(default = "one")]
    pub metric_scale: f64,
    #[serde(default = "one")]
    pub child_metric_weight: f64,
    #[serde(default = "one")]
    pub load_scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_violation: Option<ViolationSpec>,
    #[serde(default, with = "policy_serde")]
    pub sensitivity_policy: SensitivityPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// `target`: actuator label.
    ActuatorDisconnect,
    /// `target`: bus id; `payload`: `[p, q]` injection added at that bus.
    LoadStep,
    /// `payload`: `[p_set, q_set]` of a tracking layer.
    SetpointChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Event {
    pub at_iteration: usize,
    pub kind: EventKind,
    /// Layer name; the root when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<String>,
    #[serde(default)]
    pub target: String,
    #[serde(default)]
    pub payload: Vec<f64>,
}

/// Gaussian measurement noise, off unless configured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub std: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Settle criterion: within `eps_rel·‖setpoint‖` for `hold` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SettleSpec {
    pub eps_rel: f64,
    pub hold: usize,
}

impl Default for SettleSpec {
    fn default() -> Self {
        SettleSpec {
            eps_rel: 0.01,
            hold: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub events: Vec<Event>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseSpec>,
    #[serde(default)]
    pub settle: SettleSpec,
    /// Use the momentum-free step at every layer.
    #[serde(default)]
    pub plain_pgd: bool,
    /// Directory that relative network paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn one() -> f64 {
    1.0
}

fn default_reactive_weight() -> f64 {
    0.1
}

fn default_violation_step() -> f64 {
    1.02
}

fn default_violation_limit() -> f64 {
    4.0
}

fn default_max_iterations() -> usize {
    DEFAULT_MAX_ITERATIONS
}

mod policy_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::controller::SensitivityPolicy;

    pub fn serialize<S: Serializer>(p: &SensitivityPolicy, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match p {
            SensitivityPolicy::RecomputeEachStep => "recompute_each_step",
            SensitivityPolicy::Frozen => "frozen",
        })
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SensitivityPolicy, D::Error> {
        match String::deserialize(d)?.as_str() {
            "recompute_each_step" => Ok(SensitivityPolicy::RecomputeEachStep),
            "frozen" => Ok(SensitivityPolicy::Frozen),
            other => Err(serde::de::Error::unknown_variant(
                other,
                &["recompute_each_step", "frozen"],
            )),
        }
    }
}

impl Scenario {
    pub fn from_json_str(text: &str, origin: &Path) -> Result<Scenario> {
        let mut sc: Scenario = serde_json::from_str(text).map_err(|e| Error::parse(origin, &e))?;
        sc.base_dir = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        sc.validate()?;
        Ok(sc)
    }

    pub fn load_json(path: &Path) -> Result<Scenario> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Scenario::from_json_str(&text, path)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Static checks that need no network data.
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::Scenario("max_iterations must be at least 1".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Scenario("scenario has no layers".into()));
        }
        let roots = self.layers.iter().filter(|l| l.parent.is_none()).count();
        if roots != 1 {
            return Err(Error::Scenario(format!(
                "expected one root layer, found {roots}"
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if self.layers[..i].iter().any(|l| l.name == layer.name) {
                return Err(Error::Scenario(format!(
                    "duplicate layer name '{}'",
                    layer.name
                )));
            }
            if !(layer.metric_scale > 0.0 && layer.metric_scale.is_finite()) {
                return Err(Error::Scenario(format!(
                    "layer '{}': metric_scale must be positive",
                    layer.name
                )));
            }
            if !(layer.child_metric_weight > 0.0 && layer.child_metric_weight.is_finite()) {
                return Err(Error::Scenario(format!(
                    "layer '{}': child_metric_weight must be positive",
                    layer.name
                )));
            }
            if !(layer.load_scale >= 0.0 && layer.load_scale.is_finite()) {
                return Err(Error::Scenario(format!(
                    "layer '{}': load_scale must be non-negative",
                    layer.name
                )));
            }
            if let Some(p) = &layer.parent {
                if !self.layers.iter().any(|l| l.name == p.layer) {
                    return Err(Error::Scenario(format!(
                        "layer '{}' refers to unknown parent '{}'",
                        layer.name, p.layer
                    )));
                }
                if !matches!(layer.objective, ObjectiveConfig::Tracking { .. }) {
                    return Err(Error::Scenario(format!(
                        "child layer '{}' must use a tracking objective",
                        layer.name
                    )));
                }
            }
        }
        for ev in &self.events {
            if ev.at_iteration > self.max_iterations {
                return Err(Error::Scenario(format!(
                    "event at iteration {} lies beyond the horizon {}",
                    ev.at_iteration, self.max_iterations
                )));
            }
            if let Some(l) = &ev.layer {
                if !self.layers.iter().any(|x| &x.name == l) {
                    return Err(Error::Scenario(format!(
                        "event refers to unknown layer '{l}'"
                    )));
                }
            }
            let need = match ev.kind {
                EventKind::ActuatorDisconnect => 0,
                EventKind::LoadStep | EventKind::SetpointChange => 2,
            };
            if ev.payload.len() != need {
                return Err(Error::Scenario(format!(
                    "{:?} event expects {need} payload values",
                    ev.kind
                )));
            }
        }
        if let Some(n) = &self.noise {
            if !(n.std >= 0.0 && n.std.is_finite()) {
                return Err(Error::Scenario("noise std must be non-negative".into()));
            }
        }
        if !(self.settle.eps_rel > 0.0) || self.settle.hold < 1 {
            return Err(Error::Scenario(
                "settle needs eps_rel > 0 and hold ≥ 1".into(),
            ));
        }
        Ok(())
    }

    pub fn root_layer(&self) -> &LayerSpec {
        self.layers
            .iter()
            .find(|l| l.parent.is_none())
            .expect("validated scenario has a root")
    }

    pub fn root_layer_mut(&mut self) -> &mut LayerSpec {
        self.layers
            .iter_mut()
            .find(|l| l.parent.is_none())
            .expect("validated scenario has a root")
    }

    /// Tracking reference of the root at the end of the run, if it tracks.
    pub fn final_setpoint(&self) -> Option<(f64, f64)> {
        let root = self.root_layer();
        let ObjectiveConfig::Tracking { p_set, q_set } = root.objective else {
            return None;
        };
        let mut sp = (p_set, q_set);
        let mut changes: Vec<&Event> = self
            .events
            .iter()
            .filter(|e| {
                e.kind == EventKind::SetpointChange
                    && e.layer.as_ref().is_none_or(|l| *l == root.name)
            })
            .collect();
        changes.sort_by_key(|e| e.at_iteration);
        if let Some(last) = changes.last() {
            sp = (last.payload[0], last.payload[1]);
        }
        Some(sp)
    }

    /// Settle radius around the final root reference.
    pub fn settle_eps(&self) -> Option<f64> {
        self.final_setpoint()
            .map(|(p, q)| self.settle.eps_rel * (p * p + q * q).sqrt())
    }

    /// Case I: congestion management on the MV feeder with an engineered
    /// undervoltage and a wind-plant trip at k = 24.
    pub fn case1() -> Scenario {
        Scenario {
            name: "case1".into(),
            layers: vec![LayerSpec {
                name: "mv".into(),
                network: NetworkSource::Fixture {
                    fixture: "cigre_mv".into(),
                    seed: 0,
                },
                parent: None,
                objective: ObjectiveConfig::Congestion {
                    active_weight: 1.0,
                    reactive_weight: 0.1,
                },
                alpha: 0.8,
                beta: 0.9,
                metric_scale: 1.0,
                child_metric_weight: 1.0,
                load_scale: 1.0,
                initial_violation: Some(ViolationSpec::default()),
                sensitivity_policy: SensitivityPolicy::RecomputeEachStep,
            }],
            events: vec![Event {
                at_iteration: 24,
                kind: EventKind::ActuatorDisconnect,
                layer: None,
                target: crate::grid::CIGRE_MV_WPP_LABEL.into(),
                payload: vec![],
            }],
            max_iterations: 50,
            noise: None,
            settle: SettleSpec::default(),
            plain_pgd: false,
            base_dir: PathBuf::new(),
        }
    }

    /// Case II: the MV layer tracks (10 MW, 3 MVAr) at its transformer while
    /// two LV feeders below it follow the requests sent to them.
    pub fn case2() -> Scenario {
        let lv = |name: &str, seed: u64, bus: usize| LayerSpec {
            name: name.into(),
            network: NetworkSource::Fixture {
                fixture: "lv_feeder".into(),
                seed,
            },
            parent: Some(ParentLink {
                layer: "mv".into(),
                bus,
            }),
            objective: ObjectiveConfig::Tracking {
                p_set: 0.0,
                q_set: 0.0,
            },
            alpha: CASE2_CHILD_ALPHA,
            beta: 1.0,
            metric_scale: 1.0,
            child_metric_weight: 1.0,
            load_scale: 1.0,
            initial_violation: None,
            sensitivity_policy: SensitivityPolicy::RecomputeEachStep,
        };
        Scenario {
            name: "case2".into(),
            layers: vec![
                LayerSpec {
                    name: "mv".into(),
                    network: NetworkSource::Fixture {
                        fixture: "cigre_mv".into(),
                        seed: 0,
                    },
                    parent: None,
                    objective: ObjectiveConfig::Tracking {
                        p_set: 10.0,
                        q_set: 3.0,
                    },
                    alpha: 0.05,
                    beta: 1.0,
                    metric_scale: CASE2_METRIC_SCALE,
                    child_metric_weight: CASE2_CHILD_METRIC_WEIGHT,
                    load_scale: 1.0,
                    initial_violation: None,
                    sensitivity_policy: SensitivityPolicy::RecomputeEachStep,
                },
                lv("lv1", 1, 5),
                lv("lv2", 2, 8),
            ],
            events: vec![],
            max_iterations: DEFAULT_MAX_ITERATIONS,
            noise: None,
            settle: SettleSpec::default(),
            plain_pgd: false,
            base_dir: PathBuf::new(),
        }
    }
}

/// Metric scale of the Case II MV controller.
pub const CASE2_METRIC_SCALE: f64 = 0.7;
/// Extra metric weight on the MV layer's requests to its LV children.
pub const CASE2_CHILD_METRIC_WEIGHT: f64 = 10.0;
/// Gain of the Case II LV controllers.
pub const CASE2_CHILD_ALPHA: f64 = 0.15;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate_and_round_trip() {
        for sc in [Scenario::case1(), Scenario::case2()] {
            sc.validate().unwrap();
            let back =
                Scenario::from_json_str(&sc.to_json_string(), Path::new("mem.json")).unwrap();
            assert_eq!(back, sc);
        }
    }

    #[test]
    fn bundled_files_match_builtins() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
        for (file, sc) in [
            ("case1.json", Scenario::case1()),
            ("case2.json", Scenario::case2()),
        ] {
            let mut loaded = Scenario::load_json(&dir.join(file)).unwrap();
            loaded.base_dir = PathBuf::new();
            assert_eq!(loaded, sc, "{file}");
        }
    }

    #[test]
    fn event_beyond_horizon_is_rejected() {
        let mut sc = Scenario::case1();
        sc.events[0].at_iteration = 51;
        assert!(matches!(sc.validate(), Err(Error::Scenario(_))));
    }

    #[test]
    fn unknown_field_is_reported_with_position() {
        let text = "{\n  \"layers\": [],\n  \"bogus\": 1\n}";
        match Scenario::from_json_str(text, Path::new("s.json")).unwrap_err() {
            Error::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("bogus"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn final_setpoint_follows_last_change() {
        let mut sc = Scenario::case2();
        assert_eq!(sc.final_setpoint(), Some((10.0, 3.0)));
        sc.events.push(Event {
            at_iteration: 10,
            kind: EventKind::SetpointChange,
            layer: None,
            target: String::new(),
            payload: vec![9.0, 2.0],
        });
        assert_eq!(sc.final_setpoint(), Some((9.0, 2.0)));
        assert_eq!(Scenario::case1().final_setpoint(), None);
    }
}

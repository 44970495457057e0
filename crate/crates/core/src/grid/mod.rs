//! Network data model.
//!
//! All electrical quantities are stored in per-unit on the network's single
//! power base (`base_mva`). Injections use the generator convention: positive
//! active power flows *into* the network at the bus.
//!
//! The controllable input vector of a network is stacked as
//! `[p_1, .., p_n, q_1, .., q_n]` over its actuators.

mod admittance;
mod fixtures;
mod io;

pub use admittance::{branch_admittances, build_admittance, BranchAdmittance};
pub use fixtures::{cigre_mv_fixture, lv_feeder_fixture, CIGRE_MV_WPP_LABEL};

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default half-width of the admissible voltage band around nominal.
pub const DEFAULT_VOLTAGE_BAND: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusKind {
    Slack,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub kind: BusKind,
    /// Nominal magnitude; for the slack bus this is also its fixed setpoint.
    pub v_nominal: f64,
    pub v_min: f64,
    pub v_max: f64,
    #[serde(default)]
    pub shunt_admittance: Complex64,
}

impl Bus {
    /// PQ bus with the default ±5 % band around `v_nominal`.
    pub fn pq(id: usize, v_nominal: f64) -> Self {
        Bus {
            id,
            kind: BusKind::Pq,
            v_nominal,
            v_min: v_nominal * (1.0 - DEFAULT_VOLTAGE_BAND),
            v_max: v_nominal * (1.0 + DEFAULT_VOLTAGE_BAND),
            shunt_admittance: Complex64::new(0.0, 0.0),
        }
    }

    pub fn slack(id: usize, v_setpoint: f64) -> Self {
        Bus {
            kind: BusKind::Slack,
            ..Bus::pq(id, v_setpoint)
        }
    }
}

fn default_tap() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub series_impedance: Complex64,
    /// Total line charging susceptance, split evenly between both ends.
    #[serde(default)]
    pub shunt_charging: f64,
    /// Thermal limit on sending-end apparent power. Branches without a limit
    /// are not monitored.
    #[serde(default)]
    pub s_max: Option<f64>,
    #[serde(default)]
    pub is_transformer: bool,
    /// Off-nominal ratio on the from side.
    #[serde(default = "default_tap")]
    pub tap_ratio: f64,
}

impl Branch {
    pub fn line(from_bus: usize, to_bus: usize, z: Complex64) -> Self {
        Branch {
            from_bus,
            to_bus,
            series_impedance: z,
            shunt_charging: 0.0,
            s_max: None,
            is_transformer: false,
            tap_ratio: 1.0,
        }
    }
}

/// A controllable injection (DER, flexible load, or a subordinate network).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actuator {
    pub bus: usize,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    pub p_nominal: f64,
    pub label: String,
}

impl Actuator {
    /// Shrink the operating box to the origin (unit out of service).
    pub fn disconnect(&mut self) {
        self.p_min = 0.0;
        self.p_max = 0.0;
        self.q_min = 0.0;
        self.q_max = 0.0;
        self.p_nominal = 0.0;
    }
}

/// Uncontrolled complex power injection at a bus (loads are negative).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injection {
    pub bus: usize,
    pub p: f64,
    pub q: f64,
}

fn default_base() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_base")]
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub actuators: Vec<Actuator>,
    #[serde(default)]
    pub injections: Vec<Injection>,
    /// Branch index of the interface to the upstream layer.
    #[serde(default)]
    pub pcc_branch: Option<usize>,
}

/// Per-unit conversion on a single power base.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerUnit {
    pub base_mva: f64,
}

impl PerUnit {
    pub fn new(base_mva: f64) -> Self {
        PerUnit { base_mva }
    }

    pub fn power_to_pu(&self, mw: f64) -> f64 {
        mw / self.base_mva
    }

    pub fn power_from_pu(&self, pu: f64) -> f64 {
        pu * self.base_mva
    }

    /// Impedance base follows from the voltage level: `Z_base = kV² / MVA`.
    pub fn impedance_to_pu(&self, ohm: Complex64, kv: f64) -> Complex64 {
        ohm * (self.base_mva / (kv * kv))
    }

    /// Charging susceptance in siemens to per-unit.
    pub fn susceptance_to_pu(&self, siemens: f64, kv: f64) -> f64 {
        siemens * (kv * kv) / self.base_mva
    }
}

impl Network {
    pub fn per_unit(&self) -> PerUnit {
        PerUnit::new(self.base_mva)
    }

    pub fn bus_position(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    pub(crate) fn bus_pos(&self, id: usize) -> Result<usize> {
        self.bus_position(id)
            .ok_or_else(|| Error::InvalidNetwork(format!("unknown bus id {id}")))
    }

    pub fn slack_position(&self) -> Option<usize> {
        self.buses.iter().position(|b| b.kind == BusKind::Slack)
    }

    pub fn actuator_count(&self) -> usize {
        self.actuators.len()
    }

    /// Length of the stacked `[p; q]` input vector.
    pub fn input_dim(&self) -> usize {
        2 * self.actuators.len()
    }

    pub fn actuator_position(&self, label: &str) -> Option<usize> {
        self.actuators.iter().position(|a| a.label == label)
    }

    /// Scheduled operating point: `p = p_nominal`, `q = 0`.
    pub fn nominal_inputs(&self) -> DVector<f64> {
        let n = self.actuators.len();
        DVector::from_fn(2 * n, |i, _| {
            if i < n {
                self.actuators[i].p_nominal
            } else {
                0.0
            }
        })
    }

    /// Element-wise input box `(lower, upper)` over the stacked input vector.
    pub fn input_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.actuators.len();
        let lo = DVector::from_fn(2 * n, |i, _| {
            if i < n {
                self.actuators[i].p_min
            } else {
                self.actuators[i - n].q_min
            }
        });
        let hi = DVector::from_fn(2 * n, |i, _| {
            if i < n {
                self.actuators[i].p_max
            } else {
                self.actuators[i - n].q_max
            }
        });
        (lo, hi)
    }

    /// Sum of uncontrolled injections per bus position.
    pub fn uncontrolled_injections(&self) -> Result<Vec<Complex64>> {
        let mut s = vec![Complex64::new(0.0, 0.0); self.buses.len()];
        for inj in &self.injections {
            s[self.bus_pos(inj.bus)?] += Complex64::new(inj.p, inj.q);
        }
        Ok(s)
    }

    /// Total bus injections for a stacked input vector.
    pub fn bus_injections(&self, u: &DVector<f64>) -> Result<Vec<Complex64>> {
        let n = self.actuators.len();
        if u.len() != 2 * n {
            return Err(Error::Dimension(format!(
                "input vector has length {}, network expects {}",
                u.len(),
                2 * n
            )));
        }
        let mut s = self.uncontrolled_injections()?;
        for (i, a) in self.actuators.iter().enumerate() {
            s[self.bus_pos(a.bus)?] += Complex64::new(u[i], u[n + i]);
        }
        Ok(s)
    }

    /// Multiply every uncontrolled load (negative active injection) by `factor`.
    pub fn scale_loads(&mut self, factor: f64) {
        for inj in self.injections.iter_mut().filter(|inj| inj.p < 0.0) {
            inj.p *= factor;
            inj.q *= factor;
        }
    }

    /// Check every type invariant of buses, branches, and actuators, plus
    /// connectivity.
    pub fn validate(&self) -> Result<()> {
        if self.buses.is_empty() {
            return Err(Error::InvalidNetwork("no buses".into()));
        }
        if !(self.base_mva > 0.0) {
            return Err(Error::InvalidNetwork("base_mva must be positive".into()));
        }
        for (i, b) in self.buses.iter().enumerate() {
            if self.buses[..i].iter().any(|o| o.id == b.id) {
                return Err(Error::InvalidNetwork(format!("duplicate bus id {}", b.id)));
            }
            if !(b.v_min < b.v_nominal && b.v_nominal < b.v_max) {
                return Err(Error::InvalidNetwork(format!(
                    "bus {}: voltage band must satisfy v_min < v_nominal < v_max",
                    b.id
                )));
            }
        }
        let slacks = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .count();
        if slacks != 1 {
            return Err(Error::InvalidNetwork(format!(
                "expected exactly one slack bus, found {slacks}"
            )));
        }
        for (k, br) in self.branches.iter().enumerate() {
            self.bus_pos(br.from_bus)?;
            self.bus_pos(br.to_bus)?;
            if br.from_bus == br.to_bus {
                return Err(Error::DegenerateNetwork(format!(
                    "branch {k} is a self-loop"
                )));
            }
            if !(br.series_impedance.norm() > 0.0) {
                return Err(Error::DegenerateNetwork(format!(
                    "branch {k} ({}-{}) has zero series impedance",
                    br.from_bus, br.to_bus
                )));
            }
            if !(br.tap_ratio > 0.0) {
                return Err(Error::InvalidNetwork(format!(
                    "branch {k}: tap ratio must be positive"
                )));
            }
            if let Some(s) = br.s_max {
                if !(s > 0.0) {
                    return Err(Error::InvalidNetwork(format!(
                        "branch {k}: s_max must be positive"
                    )));
                }
            }
        }
        let slack = self.slack_position().expect("checked above");
        for (i, a) in self.actuators.iter().enumerate() {
            let pos = self.bus_pos(a.bus)?;
            if pos == slack {
                return Err(Error::InvalidNetwork(format!(
                    "actuator '{}' sits on the slack bus",
                    a.label
                )));
            }
            if !(a.p_min <= a.p_nominal && a.p_nominal <= a.p_max) {
                return Err(Error::InvalidNetwork(format!(
                    "actuator '{}': requires p_min <= p_nominal <= p_max",
                    a.label
                )));
            }
            if !(a.q_min <= a.q_max) {
                return Err(Error::InvalidNetwork(format!(
                    "actuator '{}': requires q_min <= q_max",
                    a.label
                )));
            }
            if self.actuators[..i].iter().any(|o| o.label == a.label) {
                return Err(Error::InvalidNetwork(format!(
                    "duplicate actuator label '{}'",
                    a.label
                )));
            }
        }
        for inj in &self.injections {
            self.bus_pos(inj.bus)?;
        }
        if let Some(k) = self.pcc_branch {
            if k >= self.branches.len() {
                return Err(Error::InvalidNetwork(format!(
                    "pcc_branch {k} out of range"
                )));
            }
        }
        self.check_connected(slack)
    }

    fn check_connected(&self, slack: usize) -> Result<()> {
        let n = self.buses.len();
        let mut adj = vec![Vec::new(); n];
        for br in &self.branches {
            let (f, t) = (self.bus_pos(br.from_bus)?, self.bus_pos(br.to_bus)?);
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![slack];
        seen[slack] = true;
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(Error::InvalidNetwork(format!(
                "bus {} is not connected to the slack bus",
                self.buses[i].id
            ))),
            None => Ok(()),
        }
    }
}

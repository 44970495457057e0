//! Built-in benchmark networks.
//!
//! The MV feeder follows the topology of the CIGRE medium-voltage benchmark
//! with its switches frozen open (radial feeder 1 plus a shortened feeder 2).
//! Line data use the CIGRE cable/overhead-line impedances; loads follow the
//! residential/commercial allocation. DER ratings other than the 1.5 MW wind
//! plant at bus 7 are chosen for this crate, as are all LV feeder parameters.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Actuator, Branch, Bus, Injection, Network, PerUnit};

/// Label of the wind power plant actuator in [`cigre_mv_fixture`].
pub const CIGRE_MV_WPP_LABEL: &str = "wpp7";

const MV_KV: f64 = 20.0;
const LV_KV: f64 = 0.4;
const OMEGA: f64 = 2.0 * std::f64::consts::PI * 50.0;

struct LineType {
    r_per_km: f64,
    x_per_km: f64,
    c_nf_per_km: f64,
    max_i_ka: f64,
}

const MV_CABLE: LineType = LineType {
    r_per_km: 0.501,
    x_per_km: 0.716,
    c_nf_per_km: 151.1,
    max_i_ka: 0.3,
};

const MV_OHL: LineType = LineType {
    r_per_km: 0.510,
    x_per_km: 0.366,
    c_nf_per_km: 10.09,
    max_i_ka: 0.3,
};

const LV_CABLE: LineType = LineType {
    r_per_km: 0.208,
    x_per_km: 0.080,
    c_nf_per_km: 0.0,
    max_i_ka: 0.36,
};

// Two LV_CABLE runs in parallel; the trunk carries the whole feeder.
const LV_TRUNK: LineType = LineType {
    r_per_km: 0.104,
    x_per_km: 0.040,
    c_nf_per_km: 0.0,
    max_i_ka: 0.72,
};

fn line(pu: PerUnit, kv: f64, from: usize, to: usize, km: f64, ty: &LineType) -> Branch {
    let z = Complex64::new(ty.r_per_km * km, ty.x_per_km * km);
    let b_siemens = OMEGA * ty.c_nf_per_km * 1e-9 * km;
    Branch {
        from_bus: from,
        to_bus: to,
        series_impedance: pu.impedance_to_pu(z, kv),
        shunt_charging: pu.susceptance_to_pu(b_siemens, kv),
        s_max: Some(pu.power_to_pu(3f64.sqrt() * kv * ty.max_i_ka)),
        is_transformer: false,
        tap_ratio: 1.0,
    }
}

/// Transformer from short-circuit voltage `vk` and copper-loss part `vkr`
/// (both fractions) on its own rating.
fn transformer(pu: PerUnit, from: usize, to: usize, s_rated: f64, vk: f64, vkr: f64) -> Branch {
    let scale = pu.base_mva / s_rated;
    let r = vkr * scale;
    let z = vk * scale;
    Branch {
        from_bus: from,
        to_bus: to,
        series_impedance: Complex64::new(r, (z * z - r * r).sqrt()),
        shunt_charging: 0.0,
        s_max: Some(pu.power_to_pu(s_rated)),
        is_transformer: true,
        tap_ratio: 1.0,
    }
}

/// Load from apparent power and (lagging) power factor, as a negative
/// injection.
fn load(pu: PerUnit, bus: usize, s_mva: f64, pf: f64) -> Injection {
    let p = s_mva * pf;
    let q = s_mva * (1.0 - pf * pf).sqrt();
    Injection {
        bus,
        p: -pu.power_to_pu(p),
        q: -pu.power_to_pu(q),
    }
}

#[allow(clippy::too_many_arguments)]
fn actuator(
    pu: PerUnit,
    label: &str,
    bus: usize,
    p: (f64, f64),
    p_nom: f64,
    q: (f64, f64),
) -> Actuator {
    Actuator {
        bus,
        p_min: pu.power_to_pu(p.0),
        p_max: pu.power_to_pu(p.1),
        q_min: pu.power_to_pu(q.0),
        q_max: pu.power_to_pu(q.1),
        p_nominal: pu.power_to_pu(p_nom),
        label: label.to_string(),
    }
}

/// 14-bus MV feeder: HV slack (bus 0), 25 MVA transformer to the MV busbar
/// (bus 1), radial feeder 1 over buses 2–11 and a two-bus overhead feeder 2
/// (buses 12–13). Flexible units sit on feeder 1; the wind plant at bus 7
/// is rated 1.5 MW. The transformer is the PCC branch.
pub fn cigre_mv_fixture() -> Network {
    let pu = PerUnit::new(1.0);
    let mut buses = vec![Bus::slack(0, 1.03)];
    buses.extend((1..14).map(|id| Bus::pq(id, 1.0)));

    let mut branches = vec![transformer(pu, 0, 1, 25.0, 0.12, 0.0016)];
    for &(f, t, km) in &[
        (1, 2, 2.82),
        (2, 3, 4.42),
        (3, 4, 0.61),
        (4, 5, 0.56),
        (5, 6, 1.54),
        (3, 8, 1.30),
        (8, 7, 1.67),
        (8, 9, 0.32),
        (9, 10, 0.77),
        (10, 11, 0.33),
    ] {
        branches.push(line(pu, MV_KV, f, t, km, &MV_CABLE));
    }
    branches.push(line(pu, MV_KV, 1, 12, 4.89, &MV_OHL));
    branches.push(line(pu, MV_KV, 12, 13, 2.99, &MV_OHL));

    let injections = vec![
        // lumped remainder of the substation load
        Injection {
            bus: 1,
            p: -pu.power_to_pu(6.0),
            q: -pu.power_to_pu(0.5),
        },
        load(pu, 3, 0.285, 0.97),
        load(pu, 3, 0.265, 0.85),
        load(pu, 4, 0.445, 0.97),
        load(pu, 5, 0.750, 0.97),
        load(pu, 6, 0.565, 0.97),
        load(pu, 7, 0.090, 0.85),
        load(pu, 8, 0.605, 0.97),
        load(pu, 9, 0.675, 0.85),
        load(pu, 10, 0.490, 0.97),
        load(pu, 10, 0.080, 0.85),
        load(pu, 11, 0.340, 0.97),
        load(pu, 12, 0.040, 0.85),
        load(pu, 13, 0.215, 0.97),
        load(pu, 13, 0.390, 0.85),
    ];

    let actuators = vec![
        actuator(pu, "pv3", 3, (0.0, 0.8), 0.6, (-0.4, 0.4)),
        actuator(pu, "pv4", 4, (0.0, 0.6), 0.45, (-0.3, 0.3)),
        actuator(pu, "bess5", 5, (-1.0, 1.0), 0.0, (-0.5, 0.5)),
        actuator(pu, "pv6", 6, (0.0, 0.6), 0.45, (-0.3, 0.3)),
        actuator(pu, CIGRE_MV_WPP_LABEL, 7, (0.0, 1.5), 1.5, (-0.6, 0.6)),
        actuator(pu, "load8", 8, (-1.5, -0.2), -0.6, (-0.2, 0.2)),
        actuator(pu, "pv9", 9, (0.0, 0.8), 0.6, (-0.4, 0.4)),
        actuator(pu, "bess10", 10, (-1.0, 1.0), 0.0, (-0.5, 0.5)),
        actuator(pu, "pv11", 11, (0.0, 0.6), 0.45, (-0.3, 0.3)),
    ];

    Network {
        name: "cigre_mv".into(),
        base_mva: pu.base_mva,
        buses,
        branches,
        actuators,
        injections,
        pcc_branch: Some(0),
    }
}

/// Generic radial LV feeder behind a 0.63 MVA MV/LV transformer.
///
/// Bus 0 is the MV-side slack, bus 1 the LV busbar; a main cable runs over
/// buses 2–5 with a lateral on buses 6–7. `seed` varies segment lengths and
/// household loads deterministically. Three flexible units: rooftop PV, a
/// battery and a heat-pump load.
pub fn lv_feeder_fixture(seed: u64) -> Network {
    let pu = PerUnit::new(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut buses = vec![Bus::slack(0, 1.0)];
    buses.extend((1..8).map(|id| Bus::pq(id, 1.0)));

    let mut branches = vec![transformer(pu, 0, 1, 0.63, 0.04, 0.012)];
    for &(f, t) in &[(1, 2), (2, 3), (3, 4), (4, 5), (2, 6), (6, 7)] {
        let km = rng.random_range(0.025..0.045);
        let ty = if f == 1 { &LV_TRUNK } else { &LV_CABLE };
        branches.push(line(pu, LV_KV, f, t, km, ty));
    }

    let injections = (2..8)
        .map(|bus| {
            let kva = rng.random_range(20.0..35.0);
            load(pu, bus, kva * 1e-3, 0.97)
        })
        .collect();

    let pv_bus = 5;
    let actuators = vec![
        actuator(pu, "pv", pv_bus, (0.0, 0.10), 0.06, (-0.05, 0.05)),
        actuator(pu, "bess", 4, (-0.08, 0.08), 0.0, (-0.04, 0.04)),
        actuator(pu, "heatpump", 7, (-0.10, -0.02), -0.05, (-0.02, 0.02)),
    ];

    Network {
        name: format!("lv_feeder_{seed}"),
        base_mva: pu.base_mva,
        buses,
        branches,
        actuators,
        injections,
        pcc_branch: Some(0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BusKind;

    #[test]
    fn cigre_fixture_contract() {
        let net = cigre_mv_fixture();
        net.validate().unwrap();
        assert_eq!(net.buses.len(), 14);
        assert_eq!(
            net.buses
                .iter()
                .filter(|b| b.kind == BusKind::Slack)
                .count(),
            1
        );
        let wpp = &net.actuators[net.actuator_position(CIGRE_MV_WPP_LABEL).unwrap()];
        assert_eq!(wpp.bus, 7);
        assert!((wpp.p_max - 1.5 / net.base_mva).abs() < 1e-15);
        for b in net.buses.iter().filter(|b| b.kind == BusKind::Pq) {
            assert!((b.v_min - 0.95).abs() < 1e-12 && (b.v_max - 1.05).abs() < 1e-12);
        }
    }

    #[test]
    fn lv_fixture_contract() {
        for seed in [1, 2, 7] {
            let net = lv_feeder_fixture(seed);
            net.validate().unwrap();
            assert!(net.buses.len() <= 10);
            assert!(net.actuators.len() >= 2);
            let pcc = &net.branches[net.pcc_branch.unwrap()];
            let slack_id = net.buses[net.slack_position().unwrap()].id;
            assert!(pcc.from_bus == slack_id || pcc.to_bus == slack_id);
            assert!(net.actuators.iter().map(|a| a.p_max).sum::<f64>() > 0.0);
        }
    }

    #[test]
    fn lv_fixture_is_deterministic_per_seed() {
        assert_eq!(lv_feeder_fixture(3), lv_feeder_fixture(3));
        assert_ne!(lv_feeder_fixture(1), lv_feeder_fixture(2));
    }
}

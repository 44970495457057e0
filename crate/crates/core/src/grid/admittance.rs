use nalgebra::DMatrix;
use num_complex::Complex64;

use super::Network;
use crate::error::Result;

/// Two-port admittance of a single branch (pi model with from-side tap).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchAdmittance {
    pub from: usize,
    pub to: usize,
    pub y_ff: Complex64,
    pub y_ft: Complex64,
    pub y_tf: Complex64,
    pub y_tt: Complex64,
}

/// Per-branch two-port admittances, indexed like `network.branches`.
pub fn branch_admittances(network: &Network) -> Result<Vec<BranchAdmittance>> {
    network
        .branches
        .iter()
        .map(|br| {
            let y = br.series_impedance.inv();
            let half_b = Complex64::new(0.0, 0.5 * br.shunt_charging);
            let t = br.tap_ratio;
            Ok(BranchAdmittance {
                from: network.bus_pos(br.from_bus)?,
                to: network.bus_pos(br.to_bus)?,
                y_ff: (y + half_b) / (t * t),
                y_ft: -y / t,
                y_tf: -y / t,
                y_tt: y + half_b,
            })
        })
        .collect()
}

/// Assemble the bus admittance matrix. Rows and columns follow the order of
/// `network.buses`.
pub fn build_admittance(network: &Network) -> Result<DMatrix<Complex64>> {
    network.validate()?;
    let n = network.buses.len();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for ba in branch_admittances(network)? {
        y[(ba.from, ba.from)] += ba.y_ff;
        y[(ba.from, ba.to)] += ba.y_ft;
        y[(ba.to, ba.from)] += ba.y_tf;
        y[(ba.to, ba.to)] += ba.y_tt;
    }
    for (i, bus) in network.buses.iter().enumerate() {
        y[(i, i)] += bus.shunt_admittance;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{cigre_mv_fixture, Branch, Bus, Network};
    use crate::Error;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn two_bus_reactance() {
        let net = Network {
            name: String::new(),
            base_mva: 1.0,
            buses: vec![Bus::slack(0, 1.0), Bus::pq(1, 1.0)],
            branches: vec![Branch::line(0, 1, c(0.0, 0.1))],
            actuators: vec![],
            injections: vec![],
            pcc_branch: None,
        };
        let y = build_admittance(&net).unwrap();
        let expect = [[c(0.0, -10.0), c(0.0, 10.0)], [c(0.0, 10.0), c(0.0, -10.0)]];
        for i in 0..2 {
            for j in 0..2 {
                assert!(
                    (y[(i, j)] - expect[i][j]).norm() < 1e-12,
                    "Y[{i}][{j}] = {}",
                    y[(i, j)]
                );
            }
        }
    }

    #[test]
    fn empty_branch_list_is_rejected() {
        let net = Network {
            name: String::new(),
            base_mva: 1.0,
            buses: vec![Bus::slack(0, 1.0), Bus::pq(1, 1.0)],
            branches: vec![],
            actuators: vec![],
            injections: vec![],
            pcc_branch: None,
        };
        assert!(build_admittance(&net).is_err());
    }

    #[test]
    fn duplicate_zero_impedance_branch_is_degenerate() {
        let net = Network {
            name: String::new(),
            base_mva: 1.0,
            buses: vec![Bus::slack(0, 1.0), Bus::pq(1, 1.0)],
            branches: vec![
                Branch::line(0, 1, c(0.0, 0.1)),
                Branch::line(0, 1, c(0.0, 0.0)),
            ],
            actuators: vec![],
            injections: vec![],
            pcc_branch: None,
        };
        assert!(matches!(
            build_admittance(&net),
            Err(Error::DegenerateNetwork(_))
        ));
    }

    #[test]
    fn fixture_row_sums_equal_bus_shunts() {
        // Independent summation: every branch adds half its charging to each
        // end, plus any bus shunt. Series terms cancel for unit taps.
        let net = cigre_mv_fixture();
        assert!(net.branches.iter().all(|b| b.tap_ratio == 1.0));
        let y = build_admittance(&net).unwrap();
        for (i, bus) in net.buses.iter().enumerate() {
            let mut shunt = bus.shunt_admittance;
            for br in &net.branches {
                if br.from_bus == bus.id || br.to_bus == bus.id {
                    shunt += c(0.0, 0.5 * br.shunt_charging);
                }
            }
            let row: Complex64 = (0..net.buses.len()).map(|j| y[(i, j)]).sum();
            let scale = y[(i, i)].norm();
            assert!(
                (row - shunt).norm() <= 1e-12 * scale,
                "bus {}: row sum {row} vs shunt {shunt}",
                bus.id
            );
        }
    }

    #[test]
    fn tap_keeps_matrix_symmetric() {
        let mut br = Branch::line(0, 1, c(0.01, 0.05));
        br.tap_ratio = 1.025;
        br.is_transformer = true;
        let net = Network {
            name: String::new(),
            base_mva: 1.0,
            buses: vec![Bus::slack(0, 1.0), Bus::pq(1, 1.0), Bus::pq(2, 1.0)],
            branches: vec![br, Branch::line(1, 2, c(0.02, 0.01))],
            actuators: vec![],
            injections: vec![],
            pcc_branch: None,
        };
        let y = build_admittance(&net).unwrap();
        assert!((y[(0, 1)] - y[(1, 0)]).norm() < 1e-14);
        assert!((y[(0, 0)] - c(0.01, 0.05).inv() / (1.025 * 1.025)).norm() < 1e-9);
    }
}

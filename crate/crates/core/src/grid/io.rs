use std::path::Path;

use super::Network;
use crate::error::{Error, Result};

impl Network {
    /// Parse and validate a network definition. `origin` only labels errors.
    pub fn from_json_str(text: &str, origin: &Path) -> Result<Network> {
        let net: Network = serde_json::from_str(text).map_err(|e| Error::parse(origin, &e))?;
        net.validate()?;
        Ok(net)
    }

    pub fn load_json(path: &Path) -> Result<Network> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Network::from_json_str(&text, path)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("network serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{cigre_mv_fixture, lv_feeder_fixture};

    #[test]
    fn fixtures_round_trip_through_json() {
        for net in [cigre_mv_fixture(), lv_feeder_fixture(1)] {
            let back = Network::from_json_str(&net.to_json_string(), Path::new("mem")).unwrap();
            assert_eq!(back, net);
        }
    }

    #[test]
    fn minimal_document_uses_defaults() {
        let text = r#"{
            "buses": [
                {"id": 0, "kind": "slack", "v_nominal": 1.0, "v_min": 0.9, "v_max": 1.1},
                {"id": 1, "kind": "pq", "v_nominal": 1.0, "v_min": 0.95, "v_max": 1.05}
            ],
            "branches": [{"from_bus": 0, "to_bus": 1, "series_impedance": [0.0, 0.1]}],
            "injections": [{"bus": 1, "p": -0.1, "q": 0.0}]
        }"#;
        let net = Network::from_json_str(text, Path::new("mem")).unwrap();
        assert_eq!(net.base_mva, 1.0);
        assert_eq!(net.branches[0].tap_ratio, 1.0);
        assert!(net.actuators.is_empty());
    }

    #[test]
    fn parse_error_reports_position() {
        let err =
            Network::from_json_str("{\n  \"buses\": [,]\n}", Path::new("bad.json")).unwrap_err();
        match err {
            Error::Parse { line, path, .. } => {
                assert_eq!(line, 2);
                assert_eq!(path, Path::new("bad.json"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_field_is_named() {
        let text = r#"{"buses": [{"id": 0, "kind": "slack", "v_nominal": 1.0, "v_min": 0.9}], "branches": []}"#;
        let err = Network::from_json_str(text, Path::new("x.json")).unwrap_err();
        assert!(err.to_string().contains("v_max"), "{err}");
    }
}

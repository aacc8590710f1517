//! One TOML file describes a whole experiment: the scenario, the planner
//! parameters, the filter parameters, the input bounds, and the online
//! tuning. Every field has a default; unknown keys are rejected.

use crate::dynamics::InputBounds;
use crate::navigator::NavParams;
use crate::safety::FilterParams;
use crate::sim::Scenario;
use crate::trajopt::TrajoptConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub trajopt: TrajoptConfig,
    pub filter: FilterParams,
    pub bounds: InputBounds,
    pub nav: NavParams,
    pub scenario: Scenario,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Config, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Config, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization is infallible")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.trajopt
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.filter
            .validate()
            .map_err(ConfigError::Invalid)?;
        self.bounds
            .validate()
            .map_err(ConfigError::Invalid)?;
        self.scenario
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = Config::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let back = Config::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = Config::from_toml_str(
            r#"
            [trajopt]
            T = 32
            tau = 3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.trajopt.horizon, 32);
        assert_eq!(cfg.trajopt.ts, 0.5);
        assert_eq!(cfg.filter.gamma, 0.05);
    }

    #[test]
    fn unknown_keys_rejected_with_key_name() {
        let err = Config::from_toml_str(
            r#"
            [trajopt]
            horizons = 16
            "#,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("horizons"), "diagnostic must name the key: {msg}");
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_toml_str("[trajopt]\nT = 17\n").is_err());
        assert!(Config::from_toml_str("[filter]\ngamma = 0.0\n").is_err());
    }

    #[test]
    fn obstacles_parse_with_shapes_and_motion() {
        let cfg = Config::from_toml_str(
            r#"
            [[scenario.obstacles]]
            id = 0
            shape = { kind = "circle", center = [2.0, 1.0], radius = 0.3 }
            motion = { waypoints = [[2.0, 1.0], [2.0, -1.0]], speed = 0.8 }

            [[scenario.obstacles]]
            id = 1
            shape = { kind = "union", members = [
                { kind = "rect", min = [1.0, -1.4], max = [1.4, 1.4], corner_radius = 0.05 },
                { kind = "rect", min = [-1.0, 1.0], max = [1.4, 1.4], corner_radius = 0.05 },
            ] }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.scenario.obstacles.len(), 2);
        assert!(cfg.scenario.obstacles[0].motion.is_some());
    }
}

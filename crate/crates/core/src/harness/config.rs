//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::CarState;
use crate::harness::noise::{NoiseConvention, NoiseTarget};
use crate::nmpc::Scheme;
use crate::ocp::ObjectiveMode;
use crate::reference::TrackKind;
use crate::sensitivity::ChainRule;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid configuration file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    /// Reference CSV (optionally gzip-compressed); overrides the generator.
    pub file: Option<PathBuf>,
    pub kind: TrackKind,
    pub speed: f64,
    pub radius: f64,
    pub straight_length: f64,
    pub bend_length: f64,
    /// Start pose of the generated reference.
    pub origin: [f64; 3],
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            file: None,
            kind: TrackKind::Oval,
            speed: 10.0,
            radius: 40.0,
            straight_length: 100.0,
            bend_length: 20.0,
            // The vehicle starts 8.3 m beside the reference.
            origin: [0.0, -8.3, 0.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HorizonConfig {
    /// Preview horizon (intervals).
    pub n: usize,
    /// Control horizon.
    pub m: usize,
    /// Sampling time [s].
    pub h: f64,
    /// Closed-loop duration [s].
    pub t_f: f64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self {
            n: 11,
            m: 3,
            h: 0.3,
            t_f: 110.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub alpha: [f64; 3],
    pub mode: ObjectiveMode,
    /// Multiple of the stage state cost charged on the last predicted state.
    pub terminal_weight: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            alpha: [1.0, 0.1, 0.001],
            mode: ObjectiveMode::Integral,
            terminal_weight: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub amplitude: f64,
    pub convention: NoiseConvention,
    pub target: NoiseTarget,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            amplitude: 0.05,
            convention: NoiseConvention::HalfWidth,
            target: NoiseTarget::State,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivityConfig {
    /// Scaled deviation above which the update is replaced by a re-solve.
    pub fallback_threshold: f64,
    pub chain_rule: ChainRule,
    pub compute_last: bool,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            fallback_threshold: 0.5,
            chain_rule: ChainRule::ClosedLoop,
            compute_last: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub schemes: Vec<Scheme>,
    pub wheelbase: f64,
    pub initial_state: CarState,
    pub track: TrackConfig,
    pub horizon: HorizonConfig,
    pub objective: ObjectiveConfig,
    pub noise: NoiseConfig,
    pub sensitivity: SensitivityConfig,
    /// Re-solve in the re-optimizing scheme only when the state deviates.
    pub reopt_on_deviation_only: bool,
    /// Run schemes concurrently.
    pub parallel: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            schemes: Scheme::ALL.to_vec(),
            wheelbase: 4.0,
            initial_state: CarState::new(0.0, 0.0, 0.0, 10.0, 0.0),
            track: TrackConfig::default(),
            horizon: HorizonConfig::default(),
            objective: ObjectiveConfig::default(),
            noise: NoiseConfig::default(),
            sensitivity: SensitivityConfig::default(),
            reopt_on_deviation_only: true,
            parallel: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let hz = &self.horizon;
        if hz.n == 0 {
            return bad("horizon.n must be at least 1");
        }
        if hz.m == 0 || hz.m > hz.n {
            return bad("horizon.m must satisfy 1 <= m <= n");
        }
        if !(hz.h > 0.0 && hz.h.is_finite()) {
            return bad("horizon.h must be positive");
        }
        if !(hz.t_f > 0.0 && hz.t_f.is_finite()) {
            return bad("horizon.t_f must be positive");
        }
        if !(self.wheelbase > 0.0) {
            return bad("wheelbase must be positive");
        }
        if self
            .objective
            .alpha
            .iter()
            .any(|a| !(*a >= 0.0 && a.is_finite()))
        {
            return bad("objective.alpha entries must be non-negative");
        }
        if !(self.objective.terminal_weight >= 0.0 && self.objective.terminal_weight.is_finite()) {
            return bad("objective.terminal_weight must be non-negative");
        }
        if !(self.noise.amplitude >= 0.0 && self.noise.amplitude.is_finite()) {
            return bad("noise.amplitude must be non-negative");
        }
        if !(self.sensitivity.fallback_threshold > 0.0) {
            return bad("sensitivity.fallback_threshold must be positive");
        }
        if self.schemes.is_empty() {
            return bad("at least one scheme is required");
        }
        if !self.initial_state.is_finite() {
            return bad("initial_state must be finite");
        }
        Ok(())
    }

    /// Half-width of the noise distribution.
    pub fn noise_half_width(&self) -> f64 {
        self.noise.convention.half_width(self.noise.amplitude)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.horizon.n, 11);
        assert_eq!(cfg.noise_half_width(), 0.05);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("sead = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("[horizon]\nN = 3").is_err());
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.schemes = vec![Scheme::Classic, Scheme::MultistepSens];
        cfg.noise.convention = NoiseConvention::PeakToPeak;
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.noise_half_width(), 0.025);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(ExperimentConfig::from_toml_str("[horizon]\nm = 12").is_err());
        assert!(ExperimentConfig::from_toml_str("[noise]\namplitude = -1.0").is_err());
    }
}

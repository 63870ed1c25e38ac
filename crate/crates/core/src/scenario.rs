//! Link scenarios: one structured, human-editable file per experiment.
//!
//! Files are TOML with every physical quantity carrying its unit in the key
//! name. The three field configurations ship as presets under `scenarios/`
//! and are compiled in so the tools work from any directory.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keyrate::{KeyRateError, LinkBudget, Placement, ReconciliationEfficiency, SourceDetectorParams};
use crate::simulator::{ChannelModel, ClockModel, DetectorModel, Fading, SourceModel};

pub const PRESET_NAMES: [&str; 3] = ["at-alice", "asymmetric", "middle"];

const AT_ALICE: &str = include_str!("../../../scenarios/at-alice.toml");
const ASYMMETRIC: &str = include_str!("../../../scenarios/asymmetric.toml");
const MIDDLE: &str = include_str!("../../../scenarios/middle.toml");

/// Largest arm mismatch still accepted for a symmetric (middle) layout.
const MIDDLE_ARM_TOLERANCE_DB: f64 = 1.0;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown scenario preset `{0}` (expected one of at-alice, asymmetric, middle)")]
    UnknownPreset(String),
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("cannot serialize scenario: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("inconsistent scenario: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    KeyRate(#[from] KeyRateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    /// Alice's arm: fibers, optics and analyzer.
    pub alice_arm_db: f64,
    pub bob_arm_db: f64,
    #[serde(default)]
    pub alice_fading: Fading,
    #[serde(default)]
    pub bob_fading: Fading,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    /// Pair coincidences detected directly at the source.
    pub local_pair_rate_hz: f64,
    /// Singles detected directly at the source, per arm.
    pub local_singles_rate_hz: f64,
    pub v_sys: f64,
    /// In-field visibility factor on top of `v_sys * v_acc`.
    #[serde(default = "one")]
    pub field_visibility: f64,
    #[serde(default)]
    pub coherence_window_ns: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub placement: Placement,
    pub coincidence_window_ns: f64,
    pub duration_s: f64,
    pub seed: u64,
    pub link: LinkConfig,
    pub source: SourceConfig,
    pub alice_detector: DetectorModel,
    pub bob_detector: DetectorModel,
    #[serde(default)]
    pub clock: ClockModel,
    #[serde(default)]
    pub error_correction: ReconciliationEfficiency,
}

impl ScenarioConfig {
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let text = match name {
            "at-alice" => AT_ALICE,
            "asymmetric" => ASYMMETRIC,
            "middle" => MIDDLE,
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        Self::from_toml_str(text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Inconsistent(msg));
        self.source_detector_params().validate()?;
        let budget = self.link_budget()?;
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return bad(format!("duration_s must be positive, got {}", self.duration_s));
        }
        if !(self.source.local_pair_rate_hz > 0.0) {
            return bad("local_pair_rate_hz must be positive".into());
        }
        if !(self.source.coherence_window_ns >= 0.0) {
            return bad("coherence_window_ns must be non-negative".into());
        }
        for (who, d) in [("alice", &self.alice_detector), ("bob", &self.bob_detector)] {
            d.validate()
                .map_err(|m| ConfigError::Inconsistent(format!("{who}_detector: {m}")))?;
        }
        for (who, f) in [("alice", &self.link.alice_fading), ("bob", &self.link.bob_fading)] {
            f.validate()
                .map_err(|m| ConfigError::Inconsistent(format!("{who}_fading: {m}")))?;
        }
        self.clock.validate().map_err(ConfigError::Inconsistent)?;
        match self.placement {
            Placement::AtAlice if self.link.alice_fading != Fading::None => {
                bad("source at Alice: her photons are analyzed locally and cannot fade".into())
            }
            Placement::Middle if (budget.alice_arm_db - budget.bob_arm_db).abs() > MIDDLE_ARM_TOLERANCE_DB => {
                bad(format!(
                    "source in the middle needs equal arms, got {} dB and {} dB",
                    budget.alice_arm_db, budget.bob_arm_db
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn link_budget(&self) -> Result<LinkBudget, KeyRateError> {
        LinkBudget::new(self.placement, self.link.alice_arm_db, self.link.bob_arm_db)
    }

    pub fn source_detector_params(&self) -> SourceDetectorParams {
        SourceDetectorParams {
            local_pair_rate: self.source.local_pair_rate_hz,
            local_singles_rate_per_arm: self.source.local_singles_rate_hz,
            dark_rate_alice: self.alice_detector.dark_rate_per_detector_hz,
            dark_rate_bob: self.bob_detector.dark_rate_per_detector_hz,
            coincidence_window_ns: self.coincidence_window_ns,
            v_sys: self.source.v_sys,
            field_visibility: self.source.field_visibility,
            error_correction: self.error_correction.clone(),
        }
    }

    /// Continuous-wave source seen by the simulator. The local pair and
    /// singles rates fix both the emitted pair rate and the per-arm
    /// collection efficiency: `pairs = R * eta^2`, `singles = R * eta`.
    pub fn source_model(&self) -> SourceModel {
        let eta = self.source.local_pair_rate_hz / self.source.local_singles_rate_hz;
        SourceModel {
            pair_rate: self.source.local_singles_rate_hz / eta,
            collection_efficiency: eta,
            v_sys: self.source.v_sys * self.source.field_visibility,
            coherence_window_ns: self.source.coherence_window_ns,
        }
    }

    pub fn alice_channel(&self) -> ChannelModel {
        ChannelModel {
            mean_attenuation_db: self.link.alice_arm_db,
            fading: self.link.alice_fading.clone(),
        }
    }

    pub fn bob_channel(&self) -> ChannelModel {
        ChannelModel {
            mean_attenuation_db: self.link.bob_arm_db,
            fading: self.link.bob_fading.clone(),
        }
    }

    /// Total attenuation re-split for a new total along this placement's
    /// geometry, keeping everything else.
    pub fn with_total_attenuation(&self, total_db: f64) -> Result<Self, ConfigError> {
        let budget = LinkBudget::for_total(self.placement, total_db)?;
        let mut c = self.clone();
        c.link.alice_arm_db = budget.alice_arm_db;
        c.link.bob_arm_db = budget.bob_arm_db;
        Ok(c)
    }
}

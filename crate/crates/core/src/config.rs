//! Top-level experiment configuration and unit-suffixed durations.
//!
//! Configs are TOML. Durations accept a bare number (seconds) or a string
//! with one of the suffixes `us`, `ms`, `s`; they are always stored and
//! serialized as seconds.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/demo"
//!
//! [sensor]
//! full_well = 1000.0
//! # other sensor keys default to the values in `SensorSection`
//!
//! [budget]
//! horizon = "3ms"
//! frames = 3
//! min_exposure = "0us"
//! readout = "500us"
//! idle_slot = true
//!
//! [scene]
//! [motion]
//! [loss]
//! [train]
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reconstruct::LossConfig;
use crate::scene::{MotionConfig, SceneConfig};
use crate::schedule::BudgetConfig;
use crate::sensor::{NoiseMode, SensorSpec};
use crate::trainer::TrainConfig;

/// Parses `"500us"`, `"3ms"`, `"0.003s"` or `"0.003"` into seconds.
pub fn parse_duration(text: &str) -> Result<f64> {
    let t = text.trim();
    // dividing by an exact power of ten keeps "500us" == 500e-6 bitwise
    let (num, per_second) = if let Some(v) = t.strip_suffix("us") {
        (v, 1e6)
    } else if let Some(v) = t.strip_suffix("µs") {
        (v, 1e6)
    } else if let Some(v) = t.strip_suffix("ms") {
        (v, 1e3)
    } else if let Some(v) = t.strip_suffix('s') {
        (v, 1.0)
    } else {
        (t, 1.0)
    };
    let value: f64 = num
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse duration {text:?}; expected e.g. \"500us\", \"3ms\" or \"0.003s\"")))?;
    if !value.is_finite() || value < 0.0 {
        return Err(Error::Config(format!("duration {text:?} must be finite and nonnegative")));
    }
    Ok(value / per_second)
}

/// Serde adapter for durations: reads a number of seconds or a suffixed
/// string, writes seconds.
pub mod seconds {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(*v)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = f64;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a duration in seconds or a string such as \"500us\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
                Ok(v)
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
                Ok(v as f64)
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
                Ok(v as f64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
                super::parse_duration(v).map_err(E::custom)
            }
        }
        d.deserialize_any(V)
    }
}

/// The `[sensor]` section. Keys are SI units unless suffixed otherwise;
/// `linear_limit` defaults to 90% of `full_well`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorSection {
    /// Wavelength in metres.
    pub wavelength: f64,
    /// Pixel area in square metres.
    pub pixel_area: f64,
    pub quantum_efficiency: f64,
    /// Dark current in amperes.
    pub dark_current: f64,
    /// Read noise standard deviation in electrons.
    pub read_noise: f64,
    /// Raw DN per electron.
    pub gain: f64,
    /// Full-well capacity in electrons.
    pub full_well: f64,
    /// Electrons where the response starts to roll off.
    pub linear_limit: Option<f64>,
    pub bits: u32,
    pub noise: NoiseMode,
}

impl Default for SensorSection {
    fn default() -> Self {
        let s = SensorSpec::default();
        Self {
            wavelength: s.wavelength,
            pixel_area: s.pixel_area,
            quantum_efficiency: s.quantum_efficiency,
            dark_current: s.dark_current,
            read_noise: s.read_noise,
            gain: s.gain,
            full_well: s.full_well(),
            linear_limit: None,
            bits: s.bits,
            noise: NoiseMode::default(),
        }
    }
}

impl SensorSection {
    pub fn spec(&self) -> Result<SensorSpec> {
        let linear_limit = self.linear_limit.unwrap_or(0.9 * self.full_well);
        let spec = SensorSpec {
            wavelength: self.wavelength,
            pixel_area: self.pixel_area,
            quantum_efficiency: self.quantum_efficiency,
            dark_current: self.dark_current,
            read_noise: self.read_noise,
            gain: self.gain,
            linear_limit,
            rolloff: self.full_well - linear_limit,
            bits: self.bits,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Everything one experiment needs. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RootConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    pub sensor: SensorSection,
    pub budget: BudgetConfig,
    pub scene: SceneConfig,
    pub motion: MotionConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RootConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RootConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Checks every section. Schedule infeasibility is reported as
    /// [`Error::Infeasible`], everything else as [`Error::Config`].
    pub fn validate(&self) -> Result<()> {
        self.sensor.spec()?;
        self.budget.validate()?;
        self.scene.validate()?;
        self.motion.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn durations_accept_suffixes() {
        assert_eq!(parse_duration("500us").unwrap(), 500e-6);
        assert_eq!(parse_duration("3ms").unwrap(), 3e-3);
        assert_eq!(parse_duration("0.25 s").unwrap(), 0.25);
        assert_eq!(parse_duration("1e-3").unwrap(), 1e-3);
        assert!(parse_duration("3 minutes").is_err());
        assert!(parse_duration("-1ms").is_err());
    }
}

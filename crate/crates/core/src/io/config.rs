//! Sectioned TOML experiment config.
//!
//! One master `seed` at top level feeds every substream; per-section seeds
//! are not accepted in the file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::convert::ConvertConfig;
use crate::cost::CostConfig;
use crate::device::DeviceParams;
use crate::error::{Error, Result};
use crate::montecarlo::SweepConfig;
use crate::nn::TrainConfig;
use crate::snn::SimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub device: DeviceParams,
    pub train: TrainConfig,
    pub convert: ConvertConfig,
    pub sim: SimConfig,
    pub sweep: SweepConfig,
    pub cost: CostConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            device: DeviceParams::default(),
            train: TrainConfig::default(),
            convert: ConvertConfig::default(),
            sim: SimConfig::default(),
            sweep: SweepConfig::default(),
            cost: CostConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    /// Copy with the master seed pushed into every section.
    pub fn resolved(mut self) -> Self {
        self.train.seed = self.seed;
        self.sim.seed = self.seed;
        self.sweep.seed = self.seed;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.resolved()
    }

    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        self.train.validate()?;
        self.convert.validate()?;
        self.sim.validate()?;
        self.cost.validate()?;
        if self.sweep.trials == 0 || self.sweep.image_count == 0 {
            return Err(Error::InvalidParam("sweep trials and image_count must be > 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = ExperimentConfig::default().with_seed(42);
        cfg.device.t_write = 1e-7;
        cfg.sim.image_subset = Some(200);
        cfg.cost.crossbar_total_um2 = Some(2895e3);
        let text = cfg.to_toml();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml(), text);
        let default = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(default, ExperimentConfig::default().resolved());
        assert_eq!(ExperimentConfig::from_toml(&default.to_toml()).unwrap(), default);
    }

    #[test]
    fn seed_reaches_sections() {
        let cfg = ExperimentConfig::from_toml("seed = 9\n[sim]\nsteps = 20\n").unwrap();
        assert_eq!((cfg.train.seed, cfg.sim.seed, cfg.sweep.seed), (9, 9, 9));
        assert_eq!(cfg.sim.steps, 20);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in ["bogus = 1\n", "[device]\ntau = 1.0\n", "[sim]\nseed = 3\n", "[nope]\n"] {
            let e = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(matches!(e, Error::Config(_)), "{text}: {e}");
        }
    }
}

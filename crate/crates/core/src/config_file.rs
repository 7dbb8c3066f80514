//! JSON run configuration: a model description plus training settings.
//! Unknown keys are rejected at every level.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::ModelConfig;
use crate::error::Result;
use crate::harness::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl ConfigFile {
    pub fn new(model: ModelConfig) -> Self {
        ConfigFile { model, train: TrainConfig::default() }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: ConfigFile = serde_json::from_str(s)?;
        c.model.validate()?;
        c.train.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_every_preset() {
        for v in ["T", "S", "M", "L", "micro"] {
            let c = ConfigFile::new(ModelConfig::variant(v).unwrap());
            assert_eq!(ConfigFile::from_json(&c.to_json()).unwrap(), c);
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let c = ConfigFile::new(ModelConfig::variant("T").unwrap());
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        v["model"]["stages"][0]["heads"] = 4.into();
        assert!(ConfigFile::from_json(&v.to_string()).is_err());
        let mut v: serde_json::Value = serde_json::from_str(&c.to_json()).unwrap();
        v["extra"] = true.into();
        assert!(ConfigFile::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn ratios_accept_numbers() {
        let c = ConfigFile::new(ModelConfig::variant("S").unwrap());
        let s = c.to_json().replace("\"1/4\"", "0.25");
        assert_eq!(ConfigFile::from_json(&s).unwrap(), c);
    }
}

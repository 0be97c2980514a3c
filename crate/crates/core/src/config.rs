//! TOML experiment configuration with dotted-key overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::PhantomSpec;
use crate::engine::TrainConfig;
use crate::error::{Error, Result};
use crate::infer::SlidingSpec;
use crate::network::NetworkConfig;

/// Synthetic data used when no case directory is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub phantom: PhantomSpec,
    pub train_cases: usize,
    pub val_cases: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { phantom: PhantomSpec::default(), train_cases: 8, val_cases: 2, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub infer: SlidingSpec,
    pub synth: SynthConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply `section.key=value` overrides; values are parsed as TOML
    /// (falling back to a bare string).
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = toml::Table::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = parse_value(raw.trim());
            let path: Vec<&str> = key.trim().split('.').collect();
            let (last, parents) = path.split_last().expect("split yields one item");
            let mut table = &mut root;
            for p in parents {
                table = table
                    .get_mut(*p)
                    .and_then(|v| v.as_table_mut())
                    .ok_or_else(|| Error::Config(format!("unknown config section {p:?} in {key:?}")))?;
            }
            if !table.contains_key(*last) {
                return Err(Error::Config(format!("unknown config key {key:?}")));
            }
            table.insert(last.to_string(), value);
        }
        let out: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        let m = self.network.size_multiple();
        if self.infer.patch.iter().any(|p| p % m != 0) {
            return Err(Error::Config(format!("inference patch {:?} must be a multiple of {m}", self.infer.patch)));
        }
        if self.train.augment && self.train.augmentation.crop.iter().any(|p| p % m != 0) {
            return Err(Error::Config(format!(
                "training crop {:?} must be a multiple of {m}",
                self.train.augmentation.crop
            )));
        }
        Ok(())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::Pairing;

    #[test]
    fn default_round_trips_through_toml() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_file_and_overrides() {
        let c = ExperimentConfig::from_toml("[network]\nbase_width = 8\n[network.mfci]\nl1 = 2\n").unwrap();
        assert_eq!(c.network.base_width, 8);
        assert_eq!(c.network.mfci.l1, 2);
        assert_eq!(c.network.mfci.l2, 4);
        let o = c
            .with_overrides(&["train.epochs=3", "network.pairing=t1_flair_t1ce_t2", "infer.patch=[32,32,32]", "train.optimizer.lr=0.01"])
            .unwrap();
        assert_eq!(o.train.epochs, 3);
        assert_eq!(o.network.pairing, Pairing::T1FlairT1ceT2);
        assert_eq!(o.infer.patch, [32; 3]);
        assert_eq!(o.train.optimizer.lr, 0.01);
    }

    #[test]
    fn bad_keys_are_rejected() {
        let c = ExperimentConfig::default();
        assert!(c.with_overrides(&["train.epoch=3"]).is_err());
        assert!(c.with_overrides(&["nosuch.x=1"]).is_err());
        assert!(c.with_overrides(&["train.epochs"]).is_err());
        assert!(c.with_overrides(&["train.epochs=\"many\""]).is_err());
        assert!(ExperimentConfig::from_toml("[network]\nwidth = 3\n").is_err());
    }

    #[test]
    fn patch_must_fit_the_network() {
        let mut c = ExperimentConfig::default();
        c.infer.patch = [24, 32, 32];
        assert!(c.validate().is_err());
    }
}

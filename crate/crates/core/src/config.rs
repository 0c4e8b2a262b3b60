//! Experiment configuration, read from and written to TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{AdaptConfig, AdaptScope};
use crate::augment::TransformSpec;
use crate::data::{CorruptionKind, InputShape};
use crate::error::{Error, Result};
use crate::model::Architecture;
use crate::train::{TrainConfig, Variant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub channels: usize,
    pub length: usize,
    pub difficulty: f64,
    pub seed: u64,
}

impl DataConfig {
    pub fn shape(&self) -> InputShape {
        InputShape { channels: self.channels, length: self.length }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { num_classes: 4, samples_per_class: 240, channels: 2, length: 16, difficulty: 0.5, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub num_stages: usize,
    pub groups: usize,
    pub proj_hidden: usize,
    pub proj_dim: usize,
}

impl ModelConfig {
    pub fn architecture(&self, shape: InputShape, num_classes: usize) -> Architecture {
        Architecture {
            input_dim: shape.size(),
            width: self.width,
            num_stages: self.num_stages,
            groups: self.groups,
            proj_hidden: self.proj_hidden,
            proj_dim: self.proj_dim,
            num_classes,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { width: 32, num_stages: 2, groups: 4, proj_hidden: 32, proj_dim: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionSweep {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub seed: u64,
}

impl Default for CorruptionSweep {
    fn default() -> Self {
        CorruptionSweep { kinds: CorruptionKind::ALL.to_vec(), severities: vec![5], seed: 17 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct SweepConfig {
    /// Prototype counts to train and adapt with. Empty means only
    /// `train.num_prototypes`.
    pub num_prototypes: Vec<usize>,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    /// Views for the prototype variants and for test-time adaptation.
    pub augment: TransformSpec,
    /// Views for the supervised-only baseline.
    pub baseline_augment: TransformSpec,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub corruptions: CorruptionSweep,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("runs/default"),
            seeds: vec![0, 1, 2],
            data: DataConfig::default(),
            model: ModelConfig::default(),
            augment: TransformSpec::default(),
            baseline_augment: TransformSpec::weak(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            corruptions: CorruptionSweep::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list must not be empty".into()));
        }
        self.augment.validate()?;
        self.baseline_augment.validate()?;
        self.train.validate()?;
        self.adapt.validate()?;
        self.model.architecture(self.data.shape(), self.data.num_classes).validate()?;
        if self.sweep.num_prototypes.contains(&0) {
            return Err(Error::Config("prototype counts must be positive".into()));
        }
        Ok(())
    }

    /// Prototype counts to run: the sweep list, or the single configured count.
    pub fn prototype_counts(&self) -> Vec<usize> {
        if self.sweep.num_prototypes.is_empty() {
            vec![self.train.num_prototypes]
        } else {
            self.sweep.num_prototypes.clone()
        }
    }

    /// Hex digest of the canonical TOML rendering, excluding the output
    /// directory so relocated runs keep their provenance tag.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn train_for(&self, variant: Variant, seed: u64, num_prototypes: usize) -> TrainConfig {
        TrainConfig { variant, seed, num_prototypes, ..self.train.clone() }
    }

    pub fn augment_for(&self, variant: Variant) -> &TransformSpec {
        match variant {
            Variant::Baseline => &self.baseline_augment,
            _ => &self.augment,
        }
    }

    pub fn with_scope(mut self, scope: AdaptScope) -> Self {
        self.adapt.scope = scope;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_hash_stability() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let mut d = c.clone();
        d.train.epochs += 1;
        assert_ne!(d.hash(), c.hash());
        d = c.clone();
        d.output_dir = "elsewhere".into();
        assert_eq!(d.hash(), c.hash());
    }

    #[test]
    fn partial_files_take_defaults_and_unknown_keys_fail() {
        let c: ExperimentConfig = toml::from_str("seeds = [5]\n[train]\nepochs = 3\n").unwrap_or_else(|e| panic!("{e}"));
        assert_eq!(c.seeds, vec![5]);
        assert_eq!(c.train.epochs, 3);
        assert!(toml::from_str::<ExperimentConfig>("bogus = 1\n").is_err());
    }

    #[test]
    fn empty_seed_list_is_config_error() {
        let c = ExperimentConfig { seeds: vec![], ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}

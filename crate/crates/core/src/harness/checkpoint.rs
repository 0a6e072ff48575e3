//! Checkpoint directories and run manifests.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{EpochMetrics, TrainConfig};
use crate::encoders::{DualEncoder, Vocab};
use crate::error::Result;
use crate::evalret::fingerprint;
use crate::params::{Params, CHECKPOINT_MAGIC};

/// Provenance written next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    /// SHA-256 of the run's configuration JSON.
    pub config_hash: String,
    pub crate_version: String,
    pub checkpoint_format: String,
}

impl Manifest {
    pub fn new<C: Serialize>(command: &str, seed: u64, config: &C) -> Result<Self> {
        Ok(Manifest {
            command: command.into(),
            seed,
            config_hash: fingerprint(config)?,
            crate_version: env!("CARGO_PKG_VERSION").into(),
            checkpoint_format: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Writes `params.bin`, `vocab.json`, `config.json`, `history.json` and
/// `manifest.json` into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    model: &DualEncoder<f32>,
    config: &TrainConfig,
    history: &[EpochMetrics],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    model.params.save(&dir.join("params.bin"))?;
    std::fs::write(dir.join("vocab.json"), serde_json::to_string(&model.vocab)?)?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)? + "\n")?;
    std::fs::write(dir.join("history.json"), serde_json::to_string_pretty(history)? + "\n")?;
    Manifest::new("train", config.seed, config)?.write(dir)
}

pub fn load_checkpoint(dir: &Path) -> Result<(DualEncoder<f32>, TrainConfig)> {
    let config: TrainConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
    let vocab: Vocab = serde_json::from_str(&std::fs::read_to_string(dir.join("vocab.json"))?)?;
    let params = Params::load(&dir.join("params.bin"))?;
    Ok((
        DualEncoder {
            config: config.encoder.clone(),
            vocab,
            params,
        },
        config,
    ))
}

//! Versioned run checkpoints: model and encoder parameters, optimizer
//! moments, named RNG states, epoch counter, and the imputation store.
//! Everything round-trips exactly, so resumed runs are bit-identical to
//! uninterrupted ones.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::demiss::ImputationStore;
use crate::error::{Error, Result};
use crate::mixture::MixtureEncoder;
use crate::nn::AmsGrad;
use crate::rng::RngState;
use crate::vae::VAEModel;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Epochs completed when the checkpoint was written.
    pub epoch: usize,
    pub config_hash: String,
    pub model: VAEModel,
    pub encoder: MixtureEncoder,
    pub optimizer_theta: AmsGrad,
    pub optimizer_phi: AmsGrad,
    /// Named generator states (shuffle, latent sampling, imputation, ...).
    pub rng_states: BTreeMap<String, RngState>,
    pub store: Option<ImputationStore>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_vec(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Config(format!("missing checkpoint {}: {e}", path.display())))?;
        let ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

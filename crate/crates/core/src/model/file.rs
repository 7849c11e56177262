use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DeformModel, ModelConfig};
use crate::autodiff::Checkpoint;
use crate::error::{Error, Result};

/// JSON written next to a checkpoint: everything needed to rebuild the
/// model and reproduce the run that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub config: ModelConfig,
    pub vertex_count: usize,
    pub seed: u64,
    #[serde(default)]
    pub puppet: Option<String>,
    pub param_count: usize,
    /// Hex SHA-256 of the checkpoint file.
    pub checkpoint_sha256: String,
    #[serde(default)]
    pub training: Option<serde_json::Value>,
}

impl ModelManifest {
    pub fn new(model: &DeformModel, seed: u64) -> Self {
        ModelManifest {
            config: model.config.clone(),
            vertex_count: model.vertex_count,
            seed,
            puppet: None,
            param_count: model.param_count(),
            checkpoint_sha256: String::new(),
            training: None,
        }
    }

    /// Refuses models that were never trained.
    pub fn require_trained(&self, op: &'static str) -> Result<()> {
        match self.training {
            Some(_) => Ok(()),
            None => Err(Error::Untrained(op)),
        }
    }

    pub fn path_for(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("json")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl DeformModel {
    /// Writes the checkpoint to `path` and the manifest beside it (same stem,
    /// `.json`). Returns the manifest with the checkpoint hash filled in.
    pub fn save(&self, path: impl AsRef<Path>, mut manifest: ModelManifest) -> Result<ModelManifest> {
        let path = path.as_ref();
        let bytes = self.to_checkpoint().to_bytes()?;
        manifest.checkpoint_sha256 = sha256_hex(&bytes);
        manifest.param_count = self.param_count();
        manifest.vertex_count = self.vertex_count;
        manifest.config = self.config.clone();
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        let mpath = ModelManifest::path_for(path);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        Ok(manifest)
    }

    /// Loads a model saved with [`DeformModel::save`], given either file.
    pub fn load(path: impl AsRef<Path>) -> Result<(DeformModel, ModelManifest)> {
        let path = path.as_ref();
        let (ckpt_path, mpath) = if path.extension().is_some_and(|e| e == "json") {
            (path.with_extension("npup"), path.to_path_buf())
        } else {
            (path.to_path_buf(), ModelManifest::path_for(path))
        };
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: ModelManifest = crate::puppet::parse_json(&text, &mpath.display().to_string())
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let bytes = std::fs::read(&ckpt_path).map_err(|e| Error::io(&ckpt_path, e))?;
        let hash = sha256_hex(&bytes);
        if hash != manifest.checkpoint_sha256 {
            return Err(Error::Checkpoint(format!(
                "{} has hash {hash}, manifest records {}",
                ckpt_path.display(),
                manifest.checkpoint_sha256
            )));
        }
        let ckpt = Checkpoint::from_bytes(&bytes)?;
        let model = DeformModel::from_checkpoint(manifest.config.clone(), manifest.vertex_count, &ckpt)?;
        Ok((model, manifest))
    }
}

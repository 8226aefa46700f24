//! Versioned training snapshots with bit-exact parameter round trips.
//!
//! Parameters are stored as JSON numbers; the serializer emits the shortest
//! decimal that parses back to the same f64, so a reloaded checkpoint
//! reproduces forward passes bit for bit.

use crate::config::RunConfig;
use crate::model::{Model, ModelError};
use crate::params::ParamSet;
use crate::tensor::{Shape, Tensor};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint encode/decode: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("unsupported checkpoint schema {0}")]
    Schema(u32),
    #[error("parameter {name}: {len} values for shape {shape:?}")]
    BadTensor { name: String, shape: Shape, len: usize },
    #[error(transparent)]
    Model(Box<ModelError>),
}

impl From<ModelError> for CheckpointError {
    fn from(e: ModelError) -> Self {
        CheckpointError::Model(Box::new(e))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f64>,
    pub trainable: bool,
}

/// Seed bookkeeping: all run randomness is derived from `seed` and counters,
/// so this is the complete generator state.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RngRecord {
    pub seed: u64,
    pub epochs_completed: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: RunConfig,
    pub data_dim: usize,
    /// Epoch whose parameters are stored (best validation loss).
    pub epoch: usize,
    pub validation_loss: f64,
    pub rng: RngRecord,
    pub params: Vec<SavedParam>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        config: &RunConfig,
        epoch: usize,
        validation_loss: f64,
        rng: RngRecord,
    ) -> Self {
        let params = model
            .params()
            .iter()
            .map(|(name, value, trainable)| SavedParam {
                name: name.to_string(),
                shape: value.shape(),
                data: value.to_flat(),
                trainable,
            })
            .collect();
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA,
            config: config.clone(),
            data_dim: model.dim(),
            epoch,
            validation_loss,
            rng,
            params,
        }
    }

    /// Rebuild the parameter set in its stored registration order.
    pub fn param_set(&self) -> Result<ParamSet, CheckpointError> {
        let mut params = ParamSet::new();
        for p in &self.params {
            let tensor = Tensor::from_flat(p.shape, p.data.clone()).ok_or_else(|| {
                CheckpointError::BadTensor { name: p.name.clone(), shape: p.shape, len: p.data.len() }
            })?;
            if p.trainable {
                params.insert(&p.name, tensor).map_err(ModelError::from)?;
            } else {
                params.insert_frozen(&p.name, tensor).map_err(ModelError::from)?;
            }
        }
        Ok(params)
    }

    pub fn to_model(&self) -> Result<Model, CheckpointError> {
        if self.schema_version != CHECKPOINT_SCHEMA {
            return Err(CheckpointError::Schema(self.schema_version));
        }
        Ok(Model::attach(&self.config, self.data_dim, self.param_set()?)?)
    }

    pub fn to_json(&self) -> Result<String, CheckpointError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_json()?.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.schema_version != CHECKPOINT_SCHEMA {
            return Err(CheckpointError::Schema(ckpt.schema_version));
        }
        Ok(ckpt)
    }
}

//! Versioned JSON checkpoints: named parameter tensors plus the training RNG
//! state. Values are stored as f64 (JSON round-trips them exactly); the
//! `precision` tag records which element type produced them.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Snapshot of the training RNG (seed construction + stream + position).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub precision: String,
    pub model: ModelConfig,
    pub step: u64,
    pub rng: Option<RngState>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(model: &TransformerModel<S>, step: u64, rng: Option<RngState>) -> Self {
        let params = model
            .params
            .iter()
            .map(|p| NamedTensor {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            precision: S::DTYPE.to_string(),
            model: model.cfg.clone(),
            step,
            rng,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path)?;
        serde_json::to_writer(BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path)?;
        let ck: Checkpoint = serde_json::from_reader(BufReader::new(f))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        Ok(ck)
    }

    /// Rebuilds the model, overwriting every parameter by name. The element
    /// type must match the recorded precision.
    pub fn instantiate<S: Scalar>(&self) -> Result<TransformerModel<S>> {
        if self.precision != S::DTYPE {
            return Err(Error::Config(format!(
                "checkpoint precision {} loaded as {}",
                self.precision,
                S::DTYPE
            )));
        }
        let mut model = TransformerModel::<S>::new(self.model.clone(), 0)?;
        if self.params.len() != model.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} tensors, model wants {}",
                self.params.len(),
                model.params.len()
            )));
        }
        for nt in &self.params {
            let pid = model
                .param_id(&nt.name)
                .ok_or_else(|| Error::Data(format!("unknown parameter '{}' in checkpoint", nt.name)))?;
            let data: Vec<S> = nt.data.iter().map(|&v| S::of_f64(v)).collect();
            let t = Tensor::from_vec(&nt.shape, data)?;
            if t.shape() != model.params[pid].value.shape() {
                return Err(Error::Data(format!(
                    "parameter '{}': shape {:?} vs model {:?}",
                    nt.name,
                    t.shape(),
                    model.params[pid].value.shape()
                )));
            }
            model.params[pid].value = t;
        }
        Ok(model)
    }
}

//! Versioned JSON model checkpoints.
//!
//! ```json
//! { "format": "predcls-checkpoint", "version": 1,
//!   "dims": {...}, "train_config": {...},
//!   "tensors": [ { "name": "sla.conv1.weight", "shape": [18, 32], "data": [...] }, ... ] }
//! ```
//!
//! Tensors appear in parameter visiting order with row-major data. Floats
//! are written with round-trip precision, so a reloaded model reproduces
//! its scores bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelDims, ModelParams};
use crate::nn::Parameters;
use crate::train::TrainConfig;

pub const FORMAT: &str = "predcls-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dims: ModelDims,
    pub train_config: TrainConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, train_config: &TrainConfig) -> Self {
        let mut tensors = Vec::new();
        model.params.visit("", &mut |name, t| {
            tensors.push(NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.iter().copied().collect(),
            })
        });
        let mut cfg = train_config.clone();
        cfg.attention = model.attention;
        cfg.branches = model.branches;
        Self {
            format: FORMAT.into(),
            version: VERSION,
            dims: model.dims,
            train_config: cfg,
            tensors,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        if self.format != FORMAT {
            return Err(Error::Format(format!("not a checkpoint: format {:?}", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", self.version)));
        }
        self.dims.validate()?;
        let mut params = ModelParams::zeros(&self.dims);
        let mut expected = 0;
        params.visit("", &mut |_, _| expected += 1);
        if expected != self.tensors.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model needs {expected}",
                self.tensors.len()
            )));
        }
        let mut i = 0;
        let mut failure = None;
        params.visit_mut("", &mut |name, mut t| {
            let src = &self.tensors[i];
            i += 1;
            if failure.is_some() {
                return;
            }
            if src.name != name || src.shape != t.shape() || src.data.len() != t.len() {
                failure = Some(Error::Format(format!(
                    "tensor {:?} {:?} does not match expected {name:?} {:?}",
                    src.name,
                    src.shape,
                    t.shape()
                )));
                return;
            }
            for (dst, v) in t.iter_mut().zip(&src.data) {
                *dst = *v;
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(Model {
            dims: self.dims,
            attention: self.train_config.attention,
            branches: self.train_config.branches,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

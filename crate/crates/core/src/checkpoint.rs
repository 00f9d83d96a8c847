//! JSON checkpoints: seed, compiled expression, architecture, and every
//! parameter tensor. Floats are written in shortest round-trip form, so a
//! reload is bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{ExpressionParseError, LossExpression};
use crate::net::{Architecture, ModelBundle};
use crate::tensor::Tensor;
use crate::Scalar;

pub const FORMAT: &str = "m2vae-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint expression: {0}")]
    Expression(#[from] ExpressionParseError),
    #[error("not a checkpoint: {0}")]
    Format(String),
    #[error("parameter {name:?}: {message}")]
    Param { name: String, message: String },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamWire {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointWire {
    format: String,
    version: u32,
    seed: u64,
    architecture: Architecture,
    expression: serde_json::Value,
    params: Vec<ParamWire>,
}

/// A bundle together with the seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub seed: u64,
    pub bundle: ModelBundle<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(seed: u64, bundle: ModelBundle<T>) -> Self {
        Checkpoint { seed, bundle }
    }

    pub fn to_json(&self) -> String {
        let wire = CheckpointWire {
            format: FORMAT.to_string(),
            version: VERSION,
            seed: self.seed,
            architecture: self.bundle.architecture().clone(),
            expression: self.bundle.expression().to_json_value(),
            params: self
                .bundle
                .store()
                .iter()
                .map(|(_, p)| ParamWire {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string(&wire).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let wire: CheckpointWire = serde_json::from_str(text)?;
        if wire.format != FORMAT {
            return Err(CheckpointError::Format(format!("format tag {:?}", wire.format)));
        }
        if wire.version != VERSION {
            return Err(CheckpointError::Format(format!("unsupported version {}", wire.version)));
        }
        let expression = LossExpression::from_json_value(wire.expression)?;
        let mut bundle = ModelBundle::<T>::new(expression, wire.architecture);
        if wire.params.len() != bundle.store().len() {
            return Err(CheckpointError::Format(format!(
                "{} parameters stored, model has {}",
                wire.params.len(),
                bundle.store().len()
            )));
        }
        let ids: Vec<_> = bundle.store().iter().map(|(id, p)| (id, p.name.clone(), p.value.shape().to_vec())).collect();
        for ((id, name, shape), p) in ids.into_iter().zip(wire.params) {
            let err = |message: String| CheckpointError::Param { name: p.name.clone(), message };
            if p.name != name {
                return Err(err(format!("expected parameter {name:?} at this position")));
            }
            if p.shape != shape {
                return Err(err(format!("shape {:?}, model expects {:?}", p.shape, shape)));
            }
            let data: Vec<T> = p.data.iter().map(|&v| T::of(v)).collect();
            let tensor = Tensor::new(p.shape.clone(), data).map_err(|e| err(e.to_string()))?;
            *bundle.store_mut().value_mut(id) = tensor;
        }
        Ok(Checkpoint { seed: wire.seed, bundle })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

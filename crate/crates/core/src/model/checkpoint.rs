//! Versioned JSON checkpoints: named tensors with shapes, flat values in
//! checkpoint order, the stage tag and a config echo.

use std::path::Path;

use ndarray::ArrayViewMutD;
use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ParamGroup, Parameters};
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: u8,
    pub model: ModelConfig,
    /// Configs of every stage that produced these parameters.
    pub train: Vec<TrainConfig>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(model: &ModelConfig, params: &Parameters, stage: u8, train: Vec<TrainConfig>) -> Result<Self> {
        params.check_shapes(model)?;
        let tensors = params
            .tensors()
            .into_iter()
            .map(|(name, group, t)| TensorRecord {
                name,
                group,
                shape: t.shape().to_vec(),
                values: t.iter().copied().collect(),
            })
            .collect::<Vec<_>>();
        if tensors.iter().any(|t| t.values.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument("refusing to checkpoint non-finite parameters".into()));
        }
        Ok(Self {
            version: CHECKPOINT_VERSION,
            stage,
            model: model.clone(),
            train,
            tensors,
        })
    }

    /// Rebuilds parameters, checking names and shapes against the config.
    pub fn params(&self) -> Result<Parameters> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(self.version));
        }
        self.model.validate()?;
        let mut params = Parameters::zeros(&self.model);
        let expected: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|(n, _, t)| (n, t.shape().to_vec()))
            .collect();
        let got: Vec<(String, Vec<usize>)> = self.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
        if expected != got {
            return Err(Error::Shape("checkpoint tensors do not match the model config".into()));
        }
        for ((_, mut dst), rec) in params.tensors_mut().into_iter().zip(&self.tensors) {
            fill(&mut dst, rec)?;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(ckpt.version));
        }
        Ok(ckpt)
    }
}

fn fill(dst: &mut ArrayViewMutD<f64>, rec: &TensorRecord) -> Result<()> {
    if dst.len() != rec.values.len() {
        return Err(Error::Shape(format!(
            "tensor {} holds {} values, shape needs {}",
            rec.name,
            rec.values.len(),
            dst.len()
        )));
    }
    for (d, &v) in dst.iter_mut().zip(&rec.values) {
        *d = v;
    }
    Ok(())
}

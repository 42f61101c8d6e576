use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, TrainConfig};
use super::params::Params;
use crate::error::{Error, Result};
use crate::tensor::optim::Adam;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "layerscene-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub stage1_steps: u64,
    pub stage2_steps: u64,
}

/// Adam state for the stage currently being trained. Moment buffers follow
/// the order of that stage's parameters in the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub stage: u8,
    pub adam: Adam<f32>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub progress: Progress,
    pub params: Params<f32>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    /// Number of f32 values.
    pub len: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub stage: u8,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub progress: Progress,
    pub optimizer: Option<OptimizerEntry>,
    pub blob: String,
    pub tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let params = Params::init(&model, train.seed)?;
        Ok(Checkpoint {
            model,
            train,
            progress: Progress::default(),
            params,
            optimizer: None,
        })
    }

    fn optimizer_names(&self, stage: u8) -> Vec<String> {
        self.params
            .specs()
            .iter()
            .filter(|s| s.group.stage() == stage)
            .map(|s| s.name.clone())
            .collect()
    }

    /// Writes `manifest.json` and `params.bin` into `dir`, creating it.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
            tensors.push(TensorEntry {
                name,
                shape,
                offset: blob.len() as u64,
                len: data.len() as u64,
            });
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (s, v) in self.params.specs().iter().zip(self.params.values()) {
            push(s.name.clone(), s.shape.clone(), v.data());
        }
        if let Some(opt) = &self.optimizer {
            let names = self.optimizer_names(opt.stage);
            if names.len() != opt.adam.first.len() {
                return Err(Error::InvalidArgument(format!(
                    "optimizer has {} slots, stage {} has {} parameters",
                    opt.adam.first.len(),
                    opt.stage,
                    names.len()
                )));
            }
            for (name, m) in names.iter().zip(&opt.adam.first) {
                push(format!("adam.m.{name}"), vec![m.len()], m);
            }
            for (name, v) in names.iter().zip(&opt.adam.second) {
                push(format!("adam.v.{name}"), vec![v.len()], v);
            }
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.model.clone(),
            train: self.train.clone(),
            progress: self.progress,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerEntry {
                stage: o.stage,
                step: o.adam.step,
            }),
            blob: BLOB_FILE.into(),
            tensors,
        };
        let blob_path = dir.join(BLOB_FILE);
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                &manifest_path,
                format!("unsupported checkpoint {} v{}", manifest.format, manifest.version),
            ));
        }
        manifest.model.validate()?;
        manifest.train.validate()?;
        let blob_path = dir.join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let read = |e: &TensorEntry| -> Result<Vec<f32>> {
            let start = e.offset as usize;
            let end = start + 4 * e.len as usize;
            let numel: usize = e.shape.iter().product();
            if end > blob.len() || numel != e.len as usize {
                return Err(Error::format(&blob_path, format!("tensor {} out of range or misshapen", e.name)));
            }
            Ok(blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let find = |name: &str| -> Result<&TensorEntry> {
            manifest
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::format(&manifest_path, format!("missing tensor {name}")))
        };
        let specs = super::nets::layout(&manifest.model);
        let values = specs
            .iter()
            .map(|s| {
                let e = find(&s.name)?;
                Tensor::new(e.shape.clone(), read(e)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let params = Params::from_values(&manifest.model, values)?;
        let mut ckpt = Checkpoint {
            model: manifest.model.clone(),
            train: manifest.train.clone(),
            progress: manifest.progress,
            params,
            optimizer: None,
        };
        if let Some(o) = &manifest.optimizer {
            let names = ckpt.optimizer_names(o.stage);
            let first = names
                .iter()
                .map(|n| read(find(&format!("adam.m.{n}"))?))
                .collect::<Result<Vec<_>>>()?;
            let second = names
                .iter()
                .map(|n| read(find(&format!("adam.v.{n}"))?))
                .collect::<Result<Vec<_>>>()?;
            ckpt.optimizer = Some(OptimizerState {
                stage: o.stage,
                adam: Adam {
                    config: manifest.train.adam,
                    step: o.step,
                    first,
                    second,
                },
            });
        }
        Ok(ckpt)
    }
}

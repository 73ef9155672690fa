//! Checkpoint archive: one safetensors file holding the parameters, the
//! optimizer moments and a JSON record under the `config` metadata key.
//!
//! Tensor names are `param/<name>`, `adam_m/<name>` and `adam_v/<name>`;
//! all tensors are little-endian `F32` with their rank-4 shapes.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointRecord {
    pub format_version: u32,
    pub step: u64,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBundle {
    pub model: Model<f32>,
    pub adam: Option<AdamState<f32>>,
    pub step: u64,
    pub train: Option<TrainConfig>,
}

fn to_bytes(t: &Tensor<f32>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn read_tensor(st: &SafeTensors<'_>, name: &str) -> Result<Tensor<f32>> {
    let view = st
        .tensor(name)
        .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
    if view.dtype() != Dtype::F32 {
        return Err(Error::Checkpoint(format!(
            "tensor `{name}` has dtype {:?}, expected F32",
            view.dtype()
        )));
    }
    let shape: [usize; 4] = view.shape().try_into().map_err(|_| {
        Error::Checkpoint(format!("tensor `{name}` has rank {}", view.shape().len()))
    })?;
    let data = view
        .data()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::new(shape, data)
}

impl CheckpointBundle {
    pub fn new(model: Model<f32>) -> Self {
        Self {
            model,
            adam: None,
            step: 0,
            train: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(adam) = &self.adam {
            if adam.step != self.step {
                return Err(Error::Checkpoint(format!(
                    "optimizer is at step {} but the bundle says {}",
                    adam.step, self.step
                )));
            }
        }
        let record = CheckpointRecord {
            format_version: FORMAT_VERSION,
            step: self.step,
            model: self.model.config.clone(),
            train: self.train.clone(),
        };
        let mut owned: Vec<(String, [usize; 4], Vec<u8>)> = Vec::new();
        let mut push = |prefix: &str, store: &ParamStore<f32>| {
            for (name, t) in store.iter() {
                owned.push((format!("{prefix}/{name}"), t.shape(), to_bytes(t)));
            }
        };
        push("param", &self.model.params);
        if let Some(adam) = &self.adam {
            push("adam_m", &adam.m);
            push("adam_v", &adam.v);
        }
        let views = owned
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.to_vec(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = HashMap::from([(
            "config".to_owned(),
            serde_json::to_string(&record).expect("record serializes"),
        )]);
        safetensors::serialize(views, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, meta) = SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let record_json = meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get("config"))
            .ok_or_else(|| Error::Checkpoint("missing `config` metadata".into()))?;
        let record: CheckpointRecord = serde_json::from_str(record_json)
            .map_err(|e| Error::Checkpoint(format!("config record: {e}")))?;
        if record.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                record.format_version
            )));
        }
        let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = ParamStore::default();
        let mut m = ParamStore::default();
        let mut v = ParamStore::default();
        for name in st.names() {
            let (prefix, rest) = name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            let t = read_tensor(&st, name)?;
            match prefix {
                "param" => params.insert(rest, t),
                "adam_m" => m.insert(rest, t),
                "adam_v" => v.insert(rest, t),
                _ => return Err(Error::Checkpoint(format!("unexpected tensor `{name}`"))),
            }
        }
        let model = Model::from_parts(record.model, params)?;
        let adam = if m.is_empty() && v.is_empty() {
            None
        } else {
            let names: Vec<&str> = model.params.names().collect();
            if m.names().collect::<Vec<_>>() != names || v.names().collect::<Vec<_>>() != names {
                return Err(Error::Checkpoint(
                    "optimizer moments do not match the parameters".into(),
                ));
            }
            Some(AdamState {
                step: record.step,
                m,
                v,
            })
        };
        Ok(Self {
            model,
            adam,
            step: record.step,
            train: record.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // Write-then-rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model<f32> {
        Model::new(ModelConfig {
            channels: 4,
            res_blocks: 1,
            dca_blocks: 1,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let model = tiny();
        let mut bundle = CheckpointBundle::new(model.clone());
        let mut adam = AdamState::new(&model.params);
        adam.step = 17;
        adam.m.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.25));
        bundle.adam = Some(adam);
        bundle.step = 17;
        bundle.train = Some(TrainConfig::default());
        let a = bundle.to_bytes().unwrap();
        let back = CheckpointBundle::from_bytes(&a).unwrap();
        assert_eq!(back, bundle);
        assert_eq!(back.to_bytes().unwrap(), a);
    }

    #[test]
    fn parameters_only_bundle_round_trips() {
        let bundle = CheckpointBundle::new(tiny());
        let back = CheckpointBundle::from_bytes(&bundle.to_bytes().unwrap()).unwrap();
        assert!(back.adam.is_none());
        assert_eq!(back.model, bundle.model);
    }

    #[test]
    fn garbage_is_rejected() {
        assert!(matches!(
            CheckpointBundle::from_bytes(b"not a checkpoint"),
            Err(Error::Checkpoint(_))
        ));
    }
}

//! Single-file checkpoints: parameters and optimizer moments as safetensors,
//! configuration and training state as JSON metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::config::{ModelConfig, TrainConfig};
use crate::pipeline::model::SparseDc;
use crate::pipeline::optim::Adam;

const FORMAT: &str = "sparsedc-checkpoint-1";
const PARAM: &str = "param.";
const MOMENT1: &str = "adam.m.";
const MOMENT2: &str = "adam.v.";

/// Learning-rate plateau and early-stopping bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub best_val_rmse: Option<f64>,
    pub last_val_rmse: Option<f64>,
    /// Consecutive epochs without improvement.
    pub unimproved: usize,
    /// Unimproved epochs since the last decay.
    pub since_decay: usize,
    pub stopped_early: bool,
}

impl TrainState {
    pub fn new(lr: f64) -> Self {
        Self {
            epoch: 0,
            step: 0,
            lr,
            best_val_rmse: None,
            last_val_rmse: None,
            unimproved: 0,
            since_decay: 0,
            stopped_early: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub state: TrainState,
    pub params: BTreeMap<String, Tensor>,
    pub adam: Option<Adam>,
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn capture(model: &SparseDc, train: Option<&TrainConfig>, state: &TrainState, adam: Option<&Adam>) -> Result<Self> {
        Ok(Self {
            model: model.config().clone(),
            train: train.cloned(),
            state: state.clone(),
            params: model.params().snapshot()?,
            adam: adam.cloned(),
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("model".to_string(), serde_json::to_string(&self.model)?);
        meta.insert("state".to_string(), serde_json::to_string(&self.state)?);
        if let Some(t) = &self.train {
            meta.insert("train".to_string(), serde_json::to_string(t)?);
        }
        let mut tensors: Vec<(String, Tensor)> = self.params.iter().map(|(k, v)| (format!("{PARAM}{k}"), v.clone())).collect();
        if let Some(a) = &self.adam {
            let m = AdamMeta {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step,
            };
            meta.insert("adam".to_string(), serde_json::to_string(&m)?);
            tensors.extend(a.m.iter().map(|(k, v)| (format!("{MOMENT1}{k}"), v.clone())));
            tensors.extend(a.v.iter().map(|(k, v)| (format!("{MOMENT2}{k}"), v.clone())));
        }
        let bytes = safetensors::serialize(tensors, Some(meta)).map_err(|e| bad(path, e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| bad(path, e.to_string()))?;
        let meta = header.metadata().clone().ok_or_else(|| bad(path, "missing metadata"))?;
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(bad(path, "not a sparsedc checkpoint"));
        }
        let field = |k: &str| meta.get(k).ok_or_else(|| bad(path, format!("missing `{k}` metadata")));
        let model: ModelConfig = serde_json::from_str(field("model")?)?;
        let state: TrainState = serde_json::from_str(field("state")?)?;
        let train = meta.get("train").map(|t| serde_json::from_str(t)).transpose()?;
        let all = candle::safetensors::load_buffer(&bytes, device)?;
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in all {
            if let Some(k) = name.strip_prefix(PARAM) {
                params.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(MOMENT1) {
                m.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(MOMENT2) {
                v.insert(k.to_string(), t);
            } else {
                return Err(bad(path, format!("unexpected tensor `{name}`")));
            }
        }
        let adam = match meta.get("adam") {
            Some(a) => {
                let a: AdamMeta = serde_json::from_str(a)?;
                Some(Adam {
                    lr: a.lr,
                    beta1: a.beta1,
                    beta2: a.beta2,
                    eps: a.eps,
                    step: a.step,
                    m,
                    v,
                })
            }
            None => None,
        };
        Ok(Self {
            model,
            train,
            state,
            params,
            adam,
        })
    }

    /// Rebuilds the network from the stored config and loads the parameters.
    pub fn build_model(&self, device: &Device) -> Result<SparseDc> {
        let dtype = self
            .params
            .values()
            .next()
            .map(|t| t.dtype())
            .ok_or_else(|| Error::Config("checkpoint holds no parameters".into()))?;
        let model = SparseDc::new(&self.model, 0, dtype, device)?;
        model.load_params(&self.params)?;
        Ok(model)
    }
}

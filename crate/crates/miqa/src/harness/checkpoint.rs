//! Full-model checkpoints: every store tensor plus a JSON snapshot of the
//! training configuration in the container metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::Device;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::store::ParamStore;

use super::TrainConfig;

const CONFIG_KEY: &str = "train_config";
const FORMAT_KEY: &str = "format";
const FORMAT_VALUE: &str = "miqa-checkpoint-v1";

pub fn save_checkpoint(store: &ParamStore, cfg: &TrainConfig, path: &Path) -> Result<()> {
    let mut metadata = HashMap::new();
    metadata.insert(FORMAT_KEY.to_string(), FORMAT_VALUE.to_string());
    let json = serde_json::to_string(cfg).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("config serialization failed: {e}"),
    })?;
    metadata.insert(CONFIG_KEY.to_string(), json);
    store.save(path, Some(metadata))
}

/// A checkpointed model rebuilt and ready for inference or further training.
pub struct LoadedModel {
    pub model: Model,
    pub store: ParamStore,
    pub config: TrainConfig,
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<LoadedModel> {
    let metadata = crate::store::read_metadata(path)?;
    let json = metadata.get(CONFIG_KEY).ok_or_else(|| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("missing {CONFIG_KEY} metadata; not a model checkpoint"),
    })?;
    let config: TrainConfig = serde_json::from_str(json).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: format!("config snapshot unreadable: {e}"),
    })?;
    let mut store = ParamStore::new(config.model.precision.dtype(), device.clone(), config.seed);
    let model = Model::new(&config.model, &mut store)?;
    let report = store.load(path)?;
    if !report.missing.is_empty() {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!("checkpoint is missing model tensors: {:?}", report.missing),
        });
    }
    for name in &report.unexpected {
        eprintln!("warning: checkpoint tensor {name} has no counterpart in the model");
    }
    Ok(LoadedModel { model, store, config })
}

//! Self-describing JSON checkpoints: the training and model configs echoed
//! next to every named parameter array, online and momentum alike.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::toymodel::encoders::{ModelConfig, Params, ToyEncoders};
use crate::toymodel::train::{TrainConfig, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub params: Params,
    pub momentum: Params,
}

impl Checkpoint {
    pub fn capture(cfg: &TrainConfig, enc: &ToyEncoders) -> Self {
        Checkpoint {
            train_config: cfg.clone(),
            model_config: enc.config,
            params: enc.params.clone(),
            momentum: enc.momentum.clone(),
        }
    }

    pub fn into_encoders(self) -> ToyEncoders {
        ToyEncoders { config: self.model_config, params: self.params, momentum: self.momentum }
    }

    pub fn to_json(&self) -> Result<String, TrainError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

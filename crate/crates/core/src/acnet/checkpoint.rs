use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{ArchVariant, ModelConfig};
use super::params::ParamStore;
use super::unet::UNet;
use crate::error::{Error, Result};
use crate::ndgrad::io;
use crate::schedule::ScheduleConfig;
use crate::FEATURE_LAYOUT_VERSION;

/// JSON metadata stored next to the weight container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub feature_layout: u32,
    pub arch: ArchVariant,
    pub seed: u64,
    #[serde(default)]
    pub train_steps: u64,
}

/// A trained or freshly initialised denoiser.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub net: UNet,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn init(model: ModelConfig, schedule: ScheduleConfig, seed: u64) -> Result<Self> {
        let (net, params) = UNet::init(&model, seed)?;
        Ok(Self {
            header: CheckpointHeader {
                arch: model.arch,
                model,
                schedule,
                feature_layout: FEATURE_LAYOUT_VERSION,
                seed,
                train_steps: 0,
            },
            net,
            params,
        })
    }

    /// Location of the JSON header for a weight file.
    pub fn header_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(&str, &crate::Tensor<f32>)> = self
            .params
            .names()
            .iter()
            .map(String::as_str)
            .zip(self.params.tensors())
            .collect();
        io::save(path, &named)?;
        let hp = Self::header_path(path);
        let json = serde_json::to_string_pretty(&self.header)?;
        std::fs::write(&hp, json).map_err(|e| Error::io(&hp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let hp = Self::header_path(path);
        let text = std::fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
        let header: CheckpointHeader = serde_json::from_str(&text)?;
        if header.feature_layout != FEATURE_LAYOUT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint feature layout {} does not match {}",
                header.feature_layout, FEATURE_LAYOUT_VERSION
            )));
        }
        if header.arch != header.model.arch {
            return Err(Error::Format("checkpoint arch disagrees with its model config".into()));
        }
        let (net, mut params) = UNet::init(&header.model, header.seed)?;
        params.load_named(io::load(path)?)?;
        Ok(Self { header, net, params })
    }
}

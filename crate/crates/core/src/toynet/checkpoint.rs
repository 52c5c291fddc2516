//! JSON checkpoints: network config, optional schedule, named parameter tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{NetConfig, ToyNet};
use super::optim::TrainSchedule;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "toynet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

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
    pub config: NetConfig,
    pub schedule: Option<TrainSchedule>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn of(net: &ToyNet, schedule: Option<&TrainSchedule>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: net.config.clone(),
            schedule: schedule.cloned(),
            params: net
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds the network and copies every tensor in, checking names and shapes.
    pub fn into_net(self) -> Result<(ToyNet, Option<TrainSchedule>)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint: format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", self.version)));
        }
        let mut net = ToyNet::new(self.config)?;
        if net.params.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, network expects {}",
                self.params.len(),
                net.params.len()
            )));
        }
        for (p, t) in net.params.iter_mut().zip(self.params) {
            if p.name != t.name || p.shape != t.shape || t.data.len() != p.data.len() {
                return Err(Error::Format(format!(
                    "tensor {:?} {:?} does not match expected {:?} {:?}",
                    t.name, t.shape, p.name, p.shape
                )));
            }
            p.data = t.data;
        }
        Ok((net, self.schedule))
    }
}

pub fn save_checkpoint(net: &ToyNet, schedule: Option<&TrainSchedule>, path: &Path) -> Result<()> {
    let json = serde_json::to_string(&Checkpoint::of(net, schedule))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ToyNet, Option<TrainSchedule>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text)?;
    ck.into_net()
}

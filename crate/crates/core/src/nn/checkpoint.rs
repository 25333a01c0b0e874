//! Checkpoint = `manifest.toml` (spec, masks, training metadata, metrics) +
//! `weights.bin` (tensor blob).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::network::Network;
use crate::nn::spec::NetworkSpec;
use crate::nn::train::{EpochMetrics, TrainConfig};
use crate::scalar::Scalar;
use crate::tensor::{read_tensors, write_tensors, Tensor};

pub const MANIFEST: &str = "manifest.toml";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: NetworkSpec,
    /// Per prunable layer, one `1` (live) or `0` (pruned) per channel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub masks: Option<Vec<String>>,
    #[serde(default)]
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub metrics: Vec<EpochMetrics>,
    pub tensors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor<f32>>,
}

fn encode_mask(m: &[bool]) -> String {
    m.iter().map(|&a| if a { '1' } else { '0' }).collect()
}

fn decode_mask(s: &str) -> Result<Vec<bool>> {
    s.chars()
        .map(|c| match c {
            '1' => Ok(true),
            '0' => Ok(false),
            other => Err(Error::Format(format!("bad mask character {other:?}"))),
        })
        .collect()
}

impl Checkpoint {
    pub fn capture<T: Scalar>(net: &Network<T>, train: Option<&TrainConfig>, metrics: &[EpochMetrics]) -> Self {
        let masks = net.masks();
        let masked = masks.iter().any(|m| m.iter().any(|&a| !a));
        let tensors: Vec<Tensor<f32>> = net.state().into_iter().map(|t| t.cast()).collect();
        Self {
            manifest: Manifest {
                spec: net.spec().clone(),
                masks: masked.then(|| masks.iter().map(|m| encode_mask(m)).collect()),
                epoch: metrics.len(),
                train: train.cloned(),
                metrics: metrics.to_vec(),
                tensors: tensors.len(),
            },
            tensors,
        }
    }

    pub fn restore<T: Scalar>(&self) -> Result<Network<T>> {
        let mut net = Network::new(&self.manifest.spec, &mut crate::rng::Rng::new(0))?;
        let state: Vec<Tensor<T>> = self.tensors.iter().map(|t| t.cast()).collect();
        net.load_state(&state)?;
        if let Some(masks) = &self.manifest.masks {
            let masks = masks.iter().map(|m| decode_mask(m)).collect::<Result<Vec<_>>>()?;
            net.set_masks(&masks)?;
        }
        Ok(net)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let text = toml::to_string(&self.manifest).map_err(|e| Error::Format(e.to_string()))?;
        let mpath = dir.join(MANIFEST);
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        let mut blob = Vec::new();
        write_tensors(&mut blob, &self.tensors).expect("writing to memory");
        let wpath = dir.join(WEIGHTS);
        fs::write(&wpath, blob).map_err(|e| Error::io(&wpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
        manifest.spec.validate()?;
        let wpath = dir.join(WEIGHTS);
        let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
        let tensors = read_tensors::<f32, _>(&mut blob.as_slice())?;
        if tensors.len() != manifest.tensors {
            return Err(Error::Format(format!(
                "manifest lists {} tensors, blob holds {}",
                manifest.tensors,
                tensors.len()
            )));
        }
        Ok(Self { manifest, tensors })
    }
}

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::trace::{PruneEvent, PruningTrace};
use super::{argmin, l1_saliency, FisherAccumulator};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{train_step, BatchStream, Checkpoint, Network, Sgd, SgdHyper};
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMethod {
    Fisher,
    L1,
    /// Uniformly random live channel; a control for the other two.
    Random,
}

impl fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PruneMethod::Fisher => "fisher",
            PruneMethod::L1 => "l1",
            PruneMethod::Random => "random",
        })
    }
}

impl FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fisher" => Ok(PruneMethod::Fisher),
            "l1" => Ok(PruneMethod::L1),
            "random" => Ok(PruneMethod::Random),
            other => Err(Error::Param(format!("unknown pruning method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneConfig {
    pub method: PruneMethod,
    /// Fine-tune learning rate; normally the lowest rate of the training schedule.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Fine-tune steps between consecutive prunes.
    pub steps_per_prune: usize,
    pub batch_size: usize,
    pub augment: bool,
    /// Minimum live channels kept in every prunable layer.
    pub floor: usize,
    /// Stop after this many prunes; `None` runs until every layer is at the floor.
    pub max_events: Option<usize>,
    pub seed: u64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            method: PruneMethod::Fisher,
            lr: 8e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            steps_per_prune: 100,
            batch_size: 128,
            augment: true,
            floor: 1,
            max_events: None,
            seed: 0,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Param(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Param(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.steps_per_prune == 0 {
            return Err(Error::Param("need at least one fine-tune step per prune".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch size must be positive".into()));
        }
        if self.floor == 0 {
            return Err(Error::Param("floor must keep at least one channel".into()));
        }
        Ok(())
    }

    fn hyper(&self) -> SgdHyper {
        SgdHyper {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

pub struct PruneOutcome {
    pub trace: PruningTrace,
    /// Masked network state after the fine-tune that follows each event,
    /// aligned with `trace.events`.
    pub snapshots: Vec<Checkpoint>,
}

/// Alternates fine-tuning and single-channel pruning until every prunable
/// layer is at `config.floor` (or `max_events` prunes have happened).
pub fn prune_loop<T: Scalar>(net: &mut Network<T>, data: &Dataset, config: &PruneConfig) -> Result<PruneOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Param("fine-tune set is empty".into()));
    }
    if data.example_shape() != net.spec().input {
        return Err(Error::Shape(format!(
            "dataset examples {:?} do not match network input {:?}",
            data.example_shape(),
            net.spec().input
        )));
    }
    let mut trace = PruningTrace {
        method: config.method,
        spec: net.spec().clone(),
        initial_widths: net.live_widths(),
        initial_params: net.live_param_count(),
        events: Vec::new(),
    };
    let mut snapshots = Vec::new();
    let root = Rng::new(config.seed);
    let mut stream = BatchStream::new(data.len(), config.batch_size, config.augment, root.fork(1));
    let mut pick_rng = root.fork(2);
    let mut sgd = Sgd::new();
    let mut fisher = FisherAccumulator::new(&net.spec().widths());
    let hyper = config.hyper();
    let mut step = 0usize;

    loop {
        for _ in 0..config.steps_per_prune {
            let (x, y) = stream.next_batch::<T>(data)?;
            train_step(net, &mut sgd, &x, &y, hyper, None).map_err(|e| match e {
                Error::Divergence(m) => Error::Divergence(format!("fine-tune step {step}: {m}")),
                other => other,
            })?;
            if config.method == PruneMethod::Fisher {
                fisher.accumulate_from(net)?;
            }
            step += 1;
        }
        if !trace.events.is_empty() {
            snapshots.push(Checkpoint::capture(net, None, &[]));
        }
        if config.max_events.is_some_and(|m| trace.events.len() >= m) {
            break;
        }
        let masks = net.masks();
        let widths = net.live_widths();
        let mut candidates = Vec::new();
        for (l, mask) in masks.iter().enumerate() {
            if widths[l] <= config.floor {
                continue;
            }
            let scores = match config.method {
                PruneMethod::Fisher => fisher.values()[l].clone(),
                PruneMethod::L1 => l1_saliency(&net.blocks[l].conv1),
                PruneMethod::Random => Vec::new(),
            };
            for (c, _) in mask.iter().enumerate().filter(|(_, a)| **a) {
                let s = match config.method {
                    PruneMethod::Random => pick_rng.uniform(),
                    _ => scores[c],
                };
                candidates.push((l, c, s));
            }
        }
        let Some((layer, channel, saliency)) = argmin(candidates) else {
            break;
        };
        net.prune_channel(layer, channel)?;
        fisher.reset();
        trace.events.push(PruneEvent {
            step,
            layer,
            channel,
            saliency,
            params: net.live_param_count(),
            widths: net.live_widths(),
        });
    }
    Ok(PruneOutcome { trace, snapshots })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in [PruneMethod::Fisher, PruneMethod::L1, PruneMethod::Random] {
            assert_eq!(m.to_string().parse::<PruneMethod>().unwrap(), m);
        }
        assert!("magnitude".parse::<PruneMethod>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(PruneConfig::default().validate().is_ok());
        let c = PruneConfig { floor: 0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = PruneConfig { steps_per_prune: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}

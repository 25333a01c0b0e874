//! Minibatch SGD training loop shared by plain training, pruning fine-tune
//! and attention-transfer distillation.

use serde::{Deserialize, Serialize};

use crate::data::{augment, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::layers::Mode;
use crate::nn::loss::{count_errors, cross_entropy};
use crate::nn::network::Network;
use crate::nn::optim::{Sgd, SgdHyper};
use crate::nn::spec::NetworkSpec;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate.
    pub lr: f64,
    /// The learning rate is divided by this factor at each milestone.
    pub lr_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Horizontal flip plus 4-pixel pad-and-crop.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::wide_resnet_cifar()
    }
}

impl TrainConfig {
    /// 200 epochs at batch 128, lr 0.1 divided by 5 every 60 epochs,
    /// momentum 0.9, weight decay 5e-4.
    pub fn wide_resnet_cifar() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            lr: 0.1,
            lr_decay: 5.0,
            lr_milestones: vec![60, 120, 180],
            momentum: 0.9,
            weight_decay: 5e-4,
            augment: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::param(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be positive"));
        }
        if !(self.lr_decay >= 1.0) {
            return Err(Error::param(format!("decay factor {} must be >= 1", self.lr_decay)));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::param("weight decay must be non-negative"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr / self.lr_decay.powi(passed as i32)
    }

    /// Learning rate of the final epoch of the schedule.
    pub fn lowest_lr(&self) -> f64 {
        self.lr_at(self.epochs.saturating_sub(1))
    }

    pub fn hyper(&self, lr: f64) -> SgdHyper {
        SgdHyper {
            lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_ce: f64,
    /// Auxiliary (attention) loss term; zero for plain training.
    pub train_aux: f64,
    pub train_err: f64,
    pub test_loss: f64,
    pub test_err: f64,
}

/// Extra loss evaluated on the student's attention-point activations.
pub trait AuxLoss<T: Scalar> {
    /// Value of the term for this batch and, when it is active, its gradient
    /// with respect to each attention activation.
    fn evaluate(&mut self, batch: &Tensor<T>, attention: &[Tensor<T>]) -> Result<(f64, Option<Vec<Tensor<T>>>)>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub ce: f64,
    pub aux: f64,
    pub errors: usize,
}

/// One forward/backward/update on a minibatch.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    sgd: &mut Sgd<T>,
    x: &Tensor<T>,
    labels: &[usize],
    hyper: SgdHyper,
    aux: Option<&mut (dyn AuxLoss<T> + '_)>,
) -> Result<StepOutcome> {
    let out = net.forward(x, Mode::Train)?;
    let (ce, dlogits) = cross_entropy(&out.logits, labels)?;
    let ce = ce.as_f64();
    if !ce.is_finite() {
        return Err(Error::Divergence(format!("cross-entropy is {ce}")));
    }
    let (aux_value, aux_grads) = match aux {
        Some(a) => a.evaluate(x, &out.attention)?,
        None => (0.0, None),
    };
    if !aux_value.is_finite() {
        return Err(Error::Divergence(format!("auxiliary loss is {aux_value}")));
    }
    net.backward(&dlogits, aux_grads.as_deref())?;
    sgd.step(net.params_mut(), hyper);
    net.zero_dead_params();
    Ok(StepOutcome {
        ce,
        aux: aux_value,
        errors: count_errors(&out.logits, labels),
    })
}

/// Reshuffled minibatch stream over a dataset.
pub struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    augment: bool,
    rng: Rng,
}

impl BatchStream {
    pub fn new(len: usize, batch_size: usize, augment: bool, rng: Rng) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            cursor: len,
            batch_size: batch_size.min(len).max(1),
            augment,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.rng.shuffle(&mut self.order);
        self.cursor = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Next batch; wraps (and reshuffles) at the end of an epoch.
    pub fn next_batch<T: Scalar>(&mut self, data: &Dataset) -> Result<(Tensor<T>, Vec<usize>)> {
        if self.cursor >= self.order.len() {
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let (mut x, y) = data.batch(&idx)?;
        if self.augment {
            augment(&mut x, 4, &mut self.rng)?;
        }
        Ok((x.cast(), y))
    }
}

/// Mean cross-entropy and error rate in inference mode.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::param("cannot evaluate on an empty dataset"));
    }
    let mut loss = 0.0;
    let mut errors = 0;
    let bs = batch_size.max(1);
    for start in (0..data.len()).step_by(bs) {
        let idx: Vec<usize> = (start..(start + bs).min(data.len())).collect();
        let (x, y) = data.batch(&idx)?;
        let out = net.infer(&x.cast())?;
        let (l, _) = cross_entropy(&out.logits, &y)?;
        loss += l.as_f64() * idx.len() as f64;
        errors += count_errors(&out.logits, &y);
    }
    Ok((loss / data.len() as f64, errors as f64 / data.len() as f64))
}

/// Runs the configured schedule, optionally with an auxiliary loss.
pub fn fit<T: Scalar>(
    net: &mut Network<T>,
    data: &Split,
    config: &TrainConfig,
    mut aux: Option<&mut dyn AuxLoss<T>>,
) -> Result<Vec<EpochMetrics>> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    if data.train.example_shape() != net.spec().input {
        return Err(Error::shape(format!(
            "dataset examples {:?} do not match network input {:?}",
            data.train.example_shape(),
            net.spec().input
        )));
    }
    let mut sgd = Sgd::new();
    let mut stream = BatchStream::new(data.train.len(), config.batch_size, config.augment, Rng::new(config.seed).fork(1));
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let hyper = config.hyper(lr);
        let (mut ce, mut aux_sum, mut errors, mut seen) = (0.0, 0.0, 0usize, 0usize);
        for step in 0..stream.batches_per_epoch() {
            let (x, y) = stream.next_batch::<T>(&data.train)?;
            let out = train_step(net, &mut sgd, &x, &y, hyper, aux.as_deref_mut())
                .map_err(|e| match e {
                    Error::Divergence(m) => Error::Divergence(format!("epoch {epoch} step {step}: {m}")),
                    other => other,
                })?;
            ce += out.ce * y.len() as f64;
            aux_sum += out.aux * y.len() as f64;
            errors += out.errors;
            seen += y.len();
        }
        let (test_loss, test_err) = evaluate(net, &data.test, config.batch_size.max(64))?;
        metrics.push(EpochMetrics {
            epoch,
            lr,
            train_ce: ce / seen as f64,
            train_aux: aux_sum / seen as f64,
            train_err: errors as f64 / seen as f64,
            test_loss,
            test_err,
        });
    }
    Ok(metrics)
}

pub fn train<T: Scalar>(net: &mut Network<T>, data: &Split, config: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    fit(net, data, config, None)
}

/// Initialises a network from `config.seed` and trains it.
pub fn train_from_scratch<T: Scalar>(
    spec: &NetworkSpec,
    data: &Split,
    config: &TrainConfig,
) -> Result<(Network<T>, Vec<EpochMetrics>)> {
    let mut net = Network::new(spec, &mut Rng::new(config.seed))?;
    let metrics = train(&mut net, data, config)?;
    Ok((net, metrics))
}

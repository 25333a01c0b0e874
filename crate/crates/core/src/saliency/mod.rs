//! Channel saliency (Fisher and ℓ1) and the iterative prune-and-tune engine.

mod prune;
mod trace;

pub use prune::{prune_loop, PruneConfig, PruneMethod, PruneOutcome};
pub use trace::{sample_indices, sample_trace, PruneEvent, PruningTrace};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fisher saliency of one channel over a minibatch.
///
/// `activation` and `gradient` hold the channel's values and `∂L/∂C` with the
/// example index leading (`[N, ...]`). Returns
/// `1/(2N) · Σ_n (−Σ_{i,j} C_nij · g_nij)²`.
pub fn fisher_contribution<T: Scalar>(activation: &Tensor<T>, gradient: &Tensor<T>) -> Result<f64> {
    activation.check_congruent(gradient)?;
    let n = activation.shape()[0];
    let per = activation.len() / n;
    let total: f64 = activation
        .data()
        .chunks_exact(per)
        .zip(gradient.data().chunks_exact(per))
        .map(|(c, g)| {
            let dot: f64 = c.iter().zip(g).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum();
            dot * dot
        })
        .sum();
    Ok(total / (2.0 * n as f64))
}

/// Fisher saliency of channel `ch` of an `[N, C, H, W]` activation, without
/// copying the channel out.
fn channel_fisher<T: Scalar>(activation: &Tensor<T>, gradient: &Tensor<T>, ch: usize) -> f64 {
    let s = activation.shape();
    let (n, c, p) = (s[0], s[1], s[2] * s[3]);
    let mut total = 0.0;
    for b in 0..n {
        let off = (b * c + ch) * p;
        let dot: f64 = activation.data()[off..off + p]
            .iter()
            .zip(&gradient.data()[off..off + p])
            .map(|(&a, &g)| a.as_f64() * g.as_f64())
            .sum();
        total += dot * dot;
    }
    total / (2.0 * n as f64)
}

/// Running per-channel Fisher sums for every prunable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherAccumulator {
    sums: Vec<Vec<f64>>,
    batches: usize,
}

impl FisherAccumulator {
    pub fn new(widths: &[usize]) -> Self {
        Self {
            sums: widths.iter().map(|&w| vec![0.0; w]).collect(),
            batches: 0,
        }
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.sums
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn reset(&mut self) {
        self.sums.iter_mut().flatten().for_each(|v| *v = 0.0);
        self.batches = 0;
    }

    /// Adds one minibatch worth of contributions. `masks[l][c] == false`
    /// leaves that channel's entry untouched.
    pub fn accumulate<T: Scalar>(
        &mut self,
        activations: &[&Tensor<T>],
        gradients: &[&Tensor<T>],
        masks: &[Vec<bool>],
    ) -> Result<()> {
        if activations.len() != self.sums.len() || gradients.len() != self.sums.len() || masks.len() != self.sums.len() {
            return Err(Error::shape(format!(
                "accumulator tracks {} layers; got {} activations, {} gradients, {} masks",
                self.sums.len(),
                activations.len(),
                gradients.len(),
                masks.len()
            )));
        }
        for (l, ((a, g), mask)) in activations.iter().zip(gradients).zip(masks).enumerate() {
            a.check_congruent(g)?;
            let (_, c, _, _) = a.dims4()?;
            if c != self.sums[l].len() || mask.len() != c {
                return Err(Error::shape(format!(
                    "layer {l}: {c} channels, accumulator has {}",
                    self.sums[l].len()
                )));
            }
            for ch in (0..c).filter(|&ch| mask[ch]) {
                self.sums[l][ch] += channel_fisher(a, g, ch);
            }
        }
        self.batches += 1;
        Ok(())
    }

    /// Accumulates from the activations and gradients cached by the last
    /// forward/backward pass of `net`.
    pub fn accumulate_from<T: Scalar>(&mut self, net: &Network<T>) -> Result<()> {
        let mut acts = Vec::with_capacity(net.blocks.len());
        let mut grads = Vec::with_capacity(net.blocks.len());
        for i in 0..net.blocks.len() {
            let (a, g) = net.prunable_activation(i)?;
            acts.push(a);
            grads.push(g);
        }
        self.accumulate(&acts, &grads, &net.masks())
    }
}

/// Per output channel, the sum of absolute filter weights.
pub fn l1_saliency<T: Scalar>(conv: &Conv2d<T>) -> Vec<f64> {
    let w = conv.weight.value.data();
    let per = w.len() / conv.out_channels;
    w.chunks_exact(per)
        .map(|f| f.iter().map(|v| v.abs().as_f64()).sum())
        .collect()
}

/// Lowest-saliency candidate; ties go to the lowest `(layer, channel)`.
pub(crate) fn argmin(candidates: impl IntoIterator<Item = (usize, usize, f64)>) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for (l, c, s) in candidates {
        let better = match best {
            None => true,
            Some((bl, bc, bs)) => s < bs || (s == bs && (l, c) < (bl, bc)),
        };
        if better {
            best = Some((l, c, s));
        }
    }
    best
}

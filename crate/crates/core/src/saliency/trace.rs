use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::prune::PruneMethod;
use crate::error::{Error, Result};
use crate::nn::NetworkSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneEvent {
    /// Fine-tune steps completed before this prune.
    pub step: usize,
    pub layer: usize,
    pub channel: usize,
    pub saliency: f64,
    /// Parameter count of the compact network after the prune.
    pub params: usize,
    /// Live prunable widths after the prune.
    pub widths: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningTrace {
    pub method: PruneMethod,
    /// Architecture of the unpruned network.
    pub spec: NetworkSpec,
    pub initial_widths: Vec<usize>,
    pub initial_params: usize,
    pub events: Vec<PruneEvent>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    step: usize,
    layer: usize,
    channel: usize,
    saliency: f64,
    params: usize,
}

impl PruningTrace {
    /// Checks the structural invariants: parameter counts strictly
    /// decrease, widths never grow, and no channel is removed twice.
    pub fn validate(&self) -> Result<()> {
        let n = self.initial_widths.len();
        let mut removed: Vec<Vec<bool>> = self.initial_widths.iter().map(|&w| vec![false; w]).collect();
        let mut widths = self.initial_widths.clone();
        let mut params = self.initial_params;
        let mut step = 0;
        for (i, e) in self.events.iter().enumerate() {
            let bad = |m: String| Error::Format(format!("trace event {i}: {m}"));
            if e.layer >= n || e.channel >= removed[e.layer].len() {
                return Err(bad(format!("channel ({}, {}) out of range", e.layer, e.channel)));
            }
            if removed[e.layer][e.channel] {
                return Err(bad(format!("channel ({}, {}) removed twice", e.layer, e.channel)));
            }
            removed[e.layer][e.channel] = true;
            widths[e.layer] -= 1;
            if e.widths != widths {
                return Err(bad(format!("widths {:?}, expected {:?}", e.widths, widths)));
            }
            if widths[e.layer] == 0 {
                return Err(bad(format!("layer {} emptied", e.layer)));
            }
            if e.params >= params {
                return Err(bad(format!("parameter count {} does not decrease from {params}", e.params)));
            }
            if e.step < step {
                return Err(bad("steps go backwards".into()));
            }
            params = e.params;
            step = e.step;
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<usize> {
        self.events.iter().map(|e| e.params).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for e in &self.events {
            w.serialize(CsvRow {
                step: e.step,
                layer: e.layer,
                channel: e.channel,
                saliency: e.saliency,
                params: e.params,
            })
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let trace: Self = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        trace.validate()?;
        Ok(trace)
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Indices of `k` trace events spread evenly in parameter count.
///
/// Targets are evenly spaced between the largest and smallest counts (the
/// midpoint when `k == 1`); each target takes the nearest event not already
/// chosen, ties going to the larger count. Returned in trace order.
pub fn sample_indices(trace: &PruningTrace, k: usize) -> Result<Vec<usize>> {
    let n = trace.events.len();
    if k == 0 || k > n {
        return Err(Error::Param(format!("cannot sample {k} points from a trace of {n} events")));
    }
    let counts: Vec<f64> = trace.events.iter().map(|e| e.params as f64).collect();
    let hi = counts.iter().copied().fold(f64::MIN, f64::max);
    let lo = counts.iter().copied().fold(f64::MAX, f64::min);
    let targets: Vec<f64> = if k == 1 {
        vec![(hi + lo) / 2.0]
    } else {
        (0..k).map(|i| hi - i as f64 * (hi - lo) / (k - 1) as f64).collect()
    };
    let mut taken = vec![false; n];
    let mut out = Vec::with_capacity(k);
    for t in targets {
        let mut best: Option<usize> = None;
        for i in (0..n).filter(|&i| !taken[i]) {
            best = match best {
                None => Some(i),
                Some(b) => {
                    let (d, db) = ((counts[i] - t).abs(), (counts[b] - t).abs());
                    if d < db || (d == db && counts[i] > counts[b]) {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        let b = best.expect("k <= n leaves a candidate");
        taken[b] = true;
        out.push(b);
    }
    out.sort_unstable();
    Ok(out)
}

/// Architectures at `k` evenly spread points of the trace.
pub fn sample_trace(trace: &PruningTrace, k: usize) -> Result<Vec<NetworkSpec>> {
    sample_indices(trace, k)?
        .into_iter()
        .map(|i| trace.spec.with_widths(&trace.events[i].widths))
        .collect()
}

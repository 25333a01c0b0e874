//! Timing sources for the benchmark harness.

use std::str::FromStr;
use std::time::Instant;

use crate::error::{Error, Result};

/// What a measurement is timing; synthetic clocks derive their value from it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Probe {
    Layer { layer: usize, channels: usize },
    /// Whole-network inference with these prunable widths.
    Network { widths: Vec<usize> },
}

pub trait Timer {
    /// Times one execution of `run` in nanoseconds. Synthetic clocks may skip
    /// calling `run`.
    fn measure(&mut self, probe: &Probe, run: &mut dyn FnMut()) -> f64;

    /// Smallest distinguishable interval in nanoseconds; zero when exact.
    fn resolution_ns(&self) -> f64;

    /// Whether `measure` executes the workload (and warmup is worth doing).
    fn executes(&self) -> bool {
        true
    }
}

/// Monotonic wall clock.
#[derive(Debug, Clone)]
pub struct MonotonicTimer {
    resolution: f64,
}

impl MonotonicTimer {
    pub fn new() -> Self {
        // Smallest nonzero step observed over a few back-to-back reads.
        let mut best = f64::INFINITY;
        for _ in 0..200 {
            let a = Instant::now();
            let mut b = Instant::now();
            while b == a {
                b = Instant::now();
            }
            best = best.min((b - a).as_nanos() as f64);
        }
        Self { resolution: best }
    }
}

impl Default for MonotonicTimer {
    fn default() -> Self {
        Self::new()
    }
}

impl Timer for MonotonicTimer {
    fn measure(&mut self, _probe: &Probe, run: &mut dyn FnMut()) -> f64 {
        let start = Instant::now();
        run();
        start.elapsed().as_nanos() as f64
    }

    fn resolution_ns(&self) -> f64 {
        self.resolution
    }
}

/// Replays a fixed sequence of readings, cycling when exhausted.
#[derive(Debug, Clone)]
pub struct SequenceTimer {
    values: Vec<f64>,
    next: usize,
}

impl SequenceTimer {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Param("sequence timer needs at least one value".into()));
        }
        Ok(Self { values, next: 0 })
    }
}

impl Timer for SequenceTimer {
    fn measure(&mut self, _probe: &Probe, _run: &mut dyn FnMut()) -> f64 {
        let v = self.values[self.next % self.values.len()];
        self.next += 1;
        v
    }

    fn resolution_ns(&self) -> f64 {
        0.0
    }

    fn executes(&self) -> bool {
        false
    }
}

/// Latency as a pure function of channel count.
///
/// A layer probe reads `f(channels)`; a network probe reads
/// `base + Σ f(width)` over its prunable widths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FakeTimer {
    /// `⌈c / step⌉ · ns`
    Ceil { step: usize, ns: f64 },
    /// `ns` regardless of `c`.
    Const { ns: f64 },
    /// `c · ns`
    Linear { ns: f64 },
}

impl FakeTimer {
    pub fn layer_ns(&self, channels: usize) -> f64 {
        match *self {
            FakeTimer::Ceil { step, ns } => channels.div_ceil(step) as f64 * ns,
            FakeTimer::Const { ns } => ns,
            FakeTimer::Linear { ns } => channels as f64 * ns,
        }
    }

    fn base_ns(&self) -> f64 {
        match *self {
            FakeTimer::Ceil { ns, .. } | FakeTimer::Const { ns } | FakeTimer::Linear { ns } => ns,
        }
    }
}

impl Timer for FakeTimer {
    fn measure(&mut self, probe: &Probe, _run: &mut dyn FnMut()) -> f64 {
        match probe {
            Probe::Layer { channels, .. } => self.layer_ns(*channels),
            Probe::Network { widths } => self.base_ns() + widths.iter().map(|&w| self.layer_ns(w)).sum::<f64>(),
        }
    }

    fn resolution_ns(&self) -> f64 {
        0.0
    }

    fn executes(&self) -> bool {
        false
    }
}

/// Parses `ceil:<step>:<ns>`, `const:<ns>` or `linear:<ns>`.
impl FromStr for FakeTimer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Param(format!("bad fake timer {s:?}; expected ceil:<step>:<ns>, const:<ns> or linear:<ns>"));
        let parts: Vec<&str> = s.split(':').collect();
        let ns = |t: &str| -> Result<f64> {
            let v: f64 = t.parse().map_err(|_| bad())?;
            if v > 0.0 && v.is_finite() {
                Ok(v)
            } else {
                Err(bad())
            }
        };
        match parts.as_slice() {
            ["ceil", step, t] => {
                let step: usize = step.parse().map_err(|_| bad())?;
                if step == 0 {
                    return Err(bad());
                }
                Ok(FakeTimer::Ceil { step, ns: ns(t)? })
            }
            ["const", t] => Ok(FakeTimer::Const { ns: ns(t)? }),
            ["linear", t] => Ok(FakeTimer::Linear { ns: ns(t)? }),
            _ => Err(bad()),
        }
    }
}

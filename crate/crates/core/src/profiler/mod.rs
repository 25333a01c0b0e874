//! Per-layer latency sweeps over channel counts, staircase step detection and
//! optimal-point extraction.

mod io;
mod timer;

pub use io::{read_points_csv, read_profiles_csv, write_points_csv, write_profiles_csv};
pub use timer::{FakeTimer, MonotonicTimer, Probe, SequenceTimer, Timer};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Network, NetworkSpec};
use crate::rng::Rng;
use crate::tensor::{ConvGeometry, Gemm, Tensor};

/// Multiplier on the standard deviation of the latency differences.
pub const SIGMA: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarnessConfig {
    pub warmup: usize,
    pub runs: usize,
    pub batch: usize,
    pub threads: usize,
    /// Seeds the random weights and inputs; values do not affect timing.
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            warmup: 10,
            runs: 30,
            batch: 1,
            threads: 1,
            seed: 0,
        }
    }
}

impl HarnessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 || self.batch == 0 || self.threads == 0 {
            return Err(Error::Param(format!("runs, batch and threads must be positive: {self:?}")));
        }
        Ok(())
    }

    fn gemm(&self) -> Gemm {
        Gemm::with_threads(self.threads)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub threads: usize,
    pub host: String,
}

impl Environment {
    pub fn current(threads: usize) -> Self {
        let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        Self {
            threads,
            host: format!("{}-{}, {cpus} logical cpus", std::env::consts::ARCH, std::env::consts::OS),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub channels: usize,
    pub median_ns: f64,
    pub iqr_ns: f64,
    /// Clock resolution exceeds 1% of the median.
    pub flagged: bool,
}

/// Convolution shape being timed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub hw: (usize, usize),
    pub geometry: ConvGeometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub layer: usize,
    /// Input (channels, height, width) of the layer.
    pub input: [usize; 3],
    pub stride: usize,
    pub samples: Vec<Sample>,
}

impl LatencyProfile {
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.channels != i + 1 {
                return Err(Error::Format(format!(
                    "layer {} sample {i} has {} channels; counts must run 1, 2, ...",
                    self.layer, s.channels
                )));
            }
            if !(s.median_ns > 0.0) || !s.median_ns.is_finite() {
                return Err(Error::Format(format!(
                    "layer {} at {} channels has latency {}",
                    self.layer, s.channels, s.median_ns
                )));
            }
        }
        Ok(())
    }

    pub fn medians(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.median_ns).collect()
    }

    pub fn latency_at(&self, channels: usize) -> Result<f64> {
        channels
            .checked_sub(1)
            .and_then(|i| self.samples.get(i))
            .map(|s| s.median_ns)
            .ok_or_else(|| Error::Param(format!("layer {} has no sample at {channels} channels", self.layer)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalPoints {
    pub layer: usize,
    /// Ascending channel counts at the top of each detected step's lower tread.
    pub points: Vec<usize>,
    pub sigma: f64,
}

/// Median (mean of the middle pair for even counts) and interquartile range
/// with linear interpolation between order statistics.
pub fn median_iqr(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    (q(0.5), q(0.75) - q(0.25))
}

fn summarize(channels: usize, times: &[f64], resolution: f64) -> Sample {
    let (median_ns, iqr_ns) = median_iqr(times);
    Sample {
        channels,
        median_ns,
        iqr_ns,
        flagged: resolution > 0.01 * median_ns,
    }
}

fn run_harness(harness: &HarnessConfig, timer: &mut dyn Timer, probe: &Probe, run: &mut dyn FnMut()) -> Vec<f64> {
    if timer.executes() {
        for _ in 0..harness.warmup {
            run();
        }
    }
    (0..harness.runs).map(|_| timer.measure(probe, run)).collect()
}

/// Times single inferences of a freshly initialised convolution.
pub fn bench_layer(layer: usize, config: &LayerConfig, harness: &HarnessConfig, timer: &mut dyn Timer) -> Result<Sample> {
    harness.validate()?;
    if config.out_channels == 0 || config.in_channels == 0 {
        return Err(Error::Param(format!("layer {layer}: channel counts must be positive")));
    }
    config.geometry.validate()?;
    let probe = Probe::Layer {
        layer,
        channels: config.out_channels,
    };
    let mut rng = Rng::new(harness.seed).fork(((layer as u64) << 32) | config.out_channels as u64);
    let conv = Conv2d::<f32>::new(config.in_channels, config.out_channels, config.geometry, &mut rng);
    let x = Tensor::<f32>::randn(&[harness.batch, config.in_channels, config.hw.0, config.hw.1], 1.0, &mut rng);
    let gemm = harness.gemm();
    let mut failure = None;
    let mut run = || {
        if let Err(e) = conv.infer(&x, gemm) {
            failure = Some(e);
        }
    };
    let times = run_harness(harness, timer, &probe, &mut run);
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(summarize(config.out_channels, &times, timer.resolution_ns()))
}

/// Benchmarks a layer of fixed input shape at every width from 1 to `width`.
pub fn sweep_layer(
    layer: usize,
    in_channels: usize,
    hw: (usize, usize),
    geometry: ConvGeometry,
    width: usize,
    harness: &HarnessConfig,
    timer: &mut dyn Timer,
) -> Result<LatencyProfile> {
    let samples = (1..=width)
        .map(|c| {
            let cfg = LayerConfig {
                in_channels,
                out_channels: c,
                hw,
                geometry,
            };
            bench_layer(layer, &cfg, harness, timer)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatencyProfile {
        layer,
        input: [in_channels, hw.0, hw.1],
        stride: geometry.stride,
        samples,
    })
}

/// Sweeps prunable layer `layer` of `spec` over widths 1..=its spec width.
pub fn sweep(spec: &NetworkSpec, layer: usize, harness: &HarnessConfig, timer: &mut dyn Timer) -> Result<LatencyProfile> {
    let shapes = spec.block_shapes();
    let b = shapes
        .get(layer)
        .ok_or_else(|| Error::Param(format!("spec has {} prunable layers, no layer {layer}", shapes.len())))?;
    sweep_layer(
        layer,
        b.in_channels,
        b.in_hw,
        ConvGeometry::same3x3(b.stride),
        b.width,
        harness,
        timer,
    )
}

/// Indices `i` whose difference `times[i+1] - times[i]` is a step: larger than
/// the mean of the other differences by more than `SIGMA` of their
/// population standard deviations.
pub fn detect_step_indices(times: &[f64]) -> Result<Vec<usize>> {
    if times.len() < 3 {
        return Err(Error::Param(format!("need at least 3 samples, got {}", times.len())));
    }
    let d: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let n = d.len() as f64;
    let sum: f64 = d.iter().sum();
    let scale = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = 1e-9 * scale;
    let mut out = Vec::new();
    for (i, &di) in d.iter().enumerate() {
        let m = n - 1.0;
        let mean = (sum - di) / m;
        // Direct two-pass variance over the others keeps cancellation out.
        let var = d
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, x)| (x - mean).powi(2))
            .sum::<f64>()
            / m;
        let spread = (SIGMA * var.sqrt()).max(floor);
        if di > mean + spread {
            out.push(i);
        }
    }
    Ok(out)
}

pub fn detect_steps(profile: &LatencyProfile) -> Result<OptimalPoints> {
    let idx = detect_step_indices(&profile.medians())?;
    Ok(OptimalPoints {
        layer: profile.layer,
        points: idx.into_iter().map(|i| profile.samples[i].channels).collect(),
        sigma: SIGMA,
    })
}

/// Points for one profile; layers with fewer than three samples have none.
fn points_or_empty(profile: &LatencyProfile) -> Result<OptimalPoints> {
    if profile.samples.len() < 3 {
        Ok(OptimalPoints {
            layer: profile.layer,
            points: Vec::new(),
            sigma: SIGMA,
        })
    } else {
        detect_steps(profile)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkProfile {
    pub layers: Vec<LatencyProfile>,
    pub points: Vec<OptimalPoints>,
    /// End-to-end inference latency of the unpruned network.
    pub network: Sample,
    /// `network` minus the prunable layers' latencies at full width.
    pub fixed_ns: f64,
    pub harness: HarnessConfig,
    pub environment: Environment,
}

impl NetworkProfile {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Self = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        for l in &p.layers {
            l.validate()?;
        }
        Ok(p)
    }
}

/// Sweeps every prunable layer, detects its optimal points and times the
/// full network.
pub fn profile_network(spec: &NetworkSpec, harness: &HarnessConfig, timer: &mut dyn Timer) -> Result<NetworkProfile> {
    harness.validate()?;
    spec.validate()?;
    let mut layers = Vec::with_capacity(spec.block_count());
    let mut points = Vec::with_capacity(spec.block_count());
    for l in 0..spec.block_count() {
        let p = sweep(spec, l, harness, timer)?;
        points.push(points_or_empty(&p)?);
        layers.push(p);
    }
    let network = bench_network(spec, harness, timer)?;
    let at_full: f64 = layers.iter().map(|p| p.samples.last().map_or(0.0, |s| s.median_ns)).sum();
    Ok(NetworkProfile {
        layers,
        points,
        fixed_ns: network.median_ns - at_full,
        network,
        harness: harness.clone(),
        environment: Environment::current(harness.threads),
    })
}

/// Times a whole-network inference. `channels` of the result is the sum of
/// prunable widths.
pub fn bench_network(spec: &NetworkSpec, harness: &HarnessConfig, timer: &mut dyn Timer) -> Result<Sample> {
    harness.validate()?;
    let mut net = Network::<f32>::new(spec, &mut Rng::new(harness.seed).fork(u64::MAX))?;
    net.gemm = harness.gemm();
    let mut rng = Rng::new(harness.seed).fork(u64::MAX - 1);
    let [c, h, w] = spec.input;
    let x = Tensor::<f32>::randn(&[harness.batch, c, h, w], 1.0, &mut rng);
    let probe = Probe::Network { widths: spec.widths() };
    let mut failure = None;
    let mut run = || {
        if let Err(e) = net.infer(&x) {
            failure = Some(e);
        }
    };
    let times = run_harness(harness, timer, &probe, &mut run);
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(summarize(spec.widths().iter().sum(), &times, timer.resolution_ns()))
}

//! Labeled image datasets.
//!
//! Two on-disk formats are read: the CIFAR-10 binary batches (one label byte
//! followed by 3072 pixel bytes, channel-planar) and a raw labeled-tensor file
//! for synthetic data:
//!
//! ```text
//! b"STLT"  u32 LE version (1)  tensor record (see tensor::write_tensor)
//! u64 LE label count  u32 LE label * count
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{read_tensor, write_tensor, Tensor};

const MAGIC: &[u8; 4] = b"STLT";
const VERSION: u32 = 1;

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if n != labels.len() {
            return Err(Error::shape(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        Ok(Self { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one example.
    pub fn example_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let x = self.images.gather_outer(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx)?;
        Dataset::new(images, labels, self.classes)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses one CIFAR-10 binary batch file, normalising pixels with the
/// standard per-channel mean and deviation.
pub fn read_cifar_batch(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{}: {} bytes is not a whole number of CIFAR-10 records",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        for (i, &px) in rec[1..].iter().enumerate() {
            let ch = i / 1024;
            data.push((px as f32 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch]);
        }
    }
    Dataset::new(Tensor::from_vec(&[n, 3, 32, 32], data)?, labels, 10)
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let classes = parts[0].classes;
    let shape = parts[0].example_shape();
    let n: usize = parts.iter().map(Dataset::len).sum();
    let mut data = Vec::with_capacity(n * shape.iter().product::<usize>());
    let mut labels = Vec::with_capacity(n);
    for p in parts {
        labels.extend(p.labels);
        data.extend(p.images.into_data());
    }
    Dataset::new(Tensor::from_vec(&[n, shape[0], shape[1], shape[2]], data)?, labels, classes)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from a CIFAR-10 binary
/// directory, keeping at most `train_limit` / `test_limit` examples.
pub fn load_cifar10(dir: &Path, train_limit: Option<usize>, test_limit: Option<usize>) -> Result<Split> {
    if !dir.is_dir() {
        return Err(Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found")));
    }
    let mut parts = Vec::new();
    let mut have = 0;
    for i in 1..=5 {
        let p = dir.join(format!("data_batch_{i}.bin"));
        if !p.exists() {
            break;
        }
        let d = read_cifar_batch(&p)?;
        have += d.len();
        parts.push(d);
        if train_limit.is_some_and(|l| have >= l) {
            break;
        }
    }
    if parts.is_empty() {
        return Err(Error::Format(format!("{}: no data_batch_*.bin files", dir.display())));
    }
    let mut train = concat(parts)?;
    let mut test = read_cifar_batch(&dir.join("test_batch.bin"))?;
    if let Some(l) = train_limit {
        train = train.take(l)?;
    }
    if let Some(l) = test_limit {
        test = test.take(l)?;
    }
    Ok(Split { train, test })
}

pub fn write_labeled(path: &Path, data: &Dataset) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    write_tensor(&mut out, &data.images).map_err(io)?;
    out.write_all(&(data.labels.len() as u64).to_le_bytes()).map_err(io)?;
    for &l in &data.labels {
        out.write_all(&(l as u32).to_le_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_labeled(path: &Path, classes: usize) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let fmt = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    let mut head = [0u8; 8];
    input.read_exact(&mut head).map_err(|_| fmt("truncated header"))?;
    if &head[..4] != MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = u32::from_le_bytes([head[4], head[5], head[6], head[7]]);
    if version != VERSION {
        return Err(fmt(&format!("unsupported version {version}")));
    }
    let images = read_tensor::<f32, _>(&mut input)?.ok_or_else(|| fmt("missing image tensor"))?;
    let mut n = [0u8; 8];
    input.read_exact(&mut n).map_err(|_| fmt("missing label count"))?;
    let n = u64::from_le_bytes(n) as usize;
    let mut raw = vec![0u8; n * 4];
    input.read_exact(&mut raw).map_err(|_| fmt("truncated labels"))?;
    let labels = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    Dataset::new(images, labels, classes)
}

/// Loads `train.bin` and `test.bin` in the raw labeled-tensor format.
pub fn load_raw(dir: &Path, classes: usize) -> Result<Split> {
    Ok(Split {
        train: read_labeled(&dir.join("train.bin"), classes)?,
        test: read_labeled(&dir.join("test.bin"), classes)?,
    })
}

/// Generator for a synthetic classification task.
///
/// Each class owns a prototype built from a few Gaussian bumps on random
/// channels and positions. An example is its class prototype with random
/// gain and a one-pixel jitter, overlaid with a weaker bump pattern borrowed
/// from another class, plus white noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    /// `(C, H, W)`
    pub shape: [usize; 3],
    pub train: usize,
    pub test: usize,
    pub noise: f64,
    pub distractor: f64,
    pub bumps: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            shape: [3, 8, 8],
            train: 4000,
            test: 1000,
            noise: 0.6,
            distractor: 0.5,
            bumps: 3,
            seed: 0,
        }
    }
}

pub fn synthetic(cfg: &SyntheticConfig) -> Result<Split> {
    if cfg.classes < 2 || cfg.train == 0 || cfg.test == 0 || cfg.shape.iter().any(|&d| d == 0) {
        return Err(Error::param(format!("degenerate synthetic config {cfg:?}")));
    }
    let [c, h, w] = cfg.shape;
    let mut rng = Rng::new(cfg.seed);
    let mut protos = Vec::with_capacity(cfg.classes);
    for _ in 0..cfg.classes {
        let mut p = vec![0f32; c * h * w];
        for _ in 0..cfg.bumps {
            let ch = rng.below(c);
            let (cy, cx) = (rng.uniform() * h as f64, rng.uniform() * w as f64);
            let sigma = 0.8 + rng.uniform() * 1.2;
            let sign = if rng.uniform() < 0.75 { 1.0 } else { -1.0 };
            for y in 0..h {
                for x in 0..w {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    p[(ch * h + y) * w + x] += (sign * 2.0 * (-d2 / (2.0 * sigma * sigma)).exp()) as f32;
                }
            }
        }
        protos.push(p);
    }
    let make = |n: usize, rng: &mut Rng| -> Result<Dataset> {
        let mut data = Vec::with_capacity(n * c * h * w);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % cfg.classes;
            let other = (label + 1 + rng.below(cfg.classes - 1)) % cfg.classes;
            let gain = 0.7 + 0.6 * rng.uniform();
            let (dy, dx) = (rng.below(3) as isize - 1, rng.below(3) as isize - 1);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let (sy, sx) = (y as isize - dy, x as isize - dx);
                        let mut v = 0.0;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                            v = gain * protos[label][(ch * h + sy as usize) * w + sx as usize] as f64;
                        }
                        v += cfg.distractor * protos[other][(ch * h + y) * w + x] as f64;
                        v += rng.normal::<f64>(cfg.noise);
                        data.push(v as f32);
                    }
                }
            }
            labels.push(label);
        }
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let images = Tensor::from_vec(&[n, c, h, w], data)?.gather_outer(&order)?;
        let labels = order.iter().map(|&i| labels[i]).collect();
        Dataset::new(images, labels, cfg.classes)
    };
    let train = make(cfg.train, &mut rng)?;
    let test = make(cfg.test, &mut rng)?;
    Ok(Split { train, test })
}

/// Random horizontal flip plus `pad`-pixel zero-pad-and-crop, in place.
pub fn augment(images: &mut Tensor<f32>, pad: usize, rng: &mut Rng) -> Result<()> {
    let (n, c, h, w) = images.dims4()?;
    let plane = h * w;
    let mut scratch = vec![0f32; c * plane];
    for b in 0..n {
        let flip = rng.uniform() < 0.5;
        let dy = rng.below(2 * pad + 1) as isize - pad as isize;
        let dx = rng.below(2 * pad + 1) as isize - pad as isize;
        let img = &mut images.data_mut()[b * c * plane..(b + 1) * c * plane];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = x as isize + dx;
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    scratch[(ch * h + y) * w + x] = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                        img[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
        img.copy_from_slice(&scratch);
    }
    Ok(())
}

//! Layer kinds with explicit forward caches and hand-written backward passes.
//!
//! `forward` caches what `backward` needs; `infer` is the read-only path used
//! for evaluation and benchmarking.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{col2im, im2col, ConvGeometry, Gemm, Tensor, Transpose};

/// A trainable tensor and its gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `[out x N·P]` (channel-major GEMM output) to `[N, out, P]`.
fn channel_major_to_nchw<T: Scalar>(m: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * p];
    for ch in 0..c {
        for b in 0..n {
            out[(b * c + ch) * p..][..p].copy_from_slice(&m[ch * n * p + b * p..][..p]);
        }
    }
    out
}

fn nchw_to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * p];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..][..p].copy_from_slice(&x[(b * c + ch) * p..][..p]);
        }
    }
    out
}

/// Bias-free 2-D convolution lowered to im2col + GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    /// `[out, in, k, k]`
    pub weight: Param<T>,
    columns: Option<Tensor<T>>,
    input_shape: Option<[usize; 4]>,
}

impl<T: Scalar> Conv2d<T> {
    /// Kaiming-normal initialisation scaled by fan-out.
    pub fn new(in_channels: usize, out_channels: usize, geometry: ConvGeometry, rng: &mut Rng) -> Self {
        let k = geometry.kernel;
        let std = (2.0 / (out_channels * k * k) as f64).sqrt();
        let w = Tensor::randn(&[out_channels, in_channels, k, k], std, rng);
        Self::from_weight(w, geometry).expect("rank-4 weight")
    }

    pub fn from_weight(weight: Tensor<T>, geometry: ConvGeometry) -> Result<Self> {
        geometry.validate()?;
        let (o, i, kh, kw) = weight.dims4()?;
        if kh != geometry.kernel || kw != geometry.kernel {
            return Err(Error::shape(format!(
                "weight kernel {kh}x{kw} does not match geometry {geometry:?}"
            )));
        }
        Ok(Self {
            in_channels: i,
            out_channels: o,
            geometry,
            weight: Param::new(weight),
            columns: None,
            input_shape: None,
        })
    }

    fn weight_matrix_dims(&self) -> (usize, usize) {
        let k = self.geometry.kernel;
        (self.out_channels, self.in_channels * k * k)
    }

    fn compute(&self, x: &Tensor<T>, gemm: Gemm) -> Result<(Tensor<T>, Tensor<T>)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (oh, ow) = self.geometry.output_hw(h, w)?;
        let cols = im2col(x, self.geometry)?;
        let (m, k) = self.weight_matrix_dims();
        let np = n * oh * ow;
        let mut y = vec![T::zero(); m * np];
        crate::tensor::gemm_into(
            m,
            np,
            k,
            self.weight.value.data(),
            k,
            Transpose::No,
            cols.data(),
            np,
            Transpose::No,
            &mut y,
            gemm.threads,
        );
        let y = channel_major_to_nchw(&y, n, m, oh * ow);
        Ok((Tensor::from_vec(&[n, m, oh, ow], y)?, cols))
    }

    pub fn infer(&self, x: &Tensor<T>, gemm: Gemm) -> Result<Tensor<T>> {
        self.compute(x, gemm).map(|(y, _)| y)
    }

    pub fn forward(&mut self, x: &Tensor<T>, gemm: Gemm) -> Result<Tensor<T>> {
        let (y, cols) = self.compute(x, gemm)?;
        let (n, c, h, w) = x.dims4()?;
        self.columns = Some(cols);
        self.input_shape = Some([n, c, h, w]);
        Ok(y)
    }

    /// Sets the weight gradient; returns the input gradient when asked.
    pub fn backward(&mut self, dy: &Tensor<T>, gemm: Gemm, need_input_grad: bool) -> Result<Option<Tensor<T>>> {
        let cols = self
            .columns
            .take()
            .ok_or_else(|| Error::state("conv backward called without a cached forward"))?;
        let input_shape = self.input_shape.take().unwrap();
        let (n, o, oh, ow) = dy.dims4()?;
        if o != self.out_channels {
            return Err(Error::shape(format!("conv output grad has {o} channels")));
        }
        let (m, k) = self.weight_matrix_dims();
        let np = n * oh * ow;
        let dy_m = nchw_to_channel_major(dy.data(), n, o, oh * ow);
        let dw = self.weight.grad.data_mut();
        dw.iter_mut().for_each(|v| *v = T::zero());
        crate::tensor::gemm_into(m, k, np, &dy_m, np, Transpose::No, cols.data(), np, Transpose::Yes, dw, gemm.threads);
        if !need_input_grad {
            return Ok(None);
        }
        let mut dcols = vec![T::zero(); k * np];
        crate::tensor::gemm_into(
            k,
            np,
            m,
            self.weight.value.data(),
            k,
            Transpose::Yes,
            &dy_m,
            np,
            Transpose::No,
            &mut dcols,
            gemm.threads,
        );
        let dcols = Tensor::from_vec(&[k, np], dcols)?;
        col2im(&dcols, input_shape, self.geometry).map(Some)
    }
}

/// Per-channel batch normalisation over (N, H, W).
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<T>>,
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub const MOMENTUM: f64 = 0.1;
    pub const EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
            cache: None,
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "batch norm over {} channels got {c}",
                self.channels
            )));
        }
        Ok((n, c, h * w))
    }

    fn normalise(&self, x: &Tensor<T>, mean: &[T], inv_std: &[T]) -> (Tensor<T>, Tensor<T>) {
        let (n, c, p) = (x.shape()[0], self.channels, x.shape()[2] * x.shape()[3]);
        let mut x_hat = x.clone();
        let mut y = x.clone();
        for b in 0..n {
            for ch in 0..c {
                let (g, bt) = (self.gamma.value[ch], self.beta.value[ch]);
                let base = (b * c + ch) * p;
                for i in base..base + p {
                    let v = (x[i] - mean[ch]) * inv_std[ch];
                    x_hat[i] = v;
                    y[i] = g * v + bt;
                }
            }
        }
        (y, x_hat)
    }

    fn running_stats(&self) -> (Vec<T>, Vec<T>) {
        let eps = T::of(self.eps);
        let inv = self
            .running_var
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        (self.running_mean.data().to_vec(), inv)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let (mean, inv) = self.running_stats();
        Ok(self.normalise(x, &mean, &inv).0)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (n, c, p) = self.check(x)?;
        let (mean, inv_std) = match mode {
            Mode::Eval => self.running_stats(),
            Mode::Train => {
                let m = (n * p) as f64;
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += x.data()[(b * c + ch) * p..][..p].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let mu = s / m;
                    let mut q = 0.0;
                    for b in 0..n {
                        q += x.data()[(b * c + ch) * p..][..p]
                            .iter()
                            .map(|v| (v.as_f64() - mu).powi(2))
                            .sum::<f64>();
                    }
                    mean[ch] = T::of(mu);
                    var[ch] = T::of(q / m);
                    let unbiased = if m > 1.0 { q / (m - 1.0) } else { q / m };
                    let mom = T::of(self.momentum);
                    self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * T::of(mu);
                    self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * T::of(unbiased);
                }
                let eps = T::of(self.eps);
                let inv = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
        };
        let (y, x_hat) = self.normalise(x, &mean, &inv_std);
        self.cache = Some(BnCache {
            x_hat,
            inv_std,
            batch_stats: mode == Mode::Train,
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::state("batch norm backward called without a cached forward"))?;
        dy.check_congruent(&cache.x_hat)?;
        let (n, c, p) = self.check(dy)?;
        let m = T::of((n * p) as f64);
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for b in 0..n {
                let base = (b * c + ch) * p;
                for i in base..base + p {
                    sum_dy += dy[i];
                    sum_dy_xhat += dy[i] * cache.x_hat[i];
                }
            }
            self.gamma.grad[ch] = sum_dy_xhat;
            self.beta.grad[ch] = sum_dy;
            let scale = self.gamma.value[ch] * cache.inv_std[ch];
            for b in 0..n {
                let base = (b * c + ch) * p;
                for i in base..base + p {
                    dx[i] = if cache.batch_stats {
                        scale / m * (m * dy[i] - sum_dy - cache.x_hat[i] * sum_dy_xhat)
                    } else {
                        scale * dy[i]
                    };
                }
            }
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    active: Option<Vec<bool>>,
}

impl Relu {
    pub fn infer<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| v.max(T::zero()))
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.active = Some(x.data().iter().map(|&v| v > T::zero()).collect());
        Self::infer(x)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let active = self
            .active
            .take()
            .ok_or_else(|| Error::state("relu backward called without a cached forward"))?;
        if active.len() != dy.len() {
            return Err(Error::shape("relu gradient size differs from forward".to_string()));
        }
        let mut dx = dy.clone();
        for (v, a) in dx.data_mut().iter_mut().zip(active) {
            if !a {
                *v = T::zero();
            }
        }
        Ok(dx)
    }
}

/// `[N, C, H, W]` to `[N, C]` by spatial mean.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    input_shape: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn infer<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        let p = h * w;
        let inv = T::of(1.0 / p as f64);
        let data = x.data().chunks_exact(p).map(|s| s.iter().copied().sum::<T>() * inv).collect();
        Tensor::from_vec(&[n, c], data)
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4()?;
        self.input_shape = Some([n, c, h, w]);
        Self::infer(x)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self
            .input_shape
            .take()
            .ok_or_else(|| Error::state("pool backward called without a cached forward"))?;
        let p = shape[2] * shape[3];
        if dy.shape() != [shape[0], shape[1]] {
            return Err(Error::shape(format!("pool gradient {:?} vs input {shape:?}", dy.shape())));
        }
        let inv = T::of(1.0 / p as f64);
        let mut data = Vec::with_capacity(dy.len() * p);
        for &g in dy.data() {
            data.extend(std::iter::repeat(g * inv).take(p));
        }
        Tensor::from_vec(&shape, data)
    }
}

/// Fully connected classifier: `y = x·Wᵀ + b`.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / inputs as f64).sqrt();
        Self::from_parts(Tensor::randn(&[outputs, inputs], std, rng), Tensor::zeros(&[outputs]))
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            input: None,
        }
    }

    pub fn infer(&self, x: &Tensor<T>, gemm: Gemm) -> Result<Tensor<T>> {
        let (n, _) = x.dims2()?;
        let mut y = gemm.run(x, Transpose::No, &self.weight.value, Transpose::Yes)?;
        let o = self.bias.value.len();
        for b in 0..n {
            for j in 0..o {
                y[b * o + j] += self.bias.value[j];
            }
        }
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor<T>, gemm: Gemm) -> Result<Tensor<T>> {
        let y = self.infer(x, gemm)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, gemm: Gemm) -> Result<Tensor<T>> {
        let x = self
            .input
            .take()
            .ok_or_else(|| Error::state("linear backward called without a cached forward"))?;
        let (n, o) = dy.dims2()?;
        self.weight.grad = gemm.run(dy, Transpose::Yes, &x, Transpose::No)?;
        for j in 0..o {
            self.bias.grad[j] = (0..n).map(|b| dy[b * o + j]).sum();
        }
        gemm.run(dy, Transpose::No, &self.weight.value, Transpose::No)
    }
}

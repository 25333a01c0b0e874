//! Attention-transfer training of a student against a frozen teacher.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::nn::{fit, AuxLoss, EpochMetrics, Network, NetworkSpec, TrainConfig};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-sample attention maps `[N, H·W]`: the channel mean of squared
/// activations, ℓ2-normalised. All-zero maps stay zero.
pub fn attention_map<T: Scalar>(activation: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(attention_forward(activation)?.0)
}

/// Maps plus each sample's pre-normalisation norm.
fn attention_forward<T: Scalar>(a: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, c, h, w) = a.dims4()?;
    let p = h * w;
    let inv_c = T::one() / T::of(c as f64);
    let mut out = vec![T::zero(); n * p];
    let mut norms = Vec::with_capacity(n);
    for b in 0..n {
        let m = &mut out[b * p..(b + 1) * p];
        for ch in 0..c {
            let src = &a.data()[(b * c + ch) * p..][..p];
            for (o, &v) in m.iter_mut().zip(src) {
                *o += v * v;
            }
        }
        m.iter_mut().for_each(|v| *v *= inv_c);
        let norm = m.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            m.iter_mut().for_each(|v| *v /= norm);
        }
        norms.push(norm);
    }
    Ok((Tensor::from_vec(&[n, p], out)?, norms))
}

/// Back-propagates `dmap` (gradient w.r.t. the normalised maps) to the
/// activation. Zero-norm samples receive zero gradient.
fn attention_backward<T: Scalar>(a: &Tensor<T>, map: &Tensor<T>, norms: &[T], dmap: &Tensor<T>) -> Result<Tensor<T>> {
    map.check_congruent(dmap)?;
    let (n, c, h, w) = a.dims4()?;
    let p = h * w;
    let two_over_c = T::of(2.0) / T::of(c as f64);
    let mut da = Tensor::zeros(a.shape());
    for b in 0..n {
        if norms[b] == T::zero() {
            continue;
        }
        let m = &map.data()[b * p..][..p];
        let dm = &dmap.data()[b * p..][..p];
        let proj: T = m.iter().zip(dm).map(|(&x, &y)| x * y).sum();
        let draw: Vec<T> = m.iter().zip(dm).map(|(&x, &y)| (y - x * proj) / norms[b]).collect();
        for ch in 0..c {
            let off = (b * c + ch) * p;
            for j in 0..p {
                da.data_mut()[off + j] = draw[j] * two_over_c * a.data()[off + j];
            }
        }
    }
    Ok(da)
}

/// How the per-point distance between normalised maps is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Distance {
    /// Squared ℓ2 distance instead of the plain one.
    pub squared: bool,
    /// Divide each point's distance by its map size (H·W), so β weighs a
    /// per-element quantity.
    pub per_element: bool,
}

/// Batch-mean distance between teacher and student maps at one point and
/// its gradient w.r.t. the student map.
fn map_distance<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>, distance: Distance) -> Result<(f64, Tensor<T>)> {
    teacher.check_congruent(student)?;
    let (n, p) = student.dims2()?;
    let squared = distance.squared;
    let per = if distance.per_element { p as f64 } else { 1.0 };
    let inv_n = T::one() / T::of(n as f64 * per);
    let mut total = 0.0;
    let mut grad = Tensor::zeros(student.shape());
    for b in 0..n {
        let t = &teacher.data()[b * p..][..p];
        let s = &student.data()[b * p..][..p];
        let sq: T = t.iter().zip(s).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let g = &mut grad.data_mut()[b * p..][..p];
        if squared {
            total += sq.as_f64();
            for j in 0..p {
                g[j] = T::of(2.0) * (s[j] - t[j]) * inv_n;
            }
        } else {
            let d = sq.sqrt();
            total += d.as_f64();
            if d > T::zero() {
                for j in 0..p {
                    g[j] = (s[j] - t[j]) / d * inv_n;
                }
            }
        }
    }
    Ok((total / (n as f64 * per), grad))
}

/// Attention term `Σ_i mean_batch ‖m_t − m_s‖` summed over the paired points.
pub fn attention_term<T: Scalar>(teacher_maps: &[Tensor<T>], student_maps: &[Tensor<T>], distance: Distance) -> Result<f64> {
    if teacher_maps.len() != student_maps.len() {
        return Err(Error::Shape(format!(
            "{} teacher attention points vs {} student points",
            teacher_maps.len(),
            student_maps.len()
        )));
    }
    let mut total = 0.0;
    for (t, s) in teacher_maps.iter().zip(student_maps) {
        total += map_distance(t, s, distance)?.0;
    }
    Ok(total)
}

/// `ce + β · attention_term`.
pub fn at_loss<T: Scalar>(
    ce: f64,
    teacher_maps: &[Tensor<T>],
    student_maps: &[Tensor<T>],
    beta: f64,
    distance: Distance,
) -> Result<f64> {
    Ok(ce + beta * attention_term(teacher_maps, student_maps, distance)?)
}

/// Attention term for student activations against fixed teacher maps, with
/// its gradient w.r.t. each activation (already multiplied by `beta`).
pub fn attention_grads<T: Scalar>(
    teacher_maps: &[Tensor<T>],
    student_activations: &[Tensor<T>],
    beta: f64,
    distance: Distance,
) -> Result<(f64, Vec<Tensor<T>>)> {
    if teacher_maps.len() != student_activations.len() {
        return Err(Error::Shape(format!(
            "{} teacher attention points vs {} student points",
            teacher_maps.len(),
            student_activations.len()
        )));
    }
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(student_activations.len());
    for (t, a) in teacher_maps.iter().zip(student_activations) {
        let (m, norms) = attention_forward(a)?;
        let (d, mut dm) = map_distance(t, &m, distance)?;
        total += d;
        dm.scale(T::of(beta));
        grads.push(attention_backward(a, &m, &norms, &dm)?);
    }
    Ok((total, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    /// Weight of the attention term for three attention points; rescaled by
    /// `3 / N` for `N` points.
    pub beta: f64,
    /// Per-element by default: with the plain distance a weight of 1000
    /// swamps cross-entropy and training diverges.
    pub distance: Distance,
    pub train: TrainConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            beta: 1000.0,
            distance: Distance {
                squared: false,
                per_element: true,
            },
            train: TrainConfig::default(),
        }
    }
}

impl DistillConfig {
    pub fn effective_beta(&self, points: usize) -> f64 {
        if points == 3 || points == 0 {
            self.beta
        } else {
            self.beta * 3.0 / points as f64
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Param(format!("beta {} must be non-negative", self.beta)));
        }
        self.train.validate()
    }
}

/// Attention-transfer auxiliary loss backed by a frozen teacher.
pub struct AttentionTransfer<'a, T> {
    teacher: &'a Network<T>,
    beta: f64,
    distance: Distance,
}

impl<'a, T: Scalar> AttentionTransfer<'a, T> {
    pub fn new(teacher: &'a Network<T>, beta: f64, distance: Distance) -> Self {
        Self { teacher, beta, distance }
    }
}

impl<T: Scalar> AuxLoss<T> for AttentionTransfer<'_, T> {
    /// Returns the unweighted attention term; gradients carry the weight and
    /// are omitted entirely when it is zero.
    fn evaluate(&mut self, batch: &Tensor<T>, attention: &[Tensor<T>]) -> Result<(f64, Option<Vec<Tensor<T>>>)> {
        let t = self.teacher.infer(batch)?;
        let maps = t.attention.iter().map(attention_map).collect::<Result<Vec<_>>>()?;
        let (term, grads) = attention_grads(&maps, attention, self.beta, self.distance)?;
        Ok((term, (self.beta != 0.0).then_some(grads)))
    }
}

/// Trains a freshly initialised `student` (seeded by `config.train.seed`)
/// on cross-entropy plus the weighted attention term.
pub fn distill<T: Scalar>(
    teacher: &Network<T>,
    student: &NetworkSpec,
    data: &Split,
    config: &DistillConfig,
) -> Result<(Network<T>, Vec<EpochMetrics>)> {
    config.validate()?;
    let t = teacher.spec();
    if t.attention.len() != student.attention.len() {
        return Err(Error::Spec(format!(
            "teacher has {} attention points, student {}",
            t.attention.len(),
            student.attention.len()
        )));
    }
    if !student.same_topology(t) {
        return Err(Error::Spec("student and teacher attention points do not align".into()));
    }
    let mut net = Network::new(student, &mut Rng::new(config.train.seed))?;
    let mut at = AttentionTransfer::new(teacher, config.effective_beta(t.attention.len()), config.distance);
    let metrics = fit(&mut net, data, &config.train, Some(&mut at))?;
    Ok((net, metrics))
}

#[derive(Serialize)]
struct MetricsRow {
    epoch: usize,
    train_ce: f64,
    train_at: f64,
    test_err: f64,
}

/// Writes `epoch,train_ce,train_at,test_err`.
pub fn write_metrics_csv(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(err)?;
    w.write_record(["epoch", "train_ce", "train_at", "test_err"]).map_err(err)?;
    for m in metrics {
        w.serialize(MetricsRow {
            epoch: m.epoch,
            train_ce: m.train_ce,
            train_at: m.train_aux,
            test_err: m.test_err,
        })
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn constant_map() {
        let m = attention_map(&t(&[1, 1, 2, 2], vec![3.0; 4])).unwrap();
        assert_eq!(m.data(), &[0.5; 4]);
    }

    #[test]
    fn sign_and_zero() {
        let a = t(&[1, 1, 1, 3], vec![1.0, -2.0, 0.5]);
        let mut both = a.data().to_vec();
        both.extend(a.data().iter().map(|v| -v));
        let pair = attention_map(&t(&[1, 2, 1, 3], both)).unwrap();
        let single = attention_map(&a).unwrap();
        for (x, y) in pair.data().iter().zip(single.data()) {
            assert!((x - y).abs() < 1e-15);
        }
        let z = attention_map(&Tensor::<f64>::zeros(&[2, 3, 2, 2])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_hand_value() {
        let tm = vec![t(&[1, 2], vec![1.0, 0.0])];
        let sm = vec![t(&[1, 2], vec![0.0, 1.0])];
        let plain = Distance::default();
        let l = at_loss(0.5, &tm, &sm, 1.0, plain).unwrap();
        assert!((l - (0.5 + 2f64.sqrt())).abs() < 1e-12);
        assert_eq!(at_loss(0.5, &tm, &tm, 1000.0, plain).unwrap(), 0.5);
        assert_eq!(at_loss(0.5, &tm, &sm, 0.0, plain).unwrap(), 0.5);
        let squared = Distance { squared: true, per_element: false };
        assert!((at_loss(0.0, &tm, &sm, 1.0, squared).unwrap() - 2.0).abs() < 1e-12);
        let per = Distance { squared: false, per_element: true };
        assert!((at_loss(0.0, &tm, &sm, 1.0, per).unwrap() - 2f64.sqrt() / 2.0).abs() < 1e-12);
        assert!(at_loss(0.5, &tm, &[], 1.0, plain).is_err());
    }

    #[test]
    fn beta_rescaling() {
        let c = DistillConfig::default();
        assert_eq!(c.effective_beta(3), 1000.0);
        assert_eq!(c.effective_beta(4), 750.0);
        assert!(c.distance.per_element && !c.distance.squared);
    }
}

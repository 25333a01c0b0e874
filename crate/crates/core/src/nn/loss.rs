use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = logits.dims2()?;
    let mut out = logits.clone();
    for b in 0..n {
        let row = &mut out.data_mut()[b * k..(b + 1) * k];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(out)
}

/// Mean over the batch of `-log softmax(logits)[label]`, with its gradient
/// with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label { label, classes: k });
    }
    let mut grad = softmax(logits)?;
    let inv_n = T::of(1.0 / n as f64);
    let mut loss = T::zero();
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits.data()[b * k..(b + 1) * k];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        loss += lse - row[y];
        grad[b * k + y] -= T::one();
    }
    grad.scale(inv_n);
    Ok((loss * inv_n, grad))
}

/// Number of rows whose arg-max differs from the label.
pub fn count_errors<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(b, &y)| {
            let row = &logits.data()[b * k..(b + 1) * k];
            let best = row
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            best != y
        })
        .count()
}

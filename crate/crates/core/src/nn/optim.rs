use serde::{Deserialize, Serialize};

use crate::nn::layers::Param;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdHyper {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v <- m·v + (g + wd·w)`, `w <- w - lr·v`.
#[derive(Debug, Clone, Default)]
pub struct Sgd<T> {
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new() -> Self {
        Self { velocity: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut Param<T>>, hyper: SgdHyper) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        let (lr, m, wd) = (T::of(hyper.lr), T::of(hyper.momentum), T::of(hyper.weight_decay));
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            let Param { value, grad } = p;
            for ((w, &g), vel) in value.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
                *vel = m * *vel + (g + wd * *w);
                *w -= lr * *vel;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(w: f64, g: f64) -> Param<f64> {
        let mut p = Param::new(Tensor::full(&[1], w));
        p.grad[0] = g;
        p
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut p = one(1.0, 0.0);
        Sgd::new().step(vec![&mut p], SgdHyper { lr: 0.1, momentum: 0.9, weight_decay: 0.0 });
        assert_eq!(p.value[0], 1.0);
    }

    #[test]
    fn one_step_hand_values() {
        let mut p = one(1.0, 0.1);
        Sgd::new().step(vec![&mut p], SgdHyper { lr: 0.1, momentum: 0.0, weight_decay: 0.0 });
        assert!((p.value[0] - 0.99).abs() < 1e-15);
        let mut p = one(1.0, 0.1);
        Sgd::new().step(vec![&mut p], SgdHyper { lr: 0.1, momentum: 0.0, weight_decay: 0.0005 });
        assert!((p.value[0] - 0.98995).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = one(0.0, 1.0);
        let mut sgd = Sgd::new();
        let h = SgdHyper { lr: 1.0, momentum: 0.5, weight_decay: 0.0 };
        sgd.step(vec![&mut p], h);
        sgd.step(vec![&mut p], h);
        // v1 = 1, v2 = 1.5
        assert_eq!(p.value[0], -2.5);
    }
}

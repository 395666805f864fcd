//! Optimizers that return the update delta instead of applying it, so masks
//! and projections can act on exactly what gets added to the parameters.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, like: &[Tensor]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: like.iter().map(Tensor::zeros_like).collect(),
            v: like.iter().map(Tensor::zeros_like).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Bias-corrected Adam update for `grads`.
    pub fn step(&mut self, grads: &[Tensor]) -> Vec<Tensor> {
        self.step += 1;
        let bc1 = 1.0 - math::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - math::pow(self.beta2, self.step as f64);
        let mut out = Vec::with_capacity(grads.len());
        for ((g, m), v) in grads.iter().zip(&mut self.m).zip(&mut self.v) {
            let mut delta = g.zeros_like();
            for (((gi, mi), vi), di) in g
                .data()
                .iter()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(delta.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mh = *mi / bc1;
                let vh = *vi / bc2;
                *di = -self.lr * mh / (math::sqrt(vh) + self.eps);
            }
            out.push(delta);
        }
        out
    }
}

/// Plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn step(&self, grads: &[Tensor]) -> Vec<Tensor> {
        grads
            .iter()
            .map(|g| {
                let mut d = g.clone();
                d.scale(-self.lr);
                d
            })
            .collect()
    }
}

/// Either optimizer behind one interface.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(Sgd),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, like: &[Tensor]) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr, like)),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd { lr }),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Optimizer::Adam(a) => a.lr = lr,
            Optimizer::Sgd(s) => s.lr = lr,
        }
    }

    pub fn step(&mut self, grads: &[Tensor]) -> Vec<Tensor> {
        match self {
            Optimizer::Adam(a) => a.step(grads),
            Optimizer::Sgd(s) => s.step(grads),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn first_adam_step_is_signed_lr() {
        let g = vec![Tensor::vector(&[2.0, -0.5, 0.0]).unwrap()];
        let mut a = Adam::new(0.1, &g);
        let d = a.step(&g);
        let got = d[0].data();
        assert!((got[0] + 0.1).abs() < 1e-6);
        assert!((got[1] - 0.1).abs() < 1e-6);
        assert_eq!(got[2], 0.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut x = vec![Tensor::vector(&[3.0, -4.0]).unwrap()];
        let mut a = Adam::new(0.05, &x);
        for _ in 0..2000 {
            let g = x.clone();
            let d = a.step(&g);
            x[0].axpy(1.0, &d[0]).unwrap();
        }
        assert!(x[0].norm() < 1e-2);
    }
}

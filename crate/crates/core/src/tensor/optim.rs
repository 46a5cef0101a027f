use super::Parameter;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Consumes accumulated gradients and updates parameters in place.
pub trait Optimizer<S: Scalar> {
    /// Applies one update to every trainable parameter holding a gradient,
    /// then clears those gradients.
    fn step(&mut self, params: &mut [&mut Parameter<S>]);
}

#[derive(Debug, Clone)]
pub struct Sgd<S> {
    pub lr: S,
}

impl<S: Scalar> Optimizer<S> for Sgd<S> {
    fn step(&mut self, params: &mut [&mut Parameter<S>]) {
        for p in params.iter_mut() {
            if !p.tensor.requires_grad {
                continue;
            }
            if let Some(g) = p.tensor.take_grad() {
                let lr = self.lr;
                p.tensor.values_mut().iter_mut().zip(&g).for_each(|(w, &d)| *w -= lr * d);
            }
        }
    }
}

/// Adam with bias correction; moments are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    steps: i32,
    moments: HashMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S) -> Self {
        Self {
            lr,
            beta1: S::lit(0.9),
            beta2: S::lit(0.999),
            eps: S::lit(1e-8),
            steps: 0,
            moments: HashMap::new(),
        }
    }
}

impl<S: Scalar> Optimizer<S> for Adam<S> {
    fn step(&mut self, params: &mut [&mut Parameter<S>]) {
        self.steps += 1;
        let c1 = S::one() - self.beta1.powi(self.steps);
        let c2 = S::one() - self.beta2.powi(self.steps);
        for p in params.iter_mut() {
            if !p.tensor.requires_grad {
                continue;
            }
            let Some(g) = p.tensor.take_grad() else { continue };
            let n = g.len();
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![S::zero(); n], vec![S::zero(); n]));
            for (i, w) in p.tensor.values_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (S::one() - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (S::one() - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Serializable optimizer choice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64 },
}

impl OptimizerKind {
    pub fn build(self) -> Box<dyn Optimizer<f64> + Send> {
        match self {
            OptimizerKind::Sgd { lr } => Box::new(Sgd { lr }),
            OptimizerKind::Adam { lr } => Box::new(Adam::new(lr)),
        }
    }

    pub fn lr(self) -> f64 {
        match self {
            OptimizerKind::Sgd { lr } | OptimizerKind::Adam { lr } => lr,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sgd_step_and_clear() {
        let mut p = Parameter::new("w", Tensor::from_vec(vec![1.0, 2.0]));
        p.tensor.accumulate_grad(&[1.0, -1.0]).unwrap();
        let mut opt = Sgd { lr: 0.5 };
        opt.step(&mut [&mut p]);
        assert_eq!(p.values(), &[0.5, 2.5]);
        assert!(p.tensor.grad().is_none());
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut p = Parameter::frozen("w", Tensor::from_vec(vec![1.0]));
        p.tensor.accumulate_grad(&[1.0]).unwrap();
        Adam::new(0.1).step(&mut [&mut p]);
        assert_eq!(p.values(), &[1.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = Parameter::new("w", Tensor::from_vec(vec![0.0f64, 0.0]));
        p.tensor.accumulate_grad(&[1e-3, -50.0]).unwrap();
        Adam::new(0.01).step(&mut [&mut p]);
        assert!((p.values()[0] + 0.01).abs() < 1e-6);
        assert!((p.values()[1] - 0.01).abs() < 1e-6);
    }
}

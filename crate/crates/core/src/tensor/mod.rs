//! Dense tensors, named parameters and a small reverse-mode autodiff graph.

mod graph;
mod optim;

pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, Optimizer, OptimizerKind, Sgd};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower bound applied to probabilities before taking a logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

/// A dense row-major array with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    values: Vec<S>,
    pub requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, values: Vec<S>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values, requires_grad: false, grad: None })
    }

    pub fn from_vec(values: Vec<S>) -> Self {
        let n = values.len();
        Self::new(vec![n.max(1)], if n == 0 { vec![S::zero()] } else { values })
            .expect("vector shape")
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![S::zero(); n]).expect("zeros shape")
    }

    pub fn scalar(v: S) -> Self {
        Self::new(vec![1], vec![v]).expect("scalar shape")
    }

    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// View as a matrix: 1-D tensors are rows, higher ranks fold into the last axis.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => {
                let c = *s.last().unwrap();
                (self.values.len() / c, c)
            }
        }
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, g: &[S]) -> Result<()> {
        if g.len() != self.values.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of length {}",
                g.len(),
                self.values.len()
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<S>> {
        self.grad.take()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A trainable tensor with a stable dotted name such as `lora.key.a`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<S> {
    pub name: String,
    pub tensor: Tensor<S>,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, tensor: Tensor<S>) -> Self {
        Self { name: name.into(), tensor: tensor.trainable() }
    }

    pub fn frozen(name: impl Into<String>, mut tensor: Tensor<S>) -> Self {
        tensor.requires_grad = false;
        Self { name: name.into(), tensor }
    }

    pub fn values(&self) -> &[S] {
        self.tensor.values()
    }

    pub fn is_trainable(&self) -> bool {
        self.tensor.requires_grad
    }
}

/// Plain matrix product of two rank-2 tensors.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, k) = a.dims2();
    let (k2, n) = b.dims2();
    if k != k2 {
        return Err(Error::Dimension(format!("matmul {m}x{k} by {k2}x{n}")));
    }
    let mut out = vec![S::zero(); m * n];
    graph::gemm(a.values(), b.values(), &mut out, m, k, n);
    Tensor::matrix(m, n, out)
}

/// Temperature softmax of a vector.
pub fn softmax<S: Scalar>(x: &[S], temperature: S) -> Result<Vec<S>> {
    if !(temperature > S::zero()) {
        return Err(Error::Domain(format!("softmax temperature must be > 0, got {temperature}")));
    }
    if x.is_empty() {
        return Err(Error::Dimension("softmax of an empty vector".into()));
    }
    let mut out = vec![S::zero(); x.len()];
    graph::softmax_row(x, temperature, &mut out);
    Ok(out)
}

/// `-Σ target_i · ln(max(prediction_i, 1e-12))`.
pub fn cross_entropy<S: Scalar>(target: &[S], prediction: &[S]) -> Result<S> {
    if target.len() != prediction.len() {
        return Err(Error::Dimension(format!(
            "cross entropy over {} and {} entries",
            target.len(),
            prediction.len()
        )));
    }
    let floor = S::lit(LOG_FLOOR);
    Ok(-target
        .iter()
        .zip(prediction)
        .map(|(&t, &p)| t * p.max(floor).ln())
        .sum::<S>())
}

/// Sum of squared differences.
pub fn mse<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<S> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!("mse of {:?} and {:?}", a.shape(), b.shape())));
    }
    Ok(a.values().iter().zip(b.values()).map(|(&x, &y)| (x - y) * (x - y)).sum())
}

//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every node is a `rows x cols` matrix; vectors are single rows and
//! scalars are `1 x 1`. Nodes are appended in evaluation order so the
//! backward sweep simply walks the tape in reverse.

use super::{Parameter, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, S),
    Square(usize),
    Silu(usize),
    Tanh(usize),
    Sum(usize),
    SumRows(usize),
    ConcatCols(Vec<usize>),
    GatherRows { sources: Vec<usize>, index: Vec<usize> },
    Reshape(usize),
    Transpose(usize),
    Softmax { x: usize, tau: S },
    LogClamp { x: usize, floor: S },
}

#[derive(Debug, Clone)]
struct Node<S> {
    rows: usize,
    cols: usize,
    value: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records operations for one forward pass and differentiates them.
#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of a scalar loss with respect to every node that needed one.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<S: Scalar> Gradients<S> {
    /// Adds the gradient of `v` (if any) into a parameter's accumulator.
    pub fn accumulate_into(&self, v: Var, param: &mut Parameter<S>) -> Result<()> {
        match self.get(v) {
            Some(g) if param.tensor.requires_grad => param.tensor.accumulate_grad(g),
            _ => Ok(()),
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<S>, op: Op<S>, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<S> {
        &self.nodes[v.0]
    }

    /// Records a tensor as a leaf; it is differentiable iff `requires_grad` is set.
    pub fn tensor(&mut self, t: &Tensor<S>) -> Var {
        let (r, c) = t.dims2();
        self.push(r, c, t.values().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn param(&mut self, p: &Parameter<S>) -> Var {
        self.tensor(&p.tensor)
    }

    /// A non-differentiable matrix.
    pub fn constant(&mut self, rows: usize, cols: usize, values: Vec<S>) -> Result<Var> {
        if rows * cols != values.len() || rows == 0 || cols == 0 {
            return Err(Error::Dimension(format!(
                "constant {rows}x{cols} with {} values",
                values.len()
            )));
        }
        Ok(self.push(rows, cols, values, Op::Leaf, false))
    }

    /// A differentiable leaf matrix (used by tests and gradient checks).
    pub fn variable(&mut self, rows: usize, cols: usize, values: Vec<S>) -> Result<Var> {
        let v = self.constant(rows, cols, values)?;
        self.nodes[v.0].needs_grad = true;
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> Result<S> {
        match self.dims(v) {
            (1, 1) => Ok(self.node(v).value[0]),
            (r, c) => Err(Error::Contract(format!("expected a scalar, found {r}x{c}"))),
        }
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = self.node(v);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape")
    }

    fn needs(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.node(*v).needs_grad)
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::Dimension(format!("{what}: {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Dimension(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![S::zero(); m * n];
        gemm(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a.0, b.0), ng))
    }

    fn zip(&mut self, a: Var, b: Var, what: &str, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        let (r, c) = self.same_dims(a, b, what)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.needs(&[a, b]);
        Ok(self.push(r, c, out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Broadcasts a `1 x n` row over every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(row) != (1, n) {
            return Err(Error::Dimension(format!("add_row {m}x{n} with {:?}", self.dims(row))));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|ar| ar.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let ng = self.needs(&[a, row]);
        Ok(self.push(m, n, out, Op::AddRow(a.0, row.0), ng))
    }

    fn map(&mut self, a: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.needs(&[a]);
        self.push(r, c, out, op, ng)
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        self.map(a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -S::one())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, |x| x * x, Op::Square(a.0))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, |x| x * sigmoid(x), Op::Silu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, |x| x.tanh(), Op::Tanh(a.0))
    }

    /// `ln(max(x, floor))`.
    pub fn log_clamped(&mut self, a: Var, floor: S) -> Var {
        self.map(a, |x| x.max(floor).ln(), Op::LogClamp { x: a.0, floor })
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.needs(&[a]);
        self.push(1, 1, vec![s], Op::Sum(a.0), ng)
    }

    /// Per-row sums as an `m x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (_, n) = self.dims(a);
        let out: Vec<S> = self.value(a).chunks(n).map(|r| r.iter().copied().sum()).collect();
        let ng = self.needs(&[a]);
        self.push(out.len(), 1, out, Op::SumRows(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = S::from_usize(self.value(a).len()).unwrap();
        let s = self.sum(a);
        self.scale(s, S::one() / n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Dimension("concat of nothing".into()));
        };
        let m = self.dims(first).0;
        if parts.iter().any(|p| self.dims(*p).0 != m) {
            return Err(Error::Dimension("concat_cols with differing row counts".into()));
        }
        let n: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for p in parts {
                let c = self.dims(*p).1;
                out.extend_from_slice(&self.value(*p)[i * c..(i + 1) * c]);
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(m, n, out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), ng))
    }

    /// Stacks `sources[index[i]]` (each a `1 x e` row) into an `len(index) x e` matrix.
    pub fn gather_rows(&mut self, sources: &[Var], index: &[usize]) -> Result<Var> {
        let Some(&first) = sources.first() else {
            return Err(Error::Dimension("gather from no rows".into()));
        };
        let e = self.dims(first).1;
        if sources.iter().any(|s| self.dims(*s) != (1, e)) {
            return Err(Error::Dimension("gather_rows sources must be 1 x e rows".into()));
        }
        if index.is_empty() {
            return Err(Error::Dimension("gather_rows with empty index".into()));
        }
        let mut out = Vec::with_capacity(index.len() * e);
        for &i in index {
            let s = sources.get(i).ok_or_else(|| {
                Error::Dimension(format!("gather index {i} of {} rows", sources.len()))
            })?;
            out.extend_from_slice(self.value(*s));
        }
        let used: Vec<Var> = index.iter().map(|&i| sources[i]).collect();
        let ng = self.needs(&used);
        let op = Op::GatherRows { sources: sources.iter().map(|s| s.0).collect(), index: index.to_vec() };
        Ok(self.push(index.len(), e, out, op, ng))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r * c != rows * cols {
            return Err(Error::Dimension(format!("reshape {r}x{c} to {rows}x{cols}")));
        }
        let v = self.value(a).to_vec();
        let ng = self.needs(&[a]);
        Ok(self.push(rows, cols, v, Op::Reshape(a.0), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs(&[a]);
        self.push(c, r, out, Op::Transpose(a.0), ng)
    }

    /// Row-wise softmax of `x / tau`.
    pub fn softmax(&mut self, a: Var, tau: S) -> Result<Var> {
        if !(tau > S::zero()) {
            return Err(Error::Domain(format!("softmax temperature must be > 0, got {tau}")));
        }
        let (r, c) = self.dims(a);
        let mut out = vec![S::zero(); r * c];
        for (src, dst) in self.value(a).chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(src, tau, dst);
        }
        let ng = self.needs(&[a]);
        Ok(self.push(r, c, out, Op::Softmax { x: a.0, tau }, ng))
    }

    /// `Σ (a - b)²` over all entries.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.sum(sq))
    }

    /// Per-row `Σ_j (a_ij - b_ij)²` as an `m x 1` column.
    pub fn row_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.sum_rows(sq))
    }

    /// Per-row cross entropy `-Σ_j target_ij ln(max(pred_ij, 1e-12))` as an `m x 1` column.
    pub fn cross_entropy_rows(&mut self, target: Var, prediction: Var) -> Result<Var> {
        let lp = self.log_clamped(prediction, S::lit(super::LOG_FLOOR));
        let prod = self.mul(target, lp)?;
        let s = self.sum_rows(prod);
        Ok(self.neg(s))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.scalar(loss)?;
        if !lv.is_finite() {
            return Err(Error::NonFinite(format!("loss value {lv}")));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        for (g, n) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of a {}x{} node", n.rows, n.cols)));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<S>, gy: &[S], grads: &mut [Option<Vec<S>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].needs_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (nodes[a].rows, nodes[a].cols);
                let n = nodes[b].cols;
                if wants(a) {
                    gemm_bt(gy, &nodes[b].value, slot(grads, a, m * k), m, n, k);
                }
                if wants(b) {
                    gemm_at(&nodes[a].value, gy, slot(grads, b, k * n), m, k, n);
                }
            }
            &Op::Add(a, b) => {
                for (j, s) in [(a, S::one()), (b, S::one())] {
                    if wants(j) {
                        axpy(s, gy, slot(grads, j, gy.len()));
                    }
                }
            }
            &Op::Sub(a, b) => {
                for (j, s) in [(a, S::one()), (b, -S::one())] {
                    if wants(j) {
                        axpy(s, gy, slot(grads, j, gy.len()));
                    }
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let g = slot(grads, a, gy.len());
                    for ((g, &d), &y) in g.iter_mut().zip(gy).zip(&nodes[b].value) {
                        *g += d * y;
                    }
                }
                if wants(b) {
                    let g = slot(grads, b, gy.len());
                    for ((g, &d), &x) in g.iter_mut().zip(gy).zip(&nodes[a].value) {
                        *g += d * x;
                    }
                }
            }
            &Op::AddRow(a, r) => {
                if wants(a) {
                    axpy(S::one(), gy, slot(grads, a, gy.len()));
                }
                if wants(r) {
                    let n = node.cols;
                    let g = slot(grads, r, n);
                    for row in gy.chunks(n) {
                        g.iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            &Op::Scale(a, s) => {
                if wants(a) {
                    axpy(s, gy, slot(grads, a, gy.len()));
                }
            }
            &Op::Square(a) => {
                if wants(a) {
                    let two = S::lit(2.0);
                    let g = slot(grads, a, gy.len());
                    for ((g, &d), &x) in g.iter_mut().zip(gy).zip(&nodes[a].value) {
                        *g += two * x * d;
                    }
                }
            }
            &Op::Silu(a) => {
                if wants(a) {
                    let g = slot(grads, a, gy.len());
                    for ((g, &d), &x) in g.iter_mut().zip(gy).zip(&nodes[a].value) {
                        let s = sigmoid(x);
                        *g += d * s * (S::one() + x * (S::one() - s));
                    }
                }
            }
            &Op::Tanh(a) => {
                if wants(a) {
                    let g = slot(grads, a, gy.len());
                    for ((g, &d), &y) in g.iter_mut().zip(gy).zip(&node.value) {
                        *g += d * (S::one() - y * y);
                    }
                }
            }
            &Op::LogClamp { x, floor } => {
                if wants(x) {
                    let g = slot(grads, x, gy.len());
                    for ((g, &d), &v) in g.iter_mut().zip(gy).zip(&nodes[x].value) {
                        if v > floor {
                            *g += d / v;
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if wants(a) {
                    let d = gy[0];
                    slot(grads, a, nodes[a].value.len()).iter_mut().for_each(|g| *g += d);
                }
            }
            &Op::SumRows(a) => {
                if wants(a) {
                    let n = nodes[a].cols;
                    let g = slot(grads, a, nodes[a].value.len());
                    for (row, &d) in g.chunks_mut(n).zip(gy) {
                        row.iter_mut().for_each(|g| *g += d);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.rows;
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p].cols;
                    if wants(p) {
                        let g = slot(grads, p, m * c);
                        for i in 0..m {
                            let src = &gy[i * node.cols + offset..i * node.cols + offset + c];
                            g[i * c..(i + 1) * c].iter_mut().zip(src).for_each(|(g, &d)| *g += d);
                        }
                    }
                    offset += c;
                }
            }
            Op::GatherRows { sources, index } => {
                let e = node.cols;
                for (row, &i) in gy.chunks(e).zip(index) {
                    let s = sources[i];
                    if wants(s) {
                        slot(grads, s, e).iter_mut().zip(row).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            &Op::Reshape(a) => {
                if wants(a) {
                    axpy(S::one(), gy, slot(grads, a, gy.len()));
                }
            }
            &Op::Transpose(a) => {
                if wants(a) {
                    // node is c x r, source r x c
                    let (r, c) = (nodes[a].rows, nodes[a].cols);
                    let g = slot(grads, a, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gy[j * r + i];
                        }
                    }
                }
            }
            &Op::Softmax { x, tau } => {
                if wants(x) {
                    let c = node.cols;
                    let g = slot(grads, x, gy.len());
                    for ((grow, drow), yrow) in g.chunks_mut(c).zip(gy.chunks(c)).zip(node.value.chunks(c)) {
                        let dot: S = drow.iter().zip(yrow).map(|(&d, &y)| d * y).sum();
                        for ((g, &d), &y) in grow.iter_mut().zip(drow).zip(yrow) {
                            *g += y * (d - dot) / tau;
                        }
                    }
                }
            }
        }
    }
}

fn slot<S: Scalar>(grads: &mut [Option<Vec<S>>], j: usize, len: usize) -> &mut Vec<S> {
    grads[j].get_or_insert_with(|| vec![S::zero(); len])
}

fn axpy<S: Scalar>(s: S, x: &[S], y: &mut [S]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y += s * x);
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

pub(crate) fn softmax_row<S: Scalar>(x: &[S], tau: S, out: &mut [S]) {
    let m = x.iter().copied().fold(S::neg_infinity(), S::max);
    let mut z = S::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - m) / tau).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// `out[m x n] += a[m x k] · b[k x n]`
pub(crate) fn gemm<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
        }
    }
}

/// `out[m x k] += g[m x n] · b[k x n]ᵀ`
fn gemm_bt<S: Scalar>(g: &[S], b: &[S], out: &mut [S], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<S>();
        }
    }
}

/// `out[k x n] += a[m x k]ᵀ · g[m x n]`
fn gemm_at<S: Scalar>(a: &[S], g: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            orow.iter_mut().zip(grow).for_each(|(o, &d)| *o += av * d);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normals, seeded};

    /// Central differences of `f` at `x`.
    fn numeric_grad(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let (mut up, mut down) = (x.to_vec(), x.to_vec());
                up[i] += h;
                down[i] -= h;
                (f(&up) - f(&down)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (a, n) in analytic.iter().zip(numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            assert!(rel < tol, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn matmul_sum_matches_finite_differences() {
        let mut rng = seeded(11);
        for _ in 0..10 {
            let (a, b) = (normals(&mut rng, 9), normals(&mut rng, 9));
            let loss = |a: &[f64]| {
                let mut g = Graph::<f64>::new();
                let va = g.variable(3, 3, a.to_vec()).unwrap();
                let vb = g.constant(3, 3, b.clone()).unwrap();
                let p = g.matmul(va, vb).unwrap();
                let s = g.sum(p);
                (g, va, s)
            };
            let (g, va, s) = loss(&a);
            let analytic = g.backward(s).unwrap().get(va).unwrap().to_vec();
            let numeric = numeric_grad(|x| { let (g, _, s) = loss(x); g.scalar(s).unwrap() }, &a);
            assert_close(&analytic, &numeric, 1e-6);
        }
    }

    #[test]
    fn mse_gradient_is_twice_the_difference() {
        let mut rng = seeded(12);
        let (a, b) = (normals(&mut rng, 6), normals(&mut rng, 6));
        let loss = |a: &[f64]| {
            let mut g = Graph::<f64>::new();
            let va = g.variable(2, 3, a.to_vec()).unwrap();
            let vb = g.constant(2, 3, b.clone()).unwrap();
            let m = g.mse(va, vb).unwrap();
            (g, va, m)
        };
        let (g, va, m) = loss(&a);
        let analytic = g.backward(m).unwrap().get(va).unwrap().to_vec();
        let expected: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 2.0 * (x - y)).collect();
        assert_close(&analytic, &expected, 1e-12);
        let numeric = numeric_grad(|x| { let (g, _, m) = loss(x); g.scalar(m).unwrap() }, &a);
        assert_close(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn polynomial_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let sq = g.square(x);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_parameter_has_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(1, 2, vec![1.0, 2.0]).unwrap();
        let y = g.variable(1, 2, vec![3.0, 4.0]).unwrap();
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(y).map_or(true, |gy| gy.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(1, 1, vec![f64::MAX]).unwrap();
        let sq = g.square(x);
        let loss = g.sum(sq);
        assert!(matches!(g.backward(loss), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gather_scatters_back() {
        let mut g = Graph::<f64>::new();
        let r0 = g.variable(1, 2, vec![1.0, 2.0]).unwrap();
        let r1 = g.variable(1, 2, vec![3.0, 4.0]).unwrap();
        let m = g.gather_rows(&[r0, r1], &[1, 1, 0]).unwrap();
        assert_eq!(g.value(m), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = g.sum(m);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(r0).unwrap(), &[1.0, 1.0]);
        assert_eq!(grads.get(r1).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn transpose_and_reshape_layout() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = g.transpose(a);
        assert_eq!(g.dims(t), (3, 2));
        assert_eq!(g.value(t), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(g.reshape(a, 4, 2).is_err());
        let r = g.reshape(a, 3, 2).unwrap();
        assert_eq!(g.value(r), g.value(a));
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(2, 3, vec![0.0; 6]).unwrap();
        let b = g.constant(2, 3, vec![0.0; 6]).unwrap();
        assert!(g.matmul(a, b).is_err());
        let c = g.constant(3, 2, vec![0.0; 6]).unwrap();
        assert!(g.add(a, c).is_err());
        assert!(g.add_row(a, c).is_err());
        assert!(g.softmax(a, 0.0).is_err());
    }
}

//! Reverse-mode differentiation over a linear tape of matrix operations.
//!
//! Values are computed eagerly as operations are recorded. `backward` walks
//! the tape in reverse and accumulates gradients into every node that
//! (transitively) depends on a leaf created with `requires_grad`.

use serde::{Deserialize, Serialize};

use super::matrix::{matmul, matmul_nt, matmul_tn, softmax_rows, Matrix};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Silu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the pre-activation `x` and the output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Act(Var, Activation),
    ScaleRows(Var, Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    RepeatRows(Var, usize),
    TileRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    SquaredError {
        pred: Var,
        target: Matrix,
        weights: Vec<f64>,
    },
    AbsError {
        pred: Var,
        target: Matrix,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Leaves created for every entry of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wrap explicit leaves, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, id: super::params::ParamId) -> Var {
        self.vars[id.index()]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    /// Create a leaf for every parameter in `store`.
    pub fn bind(&mut self, store: &ParamStore, requires_grad: bool) -> Bound {
        let vars = store
            .values()
            .map(|m| self.leaf(m.clone(), requires_grad))
            .collect();
        Bound { vars }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a + bias` with a `1 x cols` bias broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::dim(
                "add_bias",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut value = av.clone();
        let b = bv.row(0);
        for r in 0..value.rows() {
            for (x, &y) in value.row_mut(r).iter_mut().zip(b) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(value, Op::AddBias(a, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn act(&mut self, a: Var, f: Activation) -> Var {
        if f == Activation::Identity {
            return a;
        }
        let value = self.value(a).map(|x| f.apply(x));
        let rg = self.rg(&[a]);
        self.push(value, Op::Act(a, f), rg)
    }

    /// Multiply row `i` of `a` by the scalar `s[i]` (`s` is `rows x 1`).
    pub fn scale_rows(&mut self, s: Var, a: Var) -> Result<Var> {
        let (sv, av) = (self.value(s), self.value(a));
        if sv.cols() != 1 || sv.rows() != av.rows() {
            return Err(Error::dim(
                "scale_rows",
                format!("{:?} ⊙ {:?}", sv.shape(), av.shape()),
            ));
        }
        let mut value = av.clone();
        for r in 0..value.rows() {
            let k = sv.get(r, 0);
            for x in value.row_mut(r) {
                *x *= k;
            }
        }
        let rg = self.rg(&[s, a]);
        Ok(self.push(value, Op::ScaleRows(s, a), rg))
    }

    /// Row sums as a column vector.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Matrix::column(
            &(0..av.rows())
                .map(|r| av.row(r).iter().sum())
                .collect::<Vec<_>>(),
        );
        let rg = self.rg(&[a]);
        self.push(value, Op::SumCols(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.cols() {
            return Err(Error::dim(
                "slice_cols",
                format!("{start}..{end} of {} columns", av.cols()),
            ));
        }
        let mut value = Matrix::zeros(av.rows(), end - start);
        for r in 0..av.rows() {
            value.row_mut(r).copy_from_slice(&av.row(r)[start..end]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::SliceCols(a, start), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(a).clone().reshape(rows, cols)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Repeat each row `n` times consecutively: row `i` lands on rows
    /// `i*n .. (i+1)*n`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        let mut value = Matrix::zeros(av.rows() * n, av.cols());
        for r in 0..av.rows() {
            for k in 0..n {
                value.row_mut(r * n + k).copy_from_slice(av.row(r));
            }
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::RepeatRows(a, n), rg)
    }

    /// Stack `n` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        let parts: Vec<&Matrix> = std::iter::repeat(av).take(n).collect();
        let value = Matrix::concat_rows(&parts).unwrap_or_else(|_| Matrix::zeros(0, av.cols()));
        let rg = self.rg(&[a]);
        self.push(value, Op::TileRows(a, n), rg)
    }

    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let value = self.value(table).gather_rows(idx)?;
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::GatherRows(table, idx.to_vec()), rg))
    }

    /// Sum of all entries, as a `1 x 1` matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Matrix::filled(1, 1, s), Op::Sum(a), rg)
    }

    /// `(1/n) Σ_i w_i ‖pred_i − target_i‖²` over the `n` rows.
    pub fn squared_error(&mut self, pred: Var, target: &Matrix, weights: &[f64]) -> Result<Var> {
        let v = self.row_loss("squared_error", pred, target, weights, |d| d * d)?;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            v,
            Op::SquaredError {
                pred,
                target: target.clone(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    /// `(1/n) Σ_i w_i ‖pred_i − target_i‖₁` over the `n` rows.
    pub fn abs_error(&mut self, pred: Var, target: &Matrix, weights: &[f64]) -> Result<Var> {
        let v = self.row_loss("abs_error", pred, target, weights, f64::abs)?;
        let rg = self.rg(&[pred]);
        Ok(self.push(
            v,
            Op::AbsError {
                pred,
                target: target.clone(),
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    fn row_loss(
        &self,
        op: &'static str,
        pred: Var,
        target: &Matrix,
        weights: &[f64],
        f: impl Fn(f64) -> f64,
    ) -> Result<Matrix> {
        let p = self.value(pred);
        p.same_shape(op, target)?;
        if weights.len() != p.rows() {
            return Err(Error::dim(op, format!("{} weights for {} rows", weights.len(), p.rows())));
        }
        let n = p.rows().max(1) as f64;
        let total: f64 = (0..p.rows())
            .map(|r| {
                weights[r]
                    * p.row(r)
                        .iter()
                        .zip(target.row(r))
                        .map(|(a, b)| f(a - b))
                        .sum::<f64>()
            })
            .sum();
        Ok(Matrix::filled(1, 1, total / n))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::dim("backward", "loss must be 1x1"));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::Numeric("loss".into()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let mut acc = |v: Var, d: Matrix| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &d),
                slot @ None => {
                    *slot = Some(d);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    acc(*a, matmul_nt(g, self.value(*b))?)?;
                }
                if self.requires_grad(*b) {
                    acc(*b, matmul_tn(self.value(*a), g)?)?;
                }
            }
            Op::AddBias(a, b) => {
                acc(*a, g.clone())?;
                if self.requires_grad(*b) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (x, &y) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    acc(*b, db)?;
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                }
                if self.requires_grad(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s))?,
            Op::Act(a, f) => {
                let x = self.value(*a);
                let mut d = g.clone();
                for ((dv, &xv), &yv) in d
                    .as_mut_slice()
                    .iter_mut()
                    .zip(x.as_slice())
                    .zip(node.value.as_slice())
                {
                    *dv *= f.derivative(xv, yv);
                }
                acc(*a, d)?;
            }
            Op::ScaleRows(s, a) => {
                let (sv, av) = (self.value(*s), self.value(*a));
                if self.requires_grad(*s) {
                    let ds: Vec<f64> = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(*s, Matrix::column(&ds))?;
                }
                if self.requires_grad(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows() {
                        let k = sv.get(r, 0);
                        for x in da.row_mut(r) {
                            *x *= k;
                        }
                    }
                    acc(*a, da)?;
                }
            }
            Op::SumCols(a) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    d.row_mut(r).fill(g.get(r, 0));
                }
                acc(*a, d)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.requires_grad(p) {
                        let mut d = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            d.row_mut(r).copy_from_slice(&g.row(r)[start..start + cols]);
                        }
                        acc(p, d)?;
                    }
                    start += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, d)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(x, z)| x * z).sum();
                    for ((dv, &gv), &yv) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *dv = yv * (gv - dot);
                    }
                }
                acc(*a, d)?;
            }
            Op::Transpose(a) => acc(*a, g.transpose())?,
            Op::Reshape(a) => {
                let (rows, cols) = self.shape(*a);
                acc(*a, g.clone().reshape(rows, cols)?)?;
            }
            Op::RepeatRows(a, n) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let dr = d.row_mut(r);
                    for k in 0..*n {
                        for (x, &y) in dr.iter_mut().zip(g.row(r * n + k)) {
                            *x += y;
                        }
                    }
                }
                acc(*a, d)?;
            }
            Op::TileRows(a, n) => {
                let (rows, cols) = self.shape(*a);
                let mut d = Matrix::zeros(rows, cols);
                for k in 0..*n {
                    for r in 0..rows {
                        let src = g.row(k * rows + r);
                        for (x, &y) in d.row_mut(r).iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                }
                acc(*a, d)?;
            }
            Op::GatherRows(table, idx) => {
                let (rows, cols) = self.shape(*table);
                let mut d = Matrix::zeros(rows, cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (x, &y) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *x += y;
                    }
                }
                acc(*table, d)?;
            }
            Op::Sum(a) => {
                let (rows, cols) = self.shape(*a);
                acc(*a, Matrix::filled(rows, cols, g.get(0, 0)))?;
            }
            Op::SquaredError {
                pred,
                target,
                weights,
            } => {
                let p = self.value(*pred);
                let k = 2.0 * g.get(0, 0) / p.rows().max(1) as f64;
                let mut d = p.sub(target)?;
                for (r, &w) in weights.iter().enumerate() {
                    for x in d.row_mut(r) {
                        *x *= k * w;
                    }
                }
                acc(*pred, d)?;
            }
            Op::AbsError {
                pred,
                target,
                weights,
            } => {
                let p = self.value(*pred);
                let k = g.get(0, 0) / p.rows().max(1) as f64;
                let mut d = p.sub(target)?;
                for (r, &w) in weights.iter().enumerate() {
                    for x in d.row_mut(r) {
                        let s = if *x > 0.0 {
                            1.0
                        } else if *x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *x = k * w * s;
                    }
                }
                acc(*pred, d)?;
            }
        }
        Ok(())
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every entry of a bound store, zero where the loss does
    /// not depend on the parameter.
    pub fn for_bound(&self, tape: &Tape, bound: &Bound) -> Vec<Matrix> {
        bound
            .vars
            .iter()
            .map(|&v| match self.get(v) {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = tape.shape(v);
                    Matrix::zeros(r, c)
                }
            })
            .collect()
    }
}

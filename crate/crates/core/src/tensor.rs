//! Dense `f64` vectors and matrices plus a define-by-run reverse-mode tape.
//!
//! Every forward pass builds a fresh [`Tape`]. Values are recorded as nodes
//! that only reference earlier nodes, so a single reverse sweep over the node
//! list visits them in reverse topological order. Learnable tensors enter the
//! tape through [`Tape::param`], which remembers their names so that
//! [`Gradients::named`] can hand back a `name -> gradient` map.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// `(rows, cols)`. Vectors are `(n, 1)`, scalars `(1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub rows: usize,
    pub cols: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { rows: 1, cols: 1 };

    pub fn vector(n: usize) -> Self {
        Shape { rows: n, cols: 1 }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_vector(&self) -> bool {
        self.cols == 1
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MathError {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("{data} values cannot fill a {shape} tensor")]
    BadLength { shape: Shape, data: usize },
    #[error("loss must be a scalar, got {0}")]
    NonScalarLoss(Shape),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("a classifier needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
}

pub type Result<T, E = MathError> = std::result::Result<T, E>;

fn check_finite(what: &str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MathError::NonFinite(what.to_string()))
    }
}

/// A non-empty column vector with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(MathError::Empty { op: "vector" });
        }
        check_finite("vector", &data)?;
        Ok(Vector(data))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector dimension must be positive");
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn shape(&self) -> Shape {
        Shape::vector(self.dim())
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(MathError::ShapeMismatch {
                op: "dot",
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(dot(&self.0, &other.0))
    }

    pub fn tanh(&self) -> Vector {
        Vector(self.0.iter().map(|v| v.tanh()).collect())
    }

    pub fn softmax(&self) -> Vector {
        Vector(softmax(&self.0).expect("vector is non-empty"))
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = MathError;

    fn try_from(data: Vec<f64>) -> Result<Self> {
        Vector::new(data)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let shape = Shape::matrix(rows, cols);
        if rows == 0 || cols == 0 || data.len() != shape.len() {
            return Err(MathError::BadLength {
                shape,
                data: data.len(),
            });
        }
        check_finite("matrix", &data)?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(MathError::ShapeMismatch {
                    op: "from_rows",
                    left: Shape::vector(cols),
                    right: Shape::vector(r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> Shape {
        Shape::matrix(self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn matvec(&self, x: &Vector) -> Result<Vector> {
        if x.dim() != self.cols {
            return Err(MathError::ShapeMismatch {
                op: "matvec",
                left: self.shape(),
                right: x.shape(),
            });
        }
        Ok(Vector(matvec(&self.data, self.rows, self.cols, x.as_slice())))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|k| dot(&w[k * cols..(k + 1) * cols], x))
        .collect()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(s: &[f64]) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Err(MathError::Empty { op: "softmax" });
    }
    check_finite("softmax input", s)?;
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = s.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Floor applied to probabilities inside the cross-entropy log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatVec(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Dot(Var, Var),
    Softmax(Var),
    WeightedSum { weights: Var, items: Vec<Var> },
    Max { items: Vec<Var>, winners: Vec<usize> },
    Mean(Vec<Var>),
    CrossEntropy { probs: Var, label: usize },
    Sum(Vec<Var>),
    Scale(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Shape,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
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

    fn push(&mut self, value: Vec<f64>, shape: Shape, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.len());
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that is not tracked by name.
    pub fn leaf(&mut self, shape: Shape, value: Vec<f64>) -> Result<Var> {
        if value.len() != shape.len() || shape.is_empty() {
            return Err(MathError::BadLength {
                shape,
                data: value.len(),
            });
        }
        Ok(self.push(value, shape, Op::Leaf))
    }

    pub fn vector(&mut self, v: &Vector) -> Var {
        self.push(v.as_slice().to_vec(), v.shape(), Op::Leaf)
    }

    pub fn matrix(&mut self, m: &Matrix) -> Var {
        self.push(m.as_slice().to_vec(), m.shape(), Op::Leaf)
    }

    /// Records a named learnable tensor.
    pub fn param(&mut self, name: impl Into<String>, shape: Shape, value: &[f64]) -> Result<Var> {
        let var = self.leaf(shape, value.to_vec())?;
        self.params.push((name.into(), var));
        Ok(var)
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    fn expect_vector(&self, op: &'static str, v: Var) -> Result<usize> {
        let s = self.shape(v);
        if s.is_vector() {
            Ok(s.rows)
        } else {
            Err(MathError::ShapeMismatch {
                op,
                left: s,
                right: Shape::vector(s.len()),
            })
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(MathError::ShapeMismatch {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(sa)
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let ws = self.shape(w);
        let xs = self.shape(x);
        if !xs.is_vector() || xs.rows != ws.cols {
            return Err(MathError::ShapeMismatch {
                op: "matvec",
                left: ws,
                right: xs,
            });
        }
        let y = matvec(self.value(w), ws.rows, ws.cols, self.value(x));
        Ok(self.push(y, Shape::vector(ws.rows), Op::MatVec(w, x)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let y = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(y, shape, Op::Add(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let y = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(y, shape, Op::Mul(a, b)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let y = self.value(a).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(a);
        self.push(y, shape, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(a);
        self.push(y, shape, Op::Sigmoid(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(MathError::Empty { op: "concat" });
        }
        let mut y = Vec::new();
        for &p in parts {
            self.expect_vector("concat", p)?;
            y.extend_from_slice(self.value(p));
        }
        let n = y.len();
        Ok(self.push(y, Shape::vector(n), Op::Concat(parts.to_vec())))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        self.expect_vector("dot", a)?;
        let y = dot(self.value(a), self.value(b));
        Ok(self.push(vec![y], Shape::SCALAR, Op::Dot(a, b)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.expect_vector("softmax", a)?;
        let y = softmax(self.value(a))?;
        Ok(self.push(y, Shape::vector(n), Op::Softmax(a)))
    }

    /// `sum_i weights[i] * items[i]`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let first = *items.first().ok_or(MathError::Empty { op: "weighted_sum" })?;
        let n = self.expect_vector("weighted_sum", weights)?;
        if n != items.len() {
            return Err(MathError::ShapeMismatch {
                op: "weighted_sum",
                left: Shape::vector(n),
                right: Shape::vector(items.len()),
            });
        }
        let shape = self.shape(first);
        let mut y = vec![0.0; shape.len()];
        for (k, &item) in items.iter().enumerate() {
            self.same_shape("weighted_sum", first, item)?;
            let w = self.value(weights)[k];
            for (acc, v) in y.iter_mut().zip(self.value(item)) {
                *acc += w * v;
            }
        }
        Ok(self.push(
            y,
            shape,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
        ))
    }

    /// Elementwise maximum over `items`. On exact ties the lowest index wins
    /// and is the only item that receives gradient.
    pub fn max(&mut self, items: &[Var]) -> Result<Var> {
        let first = *items.first().ok_or(MathError::Empty { op: "max_pool" })?;
        let shape = self.shape(first);
        for &item in items {
            self.same_shape("max_pool", first, item)?;
        }
        let mut y = self.value(first).to_vec();
        let mut winners = vec![0; y.len()];
        for (i, &item) in items.iter().enumerate().skip(1) {
            for (k, &v) in self.value(item).iter().enumerate() {
                if v > y[k] {
                    y[k] = v;
                    winners[k] = i;
                }
            }
        }
        Ok(self.push(
            y,
            shape,
            Op::Max {
                items: items.to_vec(),
                winners,
            },
        ))
    }

    pub fn mean(&mut self, items: &[Var]) -> Result<Var> {
        let first = *items.first().ok_or(MathError::Empty { op: "avg_pool" })?;
        let shape = self.shape(first);
        let mut y = vec![0.0; shape.len()];
        for &item in items {
            self.same_shape("avg_pool", first, item)?;
            for (acc, v) in y.iter_mut().zip(self.value(item)) {
                *acc += v;
            }
        }
        let n = items.len() as f64;
        y.iter_mut().for_each(|v| *v /= n);
        Ok(self.push(y, shape, Op::Mean(items.to_vec())))
    }

    /// `-ln(max(p[label], LOG_FLOOR))`.
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var> {
        let k = self.expect_vector("cross_entropy", probs)?;
        if label >= k {
            return Err(MathError::LabelOutOfRange { label, classes: k });
        }
        let y = -self.value(probs)[label].max(LOG_FLOOR).ln();
        Ok(self.push(vec![y], Shape::SCALAR, Op::CrossEntropy { probs, label }))
    }

    /// Sum of same-shaped terms.
    pub fn sum(&mut self, items: &[Var]) -> Result<Var> {
        let first = *items.first().ok_or(MathError::Empty { op: "sum" })?;
        let shape = self.shape(first);
        let mut y = vec![0.0; shape.len()];
        for &item in items {
            self.same_shape("sum", first, item)?;
            for (acc, v) in y.iter_mut().zip(self.value(item)) {
                *acc += v;
            }
        }
        Ok(self.push(y, shape, Op::Sum(items.to_vec())))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let y = self.value(a).iter().map(|v| v * c).collect();
        let shape = self.shape(a);
        self.push(y, shape, Op::Scale(a, c))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if shape != Shape::SCALAR {
            return Err(MathError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            params: self.params.clone(),
            shapes: self.nodes.iter().map(|n| n.shape).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatVec(w, x) => {
                let ws = self.shape(*w);
                let xv = self.value(*x);
                let gw = slot(self, grads, *w);
                for (k, gk) in g.iter().enumerate() {
                    if *gk == 0.0 {
                        continue;
                    }
                    let row = &mut gw[k * ws.cols..(k + 1) * ws.cols];
                    for (r, xj) in row.iter_mut().zip(xv) {
                        *r += gk * xj;
                    }
                }
                let wv = self.value(*w);
                let gx = slot(self, grads, *x);
                for (k, gk) in g.iter().enumerate() {
                    if *gk == 0.0 {
                        continue;
                    }
                    let row = &wv[k * ws.cols..(k + 1) * ws.cols];
                    for (gxj, wkj) in gx.iter_mut().zip(row) {
                        *gxj += gk * wkj;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    for (t, s) in slot(self, grads, v).iter_mut().zip(g) {
                        *t += s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                for (t, (s, o)) in slot(self, grads, *a).iter_mut().zip(g.iter().zip(bv)) {
                    *t += s * o;
                }
                for (t, (s, o)) in slot(self, grads, *b).iter_mut().zip(g.iter().zip(av)) {
                    *t += s * o;
                }
            }
            Op::Tanh(a) => {
                for (t, (s, y)) in slot(self, grads, *a).iter_mut().zip(g.iter().zip(&node.value)) {
                    *t += s * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                for (t, (s, y)) in slot(self, grads, *a).iter_mut().zip(g.iter().zip(&node.value)) {
                    *t += s * y * (1.0 - y);
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let gp = slot(self, grads, p);
                    let n = gp.len();
                    for (t, s) in gp.iter_mut().zip(&g[offset..offset + n]) {
                        *t += s;
                    }
                    offset += n;
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                for (t, o) in slot(self, grads, *a).iter_mut().zip(bv) {
                    *t += g[0] * o;
                }
                for (t, o) in slot(self, grads, *b).iter_mut().zip(av) {
                    *t += g[0] * o;
                }
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let inner = dot(g, y);
                for (t, (s, yi)) in slot(self, grads, *a).iter_mut().zip(g.iter().zip(y)) {
                    *t += yi * (s - inner);
                }
            }
            Op::WeightedSum { weights, items } => {
                let wv = self.value(*weights).to_vec();
                for (k, &item) in items.iter().enumerate() {
                    let contribution = dot(g, self.value(item));
                    slot(self, grads, *weights)[k] += contribution;
                    for (t, s) in slot(self, grads, item).iter_mut().zip(g) {
                        *t += wv[k] * s;
                    }
                }
            }
            Op::Max { items, winners } => {
                for (k, (&w, s)) in winners.iter().zip(g).enumerate() {
                    slot(self, grads, items[w])[k] += s;
                }
            }
            Op::Mean(items) => {
                let n = items.len() as f64;
                for &item in items {
                    for (t, s) in slot(self, grads, item).iter_mut().zip(g) {
                        *t += s / n;
                    }
                }
            }
            Op::CrossEntropy { probs, label } => {
                let p = self.value(*probs)[*label];
                if p > LOG_FLOOR {
                    slot(self, grads, *probs)[*label] -= g[0] / p;
                }
            }
            Op::Sum(items) => {
                for &item in items {
                    for (t, s) in slot(self, grads, item).iter_mut().zip(g) {
                        *t += s;
                    }
                }
            }
            Op::Scale(a, c) => {
                for (t, s) in slot(self, grads, *a).iter_mut().zip(g) {
                    *t += c * s;
                }
            }
        }
    }
}

fn slot<'g>(tape: &Tape, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
    let len = tape.nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
    shapes: Vec<Shape>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => vec![0.0; self.shapes[v.0].len()],
        }
    }

    /// Gradients of every named parameter on the tape.
    pub fn named(&self) -> BTreeMap<String, Vec<f64>> {
        self.params
            .iter()
            .map(|(name, v)| (name.clone(), self.wrt(*v)))
            .collect()
    }
}

//! Tape-based reverse-mode automatic differentiation over dense arrays.
//!
//! Values are stored as `f64`. A [`Tape`] in [`Precision::F32`] mode rounds
//! every primitive output (and every accumulated gradient) to the nearest
//! single-precision value, so training runs see 32-bit arithmetic while the
//! verification paths run in full 64-bit.
//!
//! Broadcasting is limited to scalar-with-array and exact shape matches.
//!
//! ```
//! use saft_core::autodiff::{Array, Precision, Tape};
//!
//! let mut tape = Tape::new(Precision::F64);
//! let x = tape.leaf(Array::vector(vec![1.0, 2.0, 3.0]));
//! let sq = tape.square(x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: non-finite value produced")]
    NumericOverflow { op: &'static str },
    #[error("l2_normalize: zero-norm row {row}")]
    NormalizationFailure { row: usize },
    #[error("array data length {len} does not match shape {shape:?}")]
    BadShape { shape: Vec<usize>, len: usize },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Arithmetic precision of a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    pub fn round_slice(self, xs: &mut [f64]) {
        if self == Precision::F32 {
            for x in xs {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_bits(bits: u32) -> Option<Self> {
        match bits {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// Dense row-major array. A 0-d array (empty shape) is a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::BadShape { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// (rows, cols) view; vectors are a single row.
    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn transposed(&self) -> Array {
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Array {
            shape: vec![c, r],
            data: out,
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
    L2Normalize(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    IndexSelect { input: Var, indices: Vec<usize> },
    Scale(Var, f64),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Array,
    tracked: bool,
}

/// Names of the recorded primitives.
pub fn primitive_set() -> &'static [&'static str] {
    &[
        "add",
        "sub",
        "mul",
        "matmul",
        "relu",
        "exp",
        "log",
        "sum",
        "mean",
        "square",
        "sqrt",
        "l2_normalize",
        "concat",
        "index_select",
        "scale",
        "transpose",
    ]
}

/// Append-only record of primitive applications. Single use: one backward pass.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every leaf of a tape.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<Var, Array>,
}

impl Gradients {
    pub fn get(&self, leaf: Var) -> Option<&Array> {
        self.by_leaf.get(&leaf)
    }

    pub fn remove(&mut self, leaf: Var) -> Option<Array> {
        self.by_leaf.remove(&leaf)
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Array)> {
        self.by_leaf.iter().map(|(k, v)| (*k, v))
    }
}

enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            consumed: false,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf.
    pub fn leaf(&mut self, mut value: Array) -> Var {
        self.precision.round_slice(&mut value.data);
        self.push(Op::Leaf, value, true)
    }

    /// Registers a constant; gradients never flow into it.
    pub fn constant(&mut self, mut value: Array) -> Var {
        self.precision.round_slice(&mut value.data);
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, var: Var) -> &Array {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op, value: Array, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, name: &'static str, op: Op, mut value: Array, inputs: &[Var]) -> Result<Var> {
        self.precision.round_slice(&mut value.data);
        if !value.is_finite() {
            return Err(AutodiffError::NumericOverflow { op: name });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        Ok(self.push(op, value, tracked))
    }

    fn broadcast(&self, name: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape == y.shape {
            Ok(Broadcast::Same)
        } else if x.is_scalar() {
            Ok(Broadcast::LhsScalar)
        } else if y.is_scalar() {
            Ok(Broadcast::RhsScalar)
        } else {
            Err(AutodiffError::ShapeMismatch {
                op: name,
                lhs: x.shape.clone(),
                rhs: y.shape.clone(),
            })
        }
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let mode = self.broadcast(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let out = match mode {
            Broadcast::Same => Array {
                shape: x.shape.clone(),
                data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
            },
            Broadcast::LhsScalar => {
                let s = x.data[0];
                y.map(|q| f(s, q))
            }
            Broadcast::RhsScalar => {
                let s = y.data[0];
                x.map(|p| f(p, s))
            }
        };
        self.record(name, op, out, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Matrix product of `(m×n)·(n×p)` or matrix-vector `(m×n)·(n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: x.shape.clone(),
            rhs: y.shape.clone(),
        };
        if x.shape.len() != 2 || !(y.shape.len() == 1 || y.shape.len() == 2) {
            return Err(mismatch());
        }
        let (m, n) = (x.shape[0], x.shape[1]);
        if y.shape[0] != n {
            return Err(mismatch());
        }
        let p = if y.shape.len() == 2 { y.shape[1] } else { 1 };
        let mut out = vec![0.0; m * p];
        matmul_into(&x.data, &y.data, &mut out, m, n, p);
        let shape = if y.shape.len() == 2 { vec![m, p] } else { vec![m] };
        let value = Array { shape, data: out };
        self.record("matmul", Op::MatMul(a, b), value, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).map(f);
        self.record(name, op, out, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |v| v * v, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a))
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary("scale", a, |v| v * factor, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data.iter().sum();
        self.record("sum", Op::Sum(a), Array::scalar(total), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "mean",
                reason: "empty array".into(),
            });
        }
        let m = x.data.iter().sum::<f64>() / x.len() as f64;
        self.record("mean", Op::Mean(a), Array::scalar(m), &[a])
    }

    /// Normalizes each row (the last axis) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_scalar() {
            return Err(AutodiffError::InvalidArgument {
                op: "l2_normalize",
                reason: "scalar input".into(),
            });
        }
        let (rows, cols) = x.rows_cols();
        let mut out = x.data.clone();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(AutodiffError::NormalizationFailure { row: r });
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let value = Array {
            shape: x.shape.clone(),
            data: out,
        };
        self.record("l2_normalize", Op::L2Normalize(a), value, &[a])
    }

    /// Concatenates 1-d arrays along axis 0, or 2-d arrays along axis 0 or 1.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let invalid = |reason: &str| AutodiffError::InvalidArgument {
            op: "concat",
            reason: reason.to_string(),
        };
        let first = inputs.first().ok_or_else(|| invalid("no inputs"))?;
        let base = self.value(*first).shape.clone();
        if base.is_empty() || base.len() > 2 || axis >= base.len() {
            return Err(invalid("unsupported rank or axis"));
        }
        for v in &inputs[1..] {
            let s = &self.value(*v).shape;
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.clone(),
                });
            }
        }
        let mut shape = base.clone();
        shape[axis] = inputs.iter().map(|v| self.value(*v).shape[axis]).sum();
        let data = if base.len() == 1 || axis == 0 {
            inputs
                .iter()
                .flat_map(|v| self.value(*v).data.iter().copied())
                .collect()
        } else {
            let rows = base[0];
            let mut data = Vec::with_capacity(rows * shape[1]);
            for r in 0..rows {
                for v in inputs {
                    let x = self.value(*v);
                    let c = x.shape[1];
                    data.extend_from_slice(&x.data[r * c..(r + 1) * c]);
                }
            }
            data
        };
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.record("concat", op, Array { shape, data }, inputs)
    }

    /// Gathers elements at flat (row-major) indices into a 1-d array.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(AutodiffError::InvalidArgument {
                op: "index_select",
                reason: format!("index {bad} out of bounds for length {}", x.len()),
            });
        }
        let value = Array::vector(indices.iter().map(|&i| x.data[i]).collect());
        let op = Op::IndexSelect {
            input: a,
            indices: indices.to_vec(),
        };
        self.record("index_select", op, value, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape.len() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "transpose",
                reason: format!("expected a matrix, got shape {:?}", x.shape),
            });
        }
        let value = x.transposed();
        self.record("transpose", Op::Transpose(a), value, &[a])
    }

    /// Reverse pass from a scalar loss. Every leaf receives a gradient;
    /// leaves with no path to `loss` receive exact zeros.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(AutodiffError::TapeConsumed);
        }
        let loss_shape = self.value(loss).shape.clone();
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_shape));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array::filled(&loss_shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contribution) in self.vjp(idx, &g)? {
                if !self.nodes[input.0].tracked {
                    continue;
                }
                accumulate(&mut grads[input.0], contribution, self.precision)?;
            }
            grads[idx] = Some(g);
        }

        let mut by_leaf = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) {
                let g = grads[idx].take().unwrap_or_else(|| Array::zeros(&node.value.shape));
                by_leaf.insert(Var(idx), g);
            }
        }
        Ok(Gradients { by_leaf })
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn vjp(&self, idx: usize, g: &Array) -> Result<Vec<(Var, Array)>> {
        let node = &self.nodes[idx];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Add(a, b) => vec![(*a, reduce_to(g, val(*a))), (*b, reduce_to(g, val(*b)))],
            Op::Sub(a, b) => vec![(*a, reduce_to(g, val(*a))), (*b, reduce_to(&g.map(|v| -v), val(*b)))],
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let ga = elementwise_with(g, y);
                let gb = elementwise_with(g, x);
                vec![(*a, reduce_to(&ga, x)), (*b, reduce_to(&gb, y))]
            }
            Op::MatMul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let (m, n) = (x.shape[0], x.shape[1]);
                let p = if y.shape.len() == 2 { y.shape[1] } else { 1 };
                // dA = G·Bᵀ (m×p · p×n), dB = Aᵀ·G (n×m · m×p)
                let bt = Array {
                    shape: vec![n, p],
                    data: y.data.clone(),
                };
                let bt = if p == 1 {
                    Array {
                        shape: vec![1, n],
                        data: bt.data,
                    }
                } else {
                    bt.transposed()
                };
                let mut ga = vec![0.0; m * n];
                matmul_into(&g.data, &bt.data, &mut ga, m, p, n);
                let at = x.transposed();
                let mut gb = vec![0.0; n * p];
                matmul_into(&at.data, &g.data, &mut gb, n, m, p);
                vec![
                    (
                        *a,
                        Array {
                            shape: x.shape.clone(),
                            data: ga,
                        },
                    ),
                    (
                        *b,
                        Array {
                            shape: y.shape.clone(),
                            data: gb,
                        },
                    ),
                ]
            }
            Op::Relu(a) => {
                let x = val(*a);
                let data = g
                    .data
                    .iter()
                    .zip(&x.data)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                vec![(
                    *a,
                    Array {
                        shape: x.shape.clone(),
                        data,
                    },
                )]
            }
            Op::Exp(a) => vec![(*a, elementwise_with(g, &node.value))],
            Op::Log(a) => {
                let x = val(*a);
                let data = g.data.iter().zip(&x.data).map(|(&gi, &xi)| gi / xi).collect();
                vec![(
                    *a,
                    Array {
                        shape: x.shape.clone(),
                        data,
                    },
                )]
            }
            Op::Sum(a) => vec![(*a, Array::filled(&val(*a).shape, g.data[0]))],
            Op::Mean(a) => {
                let x = val(*a);
                vec![(*a, Array::filled(&x.shape, g.data[0] / x.len() as f64))]
            }
            Op::Square(a) => {
                let x = val(*a);
                let data = g.data.iter().zip(&x.data).map(|(&gi, &xi)| 2.0 * xi * gi).collect();
                vec![(
                    *a,
                    Array {
                        shape: x.shape.clone(),
                        data,
                    },
                )]
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                let data = g.data.iter().zip(&y.data).map(|(&gi, &yi)| gi / (2.0 * yi)).collect();
                vec![(
                    *a,
                    Array {
                        shape: y.shape.clone(),
                        data,
                    },
                )]
            }
            Op::L2Normalize(a) => {
                let x = val(*a);
                let y = &node.value;
                let (rows, cols) = x.rows_cols();
                let mut data = vec![0.0; x.len()];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let (xr, yr, gr) = (&x.data[span.clone()], &y.data[span.clone()], &g.data[span.clone()]);
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for (k, out) in data[span].iter_mut().enumerate() {
                        *out = (gr[k] - yr[k] * dot) / norm;
                    }
                }
                vec![(
                    *a,
                    Array {
                        shape: x.shape.clone(),
                        data,
                    },
                )]
            }
            Op::Concat { inputs, axis } => {
                let mut parts = Vec::with_capacity(inputs.len());
                let shape = &node.value.shape;
                if shape.len() == 1 || *axis == 0 {
                    let mut offset = 0;
                    for v in inputs {
                        let x = val(*v);
                        parts.push((
                            *v,
                            Array {
                                shape: x.shape.clone(),
                                data: g.data[offset..offset + x.len()].to_vec(),
                            },
                        ));
                        offset += x.len();
                    }
                } else {
                    let (rows, total) = (shape[0], shape[1]);
                    let mut col = 0;
                    for v in inputs {
                        let x = val(*v);
                        let c = x.shape[1];
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(&g.data[r * total + col..r * total + col + c]);
                        }
                        parts.push((
                            *v,
                            Array {
                                shape: x.shape.clone(),
                                data,
                            },
                        ));
                        col += c;
                    }
                }
                parts
            }
            Op::IndexSelect { input, indices } => {
                let x = val(*input);
                let mut data = vec![0.0; x.len()];
                for (&i, &gi) in indices.iter().zip(&g.data) {
                    data[i] += gi;
                }
                vec![(
                    *input,
                    Array {
                        shape: x.shape.clone(),
                        data,
                    },
                )]
            }
            Op::Scale(a, factor) => vec![(*a, g.map(|v| v * factor))],
            Op::Transpose(a) => vec![(*a, g.transposed())],
        };
        Ok(out)
    }
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
}

fn elementwise_with(g: &Array, other: &Array) -> Array {
    if other.is_scalar() {
        let s = other.data[0];
        g.map(|v| v * s)
    } else if g.is_scalar() {
        let s = g.data[0];
        other.map(|v| v * s)
    } else {
        Array {
            shape: g.shape.clone(),
            data: g.data.iter().zip(&other.data).map(|(p, q)| p * q).collect(),
        }
    }
}

/// Sums a broadcast gradient back down to a scalar operand's shape.
fn reduce_to(g: &Array, target: &Array) -> Array {
    if target.is_scalar() && !g.is_scalar() {
        Array::scalar(g.data.iter().sum())
    } else {
        g.clone()
    }
}

fn accumulate(slot: &mut Option<Array>, contribution: Array, precision: Precision) -> Result<()> {
    let mut merged = match slot.take() {
        None => contribution,
        Some(mut existing) => {
            for (e, c) in existing.data.iter_mut().zip(&contribution.data) {
                *e += c;
            }
            existing
        }
    };
    precision.round_slice(&mut merged.data);
    if !merged.is_finite() {
        return Err(AutodiffError::NumericOverflow { op: "backward" });
    }
    *slot = Some(merged);
    Ok(())
}

/// Central-difference gradient check in 64-bit precision.
///
/// `f` builds a scalar from the leaf it is given. Returns the maximum over
/// coordinates of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Array, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new(Precision::F64);
    let leaf = tape.leaf(x.clone());
    let loss = f(&mut tape, leaf)?;
    let analytic = tape.backward(loss)?.remove(leaf).expect("leaf gradient");

    let eval = |point: Array| -> Result<f64> {
        let mut t = Tape::new(Precision::F64);
        let v = t.constant(point);
        let out = f(&mut t, v)?;
        let value = t
            .value(out)
            .item()
            .ok_or_else(|| AutodiffError::NonScalarLoss(t.value(out).shape.clone()))?;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(AutodiffError::NumericOverflow { op: "grad_check" })
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data[i] += eps;
        let mut minus = x.clone();
        minus.data[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

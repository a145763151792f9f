//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation executed on its [`Var`] handles in
//! execution order. [`Tape::backward`] walks that record in reverse, applying
//! each operation's backward rule exactly once, and adds the resulting
//! gradients into the grad slot of every `requires_grad` leaf. Gradients
//! accumulate across calls until [`Tape::zero_grad`].
//!
//! ```
//! use devtune_core::{Tape, Tensor};
//!
//! let tape = Tape::<f32>::new();
//! let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

/// Pooling operator applied along the sequence (row) dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Mean,
    Max,
}

/// Deliberate corruption of one backward rule, used as a negative control
/// for gradient checking.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardFault {
    /// Scales the GELU derivative by 1.5.
    GeluSlope,
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    MulRow(usize, usize),
    Scale(usize, T),
    SoftmaxRows(usize),
    Gelu(usize),
    Sum(usize),
    MeanRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Pool {
        x: usize,
        window: usize,
        stride: usize,
        kind: PoolKind,
        argmax: Vec<usize>,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Gelu(..) => "gelu",
            Op::Sum(..) => "sum",
            Op::MeanRows(..) => "mean_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Pool { .. } => "pool",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) | Op::MulRow(a, b) => {
                vec![*a, *b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::SoftmaxRows(a)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::MeanRows(a) => vec![*a],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Pool { x, .. } | Op::SliceCols { x, .. } => vec![*x],
            Op::ConcatCols(xs) => xs.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Ordered record of executed operations.
pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    fault: Cell<Option<BackwardFault>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("len", &self.len()).finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Scalar = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            fault: Cell::new(None),
        }
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Option<BackwardFault>) -> Self {
        let tape = Self::new();
        tape.fault.set(fault);
        tape
    }

    /// Number of recorded operations, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Names of the recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.name()).collect()
    }

    /// Records a trainable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn derived(&self, value: Tensor<T>, op: Op<T>) -> Var<'_, T> {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].requires_grad)
        };
        self.push(value, op, requires_grad)
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var<'_, T>) -> Option<Tensor<T>> {
        self.nodes.borrow()[var.id].grad.clone()
    }

    /// Gradient of a leaf, or zeros when no backward pass reached it.
    pub fn grad_or_zeros(&self, var: Var<'_, T>) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let node = &nodes[var.id];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Propagates d(loss)/d(leaf) into every reachable `requires_grad` leaf.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<(), TensorError> {
        let mut nodes = self.nodes.borrow_mut();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        if !root.requires_grad {
            return Ok(());
        }
        let fault = self.fault.get();
        let mut pending: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        pending[loss.id] = Some(vec![T::one()]);
        for id in (0..=loss.id).rev() {
            let Some(upstream) = pending[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let node = &mut nodes[id];
                match &mut node.grad {
                    Some(g) => {
                        for (acc, u) in g.data_mut().iter_mut().zip(&upstream) {
                            *acc = *acc + *u;
                        }
                    }
                    None => {
                        node.grad = Some(
                            Tensor::new(node.value.shape().to_vec(), upstream)
                                .expect("gradient shape matches value"),
                        );
                    }
                }
                continue;
            }
            for (input, contribution) in backward_rule(&nodes, id, &upstream, fault) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut pending[input] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a = *a + *c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn require_matrix<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::NotMatrix {
            op,
            shape: s.to_vec(),
        }),
    }
}

/// `[m×k] · [k×n]`.
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * bv;
            }
        }
    }
    out
}

/// `[m×n] · [k×n]ᵀ`.
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let b_row = &b[j * n..(j + 1) * n];
            out[i * k + j] = a_row
                .iter()
                .zip(b_row)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
    }
    out
}

/// `[m×k]ᵀ · [m×n]`.
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * bv;
            }
        }
    }
    out
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let u = c * (x + T::lit(GELU_COEFF) * x * x * x);
    T::lit(0.5) * x * (T::one() + u.tanh())
}

fn gelu_derivative<T: Scalar>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let k = T::lit(GELU_COEFF);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * du
}

pub(crate) fn pooled_len(rows: usize, stride: usize) -> usize {
    rows.div_ceil(stride)
}

fn backward_rule<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    up: &[T],
    fault: Option<BackwardFault>,
) -> Vec<(usize, Vec<T>)> {
    let node = &nodes[id];
    let val = |i: usize| &nodes[i].value;
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).rows(), val(*a).cols());
            let n = val(*b).cols();
            let da = matmul_nt(up, val(*b).data(), m, n, k);
            let db = matmul_tn(val(*a).data(), up, m, k, n);
            vec![(*a, da), (*b, db)]
        }
        Op::Transpose(a) => {
            let (r, c) = (val(*a).rows(), val(*a).cols());
            // output is c×r
            let mut da = vec![T::zero(); r * c];
            for i in 0..c {
                for j in 0..r {
                    da[j * c + i] = up[i * r + j];
                }
            }
            vec![(*a, da)]
        }
        Op::Add(a, b) => vec![(*a, up.to_vec()), (*b, up.to_vec())],
        Op::AddRow(a, b) => {
            let n = val(*b).len();
            let mut db = vec![T::zero(); n];
            for row in up.chunks(n) {
                for (d, &u) in db.iter_mut().zip(row) {
                    *d = *d + u;
                }
            }
            vec![(*a, up.to_vec()), (*b, db)]
        }
        Op::Mul(a, b) => {
            let da = up.iter().zip(val(*b).data()).map(|(&u, &y)| u * y).collect();
            let db = up.iter().zip(val(*a).data()).map(|(&u, &x)| u * x).collect();
            vec![(*a, da), (*b, db)]
        }
        Op::MulRow(a, b) => {
            let bv = val(*b).data();
            let n = bv.len();
            let av = val(*a).data();
            let mut da = vec![T::zero(); av.len()];
            let mut db = vec![T::zero(); n];
            for (r, urow) in up.chunks(n).enumerate() {
                for j in 0..n {
                    da[r * n + j] = urow[j] * bv[j];
                    db[j] = db[j] + urow[j] * av[r * n + j];
                }
            }
            vec![(*a, da), (*b, db)]
        }
        Op::Scale(a, s) => vec![(*a, up.iter().map(|&u| u * *s).collect())],
        Op::SoftmaxRows(a) => {
            let y = node.value.data();
            let n = node.value.cols();
            let mut da = vec![T::zero(); y.len()];
            for ((yr, ur), dr) in y.chunks(n).zip(up.chunks(n)).zip(da.chunks_mut(n)) {
                let dot = yr.iter().zip(ur).fold(T::zero(), |acc, (&p, &u)| acc + p * u);
                for j in 0..n {
                    dr[j] = yr[j] * (ur[j] - dot);
                }
            }
            vec![(*a, da)]
        }
        Op::Gelu(a) => {
            let slope = match fault {
                Some(BackwardFault::GeluSlope) => T::lit(1.5),
                None => T::one(),
            };
            let da = up
                .iter()
                .zip(val(*a).data())
                .map(|(&u, &x)| u * gelu_derivative(x) * slope)
                .collect();
            vec![(*a, da)]
        }
        Op::Sum(a) => vec![(*a, vec![up[0]; val(*a).len()])],
        Op::MeanRows(a) => {
            let (r, c) = (val(*a).rows(), val(*a).cols());
            let inv = T::one() / T::lit(r as f64);
            let mut da = Vec::with_capacity(r * c);
            for _ in 0..r {
                da.extend(up.iter().map(|&u| u * inv));
            }
            vec![(*a, da)]
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = val(*gamma).len();
            let g = val(*gamma).data();
            let mut dx = vec![T::zero(); xhat.len()];
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            let dn = T::lit(d as f64);
            for (r, (urow, hrow)) in up.chunks(d).zip(xhat.chunks(d)).enumerate() {
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for j in 0..d {
                    let gj = urow[j] * g[j];
                    sum_g = sum_g + gj;
                    sum_gx = sum_gx + gj * hrow[j];
                    dgamma[j] = dgamma[j] + urow[j] * hrow[j];
                    dbeta[j] = dbeta[j] + urow[j];
                }
                let scale = inv_std[r] / dn;
                for j in 0..d {
                    let gj = urow[j] * g[j];
                    dx[r * d + j] = scale * (dn * gj - sum_g - hrow[j] * sum_gx);
                }
            }
            vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
        }
        Op::Pool {
            x,
            window,
            stride,
            kind,
            argmax,
        } => {
            let (rows, cols) = (val(*x).rows(), val(*x).cols());
            let mut dx = vec![T::zero(); rows * cols];
            let out_rows = node.value.rows();
            match kind {
                PoolKind::Mean => {
                    for j in 0..out_rows {
                        let start = j * stride;
                        let end = (start + window).min(rows);
                        let inv = T::one() / T::lit((end - start) as f64);
                        for r in start..end {
                            for c in 0..cols {
                                dx[r * cols + c] = dx[r * cols + c] + up[j * cols + c] * inv;
                            }
                        }
                    }
                }
                PoolKind::Max => {
                    for j in 0..out_rows {
                        for c in 0..cols {
                            let r = argmax[j * cols + c];
                            dx[r * cols + c] = dx[r * cols + c] + up[j * cols + c];
                        }
                    }
                }
            }
            vec![(*x, dx)]
        }
        Op::SliceCols { x, start } => {
            let (rows, cols) = (val(*x).rows(), val(*x).cols());
            let width = node.value.cols();
            let mut dx = vec![T::zero(); rows * cols];
            for r in 0..rows {
                dx[r * cols + start..r * cols + start + width]
                    .copy_from_slice(&up[r * width..(r + 1) * width]);
            }
            vec![(*x, dx)]
        }
        Op::ConcatCols(xs) => {
            let rows = node.value.rows();
            let total = node.value.cols();
            let mut offset = 0;
            let mut out = Vec::with_capacity(xs.len());
            for &x in xs {
                let w = val(x).cols();
                let mut dx = Vec::with_capacity(rows * w);
                for r in 0..rows {
                    dx.extend_from_slice(&up[r * total + offset..r * total + offset + w]);
                }
                offset += w;
                out.push((x, dx));
            }
            out
        }
        Op::GatherRows { table, ids } => {
            let t = val(*table);
            let cols = t.cols();
            let mut dt = vec![T::zero(); t.len()];
            for (r, &i) in ids.iter().enumerate() {
                for c in 0..cols {
                    dt[i * cols + c] = dt[i * cols + c] + up[r * cols + c];
                }
            }
            vec![(*table, dt)]
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = val(*logits).cols();
            let scale = up[0] / T::lit(labels.len() as f64);
            let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
            for (r, &label) in labels.iter().enumerate() {
                dl[r * c + label] = dl[r * c + label] - scale;
            }
            vec![(*logits, dl)]
        }
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor<T> {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(rhs.id);
            let (m, k) = require_matrix("matmul", &a)?;
            let (k2, n) = require_matrix("matmul", &b)?;
            if k != k2 {
                return Err(shape_err("matmul", a.shape(), b.shape()));
            }
            Tensor::new(vec![m, n], matmul_nn(a.data(), b.data(), m, k, n))?
        };
        Ok(self.tape.derived(out, Op::MatMul(self.id, rhs.id)))
    }

    pub fn transpose(self) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let a = self.tape.value_ref(self.id);
            let (r, c) = require_matrix("transpose", &a)?;
            let src = a.data();
            let mut data = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = src[i * c + j];
                }
            }
            Tensor::new(vec![c, r], data)?
        };
        Ok(self.tape.derived(out, Op::Transpose(self.id)))
    }

    fn zip_same(
        self,
        rhs: Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, TensorError> {
        let a = self.tape.value_ref(self.id);
        let b = self.tape.value_ref(rhs.id);
        if a.shape() != b.shape() {
            return Err(shape_err(op, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    fn zip_row(
        self,
        row: Var<'t, T>,
        op: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, TensorError> {
        let a = self.tape.value_ref(self.id);
        let b = self.tape.value_ref(row.id);
        let (_, n) = require_matrix(op, &a)?;
        if b.len() != n {
            return Err(shape_err(op, a.shape(), b.shape()));
        }
        let bv = b.data();
        let data = a
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let out = self.zip_same(rhs, "add", |x, y| x + y)?;
        Ok(self.tape.derived(out, Op::Add(self.id, rhs.id)))
    }

    /// Adds a length-N vector to every row of an M×N matrix.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let out = self.zip_row(row, "add_row", |x, y| x + y)?;
        Ok(self.tape.derived(out, Op::AddRow(self.id, row.id)))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let out = self.zip_same(rhs, "mul", |x, y| x * y)?;
        Ok(self.tape.derived(out, Op::Mul(self.id, rhs.id)))
    }

    /// Multiplies every row of an M×N matrix elementwise by a length-N vector.
    pub fn mul_row(self, row: Var<'t, T>) -> Result<Var<'t, T>, TensorError> {
        let out = self.zip_row(row, "mul_row", |x, y| x * y)?;
        Ok(self.tape.derived(out, Op::MulRow(self.id, row.id)))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let out = self.tape.value_ref(self.id).map(|x| x * s);
        self.tape.derived(out, Op::Scale(self.id, s))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(self) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let a = self.tape.value_ref(self.id);
            let (_, n) = require_matrix("softmax_rows", &a)?;
            let mut data = Vec::with_capacity(a.len());
            for row in a.data().chunks(n) {
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let start = data.len();
                data.extend(row.iter().map(|&v| (v - max).exp()));
                let total: T = data[start..].iter().copied().sum();
                for v in &mut data[start..] {
                    *v = *v / total;
                }
            }
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.tape.derived(out, Op::SoftmaxRows(self.id)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        let out = self.tape.value_ref(self.id).map(gelu_scalar);
        self.tape.derived(out, Op::Gelu(self.id))
    }

    pub fn sum(self) -> Var<'t, T> {
        let total = self.tape.value_ref(self.id).data().iter().copied().sum();
        self.tape.derived(Tensor::scalar(total), Op::Sum(self.id))
    }

    /// Column means over all rows: `[M×N] -> [1×N]`.
    pub fn mean_rows(self) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let a = self.tape.value_ref(self.id);
            let (m, n) = require_matrix("mean_rows", &a)?;
            let mut acc = vec![T::zero(); n];
            for row in a.data().chunks(n) {
                for (s, &v) in acc.iter_mut().zip(row) {
                    *s = *s + v;
                }
            }
            let inv = T::one() / T::lit(m as f64);
            Tensor::new(vec![1, n], acc.into_iter().map(|s| s * inv).collect())?
        };
        Ok(self.tape.derived(out, Op::MeanRows(self.id)))
    }

    /// Per-row `(x − mean)/sqrt(var + eps) ∘ gamma + beta` with population
    /// variance.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>, TensorError> {
        let (out, xhat, inv_std) = {
            let x = self.tape.value_ref(self.id);
            let g = self.tape.value_ref(gamma.id);
            let b = self.tape.value_ref(beta.id);
            let (_, d) = require_matrix("layer_norm", &x)?;
            if g.len() != d {
                return Err(shape_err("layer_norm", x.shape(), g.shape()));
            }
            if b.len() != d {
                return Err(shape_err("layer_norm", x.shape(), b.shape()));
            }
            let dn = T::lit(d as f64);
            let mut xhat = Vec::with_capacity(x.len());
            let mut inv_std = Vec::with_capacity(x.rows());
            let mut out = Vec::with_capacity(x.len());
            for row in x.data().chunks(d) {
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let inv = T::one() / (var + eps).sqrt();
                inv_std.push(inv);
                for (j, &v) in row.iter().enumerate() {
                    let h = (v - mean) * inv;
                    xhat.push(h);
                    out.push(h * g.data()[j] + b.data()[j]);
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std)
        };
        Ok(self.tape.derived(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// Pools along the row dimension: output row `j` reduces input rows
    /// `[j·stride, min(j·stride + window, T))`; `T′ = ceil(T / stride)`.
    pub fn pool_rows(self, kind: PoolKind, window: usize, stride: usize) -> Result<Var<'t, T>, TensorError> {
        if window == 0 || stride == 0 {
            return Err(TensorError::Config {
                op: "pool",
                reason: format!("window ({window}) and stride ({stride}) must be positive"),
            });
        }
        let (out, argmax) = {
            let x = self.tape.value_ref(self.id);
            let (rows, cols) = require_matrix("pool", &x)?;
            let out_rows = pooled_len(rows, stride);
            let src = x.data();
            let mut data = vec![T::zero(); out_rows * cols];
            let mut argmax = Vec::new();
            for j in 0..out_rows {
                let start = j * stride;
                let end = (start + window).min(rows);
                match kind {
                    PoolKind::Mean => {
                        let inv = T::one() / T::lit((end - start) as f64);
                        for c in 0..cols {
                            let mut s = T::zero();
                            for r in start..end {
                                s = s + src[r * cols + c];
                            }
                            data[j * cols + c] = s * inv;
                        }
                    }
                    PoolKind::Max => {
                        for c in 0..cols {
                            let mut best = start;
                            for r in start + 1..end {
                                if src[r * cols + c] > src[best * cols + c] {
                                    best = r;
                                }
                            }
                            argmax.push(best);
                            data[j * cols + c] = src[best * cols + c];
                        }
                    }
                }
            }
            (Tensor::new(vec![out_rows, cols], data)?, argmax)
        };
        Ok(self.tape.derived(
            out,
            Op::Pool {
                x: self.id,
                window,
                stride,
                kind,
                argmax,
            },
        ))
    }

    /// Columns `[start, start + width)` of a matrix.
    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let x = self.tape.value_ref(self.id);
            let (rows, cols) = require_matrix("slice_cols", &x)?;
            if width == 0 || start + width > cols {
                return Err(TensorError::Index {
                    op: "slice_cols",
                    index: start + width,
                    len: cols,
                });
            }
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                data.extend_from_slice(&x.data()[r * cols + start..r * cols + start + width]);
            }
            Tensor::new(vec![rows, width], data)?
        };
        Ok(self.tape.derived(out, Op::SliceCols { x: self.id, start }))
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Var<'t, T>]) -> Result<Var<'t, T>, TensorError> {
        let first = parts.first().ok_or(TensorError::Config {
            op: "concat_cols",
            reason: "no inputs".into(),
        })?;
        let tape = first.tape;
        let out = {
            let values: Vec<_> = parts.iter().map(|p| tape.value_ref(p.id)).collect();
            let (rows, _) = require_matrix("concat_cols", &values[0])?;
            let mut total = 0;
            for v in &values {
                let (r, c) = require_matrix("concat_cols", v)?;
                if r != rows {
                    return Err(shape_err("concat_cols", values[0].shape(), v.shape()));
                }
                total += c;
            }
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for v in &values {
                    data.extend_from_slice(v.row(r));
                }
            }
            Tensor::new(vec![rows, total], data)?
        };
        Ok(tape.derived(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    /// Selects rows of a table: `out[r] = table[ids[r]]`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let out = {
            let t = self.tape.value_ref(self.id);
            let (rows, cols) = require_matrix("gather_rows", &t)?;
            if ids.is_empty() {
                return Err(TensorError::Config {
                    op: "gather_rows",
                    reason: "empty index list".into(),
                });
            }
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &i in ids {
                if i >= rows {
                    return Err(TensorError::Index {
                        op: "gather_rows",
                        index: i,
                        len: rows,
                    });
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::new(vec![ids.len(), cols], data)?
        };
        Ok(self.tape.derived(
            out,
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of `[M×C]` logits against `M` labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>, TensorError> {
        let (loss, probs) = {
            let x = self.tape.value_ref(self.id);
            let (m, c) = require_matrix("cross_entropy", &x)?;
            if labels.len() != m {
                return Err(shape_err("cross_entropy", x.shape(), &[labels.len()]));
            }
            let mut probs = Vec::with_capacity(x.len());
            let mut loss = T::zero();
            for (row, &label) in x.data().chunks(c).zip(labels) {
                if label >= c {
                    return Err(TensorError::Index {
                        op: "cross_entropy",
                        index: label,
                        len: c,
                    });
                }
                let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
                let total: T = row.iter().map(|&v| (v - max).exp()).sum();
                let log_total = total.ln();
                loss = loss - (row[label] - max - log_total);
                probs.extend(row.iter().map(|&v| (v - max).exp() / total));
            }
            (loss / T::lit(m as f64), probs)
        };
        Ok(self.tape.derived(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = tape.constant(Tensor::eye(2));
        let c = a.matmul(i).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = a.matmul(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(t(&[&[2.0, 2.0, 2.0], &[0.0, 3f32.ln(), 0.0]]));
        let y = x.softmax_rows().unwrap().value();
        for v in y.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_rows(&[&[0.0, 3f64.ln()]]).unwrap());
        let y = x.softmax_rows().unwrap().value();
        assert!((y.data()[0] - 0.25).abs() < 1e-12);
        assert!((y.data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_is_shift_invariant_and_stable() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(t(&[&[0.5, -1.0, 2.0]]));
        let b = tape.constant(t(&[&[1000.5, 999.0, 1002.0]]));
        let ya = a.softmax_rows().unwrap().value();
        let yb = b.softmax_rows().unwrap().value();
        assert!(yb.is_finite());
        assert!(ya.max_abs_diff(&yb) < 1e-6);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0f32), 0.0);
        assert!((gelu_scalar(10.0f32) - 10.0).abs() < 1e-4);
        // 0.5·(1 + tanh(√(2/π)·1.044715))
        let expected = 0.5 * (1.0 + (SQRT_2_OVER_PI * (1.0 + GELU_COEFF)).tanh());
        assert!((gelu_scalar(1.0f64) - expected).abs() < 1e-15);
        assert!((gelu_scalar(1.0f32) - 0.8412).abs() < 1e-4);
    }

    #[test]
    fn backward_sum_and_square() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[&[1.0, -2.0], &[0.5, 3.0]]));
        tape.backward(x.sum()).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);

        tape.zero_grad();
        let sq = x.mul(x).unwrap().sum();
        tape.backward(sq).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[&[1.0, 2.0]]));
        let loss = x.sum();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn constants_receive_no_grad() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[&[1.0, 2.0]]));
        let c = tape.constant(t(&[&[3.0, 4.0]]));
        let loss = x.mul(c).unwrap().sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn pool_mean_pairs_and_trailing_row() {
        let tape = Tape::<f32>::new();
        let h = tape.constant(t(&[&[1.0, 3.0], &[5.0, 7.0], &[2.0, 4.0], &[6.0, 8.0]]));
        let p = h.pool_rows(PoolKind::Mean, 2, 2).unwrap().value();
        assert_eq!(p.data(), &[3.0, 5.0, 4.0, 6.0]);

        let h = tape.constant(t(&[&[1.0], &[2.0], &[3.0], &[4.0], &[9.0]]));
        let p = h.pool_rows(PoolKind::Mean, 2, 2).unwrap().value();
        assert_eq!(p.shape(), &[3, 1]);
        assert_eq!(p.data()[2], 9.0);
    }

    #[test]
    fn pool_max_routes_gradient_to_argmax() {
        let tape = Tape::<f32>::new();
        let h = tape.leaf(t(&[&[1.0, 5.0], &[3.0, 2.0]]));
        let p = h.pool_rows(PoolKind::Max, 2, 2).unwrap();
        assert_eq!(p.value().data(), &[3.0, 5.0]);
        tape.backward(p.sum()).unwrap();
        assert_eq!(tape.grad(h).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[2, 4]));
        let loss = x.cross_entropy(&[0, 3]).unwrap();
        assert!((loss.value().item() - 4f64.ln()).abs() < 1e-12);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert!((g.get(0, 0) - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((g.get(0, 1) - 0.25 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn gather_scatters_gradient() {
        let tape = Tape::<f32>::new();
        let table = tape.leaf(t(&[&[1.0], &[2.0], &[3.0]]));
        let g = table.gather_rows(&[2, 0, 2]).unwrap();
        assert_eq!(g.value().data(), &[3.0, 1.0, 3.0]);
        tape.backward(g.sum()).unwrap();
        assert_eq!(tape.grad(table).unwrap().data(), &[1.0, 0.0, 2.0]);
        assert!(table.gather_rows(&[3]).is_err());
    }

    #[test]
    fn slice_and_concat_are_inverse() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0]]));
        let a = x.slice_cols(0, 2).unwrap();
        let b = x.slice_cols(2, 2).unwrap();
        let y = Var::concat_cols(&[a, b]).unwrap();
        assert!(y.value().bit_eq(&x.value()));
        assert!(x.slice_cols(3, 2).is_err());
    }

    #[test]
    fn record_visits_each_op_once() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(t(&[&[1.0, 2.0]]));
        let y = x.gelu().scale(2.0).sum();
        assert_eq!(tape.op_names(), vec!["leaf", "gelu", "scale", "sum"]);
        tape.backward(y).unwrap();
        assert!(tape.grad(x).is_some());
    }
}

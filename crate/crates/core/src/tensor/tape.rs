use alloc::vec;
use alloc::vec::Vec;

use super::{Tensor, NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive catalog. Each kind has a forward and a backward rule below.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Neg,
    Scale,
    Sum,
    Mean,
    SumRows,
    MeanRows,
    SumCols,
    MeanCols,
    AddRowVector,
    ColBroadcast,
    GatherRows,
    ConcatRows,
    Sigmoid,
    Relu,
    L2NormalizeRows,
    SoftmaxRows,
    LogSoftmaxRows,
    StopGradient,
}

impl OpKind {
    pub const ALL: [OpKind; 27] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Neg,
        OpKind::Scale,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumRows,
        OpKind::MeanRows,
        OpKind::SumCols,
        OpKind::MeanCols,
        OpKind::AddRowVector,
        OpKind::ColBroadcast,
        OpKind::GatherRows,
        OpKind::ConcatRows,
        OpKind::Sigmoid,
        OpKind::Relu,
        OpKind::L2NormalizeRows,
        OpKind::SoftmaxRows,
        OpKind::LogSoftmaxRows,
        OpKind::StopGradient,
    ];
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Exp(Var),
    Log(Var),
    Neg(Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanRows(Var),
    SumCols(Var),
    MeanCols(Var),
    AddRowVector(Var, Var),
    ColBroadcast(Var),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Sigmoid(Var),
    Relu(Var),
    L2NormalizeRows(Var),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var, f64),
    StopGradient,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Neg(_) => OpKind::Neg,
            Op::Scale(..) => OpKind::Scale,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::SumRows(_) => OpKind::SumRows,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::SumCols(_) => OpKind::SumCols,
            Op::MeanCols(_) => OpKind::MeanCols,
            Op::AddRowVector(..) => OpKind::AddRowVector,
            Op::ColBroadcast(_) => OpKind::ColBroadcast,
            Op::GatherRows(..) => OpKind::GatherRows,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Relu(_) => OpKind::Relu,
            Op::L2NormalizeRows(_) => OpKind::L2NormalizeRows,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::LogSoftmaxRows(..) => OpKind::LogSoftmaxRows,
            Op::StopGradient => OpKind::StopGradient,
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Deliberately wrong backward rule, used as a negative control for the
/// gradient checker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fault {
    pub kind: OpKind,
    pub factor: f64,
}

/// Append-only record of primitives. Inputs always precede their consumers,
/// so reverse append order is a valid topological order.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
    leaf_requires_grad: Vec<bool>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` if `v` does not require one.
    /// Requires-grad nodes that the loss does not reach get zeros.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.leaf_requires_grad[v.0]
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.lens[v.0]
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

fn matrix(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::ShapeMismatch {
            op,
            left: shape.to_vec(),
            right: vec![0, 0],
        }),
    }
}

/// `c = a_op · b_op + beta·c`, row-major; `a_op` is `m×k`, `b_op` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    // SAFETY: slice lengths match the logical dimensions and strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softmax_row(x: &[f64], inv_tau: f64, out: &mut [f64]) {
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = libm::exp((v - max) * inv_tau);
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose backward pass corrupts every rule of `fault.kind`.
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Single value of a scalar node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Copies the node's value out as a fresh tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records `t` as a leaf; it participates in backward iff
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    /// Records a value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(Op::Leaf, shape, t.into_data(), false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, Vec::new(), vec![value], false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix("matmul", self.shape(a))?;
        let (k2, n) = matrix("matmul", self.shape(b))?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            0.0,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = matrix("transpose", self.shape(a))?;
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Transpose(a), vec![c, r], out, rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>, bool)> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out, self.rg(&[a, b])))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), s, v, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), s, v, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), s, v, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.shape(a), self.shape(b))?;
        if self.value(b).contains(&0.0) {
            return Err(Error::domain("div", "division by zero"));
        }
        let (s, v, rg) = self.binary("div", a, b, |x, y| x / y)?;
        Ok(self.push(Op::Div(a, b), s, v, rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(op, shape, out, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), libm::exp)
    }

    /// Natural log; non-positive inputs are a domain error.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(&x) = self.value(a).iter().find(|&&x| x <= 0.0 || x.is_nan()) {
            return Err(Error::domain(
                "log",
                alloc::format!("argument {x} is not positive"),
            ));
        }
        Ok(self.unary(a, Op::Log(a), libm::log))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    /// Identity forward; blocks every gradient into `a`.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let value = self.value(a).to_vec();
        self.push(Op::StopGradient, shape, value, false)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Vec::new(), vec![s], rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::domain("mean", "empty tensor"));
        }
        let s: f64 = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Mean(a), Vec::new(), vec![s / n as f64], rg))
    }

    fn reduce_rows(&mut self, a: Var, name: &'static str, mean: bool) -> Result<Var> {
        let (r, c) = matrix(name, self.shape(a))?;
        if mean && c == 0 {
            return Err(Error::domain(name, "zero columns"));
        }
        let x = self.value(a);
        let out: Vec<f64> = (0..r)
            .map(|i| {
                let s: f64 = x[i * c..(i + 1) * c].iter().sum();
                if mean {
                    s / c as f64
                } else {
                    s
                }
            })
            .collect();
        let rg = self.rg(&[a]);
        let op = if mean {
            Op::MeanRows(a)
        } else {
            Op::SumRows(a)
        };
        Ok(self.push(op, vec![r], out, rg))
    }

    /// `[r×c] → [r]`
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.reduce_rows(a, "sum_rows", false)
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.reduce_rows(a, "mean_rows", true)
    }

    fn reduce_cols(&mut self, a: Var, name: &'static str, mean: bool) -> Result<Var> {
        let (r, c) = matrix(name, self.shape(a))?;
        if mean && r == 0 {
            return Err(Error::domain(name, "zero rows"));
        }
        let x = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            add_into(&mut out, &x[i * c..(i + 1) * c]);
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= r as f64);
        }
        let rg = self.rg(&[a]);
        let op = if mean {
            Op::MeanCols(a)
        } else {
            Op::SumCols(a)
        };
        Ok(self.push(op, vec![c], out, rg))
    }

    /// `[r×c] → [c]`
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        self.reduce_cols(a, "sum_cols", false)
    }

    pub fn mean_cols(&mut self, a: Var) -> Result<Var> {
        self.reduce_cols(a, "mean_cols", true)
    }

    /// `x[r×c] + b[c]`, with `b` repeated down the rows.
    pub fn add_row_vector(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, c) = matrix("add_row_vector", self.shape(x))?;
        same_shape("add_row_vector", &[c], self.shape(b))?;
        let mut out = self.value(x).to_vec();
        let bv = self.value(b);
        for i in 0..r {
            add_into(&mut out[i * c..(i + 1) * c], bv);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Op::AddRowVector(x, b), vec![r, c], out, rg))
    }

    /// `v[r] → [r×cols]`, each row filled with `v[i]`.
    pub fn col_broadcast(&mut self, v: Var, cols: usize) -> Result<Var> {
        let r = match self.shape(v) {
            [r] => *r,
            s => {
                return Err(Error::ShapeMismatch {
                    op: "col_broadcast",
                    left: s.to_vec(),
                    right: vec![0],
                })
            }
        };
        let x = self.value(v);
        let out: Vec<f64> = (0..r)
            .flat_map(|i| core::iter::repeat_n(x[i], cols))
            .collect();
        let rg = self.rg(&[v]);
        Ok(self.push(Op::ColBroadcast(v), vec![r, cols], out, rg))
    }

    /// Selects rows of a 2-D tensor (or elements of a 1-D one) by index.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (r, w) = match shape.as_slice() {
            [r] => (*r, 1),
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    left: shape,
                    right: vec![0, 0],
                })
            }
        };
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::domain(
                "gather_rows",
                alloc::format!("row {bad} out of range for {r} rows"),
            ));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&x[i * w..(i + 1) * w]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::GatherRows(a, idx.to_vec()), out_shape, out, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::domain("concat_rows", "no inputs"))?;
        let (_, c) = matrix("concat_rows", self.shape(*first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = matrix("concat_rows", self.shape(p))?;
            if c2 != c {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(*first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), vec![rows, c], out, rg))
    }

    /// Row-wise `x / max(‖x‖₂, NORM_EPS)`.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = matrix("l2_normalize_rows", self.shape(a))?;
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>()).max(NORM_EPS);
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::L2NormalizeRows(a), vec![r, c], out, rg))
    }

    /// Row-wise `softmax(x / tau)`, max-shifted.
    pub fn softmax_rows(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::domain(
                "softmax_rows",
                alloc::format!("temperature {tau} must be > 0"),
            ));
        }
        let (r, c) = matrix("softmax_rows", self.shape(a))?;
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            softmax_row(
                &x[i * c..(i + 1) * c],
                1.0 / tau,
                &mut out[i * c..(i + 1) * c],
            );
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SoftmaxRows(a, tau), vec![r, c], out, rg))
    }

    /// Row-wise `log softmax(x / tau)`.
    pub fn log_softmax_rows(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::domain(
                "log_softmax_rows",
                alloc::format!("temperature {tau} must be > 0"),
            ));
        }
        let (r, c) = matrix("log_softmax_rows", self.shape(a))?;
        let x = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = libm::log(row.iter().map(|&v| libm::exp((v - max) / tau)).sum::<f64>());
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - max) / tau - lse;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::LogSoftmaxRows(a, tau), vec![r, c], out, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 || loss_node.shape.iter().any(|&d| d != 1) {
            return Err(Error::NonScalarLoss(loss_node.shape.clone()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            } else if !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            lens: self.nodes.iter().map(|n| n.value.len()).collect(),
            leaf_requires_grad: self.nodes.iter().map(|n| n.requires_grad).collect(),
        })
    }

    fn factor(&self, kind: OpKind) -> f64 {
        match self.fault {
            Some(f) if f.kind == kind => f.factor,
            _ => 1.0,
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let f = self.factor(node.op.kind());
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let nn = self.shape(*b)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    // ga += g · bᵀ
                    gemm(m, nn, k, g, false, self.value(*b), true, ga, 1.0);
                    if f != 1.0 {
                        ga.iter_mut().for_each(|v| *v *= f);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // gb += aᵀ · g
                    gemm(k, m, nn, self.value(*a), true, g, false, gb, 1.0);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += f * g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += f * s);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += f * s);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += f * g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += f * g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += f * g[i] / bv[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] -= f * g[i] * av[i] / (bv[i] * bv[i]);
                    }
                }
            }
            Op::Exp(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += f * g[i] * node.value[i];
                    }
                }
            }
            Op::Log(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += f * g[i] / av[i];
                    }
                }
            }
            Op::Neg(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d -= f * s);
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += f * c * s);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += f * g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let scale = f * g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|d| *d += scale);
                }
            }
            Op::SumRows(a) | Op::MeanRows(a) => {
                let c = self.shape(*a)[1];
                let div = if matches!(node.op, Op::MeanRows(_)) {
                    c as f64
                } else {
                    1.0
                };
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        let s = f * gi / div;
                        ga[i * c..(i + 1) * c].iter_mut().for_each(|d| *d += s);
                    }
                }
            }
            Op::SumCols(a) | Op::MeanCols(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                let div = if matches!(node.op, Op::MeanCols(_)) {
                    r as f64
                } else {
                    1.0
                };
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += f * g[j] / div;
                        }
                    }
                }
            }
            Op::AddRowVector(x, b) => {
                let c = self.shape(*b)[0];
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += f * s);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks(c.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::ColBroadcast(v) => {
                let cols = node.shape[1];
                if let Some(gv) = self.slot(grads, *v) {
                    for (i, d) in gv.iter_mut().enumerate() {
                        *d += f * g[i * cols..(i + 1) * cols].iter().sum::<f64>();
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let w: usize = self.shape(*a).iter().skip(1).product();
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..w {
                            ga[i * w + j] += f * g[r * w + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    if let Some(gp) = self.slot(grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, &s)| *d += f * s);
                    }
                    offset += len;
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        let y = node.value[i];
                        ga[i] += f * g[i] * y * (1.0 - y);
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += f * g[i];
                        }
                    }
                }
            }
            Op::L2NormalizeRows(a) => {
                let c = node.shape[1];
                let x = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..node.shape[0] {
                        let rs = i * c..(i + 1) * c;
                        let row = &x[rs.clone()];
                        let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
                        let y = &node.value[rs.clone()];
                        let gr = &g[rs.clone()];
                        let out = &mut ga[rs];
                        if norm > NORM_EPS {
                            let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..c {
                                out[j] += f * (gr[j] - y[j] * dot) / norm;
                            }
                        } else {
                            for j in 0..c {
                                out[j] += f * gr[j] / NORM_EPS;
                            }
                        }
                    }
                }
            }
            Op::SoftmaxRows(a, tau) => {
                let c = node.shape[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..node.shape[0] {
                        let rs = i * c..(i + 1) * c;
                        let y = &node.value[rs.clone()];
                        let gr = &g[rs.clone()];
                        let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (j, d) in ga[rs].iter_mut().enumerate() {
                            *d += f * y[j] * (gr[j] - dot) / tau;
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a, tau) => {
                let c = node.shape[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..node.shape[0] {
                        let rs = i * c..(i + 1) * c;
                        let gr = &g[rs.clone()];
                        let gsum: f64 = gr.iter().sum();
                        for (j, d) in ga[rs.clone()].iter_mut().enumerate() {
                            let p = libm::exp(node.value[rs.start + j]);
                            *d += f * (gr[j] - p * gsum) / tau;
                        }
                    }
                }
            }
        }
    }
}

//! Reverse-mode differentiation over a recorded tape of array operations.
//!
//! A [`Tape`] owns every intermediate value. [`Var`] is a cheap copyable
//! handle into it. Operations are recorded in execution order and
//! [`Tape::backward`] walks them once, newest first, accumulating
//! gradients into the leaves that asked for them.

use std::cell::RefCell;
use std::rc::Rc;

use super::array::{kernels, Array};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    Softplus(usize),
    Abs(usize),
    Powf(usize, f64),
    Maximum(usize, usize),
    Minimum(usize, usize),
    SoftmaxRows(usize),
    LayerNorm(usize, f64),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, index: Rc<[usize]> },
    Gather { x: usize, index: Rc<[usize]> },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
}

struct Node {
    value: Rc<Array>,
    op: Op,
    requires_grad: bool,
}

/// Record of executed differentiable operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Grads {
    /// Gradient with respect to `var`, or `None` when nothing flowed into it.
    pub fn get(&self, var: Var<'_>) -> Option<Array> {
        self.grads[var.id]
            .as_ref()
            .map(|g| Array::from_parts(self.shapes[var.id].clone(), g.clone()))
    }

    /// Gradient with respect to `var`, zeros when nothing flowed into it.
    pub fn wrt(&self, var: Var<'_>) -> Array {
        self.get(var)
            .unwrap_or_else(|| Array::zeros(self.shapes[var.id].clone()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input value. Gradients are only accumulated for leaves
    /// created with `requires_grad`.
    pub fn leaf(&self, value: Array, requires_grad: bool) -> Var<'_> {
        self.push_node(Rc::new(value), Op::Leaf, requires_grad)
    }

    /// Records a constant (no gradient).
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Array) -> Var<'_> {
        self.leaf(value, true)
    }

    fn push_node(&self, value: Rc<Array>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[usize]) -> Result<Var<'_>> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "operation {:?} produced non-finite value {bad}",
                op_name(&op)
            )));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        Ok(self.push_node(Rc::new(Array::from_parts(shape, data)), op, requires_grad))
    }

    fn value(&self, id: usize) -> Rc<Array> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Runs the backward pass from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Grads {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }
}

fn op_name(op: &Op) -> String {
    let s = format!("{op:?}");
    s.split(['(', ' ', '{']).next().unwrap_or_default().to_string()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, delta: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(delta),
    }
}

fn accumulate_with(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    f: impl FnOnce(&mut [f64]),
) {
    if !nodes[id].requires_grad {
        return;
    }
    let n = nodes[id].value.len();
    let slot = grads[id].get_or_insert_with(|| vec![0.0; n]);
    f(slot);
}

fn elementwise_grad(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    x: usize,
    g: &[f64],
    d: impl Fn(f64, f64) -> f64,
    out: &Array,
) {
    let xv = &nodes[x].value;
    let delta = g
        .iter()
        .zip(xv.data())
        .zip(out.data())
        .map(|((&gi, &xi), &yi)| gi * d(xi, yi))
        .collect();
    accumulate(grads, nodes, x, delta);
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k) = (av.rows(), av.cols());
            let n = bv.cols();
            if nodes[a].requires_grad {
                accumulate(grads, nodes, a, kernels::matmul_nt(g, bv.data(), m, n, k));
            }
            if nodes[b].requires_grad {
                accumulate(grads, nodes, b, kernels::matmul_tn(av.data(), g, m, k, n));
            }
        }
        &Op::MatMulNt(a, b) => {
            // out = a·bᵀ with a: m×k, b: n×k
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (m, k) = (av.rows(), av.cols());
            let n = bv.rows();
            if nodes[a].requires_grad {
                accumulate(grads, nodes, a, kernels::matmul(g, bv.data(), m, n, k));
            }
            if nodes[b].requires_grad {
                accumulate(grads, nodes, b, kernels::matmul_tn(g, av.data(), m, n, k));
            }
        }
        &Op::Transpose(x) => {
            let (m, n) = (out.rows(), out.cols());
            let mut delta = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    delta[j * m + i] = g[i * n + j];
                }
            }
            accumulate(grads, nodes, x, delta);
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, g.to_vec());
            accumulate(grads, nodes, b, g.to_vec());
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, g.to_vec());
            accumulate(grads, nodes, b, g.iter().map(|v| -v).collect());
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            accumulate(grads, nodes, a, g.iter().zip(bv.data()).map(|(x, y)| x * y).collect());
            accumulate(grads, nodes, b, g.iter().zip(av.data()).map(|(x, y)| x * y).collect());
        }
        &Op::Div(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            accumulate(grads, nodes, a, g.iter().zip(bv.data()).map(|(x, y)| x / y).collect());
            accumulate(
                grads,
                nodes,
                b,
                g.iter()
                    .zip(av.data().iter().zip(bv.data()))
                    .map(|(gi, (x, y))| -gi * x / (y * y))
                    .collect(),
            );
        }
        &Op::AddRow(x, bias) => {
            accumulate(grads, nodes, x, g.to_vec());
            let n = out.cols();
            accumulate_with(grads, nodes, bias, |db| {
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
            });
        }
        &Op::MulRow(x, scale) => {
            let n = out.cols();
            let (xv, sv) = (&nodes[x].value, &nodes[scale].value);
            if nodes[x].requires_grad {
                let delta = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * sv.data()[i % n])
                    .collect();
                accumulate(grads, nodes, x, delta);
            }
            accumulate_with(grads, nodes, scale, |ds| {
                for (i, (gi, xi)) in g.iter().zip(xv.data()).enumerate() {
                    ds[i % n] += gi * xi;
                }
            });
        }
        &Op::Scale(x, c) => accumulate(grads, nodes, x, g.iter().map(|v| v * c).collect()),
        &Op::AddScalar(x) => accumulate(grads, nodes, x, g.to_vec()),
        &Op::Relu(x) => {
            elementwise_grad(grads, nodes, x, g, |xi, _| if xi > 0.0 { 1.0 } else { 0.0 }, out)
        }
        &Op::Sigmoid(x) => elementwise_grad(grads, nodes, x, g, |_, y| y * (1.0 - y), out),
        &Op::Log(x) => elementwise_grad(grads, nodes, x, g, |xi, _| 1.0 / xi, out),
        &Op::Exp(x) => elementwise_grad(grads, nodes, x, g, |_, y| y, out),
        &Op::Softplus(x) => elementwise_grad(grads, nodes, x, g, |xi, _| sigmoid(xi), out),
        &Op::Abs(x) => elementwise_grad(
            grads,
            nodes,
            x,
            g,
            |xi, _| {
                if xi > 0.0 {
                    1.0
                } else if xi < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            },
            out,
        ),
        &Op::Powf(x, k) => elementwise_grad(
            grads,
            nodes,
            x,
            g,
            |xi, _| if k == 0.0 { 0.0 } else { k * xi.powf(k - 1.0) },
            out,
        ),
        &Op::Maximum(a, b) | &Op::Minimum(a, b) => {
            let take_max = matches!(nodes[id].op, Op::Maximum(..));
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let first: Vec<bool> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| if take_max { x >= y } else { x <= y })
                .collect();
            accumulate(
                grads,
                nodes,
                a,
                g.iter().zip(&first).map(|(gi, &f)| if f { *gi } else { 0.0 }).collect(),
            );
            accumulate(
                grads,
                nodes,
                b,
                g.iter().zip(&first).map(|(gi, &f)| if f { 0.0 } else { *gi }).collect(),
            );
        }
        &Op::SoftmaxRows(x) => {
            let n = out.cols();
            let mut delta = vec![0.0; g.len()];
            for ((drow, grow), yrow) in delta.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d = yi * (gi - dot);
                }
            }
            accumulate(grads, nodes, x, delta);
        }
        &Op::LayerNorm(x, eps) => {
            let n = out.cols();
            let xv = &nodes[x].value;
            let mut delta = vec![0.0; g.len()];
            for (((drow, grow), yrow), xrow) in delta
                .chunks_mut(n)
                .zip(g.chunks(n))
                .zip(out.data().chunks(n))
                .zip(xv.data().chunks(n))
            {
                let inv = 1.0 / (row_variance(xrow) + eps).sqrt();
                let gmean = grow.iter().sum::<f64>() / n as f64;
                let gy = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for ((d, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                    *d = inv * (gi - gmean - yi * gy);
                }
            }
            accumulate(grads, nodes, x, delta);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                accumulate(grads, nodes, p, g[offset..offset + len].to_vec());
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let m = out.rows();
            let n = out.cols();
            let mut col = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if nodes[p].requires_grad {
                    let mut delta = Vec::with_capacity(m * w);
                    for i in 0..m {
                        delta.extend_from_slice(&g[i * n + col..i * n + col + w]);
                    }
                    accumulate(grads, nodes, p, delta);
                }
                col += w;
            }
        }
        &Op::SliceRows { x, start } => {
            let n = out.cols();
            accumulate_with(grads, nodes, x, |dx| {
                dx[start * n..start * n + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, v)| *d += v);
            });
        }
        &Op::SliceCols { x, start } => {
            let w = out.cols();
            let n = nodes[x].value.cols();
            accumulate_with(grads, nodes, x, |dx| {
                for (i, grow) in g.chunks(w).enumerate() {
                    dx[i * n + start..i * n + start + w]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(d, v)| *d += v);
                }
            });
        }
        Op::GatherRows { x, index } => {
            let n = out.cols();
            accumulate_with(grads, nodes, *x, |dx| {
                for (grow, &r) in g.chunks(n).zip(index.iter()) {
                    dx[r * n..(r + 1) * n]
                        .iter_mut()
                        .zip(grow)
                        .for_each(|(d, v)| *d += v);
                }
            });
        }
        Op::Gather { x, index } => {
            accumulate_with(grads, nodes, *x, |dx| {
                for (gi, &k) in g.iter().zip(index.iter()) {
                    dx[k] += gi;
                }
            });
        }
        &Op::Reshape(x) => accumulate(grads, nodes, x, g.to_vec()),
        &Op::Sum(x) => {
            let n = nodes[x].value.len();
            accumulate(grads, nodes, x, vec![g[0]; n]);
        }
        &Op::Mean(x) => {
            let n = nodes[x].value.len();
            accumulate(grads, nodes, x, vec![g[0] / n as f64; n]);
        }
        &Op::MeanRows(x) => {
            let m = nodes[x].value.rows();
            let delta = (0..m).flat_map(|_| g.iter().map(move |v| v / m as f64)).collect();
            accumulate(grads, nodes, x, delta);
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn row_variance(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Default epsilon for [`Var::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-8;

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Array> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars recorded on different tapes"
        );
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>> {
        let v = self.value();
        let data = v.data().iter().map(|&x| f(x)).collect();
        self.tape.push(v.shape().to_vec(), data, op, &[self.id])
    }

    fn binary(&self, other: &Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::dim(name, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        self.tape.push(a.shape().to_vec(), data, op, &[self.id, other.id])
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        self.tape.push(vec![m, n], data, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.dims2("matmul_t")?;
        let (n, k2) = b.dims2("matmul_t")?;
        if k != k2 {
            return Err(Error::dim("matmul_t", a.shape(), b.shape()));
        }
        let data = kernels::matmul_nt(a.data(), b.data(), m, k, n);
        self.tape.push(vec![m, n], data, Op::MatMulNt(self.id, other.id), &[self.id, other.id])
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let t = self.value().transpose()?;
        let shape = t.shape().to_vec();
        self.tape.push(shape, t.into_data(), Op::Transpose(self.id), &[self.id])
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |x, y| x * y)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", Op::Div(self.id, other.id), |x, y| x / y)
    }

    pub fn maximum(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "maximum", Op::Maximum(self.id, other.id), |x, y| if x >= y { x } else { y })
    }

    pub fn minimum(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "minimum", Op::Minimum(self.id, other.id), |x, y| if x <= y { x } else { y })
    }

    fn row_broadcast(&self, row: &Var<'t>, name: &'static str) -> Result<(Rc<Array>, Rc<Array>)> {
        self.same_tape(row);
        let (x, r) = (self.value(), row.value());
        x.dims2(name)?;
        if r.len() != x.cols() || (r.ndim() == 2 && r.rows() != 1) {
            return Err(Error::dim(name, x.shape(), r.shape()));
        }
        Ok((x, r))
    }

    /// Adds a length-n bias to every row of an m×n array.
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        let (x, b) = self.row_broadcast(bias, "add_row")?;
        let n = x.cols();
        let data = x.data().iter().enumerate().map(|(i, v)| v + b.data()[i % n]).collect();
        self.tape.push(x.shape().to_vec(), data, Op::AddRow(self.id, bias.id), &[self.id, bias.id])
    }

    /// Multiplies every row of an m×n array by a length-n vector.
    pub fn mul_row(&self, scale: &Var<'t>) -> Result<Var<'t>> {
        let (x, s) = self.row_broadcast(scale, "mul_row")?;
        let n = x.cols();
        let data = x.data().iter().enumerate().map(|(i, v)| v * s.data()[i % n]).collect();
        self.tape.push(x.shape().to_vec(), data, Op::MulRow(self.id, scale.id), &[self.id, scale.id])
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    /// `c - self`
    pub fn rsub_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.scale(-1.0)?.add_scalar(c)
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary(Op::Log(self.id), f64::ln)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary(Op::Exp(self.id), f64::exp)
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    pub fn abs(&self) -> Result<Var<'t>> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn powf(&self, k: f64) -> Result<Var<'t>> {
        self.unary(Op::Powf(self.id, k), |x| x.powf(k))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (_, n) = x.dims2("softmax_rows")?;
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(n) {
            data.extend(softmax(row));
        }
        self.tape.push(x.shape().to_vec(), data, Op::SoftmaxRows(self.id), &[self.id])
    }

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn layer_norm(&self) -> Result<Var<'t>> {
        self.layer_norm_eps(LAYER_NORM_EPS)
    }

    pub fn layer_norm_eps(&self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let (_, n) = x.dims2("layer_norm")?;
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let inv = 1.0 / (row_variance(row) + eps).sqrt();
            data.extend(row.iter().map(|v| (v - mean) * inv));
        }
        self.tape.push(x.shape().to_vec(), data, Op::LayerNorm(self.id, eps), &[self.id])
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows of nothing".into()))?;
        let tape = first.tape;
        let mut rows = 0;
        let n = first.value().cols();
        let mut data = Vec::new();
        for p in parts {
            first.same_tape(p);
            let v = p.value();
            v.dims2("concat_rows")?;
            if v.cols() != n {
                return Err(Error::dim("concat_rows", first.value().shape(), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(vec![rows, n], data, Op::ConcatRows(ids.clone()), &ids)
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat_cols of nothing".into()))?;
        let tape = first.tape;
        let values: Vec<Rc<Array>> = parts.iter().map(|p| p.value()).collect();
        let m = values[0].rows();
        for v in &values {
            v.dims2("concat_cols")?;
            if v.rows() != m {
                return Err(Error::dim("concat_cols", values[0].shape(), v.shape()));
            }
        }
        let n: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for v in &values {
                data.extend_from_slice(v.row(i));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(vec![m, n], data, Op::ConcatCols(ids.clone()), &ids)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.dims2("slice_rows")?;
        if len == 0 || start + len > m {
            return Err(Error::Shape(format!(
                "row slice {start}..{} out of range for {m} rows",
                start + len
            )));
        }
        let data = x.data()[start * n..(start + len) * n].to_vec();
        self.tape.push(vec![len, n], data, Op::SliceRows { x: self.id, start }, &[self.id])
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.dims2("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::Shape(format!(
                "column slice {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&x.row(i)[start..start + len]);
        }
        self.tape.push(vec![m, len], data, Op::SliceCols { x: self.id, start }, &[self.id])
    }

    /// Splits rows at the given boundary: `[0, at)` and `[at, m)`.
    pub fn split_rows(&self, at: usize) -> Result<(Var<'t>, Var<'t>)> {
        let m = self.value().rows();
        Ok((self.slice_rows(0, at)?, self.slice_rows(at, m - at)?))
    }

    /// Picks rows by index (repeats allowed).
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.dims2("gather_rows")?;
        if index.is_empty() {
            return Err(Error::Shape("gather_rows with empty index".into()));
        }
        let mut data = Vec::with_capacity(index.len() * n);
        for &r in index {
            if r >= m {
                return Err(Error::Shape(format!("row {r} out of range for {m} rows")));
            }
            data.extend_from_slice(x.row(r));
        }
        self.tape.push(
            vec![index.len(), n],
            data,
            Op::GatherRows {
                x: self.id,
                index: index.into(),
            },
            &[self.id],
        )
    }

    /// Picks flat elements by index into a vector.
    pub fn gather(&self, index: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if index.is_empty() {
            return Err(Error::Shape("gather with empty index".into()));
        }
        let mut data = Vec::with_capacity(index.len());
        for &k in index {
            data.push(
                *x.data()
                    .get(k)
                    .ok_or_else(|| Error::Shape(format!("element {k} out of range for {} values", x.len())))?,
            );
        }
        self.tape.push(
            vec![index.len()],
            data,
            Op::Gather {
                x: self.id,
                index: index.into(),
            },
            &[self.id],
        )
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let r = self.value().reshape(shape)?;
        let shape = r.shape().to_vec();
        self.tape.push(shape, r.into_data(), Op::Reshape(self.id), &[self.id])
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().sum();
        self.tape.push(vec![1], vec![s], Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = self.value();
        let s = v.sum() / v.len() as f64;
        self.tape.push(vec![1], vec![s], Op::Mean(self.id), &[self.id])
    }

    /// Column means of an m×n array, as a 1×n row.
    pub fn mean_rows(&self) -> Result<Var<'t>> {
        let x = self.value();
        let (m, n) = x.dims2("mean_rows")?;
        let mut data = vec![0.0; n];
        for row in x.data().chunks(n) {
            data.iter_mut().zip(row).for_each(|(d, v)| *d += v);
        }
        data.iter_mut().for_each(|d| *d /= m as f64);
        self.tape.push(vec![1, n], data, Op::MeanRows(self.id), &[self.id])
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(rows: &[&[f64]]) -> Array {
        Array::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let tape = Tape::new();
        let x = tape.constant(arr(&[&[0.0, 0.0], &[1000.0, 0.0]]));
        let y = x.softmax_rows().unwrap().value();
        assert_eq!(y.row(0), &[0.5, 0.5]);
        assert_eq!(y.at(1, 0), 1.0);
        assert!(y.at(1, 1) >= 0.0 && y.at(1, 1) < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let tape = Tape::new();
        let y = tape.constant(arr(&[&[1.0, 2.0, 3.0]])).softmax_rows().unwrap().value();
        let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1f64, 2.0, 3.0].iter().enumerate() {
            assert!((y.data()[i] - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_and_layer_norm_definitions() {
        let tape = Tape::new();
        let r = tape.constant(Array::scalar(-1.0)).relu().unwrap();
        assert_eq!(r.item().unwrap(), 0.0);

        let x = tape.constant(arr(&[&[1.0, 5.0, -2.0, 0.5], &[10.0, 11.0, 12.0, 13.0]]));
        let y = x.layer_norm().unwrap().value();
        for i in 0..2 {
            let row = y.row(i);
            let mean = row.iter().sum::<f64>() / 4.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6, "row {i}: {mean} {var}");
        }
    }

    #[test]
    fn concat_split_round_trip() {
        let tape = Tape::new();
        let a = tape.constant(arr(&[&[1.0, 2.0]]));
        let b = tape.constant(arr(&[&[3.0, 4.0], &[5.0, 6.0]]));
        let c = Var::concat_rows(&[a, b]).unwrap();
        let (a2, b2) = c.split_rows(1).unwrap();
        assert_eq!(*a2.value(), *a.value());
        assert_eq!(*b2.value(), *b.value());
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let tape = Tape::new();
        let a = tape.constant(Array::zeros(vec![2, 3]));
        let b = tape.constant(Array::zeros(vec![3, 2]));
        assert!(matches!(a.add(&b), Err(Error::Dimension { .. })));
        assert!(matches!(a.matmul(&a), Err(Error::Dimension { .. })));
        assert!(a.matmul(&b).is_ok());
    }

    #[test]
    fn backward_requires_scalar_and_accumulates() {
        let tape = Tape::new();
        let x = tape.param(arr(&[&[1.0, 2.0]]));
        assert!(tape.backward(x).is_err());
        // x used twice: d/dx sum(x + x) = 2
        let y = x.add(&x).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).data(), &[2.0, 2.0]);
    }

    #[test]
    fn gradients_skip_constants() {
        let tape = Tape::new();
        let c = tape.constant(arr(&[&[1.0, 2.0]]));
        let p = tape.param(arr(&[&[3.0, 4.0]]));
        let y = c.mul(&p).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.wrt(p).data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let tape = Tape::new();
        let x = tape.constant(Array::scalar(0.0));
        assert!(matches!(x.log(), Err(Error::Numeric(_))));
    }
}

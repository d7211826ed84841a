//! Tape-based reverse-mode differentiation over matrix-valued nodes.
//!
//! Operations are recorded in evaluation order on a [`Tape`]; a [`Var`] is an
//! index into that record. [`Tape::backward`] walks the record once in reverse
//! and accumulates adjoints into every leaf created with [`Tape::param`].

use super::tensor::{gemm, MatRef, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf { trainable: bool },
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    RowSums(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf: receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf { trainable: true },
            value,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf { trainable: false },
            value,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out, "matmul")
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let out = if va.shape() == vb.shape() {
            va.zip_map(vb, f)?
        } else if vb.is_scalar() {
            let s = vb.item();
            va.map(|x| f(x, s))
        } else if va.is_scalar() {
            let s = va.item();
            vb.map(|y| f(s, y))
        } else {
            return Err(Error::dim(
                "elementwise",
                format!("cannot broadcast {:?} with {:?}", va.shape(), vb.shape()),
            ));
        };
        self.push(Op::Binary(op, a, b), out, "elementwise")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = match op {
            UnaryOp::Sigmoid => va.map(sigmoid),
            UnaryOp::Tanh => va.map(f64::tanh),
            UnaryOp::Relu => va.map(|x| x.max(0.0)),
            UnaryOp::Exp => va.map(f64::exp),
            UnaryOp::Log => {
                if let Some(x) = va.data().iter().find(|&&x| x <= 0.0) {
                    return Err(Error::numeric("log", format!("argument {x} is not positive")));
                }
                va.map(f64::ln)
            }
            UnaryOp::Neg => va.map(|x| -x),
        };
        let name = match op {
            UnaryOp::Exp => "exp",
            UnaryOp::Log => "log",
            _ => "elementwise",
        };
        self.push(Op::Unary(op, a), out, name)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Neg, a)
    }

    /// Adds a bias row (`n` elements) to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        let (m, n) = va.dims2()?;
        if vb.len() != n {
            return Err(Error::dim(
                "add_row",
                format!("bias of {} elements for {m}×{n} input", vb.len()),
            ));
        }
        let mut out = va.data().to_vec();
        for row in out.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let out = Tensor::from_parts(vec![m, n], out);
        self.push(Op::AddRow(a, bias), out, "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| c * x);
        self.push(Op::Scale(a, c), out, "scale")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), out, "sum")
    }

    /// Sum along each row of an `m×n` matrix, giving `m×1`.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = va.dims2()?;
        let out: Vec<f64> = va.data().chunks(n).map(|r| r.iter().sum()).collect();
        self.push(Op::RowSums(a), Tensor::from_parts(vec![m, 1], out), "row_sums")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
        let m = self.value(*first).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != m {
                return Err(Error::dim("concat_cols", format!("row counts {m} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p).data();
            for i in 0..m {
                out[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let out = Tensor::from_parts(vec![m, total], out);
        self.push(Op::ConcatCols(parts.to_vec()), out, "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
        let n = self.value(*first).dims2()?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != n {
                return Err(Error::dim("concat_rows", format!("column counts {n} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_parts(vec![rows, n], out);
        self.push(Op::ConcatRows(parts.to_vec()), out, "concat_rows")
    }

    /// Columns `start..end` of an `m×n` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        let (m, n) = va.dims2()?;
        if start >= end || end > n {
            return Err(Error::dim("slice_cols", format!("{start}..{end} of {n} columns")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(m * w);
        for row in va.data().chunks(n) {
            out.extend_from_slice(&row[start..end]);
        }
        self.push(
            Op::SliceCols(a, start, end),
            Tensor::from_parts(vec![m, w], out),
            "slice_cols",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(Op::Reshape(a), out, "reshape")
    }

    /// Reverse sweep from a scalar `loss`, returning adjoints of every
    /// trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if let Op::Leaf { .. } = node.op {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj);
        }

        let grads = self
            .nodes
            .iter()
            .zip(adj)
            .map(|(node, a)| match node.op {
                Op::Leaf { trainable: true } => a,
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = va.dims2().expect("checked in forward");
                let n = vb.cols();
                // dA = G·Bᵀ, dB = Aᵀ·G
                let ga = slot(adj, *a, va.shape());
                gemm(
                    m,
                    n,
                    k,
                    MatRef::new(g.data(), n, false),
                    MatRef::new(vb.data(), n, true),
                    ga.data_mut(),
                    true,
                );
                let gb = slot(adj, *b, vb.shape());
                gemm(
                    k,
                    m,
                    n,
                    MatRef::new(va.data(), k, true),
                    MatRef::new(g.data(), n, false),
                    gb.data_mut(),
                    true,
                );
            }
            Op::Binary(op, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (da, db): (Tensor, Tensor) = match op {
                    BinaryOp::Add => (g.clone(), g.clone()),
                    BinaryOp::Sub => (g.clone(), g.map(|x| -x)),
                    BinaryOp::Mul => (mul_bcast(g, vb), mul_bcast(g, va)),
                };
                accumulate(adj, *a, va.shape(), &da);
                accumulate(adj, *b, vb.shape(), &db);
            }
            Op::Unary(op, a) => {
                let x = self.value(*a);
                let y = &node.value;
                let d = match op {
                    UnaryOp::Sigmoid => zip3(g, y, |g, y| g * y * (1.0 - y)),
                    UnaryOp::Tanh => zip3(g, y, |g, y| g * (1.0 - y * y)),
                    UnaryOp::Relu => zip3(g, x, |g, x| if x > 0.0 { g } else { 0.0 }),
                    UnaryOp::Exp => zip3(g, y, |g, y| g * y),
                    UnaryOp::Log => zip3(g, x, |g, x| g / x),
                    UnaryOp::Neg => g.map(|g| -g),
                };
                accumulate(adj, *a, x.shape(), &d);
            }
            Op::AddRow(a, bias) => {
                let vb = self.value(*bias);
                accumulate(adj, *a, g.shape(), g);
                let n = vb.len();
                let gb = slot(adj, *bias, vb.shape());
                for row in g.data().chunks(n) {
                    for (acc, x) in gb.data_mut().iter_mut().zip(row) {
                        *acc += x;
                    }
                }
            }
            Op::Scale(a, c) => {
                let d = g.map(|x| c * x);
                accumulate(adj, *a, g.shape(), &d);
            }
            Op::Sum(a) => {
                let s = g.item();
                let ga = slot(adj, *a, self.value(*a).shape());
                for x in ga.data_mut() {
                    *x += s;
                }
            }
            Op::RowSums(a) => {
                let va = self.value(*a);
                let n = va.cols();
                let ga = slot(adj, *a, va.shape());
                for (row, gi) in ga.data_mut().chunks_mut(n).zip(g.data()) {
                    for x in row {
                        *x += gi;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let w = self.value(*p).cols();
                    let gp = slot(adj, *p, &shape);
                    for (i, row) in gp.data_mut().chunks_mut(w).enumerate() {
                        for (x, gv) in row.iter_mut().zip(&g.data()[i * total + offset..]) {
                            *x += gv;
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let shape = self.value(*p).shape().to_vec();
                    let len = self.value(*p).len();
                    let gp = slot(adj, *p, &shape);
                    for (x, gv) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                        *x += gv;
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start, end) => {
                let va = self.value(*a);
                let n = va.cols();
                let w = end - start;
                let ga = slot(adj, *a, va.shape());
                for (row, grow) in ga.data_mut().chunks_mut(n).zip(g.data().chunks(w)) {
                    for (x, gv) in row[*start..*end].iter_mut().zip(grow) {
                        *x += gv;
                    }
                }
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                let d = Tensor::from_parts(shape.clone(), g.data().to_vec());
                accumulate(adj, *a, &shape, &d);
            }
        }
    }
}

fn slot<'a>(adj: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    adj[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

/// Adds `d` into the adjoint of `v`, summing it down when `v` was a broadcast scalar.
fn accumulate(adj: &mut [Option<Tensor>], v: Var, shape: &[usize], d: &Tensor) {
    let target = slot(adj, v, shape);
    if target.shape() == d.shape() {
        target.add_assign(d);
    } else {
        target.data_mut()[0] += d.sum();
    }
}

fn mul_bcast(g: &Tensor, other: &Tensor) -> Tensor {
    if other.shape() == g.shape() {
        zip3(g, other, |a, b| a * b)
    } else {
        let s = other.item();
        g.map(|x| x * s)
    }
}

fn zip3(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Adjoints produced by one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a trainable leaf; exactly zero when the leaf
    /// did not contribute to the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }
}

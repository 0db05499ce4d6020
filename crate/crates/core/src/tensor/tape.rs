use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use super::kernels::{col2im, dft2_planes, gemm, im2col, ConvGeom, MatRef};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Records differentiable operations for one forward pass.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order of the computation graph. A tape is single-threaded and
/// meant to be dropped after its backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    warnings: RefCell<Vec<String>>,
    fault: RefCell<Option<&'static str>>,
}

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Exp,
    Ln,
    Abs,
    Sqrt,
    Sigmoid,
    Silu,
    XLogX,
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Affine {
        a: usize,
        scale: f64,
    },
    MaxScalar {
        a: usize,
        floor: f64,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Reshape {
        a: usize,
    },
    Sum {
        a: usize,
    },
    SumAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
    },
    SelectRows {
        a: usize,
        indices: Vec<usize>,
        row_len: usize,
    },
    Softmax {
        a: usize,
        temperature: f64,
        row_len: usize,
    },
    LogSumExp {
        a: usize,
    },
    Cosine {
        a: usize,
        b: usize,
    },
    RowCosine {
        q: usize,
        m: usize,
        rows: usize,
        dim: usize,
    },
    RowNormalize {
        a: usize,
        rows: usize,
        dim: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
        out_c: usize,
        cols: Vec<f64>,
    },
    Upsample2x {
        a: usize,
        c: usize,
        h: usize,
        w: usize,
    },
    GlobalAvgPool {
        a: usize,
        c: usize,
        hw: usize,
    },
    Dft2 {
        a: usize,
        h: usize,
        w: usize,
        real: bool,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Exp => "exp",
                UnaryKind::Ln => "ln",
                UnaryKind::Abs => "abs",
                UnaryKind::Sqrt => "sqrt",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Silu => "silu",
                UnaryKind::XLogX => "xlogx",
            },
            Op::Affine { .. } => "affine",
            Op::MaxScalar { .. } => "max_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Sum { .. } => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Concat { .. } => "concat",
            Op::SelectRows { .. } => "select_rows",
            Op::Softmax { .. } => "softmax",
            Op::LogSumExp { .. } => "logsumexp",
            Op::Cosine { .. } => "cosine_similarity",
            Op::RowCosine { .. } => "row_cosine",
            Op::RowNormalize { .. } => "row_normalize",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x { .. } => "upsample2x",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Dft2 { .. } => "dft2",
        }
    }
}

/// Names of every recorded op, as reported by [`Tape::op_counts`].
pub const OP_NAMES: &[&str] = &[
    "leaf",
    "add",
    "sub",
    "mul",
    "div",
    "exp",
    "ln",
    "abs",
    "sqrt",
    "sigmoid",
    "silu",
    "xlogx",
    "affine",
    "max_scalar",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "sum_axis",
    "concat",
    "select_rows",
    "softmax",
    "logsumexp",
    "cosine_similarity",
    "row_cosine",
    "row_normalize",
    "conv2d",
    "upsample2x",
    "global_avg_pool",
    "dft2",
];

/// A value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, if it lies on a differentiable path.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, node)| self.grads.get(node).and_then(Option::as_ref))
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(pid, node) in &self.params {
            if let Some(Some(g)) = self.grads.get(node) {
                store.accumulate_grad(pid, g);
            }
        }
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Broadcast rule: equal shapes, a one-element operand, or one shape being a
/// trailing suffix of the other. In every allowed case the smaller operand is
/// indexed with `i % len`.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Ok(a.to_vec())
    } else if nb == 1 || (a.len() >= b.len() && a.ends_with(b)) {
        Ok(a.to_vec())
    } else if na == 1 || (b.len() >= a.len() && b.ends_with(a)) {
        Ok(b.to_vec())
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &[f64], row_len: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(row_len).zip(out.chunks_mut(row_len)) {
        let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = ((s - max) / temperature).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Warnings raised by degenerate inputs (e.g. zero-norm cosine operands).
    pub fn warnings(&self) -> Vec<String> {
        self.warnings.borrow().clone()
    }

    fn warn(&self, msg: String) {
        log::debug!("{msg}");
        self.warnings.borrow_mut().push(msg);
    }

    /// Number of recorded nodes per op name.
    pub fn op_counts(&self) -> std::collections::BTreeMap<&'static str, usize> {
        let mut counts = std::collections::BTreeMap::new();
        for n in self.nodes.borrow().iter() {
            *counts.entry(n.op.name()).or_insert(0) += 1;
        }
        counts
    }

    /// Test fixture: perturbs the backward rule of the named op by 5%.
    pub fn inject_fault(&self, op: &'static str) {
        *self.fault.borrow_mut() = Some(op);
    }

    fn push(&self, op: Op, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        check_finite(op.name(), &value)?;
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Registers a leaf value.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var<'_>> {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// A non-differentiable constant.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a trainable leaf; repeated calls reuse the node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let var = self
            .push(Op::Leaf, store.value(id).clone(), true)
            .expect("stored parameters are finite");
        self.params.borrow_mut().insert(id, var.id);
        var
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?
            .value();
        if axis >= first.rank() {
            return Err(Error::invalid("concat", format!("axis {axis} out of range")));
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let trailing: usize = first.shape()[axis + 1..].iter().product();
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        let mut values = Vec::with_capacity(parts.len());
        for p in parts {
            let v = p.value();
            let ok = v.rank() == first.rank()
                && v.shape()[..axis] == first.shape()[..axis]
                && v.shape()[axis + 1..] == first.shape()[axis + 1..];
            if !ok {
                return Err(Error::shape("concat", first.shape(), v.shape()));
            }
            shape[axis] += v.shape()[axis];
            values.push(v);
        }
        let mut data = Vec::with_capacity(shape.iter().product());
        let blocks: Vec<usize> = values.iter().map(|v| v.shape()[axis] * trailing).collect();
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&blocks) {
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.rg(&ids);
        self.push(
            Op::Concat {
                parts: ids.into_iter().zip(blocks).collect(),
                outer,
            },
            Tensor::new(&shape, data)?,
            rg,
        )
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let fault = *self.fault.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut sink = Sink {
                nodes: &nodes,
                grads: &mut grads,
                scale: if fault == Some(node.op.name()) {
                    1.05
                } else {
                    1.0
                },
            };
            backprop(&node.op, &node.value, &g, &nodes, &mut sink);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::new(nodes[i].value.shape(), g).expect("grad shape")))
            .collect();
        let mut params: Vec<(ParamId, usize)> =
            self.params.borrow().iter().map(|(&p, &n)| (p, n)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }
}

struct Sink<'a> {
    nodes: &'a [Node],
    grads: &'a mut Vec<Option<Vec<f64>>>,
    scale: f64,
}

impl Sink<'_> {
    fn wants(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn add(&mut self, id: usize, mut contrib: Vec<f64>) {
        if !self.wants(id) {
            return;
        }
        if self.scale != 1.0 {
            contrib.iter_mut().for_each(|c| *c *= self.scale);
        }
        match &mut self.grads[id] {
            Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        }
    }
}

fn reduce_broadcast(g: &[f64], len: usize) -> Vec<f64> {
    if g.len() == len {
        return g.to_vec();
    }
    let mut out = vec![0.0; len];
    for (i, v) in g.iter().enumerate() {
        out[i % len] += v;
    }
    out
}

fn backprop(op: &Op, out: &Tensor, g: &[f64], nodes: &[Node], sink: &mut Sink<'_>) {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    match *op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (av, bv) = (val(a).data(), val(b).data());
            let (la, lb) = (av.len(), bv.len());
            match kind {
                BinaryKind::Add => {
                    sink.add(a, reduce_broadcast(g, la));
                    sink.add(b, reduce_broadcast(g, lb));
                }
                BinaryKind::Sub => {
                    sink.add(a, reduce_broadcast(g, la));
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    sink.add(b, reduce_broadcast(&neg, lb));
                }
                BinaryKind::Mul => {
                    if sink.wants(a) {
                        let ga: Vec<f64> =
                            g.iter().enumerate().map(|(i, v)| v * bv[i % lb]).collect();
                        sink.add(a, reduce_broadcast(&ga, la));
                    }
                    if sink.wants(b) {
                        let gb: Vec<f64> =
                            g.iter().enumerate().map(|(i, v)| v * av[i % la]).collect();
                        sink.add(b, reduce_broadcast(&gb, lb));
                    }
                }
                BinaryKind::Div => {
                    if sink.wants(a) {
                        let ga: Vec<f64> =
                            g.iter().enumerate().map(|(i, v)| v / bv[i % lb]).collect();
                        sink.add(a, reduce_broadcast(&ga, la));
                    }
                    if sink.wants(b) {
                        let gb: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(i, v)| {
                                let d = bv[i % lb];
                                -v * av[i % la] / (d * d)
                            })
                            .collect();
                        sink.add(b, reduce_broadcast(&gb, lb));
                    }
                }
            }
        }
        Op::Unary { kind, a } => {
            let x = val(a).data();
            let y = out.data();
            let ga: Vec<f64> = match kind {
                UnaryKind::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                UnaryKind::Ln => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                UnaryKind::Abs => g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                    .collect(),
                UnaryKind::Sqrt => g
                    .iter()
                    .zip(y)
                    .map(|(g, &y)| if y > 0.0 { g / (2.0 * y) } else { 0.0 })
                    .collect(),
                UnaryKind::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                UnaryKind::Silu => g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    })
                    .collect(),
                UnaryKind::XLogX => g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { g * (x.ln() + 1.0) } else { 0.0 })
                    .collect(),
            };
            sink.add(a, ga);
        }
        Op::Affine { a, scale } => sink.add(a, g.iter().map(|v| v * scale).collect()),
        Op::MaxScalar { a, floor } => {
            let x = val(a).data();
            sink.add(
                a,
                g.iter()
                    .zip(x)
                    .map(|(g, &x)| if x > floor { *g } else { 0.0 })
                    .collect(),
            );
        }
        Op::MatMul { a, b, m, k, n } => {
            let gm = MatRef::new(g, m, n);
            if sink.wants(a) {
                let mut ga = vec![0.0; m * k];
                gemm(gm, MatRef::new(val(b).data(), k, n).t(), &mut ga, 0.0);
                sink.add(a, ga);
            }
            if sink.wants(b) {
                let mut gb = vec![0.0; k * n];
                gemm(MatRef::new(val(a).data(), m, k).t(), gm, &mut gb, 0.0);
                sink.add(b, gb);
            }
        }
        Op::Transpose { a, rows, cols } => {
            // out is cols × rows
            let mut ga = vec![0.0; rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    ga[i * cols + j] = g[j * rows + i];
                }
            }
            sink.add(a, ga);
        }
        Op::Reshape { a } => sink.add(a, g.to_vec()),
        Op::Sum { a } => sink.add(a, vec![g[0]; val(a).numel()]),
        Op::SumAxis {
            a,
            outer,
            len,
            inner,
        } => {
            let mut ga = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                    dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            sink.add(a, ga);
        }
        Op::Concat { ref parts, outer } => {
            let row: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(id, len) in parts {
                if sink.wants(id) {
                    let mut gp = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        gp.extend_from_slice(&g[o * row + offset..o * row + offset + len]);
                    }
                    sink.add(id, gp);
                }
                offset += len;
            }
        }
        Op::SelectRows {
            a,
            ref indices,
            row_len,
        } => {
            let mut ga = vec![0.0; val(a).numel()];
            for (r, &idx) in indices.iter().enumerate() {
                let dst = &mut ga[idx * row_len..(idx + 1) * row_len];
                dst.iter_mut()
                    .zip(&g[r * row_len..(r + 1) * row_len])
                    .for_each(|(d, v)| *d += v);
            }
            sink.add(a, ga);
        }
        Op::Softmax {
            a,
            temperature,
            row_len,
        } => {
            let y = out.data();
            let mut ga = vec![0.0; y.len()];
            for ((yr, gr), dr) in y
                .chunks(row_len)
                .zip(g.chunks(row_len))
                .zip(ga.chunks_mut(row_len))
            {
                let inner = dot(yr, gr);
                for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = yv * (gv - inner) / temperature;
                }
            }
            sink.add(a, ga);
        }
        Op::LogSumExp { a } => {
            let p = softmax_rows(val(a).data(), val(a).numel(), 1.0);
            sink.add(a, p.iter().map(|p| p * g[0]).collect());
        }
        Op::Cosine { a, b } => {
            let (av, bv) = (val(a).data(), val(b).data());
            let (na, nb) = (norm(av), norm(bv));
            if na == 0.0 || nb == 0.0 {
                return;
            }
            let c = out.data()[0];
            let s = g[0];
            if sink.wants(a) {
                sink.add(
                    a,
                    av.iter()
                        .zip(bv)
                        .map(|(x, y)| s * (y / (na * nb) - c * x / (na * na)))
                        .collect(),
                );
            }
            if sink.wants(b) {
                sink.add(
                    b,
                    av.iter()
                        .zip(bv)
                        .map(|(x, y)| s * (x / (na * nb) - c * y / (nb * nb)))
                        .collect(),
                );
            }
        }
        Op::RowCosine { q, m, rows, dim } => {
            let (qv, mv) = (val(q).data(), val(m).data());
            let nq = norm(qv);
            let c = out.data();
            let mut gq = vec![0.0; dim];
            let mut gm = vec![0.0; rows * dim];
            if nq > 0.0 {
                for r in 0..rows {
                    let row = &mv[r * dim..(r + 1) * dim];
                    let nr = norm(row);
                    if nr == 0.0 {
                        continue;
                    }
                    let s = g[r];
                    for i in 0..dim {
                        gq[i] += s * (row[i] / (nq * nr) - c[r] * qv[i] / (nq * nq));
                        gm[r * dim + i] = s * (qv[i] / (nq * nr) - c[r] * row[i] / (nr * nr));
                    }
                }
            }
            sink.add(q, gq);
            sink.add(m, gm);
        }
        Op::RowNormalize { a, rows, dim } => {
            let x = val(a).data();
            let y = out.data();
            let mut ga = vec![0.0; rows * dim];
            for r in 0..rows {
                let nr = norm(&x[r * dim..(r + 1) * dim]);
                if nr == 0.0 {
                    continue;
                }
                let yr = &y[r * dim..(r + 1) * dim];
                let gr = &g[r * dim..(r + 1) * dim];
                let inner = dot(yr, gr);
                for i in 0..dim {
                    ga[r * dim + i] = (gr[i] - yr[i] * inner) / nr;
                }
            }
            sink.add(a, ga);
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            out_c,
            ref cols,
        } => {
            let l = geom.col_cols();
            let ckk = geom.col_rows();
            let gm = MatRef::new(g, out_c, l);
            if sink.wants(w) {
                let mut gw = vec![0.0; out_c * ckk];
                gemm(gm, MatRef::new(cols, ckk, l).t(), &mut gw, 0.0);
                sink.add(w, gw);
            }
            if let Some(b) = b {
                sink.add(b, g.chunks(l).map(|r| r.iter().sum()).collect());
            }
            if sink.wants(x) {
                let mut gcols = vec![0.0; ckk * l];
                gemm(MatRef::new(val(w).data(), out_c, ckk).t(), gm, &mut gcols, 0.0);
                let mut gx = vec![0.0; geom.in_c * geom.in_h * geom.in_w];
                col2im(&gcols, &geom, &mut gx);
                sink.add(x, gx);
            }
        }
        Op::Upsample2x { a, c, h, w } => {
            let mut ga = vec![0.0; c * h * w];
            let (oh, ow) = (2 * h, 2 * w);
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        ga[(ch * h + y / 2) * w + x / 2] += g[(ch * oh + y) * ow + x];
                    }
                }
            }
            sink.add(a, ga);
        }
        Op::GlobalAvgPool { a, c, hw } => {
            let mut ga = vec![0.0; c * hw];
            for ch in 0..c {
                let v = g[ch] / hw as f64;
                ga[ch * hw..(ch + 1) * hw].iter_mut().for_each(|d| *d = v);
            }
            sink.add(a, ga);
        }
        Op::Dft2 { a, h, w, real } => sink.add(a, dft2_planes(g, h, w, real)),
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    /// Value of a one-element var.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        self.same_tape(&other);
        let name = Op::Binary {
            kind,
            a: 0,
            b: 0,
        }
        .name();
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let (la, lb) = (ad.len(), bd.len());
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data = (0..n).map(|i| f(ad[i % la], bd[i % lb])).collect();
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(
            Op::Binary {
                kind,
                a: self.id,
                b: other.id,
            },
            Tensor::new(&shape, data)?,
            rg,
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div)
    }

    fn unary(self, kind: UnaryKind) -> Result<Var<'t>> {
        let v = self.value();
        let out = v.map(|x| match kind {
            UnaryKind::Exp => x.exp(),
            UnaryKind::Ln => x.ln(),
            UnaryKind::Abs => x.abs(),
            UnaryKind::Sqrt => x.sqrt(),
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Silu => x * sigmoid(x),
            UnaryKind::XLogX => {
                if x == 0.0 {
                    0.0
                } else {
                    x * x.ln()
                }
            }
        });
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(Op::Unary { kind, a: self.id }, out, rg)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Ln)
    }

    pub fn abs(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Abs)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Sigmoid)
    }

    /// `x · sigmoid(x)`: smooth everywhere, ReLU-like away from the origin.
    pub fn silu(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::Silu)
    }

    /// `x ln x` with `0 ln 0 := 0`.
    pub fn xlogx(self) -> Result<Var<'t>> {
        self.unary(UnaryKind::XLogX)
    }

    /// `scale · x + shift`.
    pub fn affine(self, scale: f64, shift: f64) -> Result<Var<'t>> {
        let out = self.value().map(|x| scale * x + shift);
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(Op::Affine { a: self.id, scale }, out, rg)
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        self.affine(factor, 0.0)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.affine(1.0, c)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.affine(-1.0, 0.0)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.mul(self)
    }

    /// Elementwise `max(x, floor)`.
    pub fn max_scalar(self, floor: f64) -> Result<Var<'t>> {
        let out = self.value().map(|x| x.max(floor));
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(Op::MaxScalar { a: self.id, floor }, out, rg)
    }

    /// Product of a `m × k` and a `k × n` matrix.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), &mut out, 0.0);
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
            Tensor::new(&[m, n], out)?,
            rg,
        )
    }

    /// Transpose of a rank-2 var.
    pub fn t(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("expects rank 2, got {:?}", v.shape()),
            ));
        }
        let (rows, cols) = (v.shape()[0], v.shape()[1]);
        let d = v.data();
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = d[i * cols + j];
            }
        }
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(
            Op::Transpose {
                a: self.id,
                rows,
                cols,
            },
            Tensor::new(&[cols, rows], out)?,
            rg,
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        let n: usize = shape.iter().product();
        if n != v.numel() {
            return Err(Error::shape("reshape", v.shape(), shape));
        }
        let out = Tensor::new(shape, v.data().to_vec())?;
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(Op::Reshape { a: self.id }, out, rg)
    }

    pub fn flatten(self) -> Result<Var<'t>> {
        let n = self.numel();
        self.reshape(&[n])
    }

    /// Sum of all elements, as a rank-0 var.
    pub fn sum(self) -> Result<Var<'t>> {
        let s: f64 = self.value().data().iter().sum();
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(Op::Sum { a: self.id }, Tensor::scalar(s), rg)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(Error::invalid(
                "sum_axis",
                format!("axis {axis} out of range for {:?}", v.shape()),
            ));
        }
        let outer: usize = v.shape()[..axis].iter().product();
        let len = v.shape()[axis];
        let inner: usize = v.shape()[axis + 1..].iter().product();
        let d = v.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(
            Op::SumAxis {
                a: self.id,
                outer,
                len,
                inner,
            },
            Tensor::new(&shape, out)?,
            rg,
        )
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis", format!("axis {axis} out of range")))?;
        self.sum_axis(axis)?.scale(1.0 / len as f64)
    }

    /// Gathers rows (slices along axis 0) in the given order.
    pub fn select_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() == 0 || indices.is_empty() {
            return Err(Error::invalid("select_rows", "needs rank ≥ 1 and indices"));
        }
        let rows = v.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(
                "select_rows",
                format!("index {bad} out of range for {rows} rows"),
            ));
        }
        let row_len = v.numel() / rows;
        let mut out = Vec::with_capacity(indices.len() * row_len);
        for &i in indices {
            out.extend_from_slice(&v.data()[i * row_len..(i + 1) * row_len]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = indices.len();
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(
            Op::SelectRows {
                a: self.id,
                indices: indices.to_vec(),
                row_len,
            },
            Tensor::new(&shape, out)?,
            rg,
        )
    }

    /// Element `i` of a vector, as a rank-0 var.
    pub fn pick(self, i: usize) -> Result<Var<'t>> {
        self.flatten()?.select_rows(&[i])?.reshape(&[])
    }

    /// Softmax of `x / temperature` along the last axis.
    pub fn softmax(self, temperature: f64) -> Result<Var<'t>> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(
                "softmax",
                format!("temperature must be positive, got {temperature}"),
            ));
        }
        let v = self.value();
        let row_len = *v.shape().last().unwrap_or(&1);
        let out = Tensor::new(v.shape(), softmax_rows(v.data(), row_len, temperature))?;
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(
            Op::Softmax {
                a: self.id,
                temperature,
                row_len,
            },
            out,
            rg,
        )
    }

    /// `ln Σ exp(x)` over all elements, max-shifted.
    pub fn logsumexp(self) -> Result<Var<'t>> {
        let v = self.value();
        let max = v.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = v.data().iter().map(|x| (x - max).exp()).sum();
        let rg = self.tape.rg(&[self.id]);
        self.tape
            .push(Op::LogSumExp { a: self.id }, Tensor::scalar(max + s.ln()), rg)
    }

    /// Cosine similarity of two equal-size vars (flattened). Zero-norm operands
    /// give 0 with zero gradient and a tape warning.
    pub fn cosine_similarity(self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let (a, b) = (self.value(), other.value());
        if a.numel() != b.numel() {
            return Err(Error::shape("cosine_similarity", a.shape(), b.shape()));
        }
        let (na, nb) = (norm(a.data()), norm(b.data()));
        let c = if na == 0.0 || nb == 0.0 {
            self.tape
                .warn("cosine_similarity: zero-norm operand, result defined as 0".into());
            0.0
        } else {
            dot(a.data(), b.data()) / (na * nb)
        };
        let rg = self.tape.rg(&[self.id, other.id]);
        self.tape.push(
            Op::Cosine {
                a: self.id,
                b: other.id,
            },
            Tensor::scalar(c),
            rg,
        )
    }

    /// Cosine between this `d`-vector and every row of an `n × d` matrix.
    pub fn row_cosine(self, rows: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rows);
        let (q, m) = (self.value(), rows.value());
        if m.rank() != 2 || m.shape()[1] != q.numel() {
            return Err(Error::shape("row_cosine", q.shape(), m.shape()));
        }
        let (n, d) = (m.shape()[0], m.shape()[1]);
        let nq = norm(q.data());
        let mut out = vec![0.0; n];
        let mut degenerate = nq == 0.0;
        for (r, o) in out.iter_mut().enumerate() {
            let row = &m.data()[r * d..(r + 1) * d];
            let nr = norm(row);
            if nq == 0.0 || nr == 0.0 {
                degenerate = true;
                continue;
            }
            *o = dot(q.data(), row) / (nq * nr);
        }
        if degenerate {
            self.tape
                .warn("row_cosine: zero-norm operand, result defined as 0".into());
        }
        let rg = self.tape.rg(&[self.id, rows.id]);
        self.tape.push(
            Op::RowCosine {
                q: self.id,
                m: rows.id,
                rows: n,
                dim: d,
            },
            Tensor::vector(out),
            rg,
        )
    }

    /// L2-normalises each row of a rank-2 var; zero rows stay zero.
    pub fn row_normalize(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() != 2 {
            return Err(Error::invalid("row_normalize", "expects rank 2"));
        }
        let (rows, dim) = (v.shape()[0], v.shape()[1]);
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(dim) {
            let n = norm(row);
            if n == 0.0 {
                self.tape
                    .warn("row_normalize: zero-norm row left as zero".into());
                continue;
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(
            Op::RowNormalize {
                a: self.id,
                rows,
                dim,
            },
            Tensor::new(&[rows, dim], out)?,
            rg,
        )
    }

    /// 2-D convolution of a `c × h × w` input with `o × c × k × k` weights,
    /// zero padding `pad` and the given stride.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let bad = x.rank() != 3
            || w.rank() != 4
            || w.shape()[1] != x.shape()[0]
            || w.shape()[2] != w.shape()[3];
        if bad {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be ≥ 1"));
        }
        let geom = ConvGeom {
            in_c: x.shape()[0],
            in_h: x.shape()[1],
            in_w: x.shape()[2],
            kernel: w.shape()[2],
            stride,
            pad,
        };
        if geom.in_h + 2 * pad < geom.kernel || geom.in_w + 2 * pad < geom.kernel {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        let out_c = w.shape()[0];
        let cols = im2col(x.data(), &geom);
        let l = geom.col_cols();
        let mut out = vec![0.0; out_c * l];
        gemm(
            MatRef::new(w.data(), out_c, geom.col_rows()),
            MatRef::new(&cols, geom.col_rows(), l),
            &mut out,
            0.0,
        );
        let mut ids = vec![self.id, weight.id];
        if let Some(b) = bias {
            let bv = b.value();
            if bv.numel() != out_c {
                return Err(Error::shape("conv2d bias", &[out_c], bv.shape()));
            }
            for (row, &bias) in out.chunks_mut(l).zip(bv.data()) {
                row.iter_mut().for_each(|v| *v += bias);
            }
            ids.push(b.id);
        }
        let rg = self.tape.rg(&ids);
        self.tape.push(
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
                out_c,
                cols,
            },
            Tensor::new(&[out_c, geom.out_h(), geom.out_w()], out)?,
            rg,
        )
    }

    /// Nearest-neighbour 2× upsampling of a `c × h × w` var.
    pub fn upsample2x(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() != 3 {
            return Err(Error::invalid("upsample2x", "expects c × h × w"));
        }
        let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    out[(ch * oh + y) * ow + x] = v.data()[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(
            Op::Upsample2x { a: self.id, c, h, w },
            Tensor::new(&[c, oh, ow], out)?,
            rg,
        )
    }

    /// Mean over the spatial dimensions of a `c × h × w` var.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() != 3 {
            return Err(Error::invalid("global_avg_pool", "expects c × h × w"));
        }
        let c = v.shape()[0];
        let hw = v.shape()[1] * v.shape()[2];
        let out: Vec<f64> = v
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.tape.rg(&[self.id]);
        self.tape
            .push(Op::GlobalAvgPool { a: self.id, c, hw }, Tensor::vector(out), rg)
    }

    fn dft2_part(self, real: bool) -> Result<Var<'t>> {
        let v = self.value();
        if v.rank() < 2 {
            return Err(Error::invalid("dft2", "expects at least h × w"));
        }
        let h = v.shape()[v.rank() - 2];
        let w = v.shape()[v.rank() - 1];
        let out = Tensor::new(v.shape(), dft2_planes(v.data(), h, w, real))?;
        let rg = self.tape.rg(&[self.id]);
        self.tape.push(
            Op::Dft2 {
                a: self.id,
                h,
                w,
                real,
            },
            out,
            rg,
        )
    }

    /// Real and imaginary parts of the 2-D DFT over the last two axes
    /// (applied per leading plane, e.g. per channel).
    pub fn dft2(self) -> Result<(Var<'t>, Var<'t>)> {
        Ok((self.dft2_part(true)?, self.dft2_part(false)?))
    }
}

//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as it executes; [`Graph::backward`]
//! walks the record in reverse and accumulates vector-Jacobian products.
//! Graphs are built per training step and dropped afterwards, so parameter
//! values live only in the [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{
    self, cosine_parts, for_each_broadcast, permute_offsets, split_axis,
    Layout, MatmulPlan, Tensor, COSINE_EPS,
};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Exp,
    Log,
    Gelu,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Binary(Binary, Var, Var, Layout),
    Unary(Unary, Var),
    Scale(Var, f64),
    Offset(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var, MatmulPlan),
    /// `out[i] = x[offsets[i]]`; covers permute, broadcast, slice and gather.
    Index(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize, usize, usize),
    SumAxis(Var, usize, usize, usize),
    SumAll(Var),
    Softmax(Var, usize, usize, usize),
    LogSumExp(Var, usize, usize, usize),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<f64>,
    },
    Cosine(Var, Var, usize),
    Outer(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    no_grad: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph that records values only; nothing requires a gradient.
    pub fn inference() -> Self {
        Graph {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable free input (gradient available through [`Gradients`]).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Load a parameter; repeated loads return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, p.receives_grad());
        self.params.insert(id, v);
        v
    }

    // -- elementwise ------------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (shape, layout) = Layout::new(name, self.shape(a), self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; shape.iter().product()];
        match kind {
            Binary::Add => layout.visit(av.len(), bv.len(), |o, i, j| out[o] = av[i] + bv[j]),
            Binary::Sub => layout.visit(av.len(), bv.len(), |o, i, j| out[o] = av[i] - bv[j]),
            Binary::Mul => layout.visit(av.len(), bv.len(), |o, i, j| out[o] = av[i] * bv[j]),
            Binary::Div => layout.visit(av.len(), bv.len(), |o, i, j| out[o] = av[i] / bv[j]),
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(kind, a, b, layout), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Hadamard product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Tanh => f64::tanh,
            Unary::Gelu => |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()),
        };
        let value = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(value, Op::Unary(kind, x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, c), ng)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(value, Op::Offset(x), ng)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.ng(x);
        self.push(value, Op::Clamp(x, lo, hi), ng)
    }

    // -- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; plan.out_shape.iter().product()];
        plan.forward(self.value(a).data(), self.value(b).data(), &mut out);
        let shape = plan.out_shape.clone();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b, plan), ng))
    }

    /// Outer product of two vectors.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 1 || sb.len() != 1 {
            return Err(Error::shape("outer", sa, sb));
        }
        let (m, n) = (sa[0], sb[0]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(m * n);
        for &x in av {
            out.extend(bv.iter().map(|&y| x * y));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Outer(a, b), ng))
    }

    // -- shape ------------------------------------------------------------

    fn index(&mut self, x: Var, shape: Vec<usize>, offsets: Vec<usize>) -> Result<Var> {
        let xv = self.value(x).data();
        let out: Vec<f64> = offsets.iter().map(|&o| xv[o]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Index(x, offsets), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", &shape, perm));
        }
        let (out_shape, offsets) = permute_offsets(&shape, perm);
        self.index(x, out_shape, offsets)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let out = tensor::broadcast_shape("broadcast_to", &xs, shape)?;
        if out != shape {
            return Err(Error::shape("broadcast_to", &xs, shape));
        }
        let sx = tensor::broadcast_strides(&xs, shape);
        let zero = vec![0; shape.len()];
        let mut offsets = Vec::with_capacity(shape.iter().product());
        for_each_broadcast(shape, &sx, &zero, |_, i, _| offsets.push(i));
        self.index(x, shape.to_vec(), offsets)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if start > end || end > n {
            return Err(Error::contract(format!(
                "slice {start}..{end} out of range for axis {axis} of {shape:?}"
            )));
        }
        let len = end - start;
        let mut offsets = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            offsets.extend(base..base + len * inner);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.index(x, out_shape, offsets)
    }

    /// Rows of `x` along axis 0, in the order given.
    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::shape("gather", &shape, &[rows.len()]));
        }
        let row_len: usize = shape[1..].iter().product();
        let mut offsets = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            if r >= shape[0] {
                return Err(Error::contract(format!("gather row {r} out of range for {shape:?}")));
            }
            offsets.extend(r * row_len..(r + 1) * row_len);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        self.index(x, out_shape, offsets)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::contract("concat of nothing"))?)
            .to_vec();
        let (outer, _, inner) = split_axis(&first, axis)?;
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis];
                let d = self.value(x).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(xs.to_vec(), axis, outer, inner), ng))
    }

    // -- reductions -------------------------------------------------------

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xv[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis(x, outer, n, inner), ng))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::contract(format!("axis {axis} out of range")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let mut out = vec![0.0; self.value(x).numel()];
        tensor::softmax_kernel(self.value(x).data(), &mut out, outer, n, inner);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x, outer, n, inner), ng))
    }

    /// `log Σ exp` over `axis`, removing it.
    pub fn log_sum_exp(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let mut out = vec![0.0; outer * inner];
        tensor::lse_kernel(self.value(x).data(), &mut out, outer, n, inner);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::LogSumExp(x, outer, n, inner), ng))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for i in 0..d {
                out[r * d + i] = (row[i] - mean) * rs * g[i] + b[i];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            },
            ng,
        ))
    }

    /// Cosine similarity along the last axis of two equal-shape tensors.
    /// Pairs where either norm is below [`COSINE_EPS`] yield 0.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || shape != self.shape(b) {
            return Err(Error::shape("cosine", &shape, self.shape(b)));
        }
        let d = shape[shape.len() - 1];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<f64> = av
            .chunks(d)
            .zip(bv.chunks(d))
            .map(|(x, y)| {
                let (dot, na, nb) = cosine_parts(x, y);
                if na < COSINE_EPS || nb < COSINE_EPS {
                    0.0
                } else {
                    dot / (na * nb)
                }
            })
            .collect();
        let ng = self.ng(a) || self.ng(b);
        let out_shape = shape[..shape.len() - 1].to_vec();
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Cosine(a, b, d), ng))
    }

    // -- backward ---------------------------------------------------------

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backward, then add parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (&id, &v) in &self.params {
            let p = store.get_mut(id);
            if !p.receives_grad() {
                continue;
            }
            if let Some(g) = grads.get(v) {
                let dst = p.grad.data_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
                if let Some(mask) = &p.update_mask {
                    for (d, &m) in dst.iter_mut().zip(mask) {
                        if !m {
                            *d = 0.0;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.numel();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Binary(kind, a, b, layout) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (val(a), val(b));
                let (na, nb) = (av.len(), bv.len());
                if wants(a) {
                    let mut ga = vec![0.0; na];
                    match kind {
                        Binary::Add | Binary::Sub => layout.visit(na, nb, |o, i, _| ga[i] += g[o]),
                        Binary::Mul => layout.visit(na, nb, |o, i, j| ga[i] += g[o] * bv[j]),
                        Binary::Div => layout.visit(na, nb, |o, i, j| ga[i] += g[o] / bv[j]),
                    }
                    acc(grads, a, ga);
                }
                if wants(b) {
                    let mut gb = vec![0.0; nb];
                    match kind {
                        Binary::Add => layout.visit(na, nb, |o, _, j| gb[j] += g[o]),
                        Binary::Sub => layout.visit(na, nb, |o, _, j| gb[j] -= g[o]),
                        Binary::Mul => layout.visit(na, nb, |o, i, j| gb[j] += g[o] * av[i]),
                        Binary::Div => {
                            layout.visit(na, nb, |o, i, j| gb[j] -= g[o] * av[i] / (bv[j] * bv[j]))
                        }
                    }
                    acc(grads, b, gb);
                }
            }
            Op::Unary(kind, x) => {
                let xv = val(*x);
                let yv = node.value.data();
                let gx: Vec<f64> = match kind {
                    Unary::Exp => g.iter().zip(yv).map(|(g, y)| g * y).collect(),
                    Unary::Log => g.iter().zip(xv).map(|(g, x)| g / x).collect(),
                    Unary::Tanh => g.iter().zip(yv).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Gelu => g
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| {
                            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                        })
                        .collect(),
                };
                acc(grads, *x, gx);
            }
            Op::Scale(x, c) => acc(grads, *x, g.iter().map(|v| v * c).collect()),
            Op::Offset(x) | Op::Reshape(x) => acc(grads, *x, g.to_vec()),
            Op::Clamp(x, lo, hi) => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &x)| if x >= *lo && x <= *hi { g } else { 0.0 })
                    .collect();
                acc(grads, *x, gx);
            }
            Op::MatMul(a, b, plan) => {
                let (a, b) = (*a, *b);
                let mut ga = wants(a).then(|| vec![0.0; len(a)]);
                let mut gb = wants(b).then(|| vec![0.0; len(b)]);
                plan.backward(val(a), val(b), g, ga.as_deref_mut(), gb.as_deref_mut());
                if let Some(ga) = ga {
                    acc(grads, a, ga);
                }
                if let Some(gb) = gb {
                    acc(grads, b, gb);
                }
            }
            Op::Outer(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (val(a), val(b));
                let n = bv.len();
                if wants(a) {
                    let ga = (0..av.len())
                        .map(|i| tensor::dot(&g[i * n..(i + 1) * n], bv))
                        .collect();
                    acc(grads, a, ga);
                }
                if wants(b) {
                    let mut gb = vec![0.0; n];
                    for (i, &x) in av.iter().enumerate() {
                        for j in 0..n {
                            gb[j] += g[i * n + j] * x;
                        }
                    }
                    acc(grads, b, gb);
                }
            }
            Op::Index(x, offsets) => {
                let mut gx = vec![0.0; len(*x)];
                for (gv, &o) in g.iter().zip(offsets) {
                    gx[o] += gv;
                }
                acc(grads, *x, gx);
            }
            Op::Concat(xs, axis, outer, inner) => {
                let mut cursor = 0;
                let total: usize = xs.iter().map(|x| self.nodes[x.0].value.shape()[*axis]).sum();
                for &x in xs {
                    let n = self.nodes[x.0].value.shape()[*axis];
                    if wants(x) {
                        let mut gx = Vec::with_capacity(len(x));
                        for o in 0..*outer {
                            let start = (o * total + cursor) * inner;
                            gx.extend_from_slice(&g[start..start + n * inner]);
                        }
                        acc(grads, x, gx);
                    }
                    cursor += n;
                }
            }
            Op::SumAxis(x, outer, n, inner) => {
                let (outer, n, inner) = (*outer, *n, *inner);
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(grads, *x, gx);
            }
            Op::SumAll(x) => acc(grads, *x, vec![g[0]; len(*x)]),
            Op::Softmax(x, outer, n, inner) => {
                let y = node.value.data();
                let (outer, n, inner) = (*outer, *n, *inner);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let s: f64 = (0..n).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..n {
                            let k = base + j * inner;
                            gx[k] = y[k] * (g[k] - s);
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::LogSumExp(x, outer, n, inner) => {
                let xv = val(*x);
                let y = node.value.data();
                let (outer, n, inner) = (*outer, *n, *inner);
                let mut gx = vec![0.0; xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let go = g[o * inner + i];
                        let lse = y[o * inner + i];
                        for j in 0..n {
                            let k = base + j * inner;
                            gx[k] = go * (xv[k] - lse).exp();
                        }
                    }
                }
                acc(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            } => {
                let xv = val(*x);
                let gm = val(*gamma);
                let d = gm.len();
                let rows = xv.len() / d;
                let mut gx = wants(*x).then(|| vec![0.0; xv.len()]);
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let rs = rstd[r];
                    for i in 0..d {
                        xhat[i] = (row[i] - mean) * rs;
                        dxhat[i] = gr[i] * gm[i];
                        gg[i] += gr[i] * xhat[i];
                        gb[i] += gr[i];
                    }
                    if let Some(gx) = gx.as_mut() {
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for i in 0..d {
                            gx[r * d + i] = rs * (dxhat[i] - m1 - xhat[i] * m2);
                        }
                    }
                }
                if let Some(gx) = gx {
                    acc(grads, *x, gx);
                }
                if wants(*gamma) {
                    acc(grads, *gamma, gg);
                }
                if wants(*beta) {
                    acc(grads, *beta, gb);
                }
            }
            Op::Cosine(a, b, d) => {
                let (a, b, d) = (*a, *b, *d);
                let (av, bv) = (val(a), val(b));
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for (r, &go) in g.iter().enumerate() {
                    let x = &av[r * d..(r + 1) * d];
                    let y = &bv[r * d..(r + 1) * d];
                    let (dot, na, nb) = cosine_parts(x, y);
                    if na < COSINE_EPS || nb < COSINE_EPS {
                        continue;
                    }
                    let c = dot / (na * nb);
                    for i in 0..d {
                        ga[r * d + i] = go * (y[i] / (na * nb) - c * x[i] / (na * na));
                        gb[r * d + i] = go * (x[i] / (na * nb) - c * y[i] / (nb * nb));
                    }
                }
                if wants(a) {
                    acc(grads, a, ga);
                }
                if wants(b) {
                    acc(grads, b, gb);
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

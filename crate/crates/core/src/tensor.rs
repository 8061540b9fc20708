//! Dense row-major `f64` tensors and the raw kernels shared by the eager API
//! and the recorded graph in [`crate::autograd`].

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Norm below which [`cosine_similarity`] treats a vector as zero.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Gaussian tensor with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of range at axis {i}");
            off = off * dim + ix;
        }
        self.data[off]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Batched matrix product `a (.., m, k) · b (.., k, n)`; batch dims broadcast.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = MatmulPlan::new(a.shape(), b.shape())?;
    let mut out = vec![0.0; plan.out_shape.iter().product()];
    plan.forward(a.data(), b.data(), &mut out);
    Tensor::new(plan.out_shape, out)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    let mut out = vec![0.0; x.numel()];
    softmax_kernel(x.data(), &mut out, outer, n, inner);
    Tensor::new(x.shape().to_vec(), out)
}

/// `log Σ exp` along `axis`, removing that axis.
pub fn log_sum_exp(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    let mut out = vec![0.0; outer * inner];
    lse_kernel(x.data(), &mut out, outer, n, inner);
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

/// Cosine similarity of two equal-length vectors; zero when either norm is
/// below [`COSINE_EPS`].
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.numel() != b.numel() {
        return Err(Error::shape("cosine_similarity", a.shape(), b.shape()));
    }
    Ok(cosine_slice(a.data(), b.data()))
}

pub(crate) fn cosine_slice(a: &[f64], b: &[f64]) -> f64 {
    let (dot, na, nb) = cosine_parts(a, b);
    if na < COSINE_EPS || nb < COSINE_EPS {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub(crate) fn cosine_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        aa += x * x;
        bb += y * y;
    }
    (dot, aa.sqrt(), bb.sqrt())
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

/// Decompose `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::contract(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(
    op: &'static str,
    a: &[usize],
    b: &[usize],
) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return Err(Error::shape(op, a, b));
        };
    }
    Ok(out)
}

/// Element strides of `shape` viewed under the broadcast `out` shape; axes
/// that broadcast get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let off = nd - shape.len();
    let mut strides = vec![0; nd];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[off + i] = s;
        }
        s *= shape[i];
    }
    strides
}

/// Visit every output index of a broadcast with the matching input offsets.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    if total == 0 {
        return;
    }
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// How the operands of a binary elementwise op line up with its output.
#[derive(Clone, Debug)]
pub(crate) enum Layout {
    Same,
    /// `b` repeats along the leading axes of `a`.
    RhsSuffix,
    /// `a` repeats along the leading axes of `b`.
    LhsSuffix,
    General {
        out: Vec<usize>,
        sa: Vec<usize>,
        sb: Vec<usize>,
    },
}

impl Layout {
    pub(crate) fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Layout)> {
        if a == b {
            return Ok((a.to_vec(), Layout::Same));
        }
        let out = broadcast_shape(op, a, b)?;
        let na: usize = a.iter().product();
        let nb: usize = b.iter().product();
        let no: usize = out.iter().product();
        let suffix = |small: &[usize], big: &[usize]| {
            let s: Vec<usize> = small.iter().copied().skip_while(|&d| d == 1).collect();
            big.ends_with(&s)
        };
        if na == no && suffix(b, a) {
            return Ok((out, Layout::RhsSuffix));
        }
        if nb == no && suffix(a, b) {
            return Ok((out, Layout::LhsSuffix));
        }
        let sa = broadcast_strides(a, &out);
        let sb = broadcast_strides(b, &out);
        Ok((out.clone(), Layout::General { out, sa, sb }))
    }

    /// Call `f(out_index, a_index, b_index)` for each output element.
    pub(crate) fn visit(&self, na: usize, nb: usize, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            Layout::Same => (0..na).for_each(|i| f(i, i, i)),
            Layout::RhsSuffix => (0..na).for_each(|i| f(i, i, i % nb)),
            Layout::LhsSuffix => (0..nb).for_each(|i| f(i, i % na, i)),
            Layout::General { out, sa, sb } => for_each_broadcast(out, sa, sb, f),
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// (out, a, b) matrix offsets for every batch entry.
    pub batches: Vec<(usize, usize, usize)>,
}

impl MatmulPlan {
    pub(crate) fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", a, b));
        }
        let ba = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let batch = broadcast_shape("matmul", ba, bb).map_err(|_| Error::shape("matmul", a, b))?;
        let sa = broadcast_strides(ba, &batch);
        let sb = broadcast_strides(bb, &batch);
        let mut batches = Vec::with_capacity(batch.iter().product());
        for_each_broadcast(&batch, &sa, &sb, |o, ia, ib| {
            batches.push((o * m * n, ia * m * k, ib * k * n));
        });
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);
        Ok(MatmulPlan {
            out_shape,
            m,
            k,
            n,
            batches,
        })
    }

    pub(crate) fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for &(oo, ao, bo) in &self.batches {
            gemm_acc(&a[ao..ao + m * k], &b[bo..bo + k * n], &mut out[oo..oo + m * n], m, k, n);
        }
    }

    /// Accumulate `dA += dC · Bᵀ` and `dB += Aᵀ · dC`.
    pub(crate) fn backward(
        &self,
        a: &[f64],
        b: &[f64],
        dc: &[f64],
        da: Option<&mut [f64]>,
        db: Option<&mut [f64]>,
    ) {
        let (m, k, n) = (self.m, self.k, self.n);
        if let Some(da) = da {
            let mut bt = vec![0.0; k * n];
            for &(oo, ao, bo) in &self.batches {
                let bm = &b[bo..bo + k * n];
                for p in 0..k {
                    for j in 0..n {
                        bt[j * k + p] = bm[p * n + j];
                    }
                }
                gemm_acc(&dc[oo..oo + m * n], &bt, &mut da[ao..ao + m * k], m, n, k);
            }
        }
        if let Some(db) = db {
            for &(oo, ao, bo) in &self.batches {
                let dcm = &dc[oo..oo + m * n];
                let am = &a[ao..ao + m * k];
                let dbm = &mut db[bo..bo + k * n];
                for i in 0..m {
                    let drow = &dcm[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = am[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        axpy(av, drow, &mut dbm[p * n..(p + 1) * n]);
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `out += a (m×k) · b (k×n)`.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            axpy(av, &b[p * n..(p + 1) * n], orow);
        }
    }
}

pub(crate) fn softmax_kernel(x: &[f64], out: &mut [f64], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(x[base + j * inner]);
            }
            let mut s = 0.0;
            for j in 0..n {
                let e = (x[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                s += e;
            }
            for j in 0..n {
                out[base + j * inner] /= s;
            }
        }
    }
}

pub(crate) fn lse_kernel(x: &[f64], out: &mut [f64], outer: usize, n: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                mx = mx.max(x[base + j * inner]);
            }
            let s: f64 = (0..n).map(|j| (x[base + j * inner] - mx).exp()).sum();
            out[o * inner + i] = mx + s.ln();
        }
    }
}

/// Strides of a contiguous row-major shape.
pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = s;
        s *= shape[i];
    }
    strides
}

/// Gather offsets so that `out[i] = x[offsets[i]]` realizes the permutation.
pub(crate) fn permute_offsets(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; out_shape.len()];
    let mut offsets = Vec::with_capacity(shape.iter().product());
    for_each_broadcast(&out_shape, &strides, &zero, |_, ia, _| offsets.push(ia));
    (out_shape, offsets)
}

//! Recorded operation graph with reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value plus whatever it needs
//! for the backward pass. Nodes are created in topological order, so the
//! backward sweep is a single reverse walk over the node list.

use std::collections::HashMap;

use rand::Rng;

use crate::float::{gemm, Float, MatMut, MatRef};
use crate::params::ParameterStore;
use crate::tensor::Tensor;
use crate::{NnError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        conv_out_len(self.in_h, self.kernel, self.stride, self.pad)
    }

    pub fn out_w(&self) -> usize {
        conv_out_len(self.in_w, self.kernel, self.stride, self.pad)
    }
}

/// Output length of a convolution along one axis.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Targets for [`Graph::cross_entropy`].
#[derive(Debug, Clone)]
pub enum Targets<T> {
    /// One class id per row.
    Hard(Vec<usize>),
    /// A probability row per row, laid out `[n, classes]`.
    Soft(Vec<T>),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Gelu(Var),
    Silu(Var),
    Softmax(Var),
    Dropout { x: Var, mask: Vec<T> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Gather { x: Var, idx: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    RepeatRows { x: Var, counts: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, segments: Vec<(usize, usize)>, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Targets<T>, weights: Vec<T>, n_valid: usize, probs: Vec<T> },
    Sum(Var),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Gelu(x)
            | Op::Silu(x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::LayerNorm { x, .. }
            | Op::Dropout { x, .. }
            | Op::Gather { x, .. }
            | Op::GatherRows { x, .. }
            | Op::RepeatRows { x, .. } => vec![*x],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::ConcatRows(xs) => xs.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Silu(..) => "silu",
            Op::Softmax(..) => "softmax",
            Op::Dropout { .. } => "dropout",
            Op::Conv2d { .. } => "conv2d",
            Op::Gather { .. } => "gather",
            Op::GatherRows { .. } => "embedding_lookup",
            Op::ConcatRows(..) => "concat_rows",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::Attention { .. } => "attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A tape of tensor operations. Build one per forward pass.
pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    training: bool,
}

fn shape_err(op: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> NnError {
    NnError::Shape { op, expected: expected.into(), actual: actual.into() }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl<T: Float> Graph<T> {
    pub fn new(training: bool) -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), training }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf holding data. Gradients are still computed for it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// The leaf for a named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParameterStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name).ok_or_else(|| NnError::MissingParam(name.to_string()))?.clone();
        let v = self.push(t, Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter()
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(shape_err(op, "rank-2 tensor", format!("shape {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.matrix(a, "matmul")?;
        let (k2, m) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("rhs with {k} rows"), format!("{k2} rows")));
        }
        let mut out = vec![T::zero(); n * m];
        gemm(
            T::one(),
            MatRef::dense(self.value(a).data(), n, k),
            MatRef::dense(self.value(b).data(), k, m),
            T::zero(),
            MatMut::dense(&mut out, n, m),
        );
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| *x * *y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    fn row_vector(&self, x: Var, r: Var, op: &'static str) -> Result<(usize, usize)> {
        let (n, d) = self.value(x).as_matrix_dims();
        if self.value(r).len() != d {
            return Err(shape_err(op, format!("vector of length {d}"), format!("{:?}", self.shape(r))));
        }
        Ok((n, d))
    }

    /// Adds a length-`d` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (n, d) = self.row_vector(x, r, "add_row")?;
        let mut out = self.value(x).data().to_vec();
        let rv = self.value(r).data();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] += rv[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::AddRow(x, r)))
    }

    /// Multiplies every row of `x` elementwise by a length-`d` vector.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let (n, d) = self.row_vector(x, r, "mul_row")?;
        let mut out = self.value(x).data().to_vec();
        let rv = self.value(r).data();
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] *= rv[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::MulRow(x, r)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| *v * s).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Scale(x, s)))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| *v + s).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddScalar(x)))
    }

    /// `x @ w + b` with `w: [d_in, d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.value(x).as_matrix_dims();
        if d == 0 {
            return Err(shape_err("layer_norm", "nonzero feature width", "0"));
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); n * d];
        let mut rstd = vec![T::zero(); n];
        let inv_d = T::of(1.0 / d as f64);
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
            let r = T::one() / (var + T::of(eps)).sqrt();
            rstd[i] = r;
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * r;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, rstd }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let c = T::of(GELU_C);
        let a = T::of(GELU_A);
        let half = T::of(0.5);
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Gelu(x)))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v / (T::one() + (-v).exp())).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Silu(x)))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.value(x).as_matrix_dims();
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            softmax_in_place(&mut out[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x)))
    }

    /// Inverted dropout. Identity when the graph is not in training mode.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(shape_err("dropout", "probability in [0, 1)", format!("{p}")));
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> =
            (0..self.value(x).len()).map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep }).collect();
        let data = self.value(x).data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { x, mask }))
    }

    /// 2-D convolution: `x: [B, C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("conv2d", "input [B, C, H, W]", format!("{xs:?}")));
        }
        if ws.len() != 4 || ws[2] != ws[3] {
            return Err(shape_err("conv2d", "square kernel [O, C, k, k]", format!("{ws:?}")));
        }
        if ws[1] != xs[1] {
            return Err(shape_err("conv2d", format!("{} input channels", ws[1]), format!("{}", xs[1])));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err("conv2d", format!("bias [{}]", ws[0]), format!("{:?}", self.shape(b))));
            }
        }
        if stride == 0 || xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[2] {
            return Err(shape_err("conv2d", "kernel not larger than padded input", format!("{xs:?}")));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            out_ch: ws[0],
            in_h: xs[2],
            in_w: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let (oh, ow) = (geom.out_h(), geom.out_w());
        let ckk = geom.in_ch * geom.kernel * geom.kernel;
        let plane = oh * ow;
        let mut out = vec![T::zero(); geom.batch * geom.out_ch * plane];
        let mut col = vec![T::zero(); ckk * plane];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let in_plane = geom.in_ch * geom.in_h * geom.in_w;
        for bi in 0..geom.batch {
            im2col(&xd[bi * in_plane..(bi + 1) * in_plane], &geom, &mut col);
            let dst = &mut out[bi * geom.out_ch * plane..(bi + 1) * geom.out_ch * plane];
            gemm(
                T::one(),
                MatRef::dense(wd, geom.out_ch, ckk),
                MatRef::dense(&col, ckk, plane),
                T::zero(),
                MatMut::dense(dst, geom.out_ch, plane),
            );
            if let Some(b) = b {
                let bd = self.value(b).data();
                for o in 0..geom.out_ch {
                    for v in &mut dst[o * plane..(o + 1) * plane] {
                        *v += bd[o];
                    }
                }
            }
        }
        let t = Tensor::new(vec![geom.batch, geom.out_ch, oh, ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }))
    }

    /// Flat gather: `out.flat[i] = x.flat[idx[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather", format!("indices < {n}"), format!("{bad}")));
        }
        let src = self.value(x).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t, Op::Gather { x, idx }))
    }

    /// Row lookup, e.g. an embedding table: `out[i] = x[rows[i]]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix(x, "embedding_lookup")?;
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("embedding_lookup", format!("row ids < {n}"), format!("{bad}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let t = Tensor::new(vec![rows.len(), d], out)?;
        Ok(self.push(t, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_rows", "at least one part", "none"))?;
        let (_, d) = self.matrix(first, "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (n, dp) = self.matrix(p, "concat_rows")?;
            if dp != d {
                return Err(shape_err("concat_rows", format!("{d} columns"), format!("{dp}")));
            }
            out.extend_from_slice(self.value(p).data());
            rows += n;
        }
        let t = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    /// Repeats row `b` of `x` `counts[b]` times.
    pub fn repeat_rows(&mut self, x: Var, counts: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix(x, "repeat_rows")?;
        if counts.len() != n {
            return Err(shape_err("repeat_rows", format!("{n} counts"), format!("{}", counts.len())));
        }
        let src = self.value(x).data();
        let total: usize = counts.iter().sum();
        let mut out = Vec::with_capacity(total * d);
        for (r, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                out.extend_from_slice(&src[r * d..(r + 1) * d]);
            }
        }
        let t = Tensor::new(vec![total, d], out)?;
        Ok(self.push(t, Op::RepeatRows { x, counts: counts.to_vec() }))
    }

    /// Scaled dot-product attention over independent segments.
    ///
    /// `q: [Nq, D]`, `k, v: [Nk, D]`. Segment `s = (lq, lk)` attends its `lq`
    /// query rows to its `lk` key rows; segments consume rows in order. Heads
    /// split `D` into contiguous column blocks. A segment with no keys yields
    /// zero output rows.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segments: &[(usize, usize)]) -> Result<Var> {
        let (nq, d) = self.matrix(q, "attention")?;
        let (nk, dk) = self.matrix(k, "attention")?;
        self.same_shape(k, v, "attention")?;
        if dk != d {
            return Err(shape_err("attention", format!("key width {d}"), format!("{dk}")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(NnError::Heads { width: d, heads });
        }
        let sq: usize = segments.iter().map(|s| s.0).sum();
        let sk: usize = segments.iter().map(|s| s.1).sum();
        if sq != nq || sk != nk {
            return Err(shape_err("attention", format!("segments covering {nq}x{nk} rows"), format!("{sq}x{sk}")));
        }
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let total_probs: usize = segments.iter().map(|(a, b)| a * b * heads).sum();
        let mut probs = vec![T::zero(); total_probs];
        let mut out = vec![T::zero(); nq * d];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let (mut qo, mut ko, mut po) = (0usize, 0usize, 0usize);
        for &(lq, lk) in segments {
            if lq > 0 && lk > 0 {
                for h in 0..heads {
                    let p = &mut probs[po..po + lq * lk];
                    let qm = MatRef { data: qd, offset: qo * d + h * dh, rows: lq, cols: dh, rs: d, cs: 1 };
                    let km = MatRef { data: kd, offset: ko * d + h * dh, rows: lk, cols: dh, rs: d, cs: 1 };
                    gemm(scale, qm, km.t(), T::zero(), MatMut::dense(p, lq, lk));
                    for r in 0..lq {
                        softmax_in_place(&mut p[r * lk..(r + 1) * lk]);
                    }
                    let vm = MatRef { data: vd, offset: ko * d + h * dh, rows: lk, cols: dh, rs: d, cs: 1 };
                    let om = MatMut { data: &mut out, offset: qo * d + h * dh, rows: lq, cols: dh, rs: d, cs: 1 };
                    gemm(T::one(), MatRef::dense(p, lq, lk), vm, T::zero(), om);
                    po += lq * lk;
                }
            }
            qo += lq;
            ko += lk;
        }
        let t = Tensor::new(vec![nq, d], out)?;
        Ok(self.push(t, Op::Attention { q, k, v, heads, segments: segments.to_vec(), probs }))
    }

    /// Weighted sum of per-row cross-entropies.
    ///
    /// The softmax runs over the first `n_valid` columns only; the remaining
    /// columns are excluded classes and receive zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: Targets<T>, weights: Vec<T>, n_valid: usize) -> Result<Var> {
        let (n, c) = self.matrix(logits, "cross_entropy")?;
        if n_valid == 0 || n_valid > c {
            return Err(shape_err("cross_entropy", format!("n_valid in 1..={c}"), format!("{n_valid}")));
        }
        if weights.len() != n {
            return Err(shape_err("cross_entropy", format!("{n} weights"), format!("{}", weights.len())));
        }
        match &targets {
            Targets::Hard(t) => {
                if t.len() != n {
                    return Err(shape_err("cross_entropy", format!("{n} targets"), format!("{}", t.len())));
                }
                if let Some(bad) = t.iter().find(|&&v| v >= n_valid) {
                    return Err(shape_err("cross_entropy", format!("target < {n_valid}"), format!("{bad}")));
                }
            }
            Targets::Soft(p) => {
                if p.len() != n * c {
                    return Err(shape_err("cross_entropy", format!("{} soft targets", n * c), format!("{}", p.len())));
                }
            }
        }
        let ld = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for i in 0..n {
            let row = &ld[i * c..i * c + n_valid];
            let max = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
            let sum: T = row.iter().map(|v| (*v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..n_valid {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            let loss = match &targets {
                Targets::Hard(t) => lse - row[t[i]],
                Targets::Soft(p) => {
                    let q = &p[i * c..i * c + n_valid];
                    q.iter().zip(row).map(|(qj, lj)| *qj * (lse - *lj)).sum()
                }
            };
            total += weights[i] * loss;
        }
        Ok(self.push(Tensor::scalar(total), Op::CrossEntropy { logits, targets, weights, n_valid, probs }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1);
        let s = self.sum(x)?;
        self.scale(s, T::of(1.0 / n as f64))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", "scalar loss", format!("{:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !gout.all_finite() {
                return Err(NnError::NonFinite { op: node.op.name() });
            }
            self.backprop(node, &gout, &mut grads)?;
            // blame the op whose backward rule produced the bad value
            for v in node.op.inputs() {
                if grads[v.0].as_ref().is_some_and(|g| !g.all_finite()) {
                    return Err(NnError::NonFinite { op: node.op.name() });
                }
            }
            grads[idx] = Some(gout);
        }
        let mut params: Vec<(String, Var)> = self.param_vars().map(|(n, v)| (n.clone(), *v)).collect();
        params.sort();
        Ok(Gradients { grads, params })
    }

    fn backprop(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let g = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.matrix(*a, "matmul")?;
                let m = self.shape(*b)[1];
                let mut ga = vec![T::zero(); n * k];
                gemm(
                    T::one(),
                    MatRef::dense(g, n, m),
                    MatRef::dense(self.value(*b).data(), k, m).t(),
                    T::zero(),
                    MatMut::dense(&mut ga, n, k),
                );
                accumulate(grads, *a, self.shape(*a), ga);
                let mut gb = vec![T::zero(); k * m];
                gemm(
                    T::one(),
                    MatRef::dense(self.value(*a).data(), n, k).t(),
                    MatRef::dense(g, n, m),
                    T::zero(),
                    MatMut::dense(&mut gb, k, m),
                );
                accumulate(grads, *b, self.shape(*b), gb);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, self.shape(*a), g.to_vec());
                accumulate(grads, *b, self.shape(*b), g.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let ga = g.iter().zip(bv).map(|(gi, bi)| *gi * *bi).collect();
                let gb = g.iter().zip(av).map(|(gi, ai)| *gi * *ai).collect();
                accumulate(grads, *a, self.shape(*a), ga);
                accumulate(grads, *b, self.shape(*b), gb);
            }
            Op::AddRow(x, r) => {
                let d = self.value(*r).len();
                let mut gr = vec![T::zero(); d];
                for (i, gi) in g.iter().enumerate() {
                    gr[i % d] += *gi;
                }
                accumulate(grads, *x, self.shape(*x), g.to_vec());
                accumulate(grads, *r, self.shape(*r), gr);
            }
            Op::MulRow(x, r) => {
                let d = self.value(*r).len();
                let (xv, rv) = (self.value(*x).data(), self.value(*r).data());
                let mut gr = vec![T::zero(); d];
                let mut gx = vec![T::zero(); g.len()];
                for i in 0..g.len() {
                    gr[i % d] += g[i] * xv[i];
                    gx[i] = g[i] * rv[i % d];
                }
                accumulate(grads, *x, self.shape(*x), gx);
                accumulate(grads, *r, self.shape(*r), gr);
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, self.shape(*x), g.iter().map(|v| *v * *s).collect());
            }
            Op::AddScalar(x) => accumulate(grads, *x, self.shape(*x), g.to_vec()),
            Op::LayerNorm { x, rstd } => {
                let (n, d) = self.value(*x).as_matrix_dims();
                let xhat = node.value.data();
                let mut gx = vec![T::zero(); n * d];
                let inv_d = T::of(1.0 / d as f64);
                for i in 0..n {
                    let gr = &g[i * d..(i + 1) * d];
                    let xr = &xhat[i * d..(i + 1) * d];
                    let sum_g: T = gr.iter().copied().sum();
                    let sum_gx: T = gr.iter().zip(xr).map(|(a, b)| *a * *b).sum();
                    for j in 0..d {
                        gx[i * d + j] = rstd[i] * (gr[j] - inv_d * sum_g - xr[j] * inv_d * sum_gx);
                    }
                }
                accumulate(grads, *x, self.shape(*x), gx);
            }
            Op::Gelu(x) => {
                let c = T::of(GELU_C);
                let a = T::of(GELU_A);
                let half = T::of(0.5);
                let three = T::of(3.0);
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let th = (c * (v + a * v * v * v)).tanh();
                        let dinner = c * (T::one() + three * a * v * v);
                        gi * (half * (T::one() + th) + half * v * (T::one() - th * th) * dinner)
                    })
                    .collect();
                accumulate(grads, *x, self.shape(*x), gx);
            }
            Op::Silu(x) => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| {
                        let s = T::one() / (T::one() + (-v).exp());
                        gi * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                accumulate(grads, *x, self.shape(*x), gx);
            }
            Op::Softmax(x) => {
                let (n, d) = node.value.as_matrix_dims();
                let y = node.value.data();
                let mut gx = vec![T::zero(); n * d];
                for i in 0..n {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    for j in 0..d {
                        gx[i * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, self.shape(*x), gx);
            }
            Op::Dropout { x, mask } => {
                accumulate(grads, *x, self.shape(*x), g.iter().zip(mask).map(|(a, b)| *a * *b).collect());
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, geom, g, grads),
            Op::Gather { x, idx } => {
                let mut gx = vec![T::zero(); self.value(*x).len()];
                for (o, &i) in idx.iter().enumerate() {
                    gx[i] += g[o];
                }
                accumulate(grads, *x, self.shape(*x), gx);
            }
            Op::GatherRows { x, rows } => {
                let (n, d) = self.value(*x).as_matrix_dims();
                let mut gx = vec![T::zero(); n * d];
                for (o, &r) in rows.iter().enumerate() {
                    for j in 0..d {
                        gx[r * d + j] += g[o * d + j];
                    }
                }
                accumulate(grads, *x, self.shape(*x), gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    accumulate(grads, *p, self.shape(*p), g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::RepeatRows { x, counts } => {
                let (n, d) = self.value(*x).as_matrix_dims();
                let mut gx = vec![T::zero(); n * d];
                let mut o = 0;
                for (r, &c) in counts.iter().enumerate() {
                    for _ in 0..c {
                        for j in 0..d {
                            gx[r * d + j] += g[o * d + j];
                        }
                        o += 1;
                    }
                }
                accumulate(grads, *x, self.shape(*x), gx);
            }
            Op::Attention { q, k, v, heads, segments, probs } => {
                self.attention_backward(*q, *k, *v, *heads, segments, probs, g, grads)
            }
            Op::CrossEntropy { logits, targets, weights, n_valid, probs } => {
                let (n, c) = self.value(*logits).as_matrix_dims();
                let seed = g[0];
                let mut gl = vec![T::zero(); n * c];
                for i in 0..n {
                    let w = weights[i] * seed;
                    match targets {
                        Targets::Hard(t) => {
                            for j in 0..*n_valid {
                                gl[i * c + j] = w * probs[i * c + j];
                            }
                            gl[i * c + t[i]] -= w;
                        }
                        Targets::Soft(p) => {
                            let q = &p[i * c..i * c + n_valid];
                            let mass: T = q.iter().copied().sum();
                            for j in 0..*n_valid {
                                gl[i * c + j] = w * (probs[i * c + j] * mass - q[j]);
                            }
                        }
                    }
                }
                accumulate(grads, *logits, self.shape(*logits), gl);
            }
            Op::Sum(x) => {
                accumulate(grads, *x, self.shape(*x), vec![g[0]; self.value(*x).len()]);
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let plane = geom.out_h() * geom.out_w();
        let ckk = geom.in_ch * geom.kernel * geom.kernel;
        let in_plane = geom.in_ch * geom.in_h * geom.in_w;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut gw = vec![T::zero(); geom.out_ch * ckk];
        let mut gx = vec![T::zero(); geom.batch * in_plane];
        let mut col = vec![T::zero(); ckk * plane];
        let mut gcol = vec![T::zero(); ckk * plane];
        for bi in 0..geom.batch {
            let gb = &g[bi * geom.out_ch * plane..(bi + 1) * geom.out_ch * plane];
            im2col(&xd[bi * in_plane..(bi + 1) * in_plane], geom, &mut col);
            gemm(
                T::one(),
                MatRef::dense(gb, geom.out_ch, plane),
                MatRef::dense(&col, ckk, plane).t(),
                T::one(),
                MatMut::dense(&mut gw, geom.out_ch, ckk),
            );
            gemm(
                T::one(),
                MatRef::dense(wd, geom.out_ch, ckk).t(),
                MatRef::dense(gb, geom.out_ch, plane),
                T::zero(),
                MatMut::dense(&mut gcol, ckk, plane),
            );
            col2im(&gcol, geom, &mut gx[bi * in_plane..(bi + 1) * in_plane]);
        }
        accumulate(grads, x, self.shape(x), gx);
        accumulate(grads, w, self.shape(w), gw);
        if let Some(b) = b {
            let mut gbias = vec![T::zero(); geom.out_ch];
            for bi in 0..geom.batch {
                for o in 0..geom.out_ch {
                    let start = (bi * geom.out_ch + o) * plane;
                    gbias[o] += g[start..start + plane].iter().copied().sum::<T>();
                }
            }
            accumulate(grads, b, self.shape(b), gbias);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[(usize, usize)],
        probs: &[T],
        g: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (nq, d) = self.value(q).as_matrix_dims();
        let nk = self.value(k).as_matrix_dims().0;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![T::zero(); nq * d];
        let mut gk = vec![T::zero(); nk * d];
        let mut gv = vec![T::zero(); nk * d];
        let (mut qo, mut ko, mut po) = (0usize, 0usize, 0usize);
        let mut dp = Vec::new();
        for &(lq, lk) in segments {
            if lq > 0 && lk > 0 {
                dp.resize(lq * lk, T::zero());
                for h in 0..heads {
                    let p = &probs[po..po + lq * lk];
                    let go = MatRef { data: g, offset: qo * d + h * dh, rows: lq, cols: dh, rs: d, cs: 1 };
                    let vm = MatRef { data: vd, offset: ko * d + h * dh, rows: lk, cols: dh, rs: d, cs: 1 };
                    let km = MatRef { data: kd, offset: ko * d + h * dh, rows: lk, cols: dh, rs: d, cs: 1 };
                    let qm = MatRef { data: qd, offset: qo * d + h * dh, rows: lq, cols: dh, rs: d, cs: 1 };
                    // dV += P^T dO
                    gemm(
                        T::one(),
                        MatRef::dense(p, lq, lk).t(),
                        go,
                        T::one(),
                        MatMut { data: &mut gv, offset: ko * d + h * dh, rows: lk, cols: dh, rs: d, cs: 1 },
                    );
                    // dP = dO V^T, then through the softmax
                    gemm(T::one(), go, vm.t(), T::zero(), MatMut::dense(&mut dp, lq, lk));
                    for r in 0..lq {
                        let pr = &p[r * lk..(r + 1) * lk];
                        let dr = &mut dp[r * lk..(r + 1) * lk];
                        let dot: T = pr.iter().zip(dr.iter()).map(|(a, b)| *a * *b).sum();
                        for j in 0..lk {
                            dr[j] = pr[j] * (dr[j] - dot);
                        }
                    }
                    gemm(
                        scale,
                        MatRef::dense(&dp, lq, lk),
                        km,
                        T::one(),
                        MatMut { data: &mut gq, offset: qo * d + h * dh, rows: lq, cols: dh, rs: d, cs: 1 },
                    );
                    gemm(
                        scale,
                        MatRef::dense(&dp, lq, lk).t(),
                        qm,
                        T::one(),
                        MatMut { data: &mut gk, offset: ko * d + h * dh, rows: lk, cols: dh, rs: d, cs: 1 },
                    );
                    po += lq * lk;
                }
            }
            qo += lq;
            ko += lk;
        }
        accumulate(grads, q, self.shape(q), gq);
        accumulate(grads, k, self.shape(k), gk);
        accumulate(grads, v, self.shape(v), gv);
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], data: Vec<T>) {
    let t = Tensor::new(shape.to_vec(), data).expect("gradient shape matches forward value");
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn im2col<T: Float>(x: &[T], geom: &ConvGeom, col: &mut [T]) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let k = geom.kernel;
    for c in 0..geom.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        dst[oy * ow + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < geom.in_h
                            && (ix as usize) < geom.in_w
                        {
                            x[(c * geom.in_h + iy as usize) * geom.in_w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], geom: &ConvGeom, gx: &mut [T]) {
    let (oh, ow) = (geom.out_h(), geom.out_w());
    let k = geom.kernel;
    for c in 0..geom.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy as usize >= geom.in_h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix as usize >= geom.in_w {
                            continue;
                        }
                        gx[(c * geom.in_h + iy as usize) * geom.in_w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Var)>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a named parameter, if it took part in the graph.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).and_then(|(_, v)| self.get(*v))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().filter_map(|(n, v)| self.get(*v).map(|g| (n.as_str(), g)))
    }
}

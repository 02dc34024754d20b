//! Eager, tape-based reverse-mode automatic differentiation.
//!
//! Every op evaluates immediately and appends a node to the [`Tape`]. Calling
//! [`Tape::backward`] walks the nodes in reverse recording order and
//! accumulates vector-Jacobian products into their inputs; leaves created with
//! `requires_grad` end up with their gradient attached to the stored
//! [`Tensor`]. A tape is meant to live for a single forward/backward pass.

mod gradcheck;
pub(crate) mod kernels;

use std::ops::Range;

pub use gradcheck::{grad_check, grad_check_many};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};
use kernels::ConvGeom;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Max,
    Mean,
}

/// Batch statistics observed by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AddChannelBias(Var, Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, a_off: Vec<usize>, b_off: Vec<usize> },
    Permute { x: Var, axes: Vec<usize> },
    Reshape(Var),
    Relu(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cout: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GroupReduce { x: Var, groups: Vec<Range<usize>>, mode: Reduce, argmax: Vec<usize> },
    StripPool { x: Var, strips: usize, argmax: Vec<usize> },
    Concat { parts: Vec<Var>, outer: usize, widths: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
    Triplet { x: Var, labels: Vec<usize>, margin: f64, valid: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.clear_grad();
        let needs_grad = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// `x[.., D] + bias[D]`
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(bias) != [d] {
            return Err(Error::dim(format!(
                "add_bias: bias {:?} does not match last dim of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let b = self.data(bias);
        let data = self.data(x).chunks(d).flat_map(|row| row.iter().zip(b).map(|(v, bv)| v + bv)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias), &[x, bias]))
    }

    /// `x[B, C, ...] + bias[C]` broadcast over the trailing dims.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(bias) != [shape[1]] {
            return Err(Error::dim(format!(
                "add_channel_bias: bias {:?} does not match channels of {:?}",
                self.shape(bias),
                shape
            )));
        }
        let inner: usize = shape[2..].iter().product();
        let c = shape[1];
        let b = self.data(bias);
        let mut data = self.data(x).to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bv = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::AddChannelBias(x, bias), &[x, bias]))
    }

    /// Batched matrix product `[.., m, k] × [.., k, n]` with broadcast
    /// leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::dim(format!("matmul: shapes {sa:?} and {sb:?} are incompatible"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                batch.push(x);
            } else if x == 1 {
                batch.push(y);
            } else {
                return Err(mismatch());
            }
        }
        let (stra, strb) = (strides(&pa), strides(&pb));
        let total = numel(&batch);
        let mut a_off = Vec::with_capacity(total);
        let mut b_off = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            let (mut oa, mut ob) = (0, 0);
            for d in 0..rank {
                if pa[d] != 1 {
                    oa += idx[d] * stra[d];
                }
                if pb[d] != 1 {
                    ob += idx[d] * strb[d];
                }
            }
            a_off.push(oa * m * k);
            b_off.push(ob * k * n);
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out = vec![0.0; total * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for bi in 0..total {
                kernels::matmul_acc(
                    &da[a_off[bi]..a_off[bi] + m * k],
                    &db[b_off[bi]..b_off[bi] + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = batch;
        shape.extend([m, n]);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::MatMul { a, b, m, k, n, a_off, b_off }, &[a, b]))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::dim(format!("permute: {axes:?} is not a permutation of the axes of {shape:?}")));
        }
        let (out_shape, data) = permute_data(self.data(x), &shape, axes);
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data).expect("same shape");
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("softmax: axis {axis} invalid for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// 2-D convolution of `x[N, C, H, W]` with `w[C', C, kh, kw]`, no bias.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::dim(format!(
                "conv2d: input {sx:?} and kernel {sw:?} are incompatible (stride {stride})"
            )));
        }
        let (nb, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (wd + 2 * padding - kw) / stride + 1,
        };
        let (r, p) = (geom.rows(), geom.cols());
        let mut out = vec![0.0; nb * cout * p];
        let mut cols = vec![0.0; r * p];
        {
            let (dx, dw) = (self.data(x), self.data(w));
            for b in 0..nb {
                kernels::im2col(&dx[b * cin * h * wd..(b + 1) * cin * h * wd], &geom, &mut cols);
                kernels::matmul_acc(dw, &cols, &mut out[b * cout * p..(b + 1) * cout * p], cout, r, p);
            }
        }
        let t = Tensor::new(vec![nb, cout, geom.ho, geom.wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, geom, cout }, &[x, w]))
    }

    /// Non-overlapping `k×k` max pooling over `x[N, C, H, W]` (floor mode).
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || s[2] < k || s[3] < k {
            return Err(Error::dim(format!("max_pool2d: cannot pool {s:?} with window {k}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / k, w / k);
        let src = self.data(x);
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for pl in 0..planes {
            let base = pl * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = base + (oy * k + dy) * w + ox * k + dx;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(vec![s[0], s[1], ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Reduces contiguous row groups along axis 0: `x[M, ..] -> [G, ..]`,
    /// where output row `g` is the max or mean over rows `groups[g]`.
    pub fn group_reduce(&mut self, x: Var, groups: &[Range<usize>], mode: Reduce) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        if groups.is_empty() || groups.iter().any(|g| g.is_empty() || g.end > rows) {
            return Err(Error::arg(format!("group_reduce: groups {groups:?} invalid for {rows} rows")));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; groups.len() * inner];
        let mut argmax = Vec::new();
        for (gi, g) in groups.iter().enumerate() {
            let dst = &mut out[gi * inner..(gi + 1) * inner];
            match mode {
                Reduce::Max => {
                    for (j, d) in dst.iter_mut().enumerate() {
                        let mut best = g.start * inner + j;
                        for r in g.clone().skip(1) {
                            let i = r * inner + j;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                        *d = src[best];
                        argmax.push(best);
                    }
                }
                Reduce::Mean => {
                    for r in g.clone() {
                        for (d, s) in dst.iter_mut().zip(&src[r * inner..(r + 1) * inner]) {
                            *d += s;
                        }
                    }
                    let c = 1.0 / g.len() as f64;
                    dst.iter_mut().for_each(|d| *d *= c);
                }
            }
        }
        let mut out_shape = shape;
        out_shape[0] = groups.len();
        let t = Tensor::new(out_shape, out)?;
        Ok(self.push(t, Op::GroupReduce { x, groups: groups.to_vec(), mode, argmax }, &[x]))
    }

    /// Horizontal strip pooling: `x[N, C, H, W] -> [N, strips, 2C]`, each strip
    /// vector being the per-channel global max followed by the global mean over
    /// the strip's rows.
    pub fn strip_pool(&mut self, x: Var, strips: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || strips == 0 || s[2] < strips {
            return Err(Error::dim(format!("strip_pool: cannot split {s:?} into {strips} horizontal strips")));
        }
        let (nb, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = self.data(x);
        let mut out = vec![0.0; nb * strips * 2 * c];
        let mut argmax = Vec::with_capacity(nb * strips * c);
        for n in 0..nb {
            for r in 0..strips {
                let (lo, hi) = kernels::strip_bounds(h, strips, r);
                let row = &mut out[(n * strips + r) * 2 * c..(n * strips + r + 1) * 2 * c];
                for ch in 0..c {
                    let base = (n * c + ch) * h * w;
                    let region = &src[base + lo * w..base + hi * w];
                    let mut best = 0;
                    let mut total = 0.0;
                    for (i, &v) in region.iter().enumerate() {
                        if v > region[best] {
                            best = i;
                        }
                        total += v;
                    }
                    row[ch] = region[best];
                    row[c + ch] = total / region.len() as f64;
                    argmax.push(base + lo * w + best);
                }
            }
        }
        let t = Tensor::new(vec![nb, strips, 2 * c], out)?;
        Ok(self.push(t, Op::StripPool { x, strips, argmax }, &[x]))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::arg("concat of nothing"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!("concat: axis {axis} invalid for {first:?}")));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d]) {
                return Err(Error::dim(format!("concat: shapes {first:?} and {s:?} differ off axis {axis}")));
            }
            widths.push(s[axis..].iter().product::<usize>());
        }
        let outer: usize = first[..axis].iter().product();
        let total_w: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total_w);
        for o in 0..outer {
            for (&p, &wdt) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[o * wdt..(o + 1) * wdt]);
            }
        }
        let mut shape = first;
        shape[axis] = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), outer, widths }, parts))
    }

    /// Training-mode batch normalization of `x[N, D]` using batch statistics.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (n, d) = self.bn_dims(x, gamma, beta)?;
        if n < 2 {
            return Err(Error::dim(format!("batchnorm: degenerate batch of {n} sample(s) in train mode")));
        }
        let src = self.data(x);
        let mut mean = vec![0.0; d];
        for row in src.chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in src.chunks(d) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n as f64 + eps).sqrt()).collect();
        let unbiased = var.iter().map(|s| s / (n - 1) as f64).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (_, d) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != d || running_var.len() != d {
            return Err(Error::dim("batchnorm: running statistics have wrong length"));
        }
        let inv_std = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, running_mean, inv_std, false)
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::dim(format!(
                "batchnorm: input {:?}, gamma {:?}, beta {:?}",
                s,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok((s[0], s[1]))
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: Vec<f64>, train: bool) -> Result<Var> {
        let d = mean.len();
        let (g, b) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(self.value(x).len());
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.data(x).chunks(d) {
            for j in 0..d {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, &[x, gamma, beta]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.data(x).iter().sum::<f64>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Batch-mean cross-entropy of `logits[N, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::dim(format!("cross_entropy: logits {s:?} vs {} labels", labels.len())));
        }
        let c = s[1];
        let mut probs = Vec::with_capacity(s[0] * c);
        let mut loss = 0.0;
        for (row, &y) in self.data(logits).chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let t = Tensor::scalar(loss / s[0] as f64);
        Ok(self.push(t, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits]))
    }

    /// Batch-mean binary cross-entropy on raw logits `[N, 1]` (or `[N]`).
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        if self.value(logits).len() != targets.len() {
            return Err(Error::dim(format!(
                "bce_with_logits: logits {:?} vs {} targets",
                self.shape(logits),
                targets.len()
            )));
        }
        let loss: f64 = self
            .data(logits)
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / targets.len() as f64;
        Ok(self.push(Tensor::scalar(loss), Op::BceWithLogits { logits, targets: targets.to_vec() }, &[logits]))
    }

    /// Mean hinge over every valid `(anchor, positive, negative)` triplet of
    /// rows of `x[N, d]`, with Euclidean distances. Returns the loss and the
    /// number of valid triplets (the loss is 0 when there are none).
    pub fn triplet(&mut self, x: Var, labels: &[usize], margin: f64) -> Result<(Var, usize)> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(format!("triplet: features {s:?} vs {} labels", labels.len())));
        }
        let dist = pairwise_distances(self.data(x), s[0], s[1]);
        let n = s[0];
        // Active hinges are summed as `count * margin + sum(d_ap - d_an)` so that
        // coincident points give exactly `margin`.
        let mut excess = 0.0;
        let mut active = 0usize;
        let mut valid = 0usize;
        for_each_triplet(labels, |a, p, q| {
            valid += 1;
            let gap = dist[a * n + p] - dist[a * n + q];
            if margin + gap > 0.0 {
                active += 1;
                excess += gap;
            }
        });
        let loss = if valid > 0 { active as f64 / valid as f64 * margin + excess / valid as f64 } else { 0.0 };
        Ok((self.push(Tensor::scalar(loss), Op::Triplet { x, labels: labels.to_vec(), margin, valid }, &[x]), valid))
    }

    /// Reverse sweep from a single-element `loss`. Gradients land on every
    /// leaf that was recorded with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim(format!("backward needs a scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        for (i, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[i];
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.value.requires_grad(), g) {
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.wants(v) {
                        let acc = accumulate(grads, v, g.len());
                        acc.iter_mut().zip(g).for_each(|(d, gv)| *d += sign * gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.wants(v) {
                        let acc = accumulate(grads, v, g.len());
                        acc.iter_mut().zip(g).for_each(|(d, gv)| *d += sign * gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let other = self.data(*b);
                    let acc = accumulate(grads, *a, g.len());
                    for ((d, gv), o) in acc.iter_mut().zip(g).zip(other) {
                        *d += gv * o;
                    }
                }
                if self.wants(*b) {
                    let other = self.data(*a);
                    let acc = accumulate(grads, *b, g.len());
                    for ((d, gv), o) in acc.iter_mut().zip(g).zip(other) {
                        *d += gv * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                let acc = accumulate(grads, *a, g.len());
                acc.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
            }
            Op::AddBias(x, bias) => {
                if self.wants(*x) {
                    let acc = accumulate(grads, *x, g.len());
                    acc.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if self.wants(*bias) {
                    let d = self.value(*bias).len();
                    let acc = accumulate(grads, *bias, d);
                    for row in g.chunks(d) {
                        acc.iter_mut().zip(row).for_each(|(a, gv)| *a += gv);
                    }
                }
            }
            Op::AddChannelBias(x, bias) => {
                if self.wants(*x) {
                    let acc = accumulate(grads, *x, g.len());
                    acc.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if self.wants(*bias) {
                    let shape = self.shape(*x);
                    let c = shape[1];
                    let inner: usize = shape[2..].iter().product();
                    let acc = accumulate(grads, *bias, c);
                    for (k, chunk) in g.chunks(inner).enumerate() {
                        acc[k % c] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::MatMul { a, b, m, k, n, a_off, b_off } => {
                let (m, k, n) = (*m, *k, *n);
                if self.wants(*a) {
                    let bd = self.data(*b);
                    let acc = accumulate(grads, *a, self.value(*a).len());
                    for (bi, (&oa, &ob)) in a_off.iter().zip(b_off).enumerate() {
                        kernels::matmul_acc_bt(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &bd[ob..ob + k * n],
                            &mut acc[oa..oa + m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if self.wants(*b) {
                    let ad = self.data(*a);
                    let acc = accumulate(grads, *b, self.value(*b).len());
                    for (bi, (&oa, &ob)) in a_off.iter().zip(b_off).enumerate() {
                        kernels::matmul_acc_at(
                            &ad[oa..oa + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut acc[ob..ob + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, back) = permute_data(g, node.value.shape(), &inverse);
                let acc = accumulate(grads, *x, g.len());
                acc.iter_mut().zip(&back).for_each(|(d, gv)| *d += gv);
            }
            Op::Reshape(x) => {
                let acc = accumulate(grads, *x, g.len());
                acc.iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
            }
            Op::Relu(x) => {
                let src = self.data(*x);
                let acc = accumulate(grads, *x, g.len());
                for ((d, gv), v) in acc.iter_mut().zip(g).zip(src) {
                    if *v > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let acc = accumulate(grads, *x, g.len());
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dotp: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            acc[at(j)] += y[at(j)] * (g[at(j)] - dotp);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, geom, cout } => {
                let (r, p) = (geom.rows(), geom.cols());
                let nb = self.shape(*x)[0];
                let plane = geom.cin * geom.h * geom.w;
                let xd = self.data(*x);
                let wd = self.data(*w);
                let mut cols = vec![0.0; r * p];
                let mut dcols = vec![0.0; r * p];
                let want_w = self.wants(*w);
                let want_x = self.wants(*x);
                let mut dw = vec![0.0; if want_w { cout * r } else { 0 }];
                let mut dx = vec![0.0; if want_x { xd.len() } else { 0 }];
                for b in 0..nb {
                    let gb = &g[b * cout * p..(b + 1) * cout * p];
                    if want_w {
                        kernels::im2col(&xd[b * plane..(b + 1) * plane], geom, &mut cols);
                        kernels::matmul_acc_bt(gb, &cols, &mut dw, *cout, r, p);
                    }
                    if want_x {
                        dcols.fill(0.0);
                        kernels::matmul_acc_at(wd, gb, &mut dcols, *cout, r, p);
                        kernels::col2im_acc(&dcols, geom, &mut dx[b * plane..(b + 1) * plane]);
                    }
                }
                if want_w {
                    let acc = accumulate(grads, *w, dw.len());
                    acc.iter_mut().zip(&dw).for_each(|(d, v)| *d += v);
                }
                if want_x {
                    let acc = accumulate(grads, *x, dx.len());
                    acc.iter_mut().zip(&dx).for_each(|(d, v)| *d += v);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let acc = accumulate(grads, *x, self.value(*x).len());
                for (&src, gv) in argmax.iter().zip(g) {
                    acc[src] += gv;
                }
            }
            Op::GroupReduce { x, groups, mode, argmax } => {
                let len = self.value(*x).len();
                let inner = len / self.shape(*x)[0];
                let acc = accumulate(grads, *x, len);
                match mode {
                    Reduce::Max => {
                        for (&src, gv) in argmax.iter().zip(g) {
                            acc[src] += gv;
                        }
                    }
                    Reduce::Mean => {
                        for (gi, grp) in groups.iter().enumerate() {
                            let c = 1.0 / grp.len() as f64;
                            let gg = &g[gi * inner..(gi + 1) * inner];
                            for r in grp.clone() {
                                for (d, gv) in acc[r * inner..(r + 1) * inner].iter_mut().zip(gg) {
                                    *d += c * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::StripPool { x, strips, argmax } => {
                let s = self.shape(*x).to_vec();
                let (nb, c, h, w) = (s[0], s[1], s[2], s[3]);
                let acc = accumulate(grads, *x, self.value(*x).len());
                let mut k = 0;
                for n in 0..nb {
                    for r in 0..*strips {
                        let (lo, hi) = kernels::strip_bounds(h, *strips, r);
                        let row = &g[(n * strips + r) * 2 * c..(n * strips + r + 1) * 2 * c];
                        let count = ((hi - lo) * w) as f64;
                        for ch in 0..c {
                            acc[argmax[k]] += row[ch];
                            k += 1;
                            let base = (n * c + ch) * h * w;
                            let share = row[c + ch] / count;
                            acc[base + lo * w..base + hi * w].iter_mut().for_each(|d| *d += share);
                        }
                    }
                }
            }
            Op::Concat { parts, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut start = 0;
                for (&p, &wdt) in parts.iter().zip(widths) {
                    if self.wants(p) {
                        let acc = accumulate(grads, p, outer * wdt);
                        for o in 0..*outer {
                            let src = &g[o * total + start..o * total + start + wdt];
                            acc[o * wdt..(o + 1) * wdt].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                        }
                    }
                    start += wdt;
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let d = inv_std.len();
                let n = g.len() / d;
                let gam = self.data(*gamma);
                let mut sum_g = vec![0.0; d];
                let mut sum_gx = vec![0.0; d];
                for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        sum_g[j] += row_g[j];
                        sum_gx[j] += row_g[j] * row_h[j];
                    }
                }
                if self.wants(*gamma) {
                    let acc = accumulate(grads, *gamma, d);
                    acc.iter_mut().zip(&sum_gx).for_each(|(a, v)| *a += v);
                }
                if self.wants(*beta) {
                    let acc = accumulate(grads, *beta, d);
                    acc.iter_mut().zip(&sum_g).for_each(|(a, v)| *a += v);
                }
                if self.wants(*x) {
                    let acc = accumulate(grads, *x, g.len());
                    let nf = n as f64;
                    for (r, (row_g, row_h)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            let dxhat = row_g[j] * gam[j];
                            acc[r * d + j] += if *train {
                                gam[j] * inv_std[j] / nf * (nf * row_g[j] - sum_g[j] - row_h[j] * sum_gx[j])
                            } else {
                                dxhat * inv_std[j]
                            };
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                let acc = accumulate(grads, *x, len);
                acc.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let acc = accumulate(grads, *x, len);
                acc.iter_mut().for_each(|d| *d += g[0] / len as f64);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                let acc = accumulate(grads, *logits, probs.len());
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == y { 1.0 } else { 0.0 };
                        acc[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.data(*logits);
                let scale = g[0] / targets.len() as f64;
                let acc = accumulate(grads, *logits, z.len());
                for ((d, &zv), &y) in acc.iter_mut().zip(z).zip(targets) {
                    *d += scale * (sigmoid(zv) - y);
                }
            }
            Op::Triplet { x, labels, margin, valid } => {
                if *valid == 0 {
                    return;
                }
                let s = self.shape(*x);
                let (n, dim) = (s[0], s[1]);
                let xd = self.data(*x);
                let dist = pairwise_distances(xd, n, dim);
                let scale = g[0] / *valid as f64;
                let acc = accumulate(grads, *x, xd.len());
                // d||xi - xj|| / dxi = (xi - xj) / ||xi - xj||, taken as 0 at coincidence.
                let mut push = |i: usize, j: usize, w: f64| {
                    let dij = dist[i * n + j];
                    if dij == 0.0 {
                        return;
                    }
                    for k in 0..dim {
                        let u = (xd[i * dim + k] - xd[j * dim + k]) / dij * w;
                        acc[i * dim + k] += u;
                        acc[j * dim + k] -= u;
                    }
                };
                for_each_triplet(labels, |a, p, q| {
                    if margin + dist[a * n + p] - dist[a * n + q] > 0.0 {
                        push(a, p, scale);
                        push(a, q, -scale);
                    }
                });
            }
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn pairwise_distances(x: &[f64], n: usize, dim: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = x[i * dim..(i + 1) * dim]
                .iter()
                .zip(&x[j * dim..(j + 1) * dim])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    d
}

fn for_each_triplet(labels: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = labels.len();
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] != labels[a] {
                    f(a, p, q);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;

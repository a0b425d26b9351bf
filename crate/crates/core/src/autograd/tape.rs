//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes are appended
//! in evaluation order, so parents always precede children and the backward
//! sweep is a plain reverse iteration. A tape supports exactly one backward
//! pass; build a fresh tape for each forward.

use std::sync::Arc;

use super::kernels;
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Boolean attention mask of shape `batch × q_len × k_len`; `true` means the
/// query may attend to the key.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub allowed: Arc<Vec<bool>>,
}

impl AttnMask {
    pub fn new(batch: usize, q_len: usize, k_len: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != batch * q_len * k_len {
            return Err(Error::shape(
                "attn_mask",
                format!("{}x{}x{} mask needs {} entries, got {}", batch, q_len, k_len, batch * q_len * k_len, allowed.len()),
            ));
        }
        Ok(Self { batch, q_len, k_len, allowed: Arc::new(allowed) })
    }

    pub fn causal(batch: usize, len: usize) -> Self {
        let mut allowed = vec![false; batch * len * len];
        for b in 0..batch {
            for i in 0..len {
                for j in 0..=i {
                    allowed[(b * len + i) * len + j] = true;
                }
            }
        }
        Self { batch, q_len: len, k_len: len, allowed: Arc::new(allowed) }
    }

    #[inline]
    pub fn get(&self, b: usize, i: usize, j: usize) -> bool {
        self.allowed[(b * self.q_len + i) * self.k_len + j]
    }
}

/// Geometry of a square-kernel convolution over NHWC images.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Input offset read by kernel tap (`ky`, `kx`) of output pixel (`oy`, `ox`), if inside the image.
    #[inline]
    fn source(&self, b: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.height as isize || ix >= self.width as isize {
            return None;
        }
        Some(((b * self.height + iy as usize) * self.width + ix as usize) * self.channels)
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<T> },
    Softmax(Var),
    Gather { srcs: Vec<Var>, picks: Vec<(u32, u32)> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, count: usize, probs: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, mask: AttnMask, probs: Vec<T> },
    ConcatSeq { a: Var, b: Var, batch: usize, a_len: usize, b_len: usize },
    Im2Col { x: Var, geom: ConvGeom },
    GroupMean { x: Var, groups: usize },
    Reshape(Var),
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    sizes: Vec<usize>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of `v`; all zeros when `v` did not participate.
    pub fn get(&self, v: Var) -> Vec<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.sizes[v.0]],
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

pub struct Tape<T: Float> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn cols(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, consumed: false }
    }

    /// A tape that never tracks gradients; used for evaluation and decoding.
    pub fn inference() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad: requires_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a leaf; `requires_grad` leaves receive gradients on backward.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x - *y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, Op::Mul(a, b), rg))
    }

    fn row_check(&self, op: &'static str, x: Var, r: Var) -> Result<usize> {
        let d = cols(self.shape(x));
        if self.shape(r) != [d] {
            return Err(Error::shape(op, format!("row vector {:?} does not match last dim of {:?}", self.shape(r), self.shape(x))));
        }
        Ok(d)
    }

    /// Adds the vector `r[D]` to every row of `x[..×D]`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let d = self.row_check("add_row", x, r)?;
        let rv = self.value(r);
        let value = self.value(x).iter().enumerate().map(|(i, v)| *v + rv[i % d]).collect();
        let rg = self.rg(&[x, r]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddRow(x, r), rg))
    }

    /// Multiplies every row of `x[..×D]` elementwise by `r[D]`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let d = self.row_check("mul_row", x, r)?;
        let rv = self.value(r);
        let value = self.value(x).iter().enumerate().map(|(i, v)| *v * rv[i % d]).collect();
        let rg = self.rg(&[x, r]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::MulRow(x, r), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).iter().map(|v| *v * s).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Scale(x, s), rg)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<T>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::shape("mul_const", format!("{} constants for {:?}", c.len(), self.shape(x))));
        }
        let value = self.value(x).iter().zip(&c).map(|(a, b)| *a * *b).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::MulConst(x, c), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(x), shape)));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::Reshape(x), rg))
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected a matrix, got shape {:?}", s))),
        }
    }

    /// `a[r×k] · b[k×c]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.matrix("matmul", a)?;
        let (k2, c) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{:?} x {:?}: inner dims differ", self.shape(a), self.shape(b))));
        }
        let mut value = vec![T::zero(); r * c];
        kernels::matmul(self.value(a), self.value(b), &mut value, r, k, c);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![r, c], value, Op::MatMul(a, b), rg))
    }

    /// `a[r×k] · b[c×k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.matrix("matmul_bt", a)?;
        let (c, k2) = self.matrix("matmul_bt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", format!("{:?} x {:?}ᵀ: inner dims differ", self.shape(a), self.shape(b))));
        }
        let mut value = vec![T::zero(); r * c];
        kernels::matmul_bt(self.value(a), self.value(b), &mut value, r, k, c);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![r, c], value, Op::MatMulBt(a, b), rg))
    }

    /// `x · w + b` for `x[r×in]`, `w[in×out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| kernels::gelu(*v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Gelu(x), rg)
    }

    /// Per-row normalization to zero mean and unit variance, then `gain`/`bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let d = self.row_check("layernorm", x, gain)?;
        self.row_check("layernorm", x, bias)?;
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let rows = if d == 0 { 0 } else { xs.len() / d };
        let inv_d = T::one() / T::of(d as f64);
        let mut value = vec![T::zero(); xs.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let out = &mut value[r * d..(r + 1) * d];
            for j in 0..d {
                out[j] = (row[j] - mean) * rs * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(self.shape(x).to_vec(), value, Op::LayerNorm { x, gain, bias, rstd }, rg))
    }

    /// Row-wise softmax over the last dimension, stabilized by max-subtraction.
    /// NaN inputs propagate to NaN outputs.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let k = cols(self.shape(x));
        let xs = self.value(x);
        let mut value = vec![T::zero(); xs.len()];
        if k > 0 {
            for (inp, out) in xs.chunks(k).zip(value.chunks_mut(k)) {
                softmax_into(inp, out);
            }
        }
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), value, Op::Softmax(x), rg)
    }

    /// Gathers rows from several `[n_i×D]` sources; `picks[r] = (source, row)`.
    pub fn gather_rows(&mut self, srcs: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        let d = match srcs.first() {
            Some(s) => cols(self.shape(*s)),
            None => return Err(Error::shape("gather_rows", "no sources")),
        };
        for s in srcs {
            if self.shape(*s).len() != 2 || cols(self.shape(*s)) != d {
                return Err(Error::shape("gather_rows", format!("source {:?} is not an n×{} matrix", self.shape(*s), d)));
            }
        }
        let mut value = Vec::with_capacity(picks.len() * d);
        let mut packed = Vec::with_capacity(picks.len());
        for &(s, r) in picks {
            let src = *srcs.get(s).ok_or(Error::Index { op: "gather_rows", id: s, bound: srcs.len() })?;
            let n = self.shape(src)[0];
            if r >= n {
                return Err(Error::Index { op: "gather_rows", id: r, bound: n });
            }
            value.extend_from_slice(&self.value(src)[r * d..(r + 1) * d]);
            packed.push((s as u32, r as u32));
        }
        let rg = self.rg(srcs);
        Ok(self.push(vec![picks.len(), d], value, Op::Gather { srcs: srcs.to_vec(), picks: packed }, rg))
    }

    /// Row lookup into an embedding table `[V×D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let picks: Vec<(usize, usize)> = ids.iter().map(|&i| (0, i)).collect();
        match self.gather_rows(&[table], &picks) {
            Err(Error::Index { id, bound, .. }) => Err(Error::Index { op: "embedding", id, bound }),
            other => other,
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    /// Mean negative log-likelihood over rows whose mask is set. Unmasked rows
    /// are never read, so their targets may hold anything.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, v) = self.matrix("masked_cross_entropy", logits)?;
        if targets.len() != n || mask.len() != n {
            return Err(Error::shape(
                "masked_cross_entropy",
                format!("{} rows but {} targets and {} mask entries", n, targets.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let xs = self.value(logits);
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(Error::Index { op: "masked_cross_entropy", id: t, bound: v });
            }
            let row = &xs[i * v..(i + 1) * v];
            let p = &mut probs[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (pj, xj) in p.iter_mut().zip(row) {
                *pj = (*xj - max).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            total += z.ln() + max - row[t];
        }
        let value = total / T::of(count as f64);
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            count,
            probs: if rg { probs } else { Vec::new() },
        };
        Ok(self.push(Vec::new(), vec![value], op, rg))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[batch·q_len × D]`, `k` and `v` are `[batch·k_len × D]`. A
    /// query row with no allowed key produces a zero output.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Result<Var> {
        let (rq, d) = self.matrix("attention", q)?;
        let (rk, dk) = self.matrix("attention", k)?;
        if self.shape(v) != self.shape(k) || dk != d {
            return Err(Error::shape("attention", format!("q {:?}, k {:?}, v {:?}", self.shape(q), self.shape(k), self.shape(v))));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("{} heads do not divide dim {}", heads, d)));
        }
        let (bsz, tq, tk) = (mask.batch, mask.q_len, mask.k_len);
        if rq != bsz * tq || rk != bsz * tk {
            return Err(Error::shape(
                "attention",
                format!("mask {}x{}x{} does not fit q rows {} / k rows {}", bsz, tq, tk, rq, rk),
            ));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); rq * d];
        let mut probs = vec![T::zero(); bsz * heads * tq * tk];
        let mut scores = vec![T::zero(); tk];
        for b in 0..bsz {
            for h in 0..heads {
                for i in 0..tq {
                    let qrow = &qs[(b * tq + i) * d + h * dh..][..dh];
                    let mut max = T::neg_infinity();
                    let mut any = false;
                    for j in 0..tk {
                        if mask.get(b, i, j) {
                            let s = kernels::dot(qrow, &ks[(b * tk + j) * d + h * dh..][..dh]) * scale;
                            scores[j] = s;
                            max = max.max(s);
                            any = true;
                        }
                    }
                    if !any {
                        continue;
                    }
                    let p = &mut probs[((b * heads + h) * tq + i) * tk..][..tk];
                    let mut z = T::zero();
                    for j in 0..tk {
                        if mask.get(b, i, j) {
                            p[j] = (scores[j] - max).exp();
                            z += p[j];
                        }
                    }
                    let orow = &mut out[(b * tq + i) * d + h * dh..][..dh];
                    for j in 0..tk {
                        if mask.get(b, i, j) {
                            p[j] /= z;
                            kernels::axpy(orow, p[j], &vs[(b * tk + j) * d + h * dh..][..dh]);
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        let op = Op::Attention { q, k, v, heads, mask: mask.clone(), probs };
        Ok(self.push(vec![rq, d], out, op, rg))
    }

    /// Attention probabilities recorded by an attention node, laid out
    /// `[batch × heads × q_len × k_len]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Interleaves two batched sequences: for every batch element, the
    /// `a_len` rows of `a` followed by the `b_len` rows of `b`.
    pub fn concat_seq(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let (ra, d) = self.matrix("concat_seq", a)?;
        let (rb, d2) = self.matrix("concat_seq", b)?;
        if d != d2 || batch == 0 || ra % batch != 0 || rb % batch != 0 {
            return Err(Error::shape("concat_seq", format!("{:?} and {:?} over batch {}", self.shape(a), self.shape(b), batch)));
        }
        let (a_len, b_len) = (ra / batch, rb / batch);
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = Vec::with_capacity((ra + rb) * d);
        for i in 0..batch {
            value.extend_from_slice(&av[i * a_len * d..(i + 1) * a_len * d]);
            value.extend_from_slice(&bv[i * b_len * d..(i + 1) * b_len * d]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![ra + rb, d], value, Op::ConcatSeq { a, b, batch, a_len, b_len }, rg))
    }

    /// Unfolds NHWC images into convolution patches `[batch·out_h·out_w × k·k·C]`
    /// with column order (ky, kx, channel). Padding reads as zero.
    pub fn im2col(&mut self, x: Var, geom: ConvGeom) -> Result<Var> {
        let need = geom.batch * geom.height * geom.width * geom.channels;
        if self.value(x).len() != need || geom.kernel == 0 || geom.stride == 0 || geom.height + 2 * geom.pad < geom.kernel {
            return Err(Error::shape("im2col", format!("input {:?} vs geometry {:?}", self.shape(x), geom)));
        }
        let (oh, ow, pl, c) = (geom.out_height(), geom.out_width(), geom.patch_len(), geom.channels);
        let xs = self.value(x);
        let mut value = vec![T::zero(); geom.batch * oh * ow * pl];
        for b in 0..geom.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut value[((b * oh + oy) * ow + ox) * pl..][..pl];
                    for ky in 0..geom.kernel {
                        for kx in 0..geom.kernel {
                            if let Some(src) = geom.source(b, oy, ox, ky, kx) {
                                row[(ky * geom.kernel + kx) * c..][..c].copy_from_slice(&xs[src..src + c]);
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![geom.batch * oh * ow, pl], value, Op::Im2Col { x, geom }, rg))
    }

    /// Mean over consecutive row groups: `[groups·p × C] → [groups × C]`.
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let (r, c) = self.matrix("group_mean", x)?;
        if groups == 0 || r % groups != 0 || r == 0 {
            return Err(Error::shape("group_mean", format!("{} rows into {} groups", r, groups)));
        }
        let p = r / groups;
        let inv = T::one() / T::of(p as f64);
        let xs = self.value(x);
        let mut value = vec![T::zero(); groups * c];
        for g in 0..groups {
            let out = &mut value[g * c..(g + 1) * c];
            for i in 0..p {
                kernels::add_into(out, &xs[(g * p + i) * c..][..c]);
            }
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![groups, c], value, Op::GroupMean { x, groups }, rg))
    }

    /// Reverse sweep from a scalar root. Consumes the tape's single backward pass.
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Contract("backward already ran on this tape".into()));
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::Contract("root is not on this tape".into()));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::Contract(format!("backward root must be scalar, got shape {:?}", self.nodes[root.0].shape)));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let sizes: Vec<usize> = self.nodes.iter().map(|nd| nd.value.len()).collect();
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![T::one()]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, sizes })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_buf(nodes, grads, $v) $body
            };
        }
        let val = |v: Var| -> &[T] { &nodes[v.0].value };

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                with_grad!(*a, |ga| { kernels::add_into(ga, g); });
                with_grad!(*b, |gb| { kernels::add_into(gb, g); });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |ga| { kernels::add_into(ga, g); });
                with_grad!(*b, |gb| {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= *y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).to_vec(), val(*b).to_vec());
                with_grad!(*a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                with_grad!(*b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(x, r) => {
                let d = val(*r).len();
                with_grad!(*x, |gx| { kernels::add_into(gx, g); });
                with_grad!(*r, |gr| {
                    for row in g.chunks(d) {
                        kernels::add_into(gr, row);
                    }
                });
            }
            Op::MulRow(x, r) => {
                let d = val(*r).len();
                let (xv, rv) = (val(*x), val(*r));
                with_grad!(*x, |gx| {
                    for (i, gi) in g.iter().enumerate() {
                        gx[i] += *gi * rv[i % d];
                    }
                });
                with_grad!(*r, |gr| {
                    for (i, gi) in g.iter().enumerate() {
                        gr[i % d] += *gi * xv[i];
                    }
                });
            }
            Op::Scale(x, s) => {
                with_grad!(*x, |gx| { kernels::axpy(gx, *s, g); });
            }
            Op::MulConst(x, c) => {
                with_grad!(*x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * c[i];
                    }
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, |gx| { kernels::add_into(gx, g); });
            }
            Op::MatMul(a, b) => {
                let (r, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let c = nodes[b.0].shape[1];
                with_grad!(*a, |ga| { kernels::acc_g_bt(ga, g, val(*b), r, k, c); });
                with_grad!(*b, |gb| { kernels::acc_at_b(gb, val(*a), g, r, k, c); });
            }
            Op::MatMulBt(a, b) => {
                let (r, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let c = nodes[b.0].shape[0];
                with_grad!(*a, |ga| { kernels::acc_g_b(ga, g, val(*b), r, k, c); });
                with_grad!(*b, |gb| { kernels::acc_gt_a(gb, g, val(*a), r, k, c); });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                with_grad!(*x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let d = val(*gain).len();
                let (xv, gv) = (val(*x), val(*gain));
                let rows = rstd.len();
                let inv_d = T::one() / T::of(d as f64);
                let mut xhat = vec![T::zero(); xv.len()];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let mean = row.iter().copied().sum::<T>() * inv_d;
                    for j in 0..d {
                        xhat[r * d + j] = (row[j] - mean) * rstd[r];
                    }
                }
                with_grad!(*gain, |gg| {
                    for i in 0..g.len() {
                        gg[i % d] += g[i] * xhat[i];
                    }
                });
                with_grad!(*bias, |gb| {
                    for row in g.chunks(d) {
                        kernels::add_into(gb, row);
                    }
                });
                with_grad!(*x, |gx| {
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[r * d + j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let k = cols(&node.shape);
                let y = &node.value;
                with_grad!(*x, |gx| {
                    if k > 0 {
                        for ((gr, yr), xr) in g.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                            let s = kernels::dot(gr, yr);
                            for j in 0..k {
                                xr[j] += yr[j] * (gr[j] - s);
                            }
                        }
                    }
                });
            }
            Op::Gather { srcs, picks } => {
                let d = cols(&node.shape);
                for (si, src) in srcs.iter().enumerate() {
                    with_grad!(*src, |gs| {
                        for (r, &(s, row)) in picks.iter().enumerate() {
                            if s as usize == si {
                                let row = row as usize;
                                kernels::add_into(&mut gs[row * d..(row + 1) * d], &g[r * d..(r + 1) * d]);
                            }
                        }
                    });
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                with_grad!(*x, |gx| {
                    gx.iter_mut().for_each(|v| *v += g0);
                });
            }
            Op::CrossEntropy { logits, targets, mask, count, probs } => {
                let v = cols(&nodes[logits.0].shape);
                let coef = g[0] / T::of(*count as f64);
                with_grad!(*logits, |gl| {
                    for (i, m) in mask.iter().enumerate() {
                        if !*m {
                            continue;
                        }
                        let row = &mut gl[i * v..(i + 1) * v];
                        kernels::axpy(row, coef, &probs[i * v..(i + 1) * v]);
                        row[targets[i]] -= coef;
                    }
                });
            }
            Op::Attention { q, k, v, heads, mask, probs } => {
                self.attention_backward(g, *q, *k, *v, *heads, mask, probs, grads);
            }
            Op::ConcatSeq { a, b, batch, a_len, b_len } => {
                let d = cols(&node.shape);
                let t = a_len + b_len;
                with_grad!(*a, |ga| {
                    for i in 0..*batch {
                        kernels::add_into(&mut ga[i * a_len * d..(i + 1) * a_len * d], &g[i * t * d..][..a_len * d]);
                    }
                });
                with_grad!(*b, |gb| {
                    for i in 0..*batch {
                        kernels::add_into(&mut gb[i * b_len * d..(i + 1) * b_len * d], &g[(i * t + a_len) * d..][..b_len * d]);
                    }
                });
            }
            Op::Im2Col { x, geom } => {
                let (oh, ow, pl, c) = (geom.out_height(), geom.out_width(), geom.patch_len(), geom.channels);
                with_grad!(*x, |gx| {
                    for b in 0..geom.batch {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let row = &g[((b * oh + oy) * ow + ox) * pl..][..pl];
                                for ky in 0..geom.kernel {
                                    for kx in 0..geom.kernel {
                                        if let Some(src) = geom.source(b, oy, ox, ky, kx) {
                                            kernels::add_into(&mut gx[src..src + c], &row[(ky * geom.kernel + kx) * c..][..c]);
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::GroupMean { x, groups } => {
                let c = cols(&node.shape);
                let p = nodes[x.0].shape[0] / groups;
                let inv = T::one() / T::of(p as f64);
                with_grad!(*x, |gx| {
                    for gi in 0..*groups {
                        let grow = &g[gi * c..(gi + 1) * c];
                        for i in 0..p {
                            kernels::axpy(&mut gx[(gi * p + i) * c..][..c], inv, grow);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttnMask,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let nodes = &self.nodes;
        let (qs, ks, vs) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
        let d = cols(&nodes[q.0].shape);
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (bsz, tq, tk) = (mask.batch, mask.q_len, mask.k_len);
        let mut gq = vec![T::zero(); qs.len()];
        let mut gk = vec![T::zero(); ks.len()];
        let mut gv = vec![T::zero(); vs.len()];
        let mut ds = vec![T::zero(); tk];
        for b in 0..bsz {
            for h in 0..heads {
                for i in 0..tq {
                    let p = &probs[((b * heads + h) * tq + i) * tk..][..tk];
                    let go = &g[(b * tq + i) * d + h * dh..][..dh];
                    let mut s = T::zero();
                    for j in 0..tk {
                        if mask.get(b, i, j) {
                            let dp = kernels::dot(go, &vs[(b * tk + j) * d + h * dh..][..dh]);
                            ds[j] = dp;
                            s += p[j] * dp;
                        }
                    }
                    let qrow = &qs[(b * tq + i) * d + h * dh..][..dh];
                    for j in 0..tk {
                        if !mask.get(b, i, j) {
                            continue;
                        }
                        let off = (b * tk + j) * d + h * dh;
                        kernels::axpy(&mut gv[off..off + dh], p[j], go);
                        let dsj = p[j] * (ds[j] - s) * scale;
                        kernels::axpy(&mut gq[(b * tq + i) * d + h * dh..][..dh], dsj, &ks[off..off + dh]);
                        kernels::axpy(&mut gk[off..off + dh], dsj, qrow);
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(buf) = grad_buf(nodes, grads, var) {
                kernels::add_into(buf, &local);
            }
        }
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` when `v` does not
/// require a gradient.
fn grad_buf<'a, T: Float>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]))
}

pub(crate) fn softmax_into<T: Float>(inp: &[T], out: &mut [T]) {
    let max = inp.iter().copied().fold(T::neg_infinity(), |m, v| if v.is_nan() || m.is_nan() { T::nan() } else { m.max(v) });
    let mut z = T::zero();
    for (o, x) in out.iter_mut().zip(inp) {
        *o = (*x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

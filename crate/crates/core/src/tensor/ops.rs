use rayon::prelude::*;

use super::gemm::gemm;
use super::tape::{Op, Tape, Var};
use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Batch-norm running estimates (inference-time statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Training mode normalizes with batch statistics and updates the running
/// estimates; inference mode only reads them.
pub enum BnMode<'a, T> {
    Train(&'a mut RunningStats<T>),
    Eval(&'a RunningStats<T>),
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn permute_data<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return out;
    }
    let last = nd - 1;
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    loop {
        // innermost run
        let s = strides[last];
        for i in 0..out_shape[last] {
            out.push(data[offset + i * s]);
        }
        // odometer over the outer axes
        let mut d = last;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let p = ho * wo;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * p..((c * k + ky) * k + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let out_row = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    col: &[T],
    channels: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    x: &mut [T],
) {
    let p = ho * wo;
    for c in 0..channels {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * p..((c * k + ky) * k + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

// 0.5 (1 + tanh(u)) is the logistic function of 2u, which is cheaper.
fn gelu_gate<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

fn gelu_fwd<T: Real>(x: T) -> T {
    x * gelu_gate(x)
}

fn gelu_grad<T: Real>(x: T) -> T {
    let s = gelu_gate(x);
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    s + (x + x) * s * (T::one() - s) * du
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias / table add).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let mut data = av.data().to_vec();
        for chunk in data.chunks_mut(nb) {
            for (x, y) in chunk.iter_mut().zip(bv) {
                *x += *y;
            }
        }
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(out, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.shape(a), self.shape(b), "mul")?;
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let av = self.value(a);
        let out = Tensor::from_fn(av.shape(), |i| av.data()[i] * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    fn mat_dims(&self, a: Var, b: Var, trans_b: bool) -> Result<MatDims> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(format!("matmul needs matrices, got {sa:?} x {sb:?}")));
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(Error::shape(format!(
                "matmul inner dims differ: {sa:?} x {sb:?} (trans_b={trans_b})"
            )));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(Error::shape(format!("matmul batch dims differ: {sa:?} x {sb:?}")));
        }
        Ok(MatDims {
            batch,
            m,
            k,
            n,
            shared_b,
        })
    }

    /// Matrix product over the last two axes. `b` is either a plain matrix
    /// shared by every batch entry of `a`, or carries the same batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, 1.0)
    }

    /// `alpha * a * b^T` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var, alpha: f64) -> Result<Var> {
        self.matmul_impl(a, b, true, alpha)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool, alpha: f64) -> Result<Var> {
        let MatDims {
            batch,
            m,
            k,
            n,
            shared_b,
        } = self.mat_dims(a, b, trans_b)?;
        let alpha = T::of(alpha);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        if shared_b {
            gemm(batch * m, k, n, alpha, av, false, bv, trans_b, T::zero(), &mut out);
        } else {
            out.par_chunks_mut(m * n).enumerate().for_each(|(i, c)| {
                gemm(
                    m,
                    k,
                    n,
                    alpha,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    trans_b,
                    T::zero(),
                    c,
                );
            });
        }
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b, alpha }, &[a, b]))
    }

    /// `x * w (+ b)` with `w: [in, out]` shared across leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::shape(format!("invalid permutation {axes:?} for {shape:?}")));
        }
        let data = permute_data(self.value(a).data(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::shape("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().enumerate().any(|(d, &n)| d != axis && n != first[d])
            {
                return Err(Error::shape(format!("concat {first:?} with {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// 2-D convolution. `x: [B, Cin, H, W]`, `w: [Cout, Cin, k, k]`,
    /// optional `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::shape(format!("conv2d input {xs:?} with kernel {ws:?}")));
        }
        if let Some(b) = b {
            same_shape(self.shape(b), &ws[..1], "conv2d bias")?;
        }
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(format!("kernel {k} larger than padded input {xs:?}")));
        }
        let ho = conv_out_dim(h, k, stride, pad);
        let wo = conv_out_dim(wd, k, stride, pad);
        let p = ho * wo;
        let ckk = cin * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;

        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let mut out = vec![T::zero(); batch * cout * p];
        out.par_chunks_mut(cout * p).enumerate().for_each(|(bi, ob)| {
            let xb = &xv[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let col_buf;
            let col: &[T] = if direct {
                xb
            } else {
                let mut c = vec![T::zero(); ckk * p];
                im2col(xb, cin, h, wd, k, stride, pad, ho, wo, &mut c);
                col_buf = c;
                &col_buf
            };
            gemm(cout, ckk, p, T::one(), wv, false, col, false, T::zero(), ob);
            if let Some(bias) = bias {
                for (co, row) in ob.chunks_mut(p).enumerate() {
                    for v in row {
                        *v += bias[co];
                    }
                }
            }
        });
        let out = Tensor::new(&[batch, cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, &inputs))
    }

    /// Per-channel batch normalization of `x: [B, C, H, W]`.
    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("batchnorm2d expects 4-D input, got {xs:?}")));
        }
        let (batch, ch, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        same_shape(self.shape(gamma), &[ch], "batchnorm gamma")?;
        same_shape(self.shape(beta), &[ch], "batchnorm beta")?;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let count = batch * plane;
        let eps = T::of(BN_EPS);
        let mut mean = vec![T::zero(); ch];
        let mut inv_std = vec![T::zero(); ch];
        let batch_stats = matches!(mode, BnMode::Train(_));
        match mode {
            BnMode::Train(stats) => {
                if stats.mean.len() != ch {
                    return Err(Error::shape("running stats channel count"));
                }
                let n = T::of(count as f64);
                let momentum = T::of(BN_MOMENTUM);
                for c in 0..ch {
                    let mut s = T::zero();
                    for bi in 0..batch {
                        for v in &xv[(bi * ch + c) * plane..(bi * ch + c + 1) * plane] {
                            s += *v;
                        }
                    }
                    let mu = s / n;
                    let mut sq = T::zero();
                    for bi in 0..batch {
                        for v in &xv[(bi * ch + c) * plane..(bi * ch + c + 1) * plane] {
                            sq += (*v - mu) * (*v - mu);
                        }
                    }
                    let var = sq / n;
                    mean[c] = mu;
                    inv_std[c] = T::one() / (var + eps).sqrt();
                    let unbiased = if count > 1 {
                        sq / T::of((count - 1) as f64)
                    } else {
                        var
                    };
                    stats.mean[c] = (T::one() - momentum) * stats.mean[c] + momentum * mu;
                    stats.var[c] = (T::one() - momentum) * stats.var[c] + momentum * unbiased;
                }
            }
            BnMode::Eval(stats) => {
                if stats.mean.len() != ch {
                    return Err(Error::shape("running stats channel count"));
                }
                for c in 0..ch {
                    mean[c] = stats.mean[c];
                    inv_std[c] = T::one() / (stats.var[c] + eps).sqrt();
                }
            }
        }
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..batch {
            for c in 0..ch {
                let range = (bi * ch + c) * plane..(bi * ch + c + 1) * plane;
                for i in range {
                    let h = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bt[c];
                }
            }
        }
        let out = Tensor::new(&xs, out)?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::shape("layernorm of a scalar"))?;
        same_shape(self.shape(gamma), &[d], "layernorm gamma")?;
        same_shape(self.shape(beta), &[d], "layernorm beta")?;
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xv.len() / d;
        let n = T::of(d as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mu) * (*v - mu)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bt[j];
            }
        }
        let out = Tensor::new(&xs, out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| xv.data()[i].max(T::zero()));
        self.push(out, Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |i| gelu_fwd(xv.data()[i]));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::shape(format!("softmax axis {axis} for {xs:?}")));
        }
        let outer: usize = xs[..axis].iter().product();
        let n = xs[axis];
        let inner: usize = xs[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        if inner == 1 {
            out.par_chunks_mut(n).zip(xv.par_chunks(n)).for_each(|(o, row)| {
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for (e, v) in o.iter_mut().zip(row) {
                    *e = (*v - mx).exp();
                    s += *e;
                }
                let inv = T::one() / s;
                for e in o.iter_mut() {
                    *e *= inv;
                }
            });
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let mut mx = T::neg_infinity();
                    for j in 0..n {
                        mx = mx.max(xv[at(j)]);
                    }
                    let mut s = T::zero();
                    for j in 0..n {
                        let e = (xv[at(j)] - mx).exp();
                        out[at(j)] = e;
                        s += e;
                    }
                    for j in 0..n {
                        out[at(j)] /= s;
                    }
                }
            }
        }
        let out = Tensor::new(&xs, out)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// For node features `x: [B, N, D]` (or `[N, D]`) and `k` neighbor
    /// indices per node (`neighbors`, laid out `[B][N][k]`), computes
    /// `max_j (x_j - x_i)` per feature. The subgradient goes to the first
    /// neighbor attaining the maximum.
    pub fn neighbor_max_diff(&mut self, x: Var, neighbors: &[usize], k: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (batch, n, d) = match xs.as_slice() {
            [n, d] => (1, *n, *d),
            [b, n, d] => (*b, *n, *d),
            _ => return Err(Error::shape(format!("neighbor_max_diff input {xs:?}"))),
        };
        if k == 0 || neighbors.len() != batch * n * k {
            return Err(Error::shape(format!(
                "neighbor list of length {} for {batch}x{n} nodes with k={k}",
                neighbors.len()
            )));
        }
        if let Some(&bad) = neighbors.iter().find(|&&j| j >= n) {
            return Err(Error::invalid(format!("neighbor index {bad} >= {n}")));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut argmax = vec![0u32; xv.len()];
        for b in 0..batch {
            let xb = &xv[b * n * d..(b + 1) * n * d];
            for i in 0..n {
                let nbrs = &neighbors[(b * n + i) * k..(b * n + i + 1) * k];
                let xi = &xb[i * d..(i + 1) * d];
                let o = &mut out[(b * n + i) * d..(b * n + i + 1) * d];
                let am = &mut argmax[(b * n + i) * d..(b * n + i + 1) * d];
                let j0 = nbrs[0];
                for f in 0..d {
                    o[f] = xb[j0 * d + f] - xi[f];
                    am[f] = j0 as u32;
                }
                for &j in &nbrs[1..] {
                    let xj = &xb[j * d..(j + 1) * d];
                    for f in 0..d {
                        let diff = xj[f] - xi[f];
                        if diff > o[f] {
                            o[f] = diff;
                            am[f] = j as u32;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&xs, out)?;
        Ok(self.push(out, Op::NeighborMaxDiff { x, argmax }, &[x]))
    }

    /// Global average over the spatial axes: `[B, C, H, W] -> [B, C, 1, 1]`.
    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape(format!("adaptive_avg_pool expects 4-D, got {xs:?}")));
        }
        let plane = xs[2] * xs[3];
        let inv = T::one() / T::of(plane as f64);
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let out = Tensor::new(&[xs[0], xs[1], 1, 1], data)?;
        Ok(self.push(out, Op::AvgPool(x), &[x]))
    }

    /// Mean softmax cross-entropy of `logits: [B, C]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || ls[0] != labels.len() {
            return Err(Error::shape(format!(
                "cross_entropy logits {ls:?} with {} labels",
                labels.len()
            )));
        }
        let c = ls[1];
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::invalid(format!("label {bad} outside [0, {c})")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let s: T = row.iter().map(|v| (*v - mx).exp()).sum();
            let lse = mx + s.ln();
            loss += lse - row[y];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        loss /= T::of(labels.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub(super) fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |ga| {
                        for (x, y) in ga.iter_mut().zip(g) {
                            *x += *y;
                        }
                    });
                }
            }
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += *y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    let nb = gb.len();
                    for chunk in g.chunks(nb) {
                        for (x, y) in gb.iter_mut().zip(chunk) {
                            *x += *y;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for ((x, y), o) in ga.iter_mut().zip(g).zip(bv) {
                        *x += *y * *o;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((x, y), o) in gb.iter_mut().zip(g).zip(av) {
                        *x += *y * *o;
                    }
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += *y * *s;
                }
            }),
            Op::Sum(a) => self.accumulate(grads, *a, |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::MatMul { a, b, trans_b, alpha } => self.backprop_matmul(*a, *b, *trans_b, *alpha, g, grads),
            Op::Reshape(a) => self.accumulate(grads, *a, |ga| {
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += *y;
                }
            }),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (d, &ax) in axes.iter().enumerate() {
                    inverse[ax] = d;
                }
                let back = permute_data(g, node.value.shape(), &inverse);
                self.accumulate(grads, *a, |ga| {
                    for (x, y) in ga.iter_mut().zip(&back) {
                        *x += *y;
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    self.accumulate(grads, v, |gv| {
                        for o in 0..outer {
                            for (x, y) in gv[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(&g[o * row + offset..o * row + offset + len])
                            {
                                *x += *y;
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x);
                let out_len = node.value.shape()[*axis];
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let full = in_shape[*axis];
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * out_len * inner;
                        for (x, y) in gx[dst..dst + out_len * inner]
                            .iter_mut()
                            .zip(&g[src..src + out_len * inner])
                        {
                            *x += *y;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => self.backprop_conv(node, *x, *w, *b, *stride, *pad, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xs = node.value.shape();
                let (batch, ch, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![T::zero(); ch];
                let mut sum_gx = vec![T::zero(); ch];
                for bi in 0..batch {
                    for c in 0..ch {
                        for idx in (bi * ch + c) * plane..(bi * ch + c + 1) * plane {
                            sum_g[c] += g[idx];
                            sum_gx[c] += g[idx] * xhat[idx];
                        }
                    }
                }
                self.accumulate(grads, *gamma, |gg| {
                    for c in 0..ch {
                        gg[c] += sum_gx[c];
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for c in 0..ch {
                        gb[c] += sum_g[c];
                    }
                });
                let n = T::of((batch * plane) as f64);
                self.accumulate(grads, *x, |gx| {
                    for bi in 0..batch {
                        for c in 0..ch {
                            let scale = gam[c] * inv_std[c];
                            for idx in (bi * ch + c) * plane..(bi * ch + c + 1) * plane {
                                gx[idx] += if *batch_stats {
                                    scale * (g[idx] - sum_g[c] / n - xhat[idx] * sum_gx[c] / n)
                                } else {
                                    scale * g[idx]
                                };
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *node.value.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                let rows = g.len() / d;
                self.accumulate(grads, *gamma, |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                });
                let n = T::of(d as f64);
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gam[j];
                            s1 += dh;
                            s2 += dh * xhat[r * d + j];
                        }
                        for j in 0..d {
                            let dh = g[r * d + j] * gam[j];
                            gx[r * d + j] += inv_std[r] * (dh - s1 / n - xhat[r * d + j] * s2 / n);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi > T::zero() {
                            *o += *gi;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *o += *gi * gelu_grad(*xi);
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let y = node.value.data();
                let outer: usize = shape[..*axis].iter().product();
                let n = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                self.accumulate(grads, *x, |gx| {
                    if inner == 1 {
                        gx.par_chunks_mut(n)
                            .zip(y.par_chunks(n).zip(g.par_chunks(n)))
                            .for_each(|(gx, (y, g))| {
                                let dot: T = g.iter().zip(y).map(|(a, b)| *a * *b).sum();
                                for ((o, y), g) in gx.iter_mut().zip(y).zip(g) {
                                    *o += *y * (*g - dot);
                                }
                            });
                        return;
                    }
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::NeighborMaxDiff { x, argmax } => {
                let shape = node.value.shape();
                let d = shape[shape.len() - 1];
                let n = shape[shape.len() - 2];
                self.accumulate(grads, *x, |gx| {
                    for (idx, (&gi, &j)) in g.iter().zip(argmax).enumerate() {
                        let f = idx % d;
                        let b = idx / (n * d);
                        gx[(b * n + j as usize) * d + f] += gi;
                        gx[idx] -= gi;
                    }
                });
            }
            Op::AvgPool(x) => {
                let xs = self.shape(*x);
                let plane = xs[2] * xs[3];
                let inv = T::one() / T::of(plane as f64);
                self.accumulate(grads, *x, |gx| {
                    for (chunk, gi) in gx.chunks_mut(plane).zip(g) {
                        for v in chunk {
                            *v += *gi * inv;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = probs.len() / labels.len();
                let scale = g[0] / T::of(labels.len() as f64);
                self.accumulate(grads, *logits, |gl| {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let target = if j == y { T::one() } else { T::zero() };
                            gl[r * c + j] += scale * (probs[r * c + j] - target);
                        }
                    }
                });
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, trans_b: bool, alpha: T, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let MatDims {
            batch,
            m,
            k,
            n,
            shared_b,
        } = self.mat_dims(a, b, trans_b).expect("validated in forward");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        if shared_b {
            let rows = batch * m;
            self.accumulate(grads, a, |ga| {
                // dA = alpha * dC * op(B)^T
                gemm(rows, n, k, alpha, g, false, bv, !trans_b, T::one(), ga);
            });
            self.accumulate(grads, b, |gb| {
                if trans_b {
                    gemm(n, rows, k, alpha, g, true, av, false, T::one(), gb);
                } else {
                    gemm(k, rows, n, alpha, av, true, g, false, T::one(), gb);
                }
            });
        } else {
            self.accumulate(grads, a, |ga| {
                ga.par_chunks_mut(m * k).enumerate().for_each(|(i, gai)| {
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    gemm(m, n, k, alpha, gi, false, bi, !trans_b, T::one(), gai);
                });
            });
            self.accumulate(grads, b, |gb| {
                gb.par_chunks_mut(k * n).enumerate().for_each(|(i, gbi)| {
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    if trans_b {
                        gemm(n, m, k, alpha, gi, true, ai, false, T::one(), gbi);
                    } else {
                        gemm(k, m, n, alpha, ai, true, gi, false, T::one(), gbi);
                    }
                });
            });
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        node: &super::tape::Node<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (batch, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, k) = (ws[0], ws[2]);
        let os = node.value.shape();
        let (ho, wo) = (os[2], os[3]);
        let p = ho * wo;
        let ckk = cin * k * k;
        let direct = k == 1 && stride == 1 && pad == 0;
        let xv = self.value(x).data();
        let wv = self.value(w).data();

        if let Some(b) = b {
            self.accumulate(grads, b, |gb| {
                for bi in 0..batch {
                    for co in 0..cout {
                        let row = &g[(bi * cout + co) * p..(bi * cout + co + 1) * p];
                        gb[co] += row.iter().copied().sum::<T>();
                    }
                }
            });
        }
        let need_w = self.requires_grad(w);
        let need_x = self.requires_grad(x);
        let make_col = |bi: usize| -> Vec<T> {
            let xb = &xv[bi * cin * h * wd..(bi + 1) * cin * h * wd];
            let mut c = vec![T::zero(); ckk * p];
            im2col(xb, cin, h, wd, k, stride, pad, ho, wo, &mut c);
            c
        };
        if need_w {
            self.accumulate(grads, w, |gw| {
                for bi in 0..batch {
                    let gb = &g[bi * cout * p..(bi + 1) * cout * p];
                    if direct {
                        let xb = &xv[bi * cin * h * wd..(bi + 1) * cin * h * wd];
                        gemm(cout, p, ckk, T::one(), gb, false, xb, true, T::one(), gw);
                    } else {
                        let col = make_col(bi);
                        gemm(cout, p, ckk, T::one(), gb, false, &col, true, T::one(), gw);
                    }
                }
            });
        }
        if need_x {
            self.accumulate(grads, x, |gx| {
                gx.par_chunks_mut(cin * h * wd).enumerate().for_each(|(bi, gxb)| {
                    let gb = &g[bi * cout * p..(bi + 1) * cout * p];
                    if direct {
                        gemm(ckk, cout, p, T::one(), wv, true, gb, false, T::one(), gxb);
                    } else {
                        let mut dcol = vec![T::zero(); ckk * p];
                        gemm(ckk, cout, p, T::one(), wv, true, gb, false, T::zero(), &mut dcol);
                        col2im_add(&dcol, cin, h, wd, k, stride, pad, ho, wo, gxb);
                    }
                });
            });
        }
    }
}

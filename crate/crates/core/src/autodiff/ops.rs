//! Forward kernels and backward rules for every tape operation.

use alloc::vec;
use alloc::vec::Vec;

use super::{accumulate, BnBuffers, Mode, Op, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SQRT_2: f64 = core::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn sigmoid_fwd(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Exact (erf-based) GELU.
pub(crate) fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = INV_SQRT_2PI * libm::exp(-0.5 * x * x);
    cdf + x * pdf
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

pub(crate) fn softmax_fwd(x: &Tensor) -> Result<Tensor> {
    if x.ndim() == 0 {
        return Err(Error::InvalidShape { op: "softmax", detail: alloc::string::String::from("scalar input") });
    }
    let d = *x.shape().last().expect("ndim >= 1");
    if d == 0 {
        return Err(Error::InvalidShape { op: "softmax", detail: alloc::string::String::from("empty last axis") });
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - m);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

fn softmax_bwd(y: &Tensor, grad: &Tensor) -> Tensor {
    let d = *y.shape().last().expect("ndim >= 1");
    let mut out = grad.clone();
    for (orow, yrow) in out.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
        let dot: f64 = orow.iter().zip(yrow).map(|(g, y)| g * y).sum();
        for (g, y) in orow.iter_mut().zip(yrow) {
            *g = y * (*g - dot);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// structural
// ---------------------------------------------------------------------------

pub(crate) fn permute_fwd(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || core::mem::replace(&mut seen[p], true)) {
        return Err(Error::InvalidShape { op: "permute", detail: alloc::format!("perm {:?} for ndim {}", perm, nd) });
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let mut out = Tensor::zeros(&out_shape);
    let mut idx = vec![0usize; nd];
    for (o, slot) in out.data_mut().iter_mut().enumerate() {
        let mut rem = o;
        for a in 0..nd {
            idx[a] = rem / out_strides[a];
            rem %= out_strides[a];
        }
        let mut src = 0;
        for a in 0..nd {
            src += idx[a] * in_strides[perm[a]];
        }
        *slot = x.data()[src];
    }
    Ok(out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub(crate) fn concat2_fwd(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(Error::InvalidShape { op: "concat", detail: alloc::string::String::from("no inputs") });
    };
    let rows = first.shape().first().copied().unwrap_or(0);
    let mut cols = 0;
    for p in parts {
        if p.ndim() != 2 || p.shape()[0] != rows {
            return Err(Error::InvalidShape { op: "concat", detail: alloc::format!("row mismatch {:?}", p.shape()) });
        }
        cols += p.shape()[1];
    }
    let mut out = Tensor::zeros(&[rows, cols]);
    for r in 0..rows {
        let mut off = 0;
        for p in parts {
            let w = p.shape()[1];
            out.row_mut(r)[off..off + w].copy_from_slice(p.row(r));
            off += w;
        }
    }
    Ok(out)
}

pub(crate) fn mean_axis1_fwd(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::InvalidShape { op: "mean_axis1", detail: alloc::format!("need 3-D, got {:?}", x.shape()) });
    }
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[b, d]);
    for bi in 0..b {
        for li in 0..l {
            for di in 0..d {
                out.data_mut()[bi * d + di] += x.at3(bi, li, di);
            }
        }
        for di in 0..d {
            out.data_mut()[bi * d + di] /= l as f64;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// matmul / conv / pooling
// ---------------------------------------------------------------------------

pub(crate) fn matmul_fwd(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    if a.ndim() != 2 || b.ndim() != 2 {
        return Err(Error::InvalidShape { op: "matmul", detail: alloc::format!("{:?} x {:?}", a.shape(), b.shape()) });
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (bk, n) = if transpose_b { (b.shape()[1], b.shape()[0]) } else { (b.shape()[0], b.shape()[1]) };
    if k != bk {
        return Err(Error::ShapeMismatch { expected: vec![k], got: vec![bk] });
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        if transpose_b {
            for (j, slot) in orow.iter_mut().enumerate() {
                let brow = b.row(j);
                let mut acc = 0.0;
                for t in 0..k {
                    acc += arow[t] * brow[t];
                }
                *slot = acc;
            }
        } else {
            for t in 0..k {
                let av = arow[t];
                if av == 0.0 {
                    continue;
                }
                let brow = b.row(t);
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn conv1d_fwd(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if x.ndim() != 3 || w.ndim() != 3 || x.shape()[1] != w.shape()[1] {
        return Err(Error::InvalidShape {
            op: "conv1d",
            detail: alloc::format!("x {:?} w {:?}", x.shape(), w.shape()),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidConfig(alloc::string::String::from("conv1d stride 0")));
    }
    let (b, cin, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    if l + 2 * pad < k {
        return Err(Error::SignalTooShort { need: k, got: l + 2 * pad });
    }
    let lout = (l + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[b, cout, lout]);
    for bi in 0..b {
        for co in 0..cout {
            let o_off = (bi * cout + co) * lout;
            for ci in 0..cin {
                let x_off = (bi * cin + ci) * l;
                let w_off = (co * cin + ci) * k;
                for t in 0..lout {
                    let start = t * stride;
                    let mut acc = 0.0;
                    for kk in 0..k {
                        let pos = start + kk;
                        if pos >= pad && pos - pad < l {
                            acc += x.data()[x_off + pos - pad] * w.data()[w_off + kk];
                        }
                    }
                    out.data_mut()[o_off + t] += acc;
                }
            }
        }
    }
    Ok(out)
}

fn conv1d_bwd(x: &Tensor, w: &Tensor, grad: &Tensor, stride: usize, pad: usize) -> (Tensor, Tensor) {
    let (b, cin, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let lout = grad.shape()[2];
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    for bi in 0..b {
        for co in 0..cout {
            let g_off = (bi * cout + co) * lout;
            for ci in 0..cin {
                let x_off = (bi * cin + ci) * l;
                let w_off = (co * cin + ci) * k;
                for t in 0..lout {
                    let g = grad.data()[g_off + t];
                    if g == 0.0 {
                        continue;
                    }
                    let start = t * stride;
                    for kk in 0..k {
                        let pos = start + kk;
                        if pos >= pad && pos - pad < l {
                            dx.data_mut()[x_off + pos - pad] += g * w.data()[w_off + kk];
                            dw.data_mut()[w_off + kk] += g * x.data()[x_off + pos - pad];
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

pub(crate) fn maxpool1d_fwd(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<(Tensor, Vec<usize>)> {
    if x.ndim() != 3 {
        return Err(Error::InvalidShape { op: "maxpool1d", detail: alloc::format!("need 3-D, got {:?}", x.shape()) });
    }
    if stride == 0 || k == 0 {
        return Err(Error::InvalidConfig(alloc::format!("maxpool k={k} stride={stride}")));
    }
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if l + 2 * pad < k {
        return Err(Error::SignalTooShort { need: k, got: l + 2 * pad });
    }
    let lout = (l + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[b, c, lout]);
    let mut argmax = vec![0usize; b * c * lout];
    for bc in 0..b * c {
        let x_off = bc * l;
        let o_off = bc * lout;
        for t in 0..lout {
            let start = t * stride;
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = usize::MAX;
            for kk in 0..k {
                let pos = start + kk;
                if pos >= pad && pos - pad < l {
                    let v = x.data()[x_off + pos - pad];
                    if v > best {
                        best = v;
                        best_idx = x_off + pos - pad;
                    }
                }
            }
            out.data_mut()[o_off + t] = best;
            argmax[o_off + t] = best_idx;
        }
    }
    Ok((out, argmax))
}

pub(crate) fn avgpool_all_fwd(x: &Tensor) -> Result<Tensor> {
    if x.ndim() != 3 {
        return Err(Error::InvalidShape { op: "adaptive_avgpool1", detail: alloc::format!("need 3-D, got {:?}", x.shape()) });
    }
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if l == 0 {
        return Err(Error::SignalTooShort { need: 1, got: 0 });
    }
    let mut out = Tensor::zeros(&[b, c]);
    for bc in 0..b * c {
        out.data_mut()[bc] = x.data()[bc * l..(bc + 1) * l].iter().sum::<f64>() / l as f64;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

#[allow(clippy::type_complexity)]
pub(crate) fn batchnorm_fwd(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    buffers: &mut BnBuffers,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    if x.ndim() != 3 {
        return Err(Error::InvalidShape { op: "batchnorm1d", detail: alloc::format!("need 3-D, got {:?}", x.shape()) });
    }
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if gamma.numel() != c || beta.numel() != c || buffers.running_mean.len() != c {
        return Err(Error::ShapeMismatch { expected: vec![c], got: vec![gamma.numel()] });
    }
    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        Mode::Train => {
            let n = (b * l) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * l;
                    for t in 0..l {
                        mean[ci] += x.data()[off + t];
                    }
                }
            }
            for m in mean.iter_mut() {
                *m /= n;
            }
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * l;
                    for t in 0..l {
                        let d = x.data()[off + t] - mean[ci];
                        var[ci] += d * d;
                    }
                }
            }
            for v in var.iter_mut() {
                *v /= n;
            }
            // running buffers track the unbiased variance
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            for ci in 0..c {
                buffers.running_mean[ci] = (1.0 - momentum) * buffers.running_mean[ci] + momentum * mean[ci];
                buffers.running_var[ci] = (1.0 - momentum) * buffers.running_var[ci] + momentum * var[ci] * unbias;
            }
            (mean, var)
        }
        Mode::Eval => (buffers.running_mean.clone(), buffers.running_var.clone()),
    };
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / libm::sqrt(v + eps)).collect();
    let mut out = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * l;
            let (m, is) = (mean[ci], inv_std[ci]);
            let (g, be) = (gamma.data()[ci], beta.data()[ci]);
            for t in 0..l {
                let xhat = (out.data()[off + t] - m) * is;
                out.data_mut()[off + t] = g * xhat + be;
            }
        }
    }
    Ok((out, mean, inv_std))
}

#[allow(clippy::too_many_arguments)]
fn batchnorm_bwd(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    train: bool,
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (b, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = (b * l) as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ci in 0..c {
        let (m, is, g) = (mean[ci], inv_std[ci], gamma.data()[ci]);
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for bi in 0..b {
            let off = (bi * c + ci) * l;
            for t in 0..l {
                let dy = grad.data()[off + t];
                let xhat = (x.data()[off + t] - m) * is;
                sum_dy += dy;
                sum_dy_xhat += dy * xhat;
            }
        }
        dgamma.data_mut()[ci] = sum_dy_xhat;
        dbeta.data_mut()[ci] = sum_dy;
        for bi in 0..b {
            let off = (bi * c + ci) * l;
            for t in 0..l {
                let dy = grad.data()[off + t];
                let xhat = (x.data()[off + t] - m) * is;
                dx.data_mut()[off + t] = if train {
                    g * is / n * (n * dy - sum_dy - xhat * sum_dy_xhat)
                } else {
                    g * is * dy
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[allow(clippy::type_complexity)]
pub(crate) fn layernorm_fwd(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let d = *x.shape().last().unwrap_or(&0);
    if d == 0 || gamma.numel() != d || beta.numel() != d {
        return Err(Error::InvalidShape {
            op: "layernorm",
            detail: alloc::format!("x {:?} gamma {:?}", x.shape(), gamma.shape()),
        });
    }
    let rows = x.numel() / d;
    let mut out = x.clone();
    let mut means = vec![0.0; rows];
    let mut inv_stds = vec![0.0; rows];
    for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
        let m = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / d as f64;
        let is = 1.0 / libm::sqrt(var + eps);
        means[r] = m;
        inv_stds[r] = is;
        for (i, v) in row.iter_mut().enumerate() {
            *v = gamma.data()[i] * ((*v - m) * is) + beta.data()[i];
        }
    }
    Ok((out, means, inv_stds))
}

fn layernorm_bwd(
    x: &Tensor,
    gamma: &Tensor,
    mean: &[f64],
    inv_std: &[f64],
    grad: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = *x.shape().last().expect("checked in fwd");
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    for (r, (xrow, grow)) in x.data().chunks(d).zip(grad.data().chunks(d)).enumerate() {
        let (m, is) = (mean[r], inv_std[r]);
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for i in 0..d {
            let xhat = (xrow[i] - m) * is;
            let dxhat = grow[i] * gamma.data()[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgamma.data_mut()[i] += grow[i] * xhat;
            dbeta.data_mut()[i] += grow[i];
        }
        let off = r * d;
        for i in 0..d {
            let xhat = (xrow[i] - m) * is;
            let dxhat = grow[i] * gamma.data()[i];
            dx.data_mut()[off + i] = is / d as f64 * (d as f64 * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// similarity / attention
// ---------------------------------------------------------------------------

fn row_norm(row: &[f64]) -> f64 {
    libm::sqrt(row.iter().map(|v| v * v).sum::<f64>())
}

pub(crate) fn l2norm_rows_fwd(x: &Tensor, eps: f64) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::InvalidShape { op: "l2norm", detail: alloc::format!("need 2-D, got {:?}", x.shape()) });
    }
    let mut out = x.clone();
    let d = x.shape()[1];
    for row in out.data_mut().chunks_mut(d) {
        let g = row_norm(row) + eps;
        for v in row.iter_mut() {
            *v /= g;
        }
    }
    Ok(out)
}

fn l2norm_rows_bwd(x: &Tensor, eps: f64, grad: &Tensor) -> Tensor {
    let d = x.shape()[1];
    let mut dx = Tensor::zeros(x.shape());
    for (r, (xrow, grow)) in x.data().chunks(d).zip(grad.data().chunks(d)).enumerate() {
        let norm = row_norm(xrow);
        let g = norm + eps;
        let dot: f64 = grow.iter().zip(xrow).map(|(gv, xv)| gv * xv).sum();
        let off = r * d;
        for i in 0..d {
            let mut v = grow[i] / g;
            if norm > 0.0 {
                v -= dot * xrow[i] / (norm * g * g);
            }
            dx.data_mut()[off + i] = v;
        }
    }
    dx
}

/// Guarded cosine: `<a,b> / max(||a|| * ||b||, eps)`. Exact cosine whenever
/// the norm product clears `eps`, finite at zero norms.
pub(crate) fn guarded_cos(a: &[f64], b: &[f64], eps: f64) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (libm::sqrt(na) * libm::sqrt(nb)).max(eps)
}

/// d cos(a,b) / d a, with the zero-norm guard.
fn cos_grad_wrt_a(a: &[f64], b: &[f64], eps: f64, out: &mut [f64], scale: f64) {
    let na = row_norm(a);
    let nb = row_norm(b);
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let denom = (na * nb).max(eps);
    if na * nb > eps {
        for i in 0..a.len() {
            out[i] += scale * (b[i] / denom - dot * a[i] / (na * na * denom));
        }
    } else {
        // inside the guard the denominator is the constant eps
        for i in 0..a.len() {
            out[i] += scale * b[i] / denom;
        }
    }
}

pub(crate) fn cosine_sim_fwd(a: &Tensor, b: &Tensor, eps: f64) -> Result<Tensor> {
    a.same_shape(b)?;
    if a.ndim() != 2 {
        return Err(Error::InvalidShape { op: "cosine_sim", detail: alloc::format!("need 2-D, got {:?}", a.shape()) });
    }
    let (n, d) = (a.shape()[0], a.shape()[1]);
    let mut out = Tensor::zeros(&[n]);
    for i in 0..n {
        out.data_mut()[i] = guarded_cos(&a.data()[i * d..(i + 1) * d], &b.data()[i * d..(i + 1) * d], eps);
    }
    Ok(out)
}

pub(crate) fn attention_fwd(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    for t in [q, k, v] {
        if t.ndim() != 3 {
            return Err(Error::InvalidShape { op: "attention", detail: alloc::format!("need 3-D, got {:?}", t.shape()) });
        }
    }
    q.same_shape(k)?;
    q.same_shape(v)?;
    let (n, l, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut weights = Tensor::zeros(&[n, l, l]);
    for ni in 0..n {
        for i in 0..l {
            // scores then in-row softmax
            let mut m = f64::NEG_INFINITY;
            for j in 0..l {
                let mut s = 0.0;
                for d in 0..dh {
                    s += q.at3(ni, i, d) * k.at3(ni, j, d);
                }
                s *= scale;
                let idx = (ni * l + i) * l + j;
                weights.data_mut()[idx] = s;
                m = m.max(s);
            }
            let mut sum = 0.0;
            for j in 0..l {
                let idx = (ni * l + i) * l + j;
                let e = libm::exp(weights.data()[idx] - m);
                weights.data_mut()[idx] = e;
                sum += e;
            }
            for j in 0..l {
                let idx = (ni * l + i) * l + j;
                weights.data_mut()[idx] /= sum;
            }
        }
    }
    let mut out = Tensor::zeros(&[n, l, dh]);
    for ni in 0..n {
        for i in 0..l {
            for j in 0..l {
                let a = weights.at3(ni, i, j);
                if a == 0.0 {
                    continue;
                }
                for d in 0..dh {
                    let idx = (ni * l + i) * dh + d;
                    out.data_mut()[idx] += a * v.at3(ni, j, d);
                }
            }
        }
    }
    Ok((out, weights))
}

fn attention_bwd(q: &Tensor, k: &Tensor, v: &Tensor, weights: &Tensor, grad: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, l, dh) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let scale = 1.0 / libm::sqrt(dh as f64);
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut da = vec![0.0; l];
    for ni in 0..n {
        for i in 0..l {
            // dv and da
            for j in 0..l {
                let a = weights.at3(ni, i, j);
                let mut dot = 0.0;
                for d in 0..dh {
                    let g = grad.at3(ni, i, d);
                    dv.data_mut()[(ni * l + j) * dh + d] += a * g;
                    dot += g * v.at3(ni, j, d);
                }
                da[j] = dot;
            }
            // softmax backward -> ds, then dq/dk
            let arow = &weights.data()[(ni * l + i) * l..(ni * l + i + 1) * l];
            let inner: f64 = da.iter().zip(arow).map(|(d, a)| d * a).sum();
            for j in 0..l {
                let ds = arow[j] * (da[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                for d in 0..dh {
                    dq.data_mut()[(ni * l + i) * dh + d] += ds * k.at3(ni, j, d);
                    dk.data_mut()[(ni * l + j) * dh + d] += ds * q.at3(ni, i, d);
                }
            }
        }
    }
    (dq, dk, dv)
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

const LOG_EPS: f64 = 1e-12;

pub(crate) fn focal_fwd(logits: &Tensor, labels: &[usize], gamma: f64) -> Result<Tensor> {
    if logits.ndim() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::InvalidShape {
            op: "focal_loss",
            detail: alloc::format!("logits {:?} vs {} labels", logits.shape(), labels.len()),
        });
    }
    let c = logits.shape()[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::ClassOutOfRange { got: bad, classes: c });
    }
    if gamma < 0.0 {
        return Err(Error::InvalidConfig(alloc::format!("focal gamma {gamma} < 0")));
    }
    let probs = softmax_fwd(logits)?;
    let n = labels.len();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let pt = probs.at2(i, y);
        let w = if gamma == 0.0 { 1.0 } else { libm::pow(1.0 - pt, gamma) };
        total += -w * libm::log(pt + LOG_EPS);
    }
    Ok(Tensor::scalar(total / n as f64))
}

fn focal_bwd(logits: &Tensor, labels: &[usize], gamma: f64, grad: f64) -> Tensor {
    let probs = softmax_fwd(logits).expect("shape checked in fwd");
    let (n, c) = (logits.shape()[0], logits.shape()[1]);
    let mut dx = Tensor::zeros(logits.shape());
    let gn = grad / n as f64;
    for (i, &y) in labels.iter().enumerate() {
        let pt = probs.at2(i, y);
        // dL/dp_t for L = -(1-p_t)^g * ln(p_t + eps)
        let dl_dpt = if gamma == 0.0 {
            -1.0 / (pt + LOG_EPS)
        } else {
            gamma * libm::pow(1.0 - pt, gamma - 1.0) * libm::log(pt + LOG_EPS) - libm::pow(1.0 - pt, gamma) / (pt + LOG_EPS)
        };
        for j in 0..c {
            let dpt_dlogit = pt * (if j == y { 1.0 } else { 0.0 } - probs.at2(i, j));
            dx.data_mut()[i * c + j] = gn * dl_dpt * dpt_dlogit;
        }
    }
    dx
}

pub(crate) fn intra_fwd(z: &Tensor, protos: &Tensor, labels: &[usize], align: &[f64], eps: f64) -> Result<Tensor> {
    if z.ndim() != 2 || protos.ndim() != 2 || z.shape()[1] != protos.shape()[1] {
        return Err(Error::InvalidShape {
            op: "intra_term",
            detail: alloc::format!("z {:?} protos {:?}", z.shape(), protos.shape()),
        });
    }
    let c = protos.shape()[0];
    if align.len() != c {
        return Err(Error::ShapeMismatch { expected: vec![c], got: vec![align.len()] });
    }
    if z.shape()[0] != labels.len() {
        return Err(Error::ShapeMismatch { expected: vec![z.shape()[0]], got: vec![labels.len()] });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::ClassOutOfRange { got: bad, classes: c });
    }
    let n = labels.len();
    let mut out = Tensor::zeros(&[n]);
    for (i, &y) in labels.iter().enumerate() {
        let cos = guarded_cos(z.row(i), protos.row(y), eps);
        out.data_mut()[i] = align[y] * (1.0 - cos);
    }
    Ok(out)
}

fn intra_bwd(z: &Tensor, protos: &Tensor, labels: &[usize], align: &[f64], eps: f64, grad: &Tensor) -> (Tensor, Tensor) {
    let mut dz = Tensor::zeros(z.shape());
    let mut dp = Tensor::zeros(protos.shape());
    let d = z.shape()[1];
    for (i, &y) in labels.iter().enumerate() {
        let scale = -grad.data()[i] * align[y];
        if scale == 0.0 {
            continue;
        }
        let zrow = z.row(i);
        let prow = protos.row(y);
        cos_grad_wrt_a(zrow, prow, eps, &mut dz.data_mut()[i * d..(i + 1) * d], scale);
        cos_grad_wrt_a(prow, zrow, eps, &mut dp.data_mut()[y * d..(y + 1) * d], scale);
    }
    (dz, dp)
}

pub(crate) fn inter_fwd(z: &Tensor, labels: &[usize], repel: &Tensor, tau: f64, eps: f64) -> Result<(Tensor, usize)> {
    if z.ndim() != 2 || z.shape()[0] != labels.len() {
        return Err(Error::InvalidShape {
            op: "inter_term",
            detail: alloc::format!("z {:?} vs {} labels", z.shape(), labels.len()),
        });
    }
    let c = repel.shape()[0];
    if repel.ndim() != 2 || repel.shape()[1] != c {
        return Err(Error::InvalidShape { op: "inter_term", detail: alloc::format!("repel {:?}", repel.shape()) });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::ClassOutOfRange { got: bad, classes: c });
    }
    if tau <= 0.0 {
        return Err(Error::InvalidConfig(alloc::format!("inter tau {tau} <= 0")));
    }
    let n = labels.len();
    let cos = pairwise_cos(z, eps);
    let mut out = Tensor::zeros(&[n]);
    let mut skipped = 0;
    for i in 0..n {
        // weighted log-sum-exp with max shift over positively weighted pairs
        let mut max_s = f64::NEG_INFINITY;
        let mut any = false;
        for j in 0..n {
            if j == i {
                continue;
            }
            let w = repel.at2(labels[i], labels[j]);
            if w > 0.0 {
                any = true;
                max_s = max_s.max(cos.at2(i, j) / tau);
            }
        }
        if !any {
            skipped += 1;
            continue;
        }
        let mut acc = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let w = repel.at2(labels[i], labels[j]);
            if w > 0.0 {
                acc += w * libm::exp(cos.at2(i, j) / tau - max_s);
            }
        }
        out.data_mut()[i] = max_s + libm::log(acc);
    }
    Ok((out, skipped))
}

fn inter_bwd(z: &Tensor, labels: &[usize], repel: &Tensor, tau: f64, eps: f64, grad: &Tensor) -> Tensor {
    let n = labels.len();
    let d = z.shape()[1];
    let cos = pairwise_cos(z, eps);
    let mut dz = Tensor::zeros(z.shape());
    for i in 0..n {
        let g = grad.data()[i];
        if g == 0.0 {
            continue;
        }
        let mut max_s = f64::NEG_INFINITY;
        let mut any = false;
        for j in 0..n {
            if j != i && repel.at2(labels[i], labels[j]) > 0.0 {
                any = true;
                max_s = max_s.max(cos.at2(i, j) / tau);
            }
        }
        if !any {
            continue;
        }
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                let w = repel.at2(labels[i], labels[j]);
                if w > 0.0 {
                    denom += w * libm::exp(cos.at2(i, j) / tau - max_s);
                }
            }
        }
        for j in 0..n {
            if j == i {
                continue;
            }
            let w = repel.at2(labels[i], labels[j]);
            if w <= 0.0 {
                continue;
            }
            // d out_i / d cos_ij = softmax weight / tau
            let p = w * libm::exp(cos.at2(i, j) / tau - max_s) / denom;
            let scale = g * p / tau;
            let (zi, zj) = (z.row(i), z.row(j));
            cos_grad_wrt_a(zi, zj, eps, &mut dz.data_mut()[i * d..(i + 1) * d], scale);
            cos_grad_wrt_a(zj, zi, eps, &mut dz.data_mut()[j * d..(j + 1) * d], scale);
        }
    }
    dz
}

fn pairwise_cos(z: &Tensor, eps: f64) -> Tensor {
    let (n, d) = (z.shape()[0], z.shape()[1]);
    let norms: Vec<f64> = (0..n).map(|i| row_norm(z.row(i))).collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut dot = 0.0;
            let (ri, rj) = (z.row(i), z.row(j));
            for t in 0..d {
                dot += ri[t] * rj[t];
            }
            let v = dot / (norms[i] * norms[j]).max(eps);
            out.set2(i, j, v);
            out.set2(j, i, v);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// backward dispatch
// ---------------------------------------------------------------------------

pub(crate) fn backward_node(tape: &Tape, idx: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let node = &tape.nodes[idx];
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, *a, grad.clone());
            accumulate(grads, *b, grad.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, grad.clone());
            accumulate(grads, *b, grad.map(|g| -g));
        }
        Op::Mul(a, b) => {
            accumulate(grads, *a, super::zip(grad, tape.value(*b), |g, y| g * y));
            accumulate(grads, *b, super::zip(grad, tape.value(*a), |g, x| g * x));
        }
        Op::AddScalar(a) => accumulate(grads, *a, grad.clone()),
        Op::MulScalar(a, c) => accumulate(grads, *a, grad.map(|g| g * c)),
        Op::AddBcast0(a, b) => {
            accumulate(grads, *a, grad.clone());
            let inner = tape.value(*b).numel();
            let mut db = Tensor::zeros(tape.value(*b).shape());
            for (i, g) in grad.data().iter().enumerate() {
                db.data_mut()[i % inner] += g;
            }
            accumulate(grads, *b, db);
        }
        Op::BiasAddChan(x, bias) => {
            accumulate(grads, *x, grad.clone());
            let xs = tape.value(*x).shape();
            let (b, c, l) = (xs[0], xs[1], xs[2]);
            let mut db = Tensor::zeros(&[c]);
            for bi in 0..b {
                for ci in 0..c {
                    let off = (bi * c + ci) * l;
                    db.data_mut()[ci] += grad.data()[off..off + l].iter().sum::<f64>();
                }
            }
            accumulate(grads, *bias, db);
        }
        Op::Matmul { a, b, transpose_b } => {
            let (av, bv) = (tape.value(*a), tape.value(*b));
            if *transpose_b {
                // y = a b^T: da = g b, db = g^T a
                accumulate(grads, *a, matmul_fwd(grad, bv, false)?);
                let mut gt = permute_fwd(grad, &[1, 0])?;
                gt = matmul_fwd(&gt, av, false)?;
                accumulate(grads, *b, gt);
            } else {
                // y = a b: da = g b^T, db = a^T g
                accumulate(grads, *a, matmul_fwd(grad, bv, true)?);
                let at = permute_fwd(av, &[1, 0])?;
                accumulate(grads, *b, matmul_fwd(&at, grad, false)?);
            }
        }
        Op::Conv1d { x, w, stride, pad } => {
            let (dx, dw) = conv1d_bwd(tape.value(*x), tape.value(*w), grad, *stride, *pad);
            accumulate(grads, *x, dx);
            accumulate(grads, *w, dw);
        }
        Op::MaxPool1d { x, argmax, .. } => {
            let mut dx = Tensor::zeros(tape.value(*x).shape());
            for (o, &src) in argmax.iter().enumerate() {
                if src != usize::MAX {
                    dx.data_mut()[src] += grad.data()[o];
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::AvgPoolAll { x } => {
            let xs = tape.value(*x).shape();
            let l = xs[2];
            let mut dx = Tensor::zeros(xs);
            for bc in 0..xs[0] * xs[1] {
                let g = grad.data()[bc] / l as f64;
                for t in 0..l {
                    dx.data_mut()[bc * l + t] = g;
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::BatchNorm { x, gamma, beta, mean, inv_std, train } => {
            let (dx, dgamma, dbeta) = batchnorm_bwd(tape.value(*x), tape.value(*gamma), mean, inv_std, *train, grad);
            accumulate(grads, *x, dx);
            accumulate(grads, *gamma, dgamma);
            accumulate(grads, *beta, dbeta);
        }
        Op::LayerNorm { x, gamma, beta, mean, inv_std } => {
            let (dx, dgamma, dbeta) = layernorm_bwd(tape.value(*x), tape.value(*gamma), mean, inv_std, grad);
            accumulate(grads, *x, dx);
            accumulate(grads, *gamma, dgamma);
            accumulate(grads, *beta, dbeta);
        }
        Op::Relu(a) => {
            accumulate(grads, *a, super::zip(grad, tape.value(*a), |g, x| if x > 0.0 { g } else { 0.0 }));
        }
        Op::Gelu(a) => {
            accumulate(grads, *a, super::zip(grad, tape.value(*a), |g, x| g * gelu_grad(x)));
        }
        Op::Sigmoid(a) => {
            accumulate(grads, *a, super::zip(grad, &node.value, |g, y| g * y * (1.0 - y)));
        }
        Op::Log(a) => {
            accumulate(grads, *a, super::zip(grad, tape.value(*a), |g, x| g / x));
        }
        Op::Exp(a) => {
            accumulate(grads, *a, super::zip(grad, &node.value, |g, y| g * y));
        }
        Op::Softmax(a) => {
            accumulate(grads, *a, softmax_bwd(&node.value, grad));
        }
        Op::Concat2 { parts } => {
            let rows = node.value.shape()[0];
            let mut off = 0;
            for p in parts {
                let w = tape.value(*p).shape()[1];
                let mut dp = Tensor::zeros(&[rows, w]);
                for r in 0..rows {
                    dp.row_mut(r).copy_from_slice(&grad.row(r)[off..off + w]);
                }
                accumulate(grads, *p, dp);
                off += w;
            }
        }
        Op::Reshape(a) => {
            accumulate(grads, *a, grad.reshaped(tape.value(*a).shape())?);
        }
        Op::Permute { x, perm } => {
            accumulate(grads, *x, permute_fwd(grad, &invert_perm(perm))?);
        }
        Op::MeanAxis1(a) => {
            let xs = tape.value(*a).shape();
            let (b, l, d) = (xs[0], xs[1], xs[2]);
            let mut dx = Tensor::zeros(xs);
            for bi in 0..b {
                for li in 0..l {
                    for di in 0..d {
                        dx.data_mut()[(bi * l + li) * d + di] = grad.data()[bi * d + di] / l as f64;
                    }
                }
            }
            accumulate(grads, *a, dx);
        }
        Op::MeanAll(a) => {
            let xv = tape.value(*a);
            let g = grad.data()[0] / xv.numel() as f64;
            accumulate(grads, *a, Tensor::filled(xv.shape(), g));
        }
        Op::SumAll(a) => {
            let xv = tape.value(*a);
            accumulate(grads, *a, Tensor::filled(xv.shape(), grad.data()[0]));
        }
        Op::Dropout { x, keep_scale, mask } => {
            let mut dx = grad.clone();
            for (v, &keep) in dx.data_mut().iter_mut().zip(mask) {
                *v = if keep { *v * keep_scale } else { 0.0 };
            }
            accumulate(grads, *x, dx);
        }
        Op::L2NormRows { x, eps } => {
            accumulate(grads, *x, l2norm_rows_bwd(tape.value(*x), *eps, grad));
        }
        Op::CosineSim { a, b, eps } => {
            let (av, bv) = (tape.value(*a), tape.value(*b));
            let d = av.shape()[1];
            let mut da = Tensor::zeros(av.shape());
            let mut db = Tensor::zeros(bv.shape());
            for i in 0..av.shape()[0] {
                let g = grad.data()[i];
                if g == 0.0 {
                    continue;
                }
                cos_grad_wrt_a(av.row(i), bv.row(i), *eps, &mut da.data_mut()[i * d..(i + 1) * d], g);
                cos_grad_wrt_a(bv.row(i), av.row(i), *eps, &mut db.data_mut()[i * d..(i + 1) * d], g);
            }
            accumulate(grads, *a, da);
            accumulate(grads, *b, db);
        }
        Op::Attention { q, k, v, weights } => {
            let (dq, dk, dv) = attention_bwd(tape.value(*q), tape.value(*k), tape.value(*v), weights, grad);
            accumulate(grads, *q, dq);
            accumulate(grads, *k, dk);
            accumulate(grads, *v, dv);
        }
        Op::FocalLoss { logits, labels, gamma } => {
            accumulate(grads, *logits, focal_bwd(tape.value(*logits), labels, *gamma, grad.data()[0]));
        }
        Op::IntraTerm { z, protos, labels, align, eps } => {
            let (dz, dp) = intra_bwd(tape.value(*z), tape.value(*protos), labels, align, *eps, grad);
            accumulate(grads, *z, dz);
            accumulate(grads, *protos, dp);
        }
        Op::InterTerm { z, labels, repel, tau, eps } => {
            accumulate(grads, *z, inter_bwd(tape.value(*z), labels, repel, *tau, *eps, grad));
        }
        Op::WeightedMean { x, weights } => {
            let g = grad.data()[0];
            let n = weights.len() as f64;
            let dx = Tensor::new(&[weights.len()], weights.iter().map(|w| g * w / n).collect())?;
            accumulate(grads, *x, dx);
        }
    }
    Ok(())
}

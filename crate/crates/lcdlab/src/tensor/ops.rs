//! The differentiable op set.
//!
//! Binary ops require exactly matching shapes; the only broadcasting ops are
//! the documented [`Tensor::add_bias`] (1-D bias over the last axis) and the
//! explicit middle-axis expansion [`Tensor::expand_mid`].

use std::rc::Rc;

use rayon::prelude::*;

use super::{check_finite, numel, strides, Tensor};
use crate::error::{Error, Result};

/// Below this flop count a matmul runs on the calling thread.
const PAR_FLOP_THRESHOLD: usize = 1 << 18;
/// Fixed row-chunk size for parallel 2-D matmul; independent of thread count
/// so results are identical regardless of the executing pool.
const ROW_CHUNK: usize = 64;

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

// Row-major C[m,n] += / = A@B with arbitrary A/B strides.
#[allow(clippy::too_many_arguments)]
fn sgemm_into(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let flops = m * k * n;
    if flops >= PAR_FLOP_THRESHOLD && m > ROW_CHUNK {
        let a_ptr = AssertSend(a.as_ptr());
        c.par_chunks_mut(ROW_CHUNK * n).enumerate().for_each(|(ci, chunk)| {
            let row0 = ci * ROW_CHUNK;
            let rows = chunk.len() / n;
            unsafe {
                matrixmultiply::sgemm(
                    rows,
                    k,
                    n,
                    1.0,
                    a_ptr.get().offset(row0 as isize * rsa),
                    rsa,
                    csa,
                    b.as_ptr(),
                    rsb,
                    csb,
                    0.0,
                    chunk.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        });
    } else {
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }
}

struct AssertSend<T>(T);
unsafe impl<T> Send for AssertSend<T> {}
unsafe impl<T> Sync for AssertSend<T> {}

impl<T: Copy> AssertSend<T> {
    // method (not field) access so closures capture the Sync wrapper
    fn get(&self) -> T {
        self.0
    }
}

fn unary(
    op: &'static str,
    x: &Tensor,
    f: impl Fn(f32) -> f32,
    df: impl Fn(f32, f32) -> f32 + 'static,
) -> Result<Tensor> {
    let out: Vec<f32> = x.data_ref().iter().map(|&v| f(v)).collect();
    check_finite(op, &out)?;
    let xs = x.clone();
    let ys = Rc::new(out.clone());
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |up, _needed| {
            let xd = xs.data_ref();
            let g = up
                .iter()
                .zip(xd.iter().zip(ys.iter()))
                .map(|(&u, (&xv, &yv))| u * df(xv, yv))
                .collect();
            vec![Some(g)]
        }),
    ))
}

impl Tensor {
    // ── elementwise ───────────────────────────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err("add", self.shape(), other.shape()));
        }
        let out: Vec<f32> = self
            .data_ref()
            .iter()
            .zip(other.data_ref().iter())
            .map(|(a, b)| a + b)
            .collect();
        check_finite("add", &out)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|up, needed| {
                vec![
                    needed[0].then(|| up.to_vec()),
                    needed[1].then(|| up.to_vec()),
                ]
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err("sub", self.shape(), other.shape()));
        }
        let out: Vec<f32> = self
            .data_ref()
            .iter()
            .zip(other.data_ref().iter())
            .map(|(a, b)| a - b)
            .collect();
        check_finite("sub", &out)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(|up, needed| {
                vec![
                    needed[0].then(|| up.to_vec()),
                    needed[1].then(|| up.iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(shape_err("mul", self.shape(), other.shape()));
        }
        let out: Vec<f32> = self
            .data_ref()
            .iter()
            .zip(other.data_ref().iter())
            .map(|(a, b)| a * b)
            .collect();
        check_finite("mul", &out)?;
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |up, needed| {
                let ga = needed[0].then(|| {
                    up.iter()
                        .zip(b.data_ref().iter())
                        .map(|(u, bv)| u * bv)
                        .collect()
                });
                let gb = needed[1].then(|| {
                    up.iter()
                        .zip(a.data_ref().iter())
                        .map(|(u, av)| u * av)
                        .collect()
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&self, s: f32) -> Result<Tensor> {
        unary("scale", self, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f32) -> Result<Tensor> {
        unary("add_scalar", self, move |v| v + s, |_, _| 1.0)
    }

    pub fn square(&self) -> Result<Tensor> {
        unary("square", self, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn sqrt_elem(&self) -> Result<Tensor> {
        unary("sqrt", self, |v| v.sqrt(), |_, y| 0.5 / y)
    }

    pub fn gelu(&self) -> Result<Tensor> {
        const K: f32 = 0.797_884_6; // sqrt(2/pi)
        const A: f32 = 0.044715;
        unary(
            "gelu",
            self,
            |x| 0.5 * x * (1.0 + (K * (x + A * x * x * x)).tanh()),
            |x, _| {
                let u = K * (x + A * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * A * x * x)
            },
        )
    }

    pub fn silu(&self) -> Result<Tensor> {
        unary(
            "silu",
            self,
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    // ── broadcast ops (documented) ────────────────────────────────────

    /// Broadcast-add a 1-D bias over the last axis.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let d = *self.shape().last().unwrap_or(&0);
        if bias.shape() != [d] {
            return Err(shape_err("add_bias", self.shape(), bias.shape()));
        }
        let bd = bias.data_ref();
        let out: Vec<f32> = self
            .data_ref()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % d])
            .collect();
        drop(bd);
        check_finite("add_bias", &out)?;
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), bias.clone()],
            Box::new(move |up, needed| {
                let gx = needed[0].then(|| up.to_vec());
                let gb = needed[1].then(|| {
                    let mut g = vec![0.0f32; d];
                    for (i, u) in up.iter().enumerate() {
                        g[i % d] += u;
                    }
                    g
                });
                vec![gx, gb]
            }),
        ))
    }

    /// Expand `[b, d]` to `[b, reps, d]` by repetition (explicit broadcast
    /// used for per-sample conditioning over token axes).
    pub fn expand_mid(&self, reps: usize) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::InvalidArg {
                op: "expand_mid",
                msg: format!("expected rank-2 input, got {:?}", self.shape()),
            });
        }
        let (b, d) = (self.shape()[0], self.shape()[1]);
        let xd = self.data_ref();
        let mut out = Vec::with_capacity(b * reps * d);
        for bi in 0..b {
            let row = &xd[bi * d..(bi + 1) * d];
            for _ in 0..reps {
                out.extend_from_slice(row);
            }
        }
        drop(xd);
        check_finite("expand_mid", &out)?;
        Ok(Tensor::from_op(
            vec![b, reps, d],
            out,
            vec![self.clone()],
            Box::new(move |up, _| {
                let mut g = vec![0.0f32; b * d];
                for bi in 0..b {
                    for r in 0..reps {
                        let src = &up[(bi * reps + r) * d..(bi * reps + r + 1) * d];
                        for (gv, u) in g[bi * d..(bi + 1) * d].iter_mut().zip(src) {
                            *gv += u;
                        }
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Scale each leading-axis row by its own constant factor (explicit
    /// per-sample broadcast; factors carry no gradient).
    pub fn mul_rows(&self, factors: &[f32]) -> Result<Tensor> {
        let b = *self.shape().first().unwrap_or(&0);
        if factors.len() != b {
            return Err(Error::InvalidArg {
                op: "mul_rows",
                msg: format!("{} factors for leading extent {}", factors.len(), b),
            });
        }
        let row = if b == 0 { 0 } else { self.len() / b };
        let out: Vec<f32> = self
            .data_ref()
            .iter()
            .enumerate()
            .map(|(i, v)| v * factors[i / row])
            .collect();
        check_finite("mul_rows", &out)?;
        let fs = factors.to_vec();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |up, _| {
                vec![Some(
                    up.iter()
                        .enumerate()
                        .map(|(i, u)| u * fs[i / row])
                        .collect(),
                )]
            }),
        ))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn narrow_cols(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.shape().len() != 2 || start + len > self.shape()[1] {
            return Err(Error::InvalidArg {
                op: "narrow_cols",
                msg: format!(
                    "columns [{start}, {}) out of range for shape {:?}",
                    start + len,
                    self.shape()
                ),
            });
        }
        let (rows, cols) = (self.shape()[0], self.shape()[1]);
        let xd = self.data_ref();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xd[r * cols + start..r * cols + start + len]);
        }
        drop(xd);
        Ok(Tensor::from_op(
            vec![rows, len],
            out,
            vec![self.clone()],
            Box::new(move |up, _| {
                let mut g = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    g[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&up[r * len..(r + 1) * len]);
                }
                vec![Some(g)]
            }),
        ))
    }

    // ── matmul family ─────────────────────────────────────────────────

    /// `[m,k] @ [k,n]` or batched `[b,m,k] @ [b,k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        match (self.shape().len(), other.shape().len()) {
            (2, 2) => self.matmul2(other),
            (3, 3) => self.matmul3(other),
            _ => Err(shape_err("matmul", self.shape(), other.shape())),
        }
    }

    fn matmul2(&self, other: &Tensor) -> Result<Tensor> {
        let (m, ka) = (self.shape()[0], self.shape()[1]);
        let (kb, n) = (other.shape()[0], other.shape()[1]);
        if ka != kb {
            return Err(shape_err("matmul", self.shape(), other.shape()));
        }
        let mut out = vec![0.0f32; m * n];
        sgemm_into(
            m, ka, n,
            &self.data_ref(), ka as isize, 1,
            &other.data_ref(), n as isize, 1,
            &mut out,
        );
        check_finite("matmul", &out)?;
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |up, needed| {
                let ga = needed[0].then(|| {
                    let mut g = vec![0.0f32; m * ka];
                    // dA = dC @ B^T
                    sgemm_into(m, n, ka, up, n as isize, 1, &b.data_ref(), 1, n as isize, &mut g);
                    g
                });
                let gb = needed[1].then(|| {
                    let mut g = vec![0.0f32; ka * n];
                    // dB = A^T @ dC
                    sgemm_into(ka, m, n, &a.data_ref(), 1, ka as isize, up, n as isize, 1, &mut g);
                    g
                });
                vec![ga, gb]
            }),
        ))
    }

    fn matmul3(&self, other: &Tensor) -> Result<Tensor> {
        let (ba, m, ka) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (bb, kb, n) = (other.shape()[0], other.shape()[1], other.shape()[2]);
        if ba != bb || ka != kb {
            return Err(shape_err("matmul", self.shape(), other.shape()));
        }
        let mut out = vec![0.0f32; ba * m * n];
        {
            let ad = self.data_ref();
            let bd = other.data_ref();
            let a_ptr = AssertSend(ad.as_ptr());
            let b_ptr = AssertSend(bd.as_ptr());
            out.par_chunks_mut(m * n).enumerate().for_each(|(bi, chunk)| unsafe {
                matrixmultiply::sgemm(
                    m, ka, n, 1.0,
                    a_ptr.get().add(bi * m * ka), ka as isize, 1,
                    b_ptr.get().add(bi * ka * n), n as isize, 1,
                    0.0, chunk.as_mut_ptr(), n as isize, 1,
                );
            });
        }
        check_finite("matmul", &out)?;
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![ba, m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |up, needed| {
                let ga = needed[0].then(|| {
                    let mut g = vec![0.0f32; ba * m * ka];
                    let bd = b.data_ref();
                    let up_ptr = AssertSend(up.as_ptr());
                    let b_ptr = AssertSend(bd.as_ptr());
                    g.par_chunks_mut(m * ka).enumerate().for_each(|(bi, chunk)| unsafe {
                        matrixmultiply::sgemm(
                            m, n, ka, 1.0,
                            up_ptr.get().add(bi * m * n), n as isize, 1,
                            b_ptr.get().add(bi * ka * n), 1, n as isize,
                            0.0, chunk.as_mut_ptr(), ka as isize, 1,
                        );
                    });
                    g
                });
                let gb = needed[1].then(|| {
                    let mut g = vec![0.0f32; ba * ka * n];
                    let ad = a.data_ref();
                    let up_ptr = AssertSend(up.as_ptr());
                    let a_ptr = AssertSend(ad.as_ptr());
                    g.par_chunks_mut(ka * n).enumerate().for_each(|(bi, chunk)| unsafe {
                        matrixmultiply::sgemm(
                            ka, m, n, 1.0,
                            a_ptr.get().add(bi * m * ka), 1, ka as isize,
                            up_ptr.get().add(bi * m * n), n as isize, 1,
                            0.0, chunk.as_mut_ptr(), n as isize, 1,
                        );
                    });
                    g
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `x @ w^T + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&self, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 2 || w.shape().len() != 2 || self.shape()[1] != w.shape()[1] {
            return Err(shape_err("linear", self.shape(), w.shape()));
        }
        let (n, din) = (self.shape()[0], self.shape()[1]);
        let dout = w.shape()[0];
        if b.shape() != [dout] {
            return Err(shape_err("linear", w.shape(), b.shape()));
        }
        let mut out = vec![0.0f32; n * dout];
        sgemm_into(
            n, din, dout,
            &self.data_ref(), din as isize, 1,
            &w.data_ref(), 1, din as isize,
            &mut out,
        );
        {
            let bd = b.data_ref();
            for row in out.chunks_mut(dout) {
                for (v, bv) in row.iter_mut().zip(bd.iter()) {
                    *v += bv;
                }
            }
        }
        check_finite("linear", &out)?;
        let (xs, ws) = (self.clone(), w.clone());
        Ok(Tensor::from_op(
            vec![n, dout],
            out,
            vec![self.clone(), w.clone(), b.clone()],
            Box::new(move |up, needed| {
                let gx = needed[0].then(|| {
                    let mut g = vec![0.0f32; n * din];
                    // dX = dY @ W
                    sgemm_into(n, dout, din, up, dout as isize, 1, &ws.data_ref(), din as isize, 1, &mut g);
                    g
                });
                let gw = needed[1].then(|| {
                    let mut g = vec![0.0f32; dout * din];
                    // dW = dY^T @ X
                    sgemm_into(dout, n, din, up, 1, dout as isize, &xs.data_ref(), din as isize, 1, &mut g);
                    g
                });
                let gb = needed[2].then(|| {
                    let mut g = vec![0.0f32; dout];
                    for row in up.chunks(dout) {
                        for (gv, u) in g.iter_mut().zip(row) {
                            *gv += u;
                        }
                    }
                    g
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    // ── normalization and attention ───────────────────────────────────

    /// Layer norm over the last axis with learnable gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
        let d = *self.shape().last().ok_or(Error::InvalidArg {
            op: "layer_norm",
            msg: "rank-0 input".into(),
        })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(shape_err("layer_norm", self.shape(), gain.shape()));
        }
        let rows = self.len() / d;
        let xd = self.data_ref();
        let gd = gain.data_ref();
        let bd = bias.data_ref();
        let mut out = vec![0.0f32; self.len()];
        let mut xhat = vec![0.0f32; self.len()];
        let mut inv_std = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for i in 0..d {
                let xh = (row[i] - mean) * inv;
                xhat[r * d + i] = xh;
                out[r * d + i] = gd[i] * xh + bd[i];
            }
        }
        drop((xd, gd, bd));
        check_finite("layer_norm", &out)?;
        let xhat = Rc::new(xhat);
        let inv_std = Rc::new(inv_std);
        let gains = gain.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |up, needed| {
                let gd = gains.data_ref();
                let gx = needed[0].then(|| {
                    let mut g = vec![0.0f32; up.len()];
                    for r in 0..rows {
                        let u = &up[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut s1 = 0.0f32; // mean of dxhat
                        let mut s2 = 0.0f32; // mean of dxhat*xhat
                        for i in 0..d {
                            let dxh = u[i] * gd[i];
                            s1 += dxh;
                            s2 += dxh * xh[i];
                        }
                        s1 /= d as f32;
                        s2 /= d as f32;
                        for i in 0..d {
                            let dxh = u[i] * gd[i];
                            g[r * d + i] = inv_std[r] * (dxh - s1 - xh[i] * s2);
                        }
                    }
                    g
                });
                let gg = needed[1].then(|| {
                    let mut g = vec![0.0f32; d];
                    for r in 0..rows {
                        for i in 0..d {
                            g[i] += up[r * d + i] * xhat[r * d + i];
                        }
                    }
                    g
                });
                let gb = needed[2].then(|| {
                    let mut g = vec![0.0f32; d];
                    for r in 0..rows {
                        for i in 0..d {
                            g[i] += up[r * d + i];
                        }
                    }
                    g
                });
                vec![gx, gg, gb]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Tensor> {
        let d = *self.shape().last().ok_or(Error::InvalidArg {
            op: "softmax",
            msg: "rank-0 input".into(),
        })?;
        let xd = self.data_ref();
        let mut out = vec![0.0f32; self.len()];
        for (row_in, row_out) in xd.chunks(d).zip(out.chunks_mut(d)) {
            let max = row_in.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                let e = (v - max).exp();
                *o = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            row_out.iter_mut().for_each(|v| *v *= inv);
        }
        drop(xd);
        check_finite("softmax", &out)?;
        let ys = Rc::new(out.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |up, _| {
                let mut g = vec![0.0f32; up.len()];
                for (r, (u, y)) in up.chunks(d).zip(ys.chunks(d)).enumerate() {
                    let dot: f32 = u.iter().zip(y).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        g[r * d + i] = y[i] * (u[i] - dot);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Scaled dot-product attention over batched heads:
    /// `q, k, v: [b, t, dh]` -> `[b, t, dh]`. Composed from primitives.
    pub fn sdpa(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        if q.shape().len() != 3 || q.shape() != k.shape() || k.shape() != v.shape() {
            return Err(shape_err("sdpa", q.shape(), k.shape()));
        }
        let dh = q.shape()[2];
        let kt = k.permute(&[0, 2, 1])?;
        let scores = q.matmul(&kt)?.scale(1.0 / (dh as f32).sqrt())?;
        scores.softmax()?.matmul(v)
    }

    // ── reductions ────────────────────────────────────────────────────

    pub fn sum_all(&self) -> Result<Tensor> {
        let s: f32 = self.data_ref().iter().sum();
        if !s.is_finite() {
            return Err(Error::NonFinite { op: "sum" });
        }
        let n = self.len();
        Ok(Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |up, _| vec![Some(vec![up[0]; n])]),
        ))
    }

    pub fn mean_all(&self) -> Result<Tensor> {
        let n = self.len();
        let s: f32 = self.data_ref().iter().sum::<f32>() / n as f32;
        if !s.is_finite() {
            return Err(Error::NonFinite { op: "mean" });
        }
        Ok(Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |up, _| vec![Some(vec![up[0] / n as f32; n])]),
        ))
    }

    // ── shape ops ─────────────────────────────────────────────────────

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        if numel(new_shape) != self.len() {
            return Err(shape_err("reshape", self.shape(), new_shape));
        }
        let old = self.shape().to_vec();
        Ok(Tensor::from_op(
            new_shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |up, _| {
                let _ = &old;
                vec![Some(up.to_vec())]
            }),
        ))
    }

    /// General axis permutation.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.shape().len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidArg {
                op: "permute",
                msg: format!("invalid axes {:?} for shape {:?}", axes, self.shape()),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let out = permute_data(&self.data_ref(), self.shape(), axes);
        let inv: Vec<usize> = {
            let mut inv = vec![0; nd];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            inv
        };
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |up, _| vec![Some(permute_data(up, &os, &inv))]),
        ))
    }

    /// 2-D transpose convenience.
    pub fn transpose(&self) -> Result<Tensor> {
        self.permute(&[1, 0])
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::InvalidArg {
            op: "concat",
            msg: "empty input list".into(),
        })?;
        let nd = first.shape().len();
        if axis >= nd {
            return Err(Error::InvalidArg {
                op: "concat",
                msg: format!("axis {} out of range for rank {}", axis, nd),
            });
        }
        let mut out_shape = first.shape().to_vec();
        for p in &parts[1..] {
            if p.shape().len() != nd
                || (0..nd).any(|i| i != axis && p.shape()[i] != first.shape()[i])
            {
                return Err(shape_err("concat", first.shape(), p.shape()));
            }
            out_shape[axis] += p.shape()[axis];
        }
        // outer = product of dims before axis; inner = product after
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for p in parts {
                let pa = p.shape()[axis];
                let pd = p.data_ref();
                out.extend_from_slice(&pd[o * pa * inner..(o + 1) * pa * inner]);
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(Tensor::from_op(
            out_shape,
            out,
            parts.to_vec(),
            Box::new(move |up, needed| {
                let total_axis: usize = sizes.iter().sum();
                let mut grads: Vec<Option<Vec<f32>>> = sizes
                    .iter()
                    .zip(needed)
                    .map(|(&sz, &nd)| nd.then(|| Vec::with_capacity(outer * sz * inner)))
                    .collect();
                for o in 0..outer {
                    let mut off = 0usize;
                    for (pi, &sz) in sizes.iter().enumerate() {
                        let seg = &up[(o * total_axis + off) * inner..(o * total_axis + off + sz) * inner];
                        if let Some(g) = grads[pi].as_mut() {
                            g.extend_from_slice(seg);
                        }
                        off += sz;
                    }
                }
                grads
            }),
        ))
    }

    /// Row gather from a `[rows, d]` table (embedding lookup).
    pub fn index_rows(table: &Tensor, idx: &[usize]) -> Result<Tensor> {
        if table.shape().len() != 2 {
            return Err(Error::InvalidArg {
                op: "index_rows",
                msg: format!("expected rank-2 table, got {:?}", table.shape()),
            });
        }
        let (rows, d) = (table.shape()[0], table.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArg {
                op: "index_rows",
                msg: format!("index {} out of range for {} rows", bad, rows),
            });
        }
        let td = table.data_ref();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        drop(td);
        let idx = idx.to_vec();
        Ok(Tensor::from_op(
            vec![idx.len(), d],
            out,
            vec![table.clone()],
            Box::new(move |up, _| {
                let mut g = vec![0.0f32; rows * d];
                for (b, &i) in idx.iter().enumerate() {
                    for (gv, u) in g[i * d..(i + 1) * d].iter_mut().zip(&up[b * d..(b + 1) * d]) {
                        *gv += u;
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    // ── composed losses ───────────────────────────────────────────────

    /// Mean squared error, scalar output.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        self.sub(target)?.square()?.mean_all()
    }

    /// Elementwise pseudo-Huber distance, meaned:
    /// `mean_i( sqrt(r_i^2 + delta^2) - delta )`.
    pub fn pseudo_huber(&self, target: &Tensor, delta: f32) -> Result<Tensor> {
        self.sub(target)?
            .square()?
            .add_scalar(delta * delta)?
            .sqrt_elem()?
            .add_scalar(-delta)?
            .mean_all()
    }
}

fn permute_data(data: &[f32], in_shape: &[usize], axes: &[usize]) -> Vec<f32> {
    let nd = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let n = numel(in_shape);
    let mut out = vec![0.0f32; n];
    // out index -> in index: out coord j corresponds to in axis axes[j]
    for (oi, o) in out.iter_mut().enumerate() {
        let mut rem = oi;
        let mut ii = 0usize;
        for j in 0..nd {
            let c = rem / out_strides[j];
            rem %= out_strides[j];
            ii += c * in_strides[axes[j]];
        }
        *o = data[ii];
    }
    out
}

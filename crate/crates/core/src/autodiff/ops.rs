//! Differentiable primitives shared by every model component.
//!
//! Conventions: feature tensors are channels-last, so "per-pixel linear map"
//! and "1x1 convolution" are the same op ([`Tape::linear`]) acting on the
//! trailing axis. Weights are stored `[in, out]`.

use std::sync::Arc;

use super::tape::{Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::{matmul, numel, Real, Tensor};

fn same_shape<T: Real>(tape: &Tape<T>, a: Var, b: Var, op: &str) -> Result<()> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    ensure!(sa == sb, Shape, "{op}: shapes differ {:?} vs {:?}", sa, sb);
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y)?;
        Ok(self.push(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y)?;
        Ok(self.push(out, &[a, b], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.zip_map(&vb, |x, y| x * y)?;
        Ok(self.push(out, &[a, b], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&vb, |d, y| d * y).expect("shape")),
                need[1].then(|| g.zip_map(&va, |d, x| d * x).expect("shape")),
            ]
        }))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, &[a], move |g, _| vec![Some(g.map(|d| d * s))])
    }

    /// Sum of equally shaped values.
    pub fn add_n(&self, xs: &[Var]) -> Result<Var> {
        ensure!(!xs.is_empty(), InvalidArgument, "add_n of nothing");
        for &x in &xs[1..] {
            same_shape(self, xs[0], x, "add_n")?;
        }
        let mut out = (*self.value(xs[0])).clone();
        for &x in &xs[1..] {
            out.add_assign(&self.value(x));
        }
        let n = xs.len();
        Ok(self.push(out, xs, move |g, _| (0..n).map(|_| Some(g.clone())).collect()))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let src_shape = self.shape(a);
        let out = (*self.value(a)).clone().reshape(shape)?;
        Ok(self.push(out, &[a], move |g, _| {
            vec![Some(g.clone().reshape(&src_shape).expect("reshape back"))]
        }))
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(out, &[a], move |g, _| {
            vec![Some(g.zip_map(&va, |d, x| if x > T::zero() { d } else { T::zero() }).expect("shape"))]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.map(gelu_fwd);
        self.push(out, &[a], move |g, _| vec![Some(g.zip_map(&va, |d, x| d * gelu_grad(x)).expect("shape"))])
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let shape = va.shape().to_vec();
        let out = Tensor::scalar(va.sum());
        self.push(out, &[a], move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))])
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean over contiguous blocks: `[groups * k]` elements -> `[groups]`.
    pub fn mean_blocks(&self, a: Var, groups: usize) -> Result<Var> {
        let va = self.value(a);
        ensure!(
            groups > 0 && va.numel() % groups == 0,
            Shape,
            "mean_blocks: {} elements not divisible into {} groups",
            va.numel(),
            groups
        );
        let k = va.numel() / groups;
        let inv = T::lit(1.0 / k as f64);
        let data: Vec<T> = va.data().chunks(k).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let shape = va.shape().to_vec();
        let out = Tensor::from_vec(&[groups], data)?;
        Ok(self.push(out, &[a], move |g, _| {
            let mut gx = Vec::with_capacity(groups * k);
            for &d in g.data() {
                gx.extend(std::iter::repeat(d * inv).take(k));
            }
            vec![Some(Tensor::from_vec(&shape, gx).expect("shape"))]
        }))
    }

    /// Affine map over the trailing axis: `x[.., din] @ w[din, dout] + b[dout]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        ensure!(vw.rank() == 2, Shape, "linear weight must be rank 2, got {:?}", vw.shape());
        let (din, dout) = (vw.shape()[0], vw.shape()[1]);
        ensure!(
            vx.last_dim() == din,
            Shape,
            "linear: input trailing dim {} != weight in-dim {}",
            vx.last_dim(),
            din
        );
        let rows = vx.numel() / din;
        let mut out_shape = vx.shape().to_vec();
        *out_shape.last_mut().expect("rank >= 1") = dout;
        let mut out = vec![T::zero(); rows * dout];
        matmul(vx.data(), false, vw.data(), false, &mut out, rows, din, dout, false);
        let vb = match b {
            Some(b) => {
                let vb = self.value(b);
                ensure!(vb.shape() == [dout], Shape, "linear bias shape {:?} != [{dout}]", vb.shape());
                for row in out.chunks_mut(dout) {
                    for (o, &bv) in row.iter_mut().zip(vb.data()) {
                        *o += bv;
                    }
                }
                Some(vb)
            }
            None => None,
        };
        let out = Tensor::from_vec(&out_shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let x_shape = vx.shape().to_vec();
        let has_bias = vb.is_some();
        Ok(self.push(out, &parents, move |g, need| {
            let mut res = Vec::with_capacity(3);
            res.push(need[0].then(|| {
                let mut gx = vec![T::zero(); rows * din];
                matmul(g.data(), false, vw.data(), true, &mut gx, rows, dout, din, false);
                Tensor::from_vec(&x_shape, gx).expect("shape")
            }));
            res.push(need[1].then(|| {
                let mut gw = vec![T::zero(); din * dout];
                matmul(vx.data(), true, g.data(), false, &mut gw, din, rows, dout, false);
                Tensor::from_vec(&[din, dout], gw).expect("shape")
            }));
            if has_bias {
                res.push(need[2].then(|| {
                    let mut gb = vec![T::zero(); dout];
                    for row in g.data().chunks(dout) {
                        for (acc, &d) in gb.iter_mut().zip(row) {
                            *acc += d;
                        }
                    }
                    Tensor::from_vec(&[dout], gb).expect("shape")
                }));
            }
            res
        }))
    }

    /// 3x3 convolution, stride 1, zero padding 1, on `[A, H, W, Cin]`.
    /// Weight layout `[9 * Cin, Cout]` with rows ordered `(ky, kx, cin)`.
    pub fn conv3x3(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let vx = self.value(x);
        ensure!(vx.rank() == 4, Shape, "conv3x3 expects [A,H,W,C], got {:?}", vx.shape());
        let [a, h, wd, cin] = [vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]];
        let vw = self.value(w);
        ensure!(
            vw.rank() == 2 && vw.shape()[0] == 9 * cin,
            Shape,
            "conv3x3 weight {:?} incompatible with {cin} input channels",
            vw.shape()
        );
        let cout = vw.shape()[1];
        let vb = match b {
            Some(b) => {
                let vb = self.value(b);
                ensure!(vb.shape() == [cout], Shape, "conv3x3 bias shape {:?} != [{cout}]", vb.shape());
                Some(vb)
            }
            None => None,
        };
        let rows = a * h * wd;
        let k = 9 * cin;
        let cols = im2col3x3(vx.data(), a, h, wd, cin);
        let mut out = vec![T::zero(); rows * cout];
        matmul(&cols, false, vw.data(), false, &mut out, rows, k, cout, false);
        if let Some(vb) = &vb {
            for row in out.chunks_mut(cout) {
                for (o, &bv) in row.iter_mut().zip(vb.data()) {
                    *o += bv;
                }
            }
        }
        let out = Tensor::from_vec(&[a, h, wd, cout], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        let has_bias = vb.is_some();
        let x_shape = vx.shape().to_vec();
        Ok(self.push(out, &parents, move |g, need| {
            let mut res = Vec::with_capacity(3);
            res.push(need[0].then(|| {
                let mut gcols = vec![T::zero(); rows * k];
                matmul(g.data(), false, vw.data(), true, &mut gcols, rows, cout, k, false);
                Tensor::from_vec(&x_shape, col2im3x3(&gcols, a, h, wd, cin)).expect("shape")
            }));
            res.push(need[1].then(|| {
                let mut gw = vec![T::zero(); k * cout];
                matmul(&cols, true, g.data(), false, &mut gw, k, rows, cout, false);
                Tensor::from_vec(&[k, cout], gw).expect("shape")
            }));
            if has_bias {
                res.push(need[2].then(|| {
                    let mut gb = vec![T::zero(); cout];
                    for row in g.data().chunks(cout) {
                        for (acc, &d) in gb.iter_mut().zip(row) {
                            *acc += d;
                        }
                    }
                    Tensor::from_vec(&[cout], gb).expect("shape")
                }));
            }
            res
        }))
    }

    /// Row gather: `x` viewed as `[rows, d]` with `d` its trailing dim; output
    /// row `r` is input row `index[r]`. Backward scatter-adds.
    pub fn gather_rows(&self, x: Var, index: Arc<Vec<usize>>, out_shape: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        let rows = vx.numel() / d.max(1);
        ensure!(
            numel(out_shape) == index.len() * d && out_shape.last() == Some(&d),
            Shape,
            "gather_rows: out shape {:?} incompatible with {} rows of {d}",
            out_shape,
            index.len()
        );
        ensure!(index.iter().all(|&i| i < rows), Dimension, "gather_rows: index out of range");
        let mut out = Vec::with_capacity(index.len() * d);
        for &r in index.iter() {
            out.extend_from_slice(&vx.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::from_vec(out_shape, out)?;
        let x_shape = vx.shape().to_vec();
        Ok(self.push(out, &[x], move |g, _| {
            let mut gx = vec![T::zero(); rows * d];
            for (o, &r) in index.iter().enumerate() {
                let src = &g.data()[o * d..(o + 1) * d];
                for (acc, &v) in gx[r * d..(r + 1) * d].iter_mut().zip(src) {
                    *acc += v;
                }
            }
            vec![Some(Tensor::from_vec(&x_shape, gx).expect("shape"))]
        }))
    }

    /// Gather along the trailing axis; indices may repeat.
    pub fn gather_last(&self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        ensure!(index.iter().all(|&i| i < d), Dimension, "gather_last: channel index out of range");
        let k = index.len();
        let rows = vx.numel() / d.max(1);
        let mut out = Vec::with_capacity(rows * k);
        for row in vx.data().chunks(d) {
            out.extend(index.iter().map(|&i| row[i]));
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = k;
        let x_shape = vx.shape().to_vec();
        let out = Tensor::from_vec(&shape, out)?;
        Ok(self.push(out, &[x], move |g, _| {
            let mut gx = vec![T::zero(); rows * d];
            for (grow, srow) in gx.chunks_mut(d).zip(g.data().chunks(k)) {
                for (&i, &v) in index.iter().zip(srow) {
                    grow[i] += v;
                }
            }
            vec![Some(Tensor::from_vec(&x_shape, gx).expect("shape"))]
        }))
    }

    /// Concatenation along axis 0.
    pub fn concat0(&self, xs: &[Var]) -> Result<Var> {
        ensure!(!xs.is_empty(), InvalidArgument, "concat0 of nothing");
        let first = self.shape(xs[0]);
        let mut lead = 0;
        let mut sizes = Vec::with_capacity(xs.len());
        let mut data = Vec::new();
        for &x in xs {
            let v = self.value(x);
            ensure!(
                v.shape()[1..] == first[1..],
                Shape,
                "concat0: trailing shapes differ {:?} vs {:?}",
                v.shape(),
                first
            );
            lead += v.shape()[0];
            sizes.push((v.numel(), v.shape().to_vec()));
            data.extend_from_slice(v.data());
        }
        let mut shape = first.clone();
        shape[0] = lead;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, xs, move |g, need| {
            let mut off = 0;
            sizes
                .iter()
                .zip(need)
                .map(|((n, shape), &nd)| {
                    let part = nd.then(|| Tensor::from_vec(shape, g.data()[off..off + n].to_vec()).expect("shape"));
                    off += n;
                    part
                })
                .collect()
        }))
    }

    /// Layer normalization over the trailing axis with learnable scale and shift.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        ensure!(
            vg.shape() == [d] && vb.shape() == [d],
            Shape,
            "layer_norm params {:?}/{:?} vs trailing dim {d}",
            vg.shape(),
            vb.shape()
        );
        let eps = T::lit(eps);
        let inv_d = T::lit(1.0 / d as f64);
        let rows = vx.numel() / d;
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let xh = (row[c] - mu) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * vg.data()[c] + vb.data()[c];
            }
        }
        let out = Tensor::from_vec(vx.shape(), out)?;
        let x_shape = vx.shape().to_vec();
        Ok(self.push(out, &[x, gamma, beta], move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut gx = vec![T::zero(); rows * d];
                for r in 0..rows {
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for c in 0..d {
                        let dxh = gd[r * d + c] * vg.data()[c];
                        m1 += dxh;
                        m2 += dxh * xhat[r * d + c];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for c in 0..d {
                        let dxh = gd[r * d + c] * vg.data()[c];
                        gx[r * d + c] = rstd[r] * (dxh - m1 - xhat[r * d + c] * m2);
                    }
                }
                Tensor::from_vec(&x_shape, gx).expect("shape")
            });
            let (gg, gb) = if need[1] || need[2] {
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for r in 0..rows {
                    for c in 0..d {
                        gg[c] += gd[r * d + c] * xhat[r * d + c];
                        gb[c] += gd[r * d + c];
                    }
                }
                (Some(Tensor::from_vec(&[d], gg).expect("shape")), Some(Tensor::from_vec(&[d], gb).expect("shape")))
            } else {
                (None, None)
            };
            vec![gx, gg, gb]
        }))
    }

    /// Grouped multi-head scaled dot-product attention.
    ///
    /// `q: [G, Tq, M]`, `k, v: [G, Tk, M]`, `M = heads * head_dim`. Heads are
    /// contiguous slices of the model axis; output is `[G, Tq, M]`.
    pub fn attention(&self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let dims = AttnDims::new(vq.shape(), vk.shape(), vv.shape(), heads)?;
        let probs = attention_probs(vq.data(), vk.data(), &dims);
        let out = attention_apply(&probs, vv.data(), &dims);
        let out = Tensor::from_vec(vq.shape(), out)?;
        Ok(self.push(out, &[q, k, v], move |g, need| {
            let AttnDims { groups, tq, tk, model, heads, head_dim } = dims;
            let scale = T::lit(1.0 / (head_dim as f64).sqrt());
            let gd = g.data();
            let mut gq = vec![T::zero(); groups * tq * model];
            let mut gk = vec![T::zero(); groups * tk * model];
            let mut gv = vec![T::zero(); groups * tk * model];
            let mut dp = vec![T::zero(); tk];
            for gi in 0..groups {
                for h in 0..heads {
                    let off = h * head_dim;
                    for i in 0..tq {
                        let p = &probs[((gi * heads + h) * tq + i) * tk..][..tk];
                        let go = &gd[(gi * tq + i) * model + off..][..head_dim];
                        for j in 0..tk {
                            let vrow = &vv.data()[(gi * tk + j) * model + off..][..head_dim];
                            dp[j] = go.iter().zip(vrow).map(|(&a, &b)| a * b).sum();
                            let gvrow = &mut gv[(gi * tk + j) * model + off..][..head_dim];
                            for (acc, &a) in gvrow.iter_mut().zip(go) {
                                *acc += p[j] * a;
                            }
                        }
                        let dot: T = dp.iter().zip(p).map(|(&a, &b)| a * b).sum();
                        let qrow = &vq.data()[(gi * tq + i) * model + off..][..head_dim];
                        for j in 0..tk {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds == T::zero() {
                                continue;
                            }
                            let krow = &vk.data()[(gi * tk + j) * model + off..][..head_dim];
                            let gqrow = &mut gq[(gi * tq + i) * model + off..][..head_dim];
                            for (acc, &kv) in gqrow.iter_mut().zip(krow) {
                                *acc += ds * kv;
                            }
                            let gkrow = &mut gk[(gi * tk + j) * model + off..][..head_dim];
                            for (acc, &qv) in gkrow.iter_mut().zip(qrow) {
                                *acc += ds * qv;
                            }
                        }
                    }
                }
            }
            vec![
                need[0].then(|| Tensor::from_vec(&[groups, tq, model], gq).expect("shape")),
                need[1].then(|| Tensor::from_vec(&[groups, tk, model], gk).expect("shape")),
                need[2].then(|| Tensor::from_vec(&[groups, tk, model], gv).expect("shape")),
            ]
        }))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub groups: usize,
    pub tq: usize,
    pub tk: usize,
    pub model: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnDims {
    pub fn new(q: &[usize], k: &[usize], v: &[usize], heads: usize) -> Result<Self> {
        ensure!(
            q.len() == 3 && k.len() == 3 && v.len() == 3,
            Shape,
            "attention expects rank-3 [G,T,M] inputs, got {:?}/{:?}/{:?}",
            q,
            k,
            v
        );
        ensure!(k == v, Shape, "attention: key {:?} and value {:?} shapes differ", k, v);
        ensure!(
            q[0] == k[0] && q[2] == k[2],
            Shape,
            "attention: query {:?} incompatible with key {:?}",
            q,
            k
        );
        ensure!(k[1] >= 1, Shape, "attention needs at least one key per group");
        ensure!(
            heads >= 1 && q[2] % heads == 0,
            Shape,
            "model dim {} not divisible by {heads} heads",
            q[2]
        );
        Ok(Self { groups: q[0], tq: q[1], tk: k[1], model: q[2], heads, head_dim: q[2] / heads })
    }
}

/// Softmax attention weights laid out `[G, heads, Tq, Tk]`.
pub fn attention_probs<T: Real>(q: &[T], k: &[T], dims: &AttnDims) -> Vec<T> {
    let AttnDims { groups, tq, tk, model, heads, head_dim } = *dims;
    let scale = T::lit(1.0 / (head_dim as f64).sqrt());
    let mut probs = vec![T::zero(); groups * heads * tq * tk];
    for gi in 0..groups {
        for h in 0..heads {
            let off = h * head_dim;
            for i in 0..tq {
                let qrow = &q[(gi * tq + i) * model + off..][..head_dim];
                let p = &mut probs[((gi * heads + h) * tq + i) * tk..][..tk];
                let mut max = T::neg_infinity();
                for (j, pj) in p.iter_mut().enumerate() {
                    let krow = &k[(gi * tk + j) * model + off..][..head_dim];
                    let s = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    *pj = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut z = T::zero();
                for pj in p.iter_mut() {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                for pj in p.iter_mut() {
                    *pj /= z;
                }
            }
        }
    }
    probs
}

fn attention_apply<T: Real>(probs: &[T], v: &[T], dims: &AttnDims) -> Vec<T> {
    let AttnDims { groups, tq, tk, model, heads, head_dim } = *dims;
    let mut out = vec![T::zero(); groups * tq * model];
    for gi in 0..groups {
        for h in 0..heads {
            let off = h * head_dim;
            for i in 0..tq {
                let p = &probs[((gi * heads + h) * tq + i) * tk..][..tk];
                let orow = &mut out[(gi * tq + i) * model + off..][..head_dim];
                for (j, &pj) in p.iter().enumerate() {
                    let vrow = &v[(gi * tk + j) * model + off..][..head_dim];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += pj * vv;
                    }
                }
            }
        }
    }
    out
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let inner = c * (x + T::lit(GELU_C) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let inner = c * (x + T::lit(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0 * GELU_C) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}

fn im2col3x3<T: Real>(x: &[T], a: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let k = 9 * c;
    let mut cols = vec![T::zero(); a * h * w * k];
    for ai in 0..a {
        for i in 0..h {
            for j in 0..w {
                let dst = &mut cols[((ai * h + i) * w + j) * k..][..k];
                for ky in 0..3 {
                    let yi = i as isize + ky as isize - 1;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xj = j as isize + kx as isize - 1;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        let src = ((ai * h + yi as usize) * w + xj as usize) * c;
                        dst[(ky * 3 + kx) * c..][..c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im3x3<T: Real>(cols: &[T], a: usize, h: usize, w: usize, c: usize) -> Vec<T> {
    let k = 9 * c;
    let mut x = vec![T::zero(); a * h * w * c];
    for ai in 0..a {
        for i in 0..h {
            for j in 0..w {
                let src = &cols[((ai * h + i) * w + j) * k..][..k];
                for ky in 0..3 {
                    let yi = i as isize + ky as isize - 1;
                    if yi < 0 || yi >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let xj = j as isize + kx as isize - 1;
                        if xj < 0 || xj >= w as isize {
                            continue;
                        }
                        let dst = ((ai * h + yi as usize) * w + xj as usize) * c;
                        for (acc, &v) in x[dst..dst + c].iter_mut().zip(&src[(ky * 3 + kx) * c..][..c]) {
                            *acc += v;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Reference 3x3 convolution used to cross-check the im2col path.
pub fn conv3x3_direct<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let [a, h, wd, cin] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let cout = w.shape()[1];
    let mut out = vec![T::zero(); a * h * wd * cout];
    for ai in 0..a {
        for i in 0..h {
            for j in 0..wd {
                for co in 0..cout {
                    let mut acc = b.map_or(T::zero(), |b| b.data()[co]);
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let yi = i as isize + ky as isize - 1;
                            let xj = j as isize + kx as isize - 1;
                            if yi < 0 || xj < 0 || yi >= h as isize || xj >= wd as isize {
                                continue;
                            }
                            for ci in 0..cin {
                                let xv = x.data()[((ai * h + yi as usize) * wd + xj as usize) * cin + ci];
                                acc += xv * w.data()[((ky * 3 + kx) * cin + ci) * cout + co];
                            }
                        }
                    }
                    out[((ai * h + i) * wd + j) * cout + co] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[a, h, wd, cout], out).expect("shape")
}

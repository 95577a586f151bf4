//! Fused axial attention: local window groups followed by strided grid groups.
//!
//! Both partitions are pure index permutations over the token rows of an
//! `[A, H, W, D]` map, so they are realized with [`Tape::gather_rows`] and
//! invert exactly.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::nn::{Binding, Init, LayerNorm, Linear, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaxConfig {
    pub window_p: usize,
    pub grid_g: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl Default for FaxConfig {
    fn default() -> Self {
        Self { window_p: 4, grid_g: 4, heads: 4, head_dim: 8 }
    }
}

impl FaxConfig {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.window_p >= 1 && self.grid_g >= 1 && self.heads >= 1 && self.head_dim >= 1,
            InvalidArgument,
            "fax config fields must be positive: {:?}",
            self
        );
        Ok(())
    }

    /// Divisibility of a spatial extent by both partition schemes.
    pub fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        ensure!(
            h % self.window_p == 0 && w % self.window_p == 0,
            Dimension,
            "{h}x{w} not divisible by window {}",
            self.window_p
        );
        ensure!(
            h % self.grid_g == 0 && w % self.grid_g == 0,
            Dimension,
            "{h}x{w} not divisible by grid {}",
            self.grid_g
        );
        Ok(())
    }
}

/// A token permutation from `[A, H, W, D]` into `[groups, group_size, D]`.
#[derive(Debug, Clone)]
pub struct Partition {
    pub shape: [usize; 4],
    pub groups: usize,
    pub group_size: usize,
    /// `gather[r]` = source token row for grouped row `r`.
    gather: Arc<Vec<usize>>,
    /// Inverse of `gather`.
    scatter: Arc<Vec<usize>>,
}

impl Partition {
    fn from_gather(shape: [usize; 4], groups: usize, group_size: usize, gather: Vec<usize>) -> Self {
        let mut scatter = vec![0; gather.len()];
        for (r, &src) in gather.iter().enumerate() {
            scatter[src] = r;
        }
        Self { shape, groups, group_size, gather: Arc::new(gather), scatter: Arc::new(scatter) }
    }

    /// Non-overlapping `p x p` windows. Token `(a, i, j)` lands in group
    /// `(a, i / p, j / p)` at position `(i % p) * p + j % p`.
    pub fn window(shape: [usize; 4], p: usize) -> Result<Self> {
        let [a, h, w, _] = shape;
        ensure!(p >= 1 && h % p == 0 && w % p == 0, Dimension, "window {p} does not divide {h}x{w}");
        let (gh, gw) = (h / p, w / p);
        let mut gather = vec![0; a * h * w];
        for ai in 0..a {
            for i in 0..h {
                for j in 0..w {
                    let group = (ai * gh + i / p) * gw + j / p;
                    let pos = (i % p) * p + j % p;
                    gather[group * p * p + pos] = (ai * h + i) * w + j;
                }
            }
        }
        Ok(Self::from_gather(shape, a * gh * gw, p * p, gather))
    }

    /// Sparse `g x g` grid. With `h = H / g`, `w = W / g`, token `(a, i, j)`
    /// lands in group `(a, i % h, j % w)` at position `(i / h) * g + j / w`,
    /// so every group spans the whole map at stride `(h, w)`.
    pub fn grid(shape: [usize; 4], g: usize) -> Result<Self> {
        let [a, hh, ww, _] = shape;
        ensure!(g >= 1 && hh % g == 0 && ww % g == 0, Dimension, "grid {g} does not divide {hh}x{ww}");
        let (h, w) = (hh / g, ww / g);
        let mut gather = vec![0; a * hh * ww];
        for ai in 0..a {
            for i in 0..hh {
                for j in 0..ww {
                    let group = (ai * h + i % h) * w + j % w;
                    let pos = (i / h) * g + j / w;
                    gather[group * g * g + pos] = (ai * hh + i) * ww + j;
                }
            }
        }
        Ok(Self::from_gather(shape, a * h * w, g * g, gather))
    }

    pub fn gather_index(&self) -> &[usize] {
        &self.gather
    }

    fn check<T: Real>(&self, t: &Tensor<T>) -> Result<()> {
        ensure!(
            t.shape()[..3] == self.shape[..3],
            Shape,
            "partition built for {:?}, applied to {:?}",
            self.shape,
            t.shape()
        );
        Ok(())
    }

    pub fn apply<T: Real>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(t)?;
        permute_rows(t, &self.gather, &[self.groups, self.group_size, t.last_dim()])
    }

    pub fn invert<T: Real>(&self, groups: &Tensor<T>) -> Result<Tensor<T>> {
        let d = groups.last_dim();
        ensure!(
            groups.shape() == [self.groups, self.group_size, d],
            Shape,
            "expected grouped tokens [{}, {}, {d}], got {:?}",
            self.groups,
            self.group_size,
            groups.shape()
        );
        let [a, h, w, _] = self.shape;
        permute_rows(groups, &self.scatter, &[a, h, w, d])
    }

    pub fn apply_var<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let shape = tape.shape(x);
        ensure!(
            shape.len() == 4 && shape[..3] == self.shape[..3],
            Shape,
            "partition built for {:?}, applied to {:?}",
            self.shape,
            shape
        );
        tape.gather_rows(x, Arc::clone(&self.gather), &[self.groups, self.group_size, shape[3]])
    }

    pub fn invert_var<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let d = *tape.shape(x).last().expect("rank");
        let [a, h, w, _] = self.shape;
        tape.gather_rows(x, Arc::clone(&self.scatter), &[a, h, w, d])
    }
}

fn permute_rows<T: Real>(t: &Tensor<T>, index: &[usize], out_shape: &[usize]) -> Result<Tensor<T>> {
    let d = t.last_dim();
    let mut out = Vec::with_capacity(t.numel());
    for &r in index {
        out.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
    }
    Tensor::from_vec(out_shape, out)
}

fn rank4<T: Real>(t: &Tensor<T>) -> Result<[usize; 4]> {
    ensure!(t.rank() == 4, Shape, "expected [A,H,W,D], got {:?}", t.shape());
    Ok([t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]])
}

/// Groups `[A, H, W, D]` into `[A*(H/p)*(W/p), p*p, D]` windows.
pub fn window_partition<T: Real>(t: &Tensor<T>, p: usize) -> Result<(Tensor<T>, Partition)> {
    let part = Partition::window(rank4(t)?, p)?;
    Ok((part.apply(t)?, part))
}

/// Groups `[A, H, W, D]` into `[A*(H/g)*(W/g), g*g, D]` strided grid cells.
pub fn grid_partition<T: Real>(t: &Tensor<T>, g: usize) -> Result<(Tensor<T>, Partition)> {
    let part = Partition::grid(rank4(t)?, g)?;
    Ok((part.apply(t)?, part))
}

pub fn window_unpartition<T: Real>(groups: &Tensor<T>, part: &Partition) -> Result<Tensor<T>> {
    part.invert(groups)
}

pub fn grid_unpartition<T: Real>(groups: &Tensor<T>, part: &Partition) -> Result<Tensor<T>> {
    part.invert(groups)
}

/// Query/key/value and output projections of one multi-head attention.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        cfg: &FaxConfig,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        let m = cfg.model_dim();
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, m, Init::Scaled(1.0), true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, m, Init::Scaled(1.0), true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, m, Init::Scaled(1.0), true, rng),
            out: Linear::new(store, &format!("{name}.out"), m, dim, out_init, true, rng),
            heads: cfg.heads,
        }
    }

    /// Zeroes the value and output projections (weights and biases).
    pub fn zero_value_and_output<T: Real>(&self, store: &mut ParamStore<T>) {
        for lin in [&self.v, &self.out] {
            zero_linear(store, lin);
        }
    }
}

pub(crate) fn zero_linear<T: Real>(store: &mut ParamStore<T>, lin: &Linear) {
    let w = store.get(lin.weight).shape().to_vec();
    store.set(lin.weight, Tensor::zeros(&w)).expect("same shape");
    if let Some(b) = lin.bias {
        store.set(b, Tensor::zeros(&[lin.d_out])).expect("same shape");
    }
}

/// Multi-head attention over grouped tokens: queries `[G, Tq, D]`, keys and
/// values `[G, Tk, D]`. Projects into `heads * head_dim`, attends per head
/// within each group, concatenates heads and projects back to `D`.
pub fn multi_head_attention<T: Real>(
    b: &Binding<'_, T>,
    params: &AttentionParams,
    q_tokens: Var,
    k_tokens: Var,
    v_tokens: Var,
) -> Result<Var> {
    let t = b.tape();
    let (qs, ks, vs) = (t.shape(q_tokens), t.shape(k_tokens), t.shape(v_tokens));
    ensure!(
        qs.len() == 3 && ks.len() == 3 && vs.len() == 3,
        Shape,
        "attention tokens must be [G,T,D]: {:?} {:?} {:?}",
        qs,
        ks,
        vs
    );
    ensure!(qs[0] == ks[0] && ks[0] == vs[0], Shape, "group counts differ: {:?} {:?} {:?}", qs, ks, vs);
    ensure!(ks[1] == vs[1], Shape, "key/value token counts differ: {} vs {}", ks[1], vs[1]);
    let q = params.q.forward(b, q_tokens)?;
    let k = params.k.forward(b, k_tokens)?;
    let v = params.v.forward(b, v_tokens)?;
    let o = t.attention(q, k, v, params.heads)?;
    params.out.forward(b, o)
}

/// One FAX sublayer: pre-norm, partition, grouped attention, unpartition.
/// Returns the residual branch only.
#[derive(Debug, Clone)]
pub struct FaxSublayer {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: AttentionParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Window,
    Grid,
}

impl FaxSublayer {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        cfg: &FaxConfig,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        Self {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), dim),
            attn: AttentionParams::new(store, &format!("{name}.attn"), dim, cfg, out_init, rng),
        }
    }

    fn branch<T: Real>(&self, b: &Binding<'_, T>, part: &Partition, q: Var, k: Var, v: Var) -> Result<Var> {
        let t = b.tape();
        let qn = self.norm_q.forward(b, q)?;
        let kn = self.norm_kv.forward(b, k)?;
        let vn = if k == v { kn } else { self.norm_kv.forward(b, v)? };
        let qg = part.apply_var(t, qn)?;
        let kg = part.apply_var(t, kn)?;
        let vg = if k == v { kg } else { part.apply_var(t, vn)? };
        let o = multi_head_attention(b, &self.attn, qg, kg, vg)?;
        part.invert_var(t, o)
    }
}

/// Window sublayer followed by grid sublayer, each with a residual connection
/// onto the query stream.
#[derive(Debug, Clone)]
pub struct FaxBlock {
    pub cfg: FaxConfig,
    pub dim: usize,
    pub window: FaxSublayer,
    pub grid: FaxSublayer,
}

impl FaxBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        cfg: FaxConfig,
        out_init: Init,
        rng: &mut R,
    ) -> Self {
        Self {
            cfg,
            dim,
            window: FaxSublayer::new(store, &format!("{name}.window"), dim, &cfg, out_init, rng),
            grid: FaxSublayer::new(store, &format!("{name}.grid"), dim, &cfg, out_init, rng),
        }
    }

    /// Zeroes both sublayers' value/output projections: the block becomes the
    /// identity on its query input.
    pub fn zero_branches<T: Real>(&self, store: &mut ParamStore<T>) {
        self.window.attn.zero_value_and_output(store);
        self.grid.attn.zero_value_and_output(store);
    }

    /// Replicates single-agent key/value maps across the query's agent axis.
    fn broadcast<T: Real>(tape: &Tape<T>, x: Var, agents: usize) -> Result<Var> {
        let s = tape.shape(x);
        if s[0] == agents {
            return Ok(x);
        }
        ensure!(s[0] == 1, Shape, "cannot broadcast {} key/value agents onto {agents} queries", s[0]);
        let per = s[1] * s[2];
        let index: Vec<usize> = (0..agents).flat_map(|_| 0..per).collect();
        tape.gather_rows(x, Arc::new(index), &[agents, s[1], s[2], s[3]])
    }

    fn check_inputs<T: Real>(&self, tape: &Tape<T>, q: Var, k: Var, v: Var) -> Result<[usize; 4]> {
        let (qs, ks, vs) = (tape.shape(q), tape.shape(k), tape.shape(v));
        ensure!(qs.len() == 4, Shape, "fax query must be [A,H,W,D], got {:?}", qs);
        ensure!(ks == vs, Shape, "fax key {:?} and value {:?} differ", ks, vs);
        ensure!(
            ks.len() == 4 && ks[1..] == qs[1..],
            Shape,
            "fax query {:?} and key/value {:?} differ",
            qs,
            ks
        );
        ensure!(qs[3] == self.dim, Shape, "fax block built for {} channels, got {}", self.dim, qs[3]);
        self.cfg.check_spatial(qs[1], qs[2])?;
        Ok([qs[0], qs[1], qs[2], qs[3]])
    }

    /// Returns `(output, branch)` where `output = q + branch`.
    fn run<T: Real>(&self, b: &Binding<'_, T>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
        let t = b.tape();
        let shape = self.check_inputs(t, q, k, v)?;
        let same = k == v;
        let k = Self::broadcast(t, k, shape[0])?;
        let v = if same { k } else { Self::broadcast(t, v, shape[0])? };
        let wpart = Partition::window(shape, self.cfg.window_p)?;
        let gpart = Partition::grid(shape, self.cfg.grid_g)?;
        let b1 = self.window.branch(b, &wpart, q, k, v)?;
        let q1 = t.add(q, b1)?;
        let b2 = self.grid.branch(b, &gpart, q1, k, v)?;
        let out = t.add(q1, b2)?;
        let branch = t.add(b1, b2)?;
        Ok((out, branch))
    }

    /// Cross form: queries from `q`, keys from `k`, values from `v`.
    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.run(b, q, k, v)?.0)
    }

    /// Self form `fax_block(x, x)`.
    pub fn forward_self<T: Real>(&self, b: &Binding<'_, T>, x: Var) -> Result<Var> {
        self.forward(b, x, x, x)
    }

    /// Sum of the two sublayers' residual branches, i.e. `forward(q,k,v) - q`
    /// without the cancellation.
    pub fn branch<T: Real>(&self, b: &Binding<'_, T>, q: Var, k: Var, v: Var) -> Result<Var> {
        Ok(self.run(b, q, k, v)?.1)
    }
}

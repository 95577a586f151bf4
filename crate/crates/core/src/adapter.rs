//! The learnable adapter: channel aligner, FAX resizer with bilinear skip and
//! res-blocks, then the sparse cross-domain transformer.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::error::{ensure, Result};
use crate::fax_attention::{FaxBlock, FaxConfig};
use crate::feature_core::{bilinear_resize_var, FeatureMap, ResizePolicy};
use crate::nn::{Binding, Conv3x3, Init, LayerNorm, Linear, ParamStore};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResizerConfig {
    pub target_h: usize,
    pub target_w: usize,
    pub target_c: usize,
    pub n_repeats: usize,
    pub r_blocks: usize,
    pub fax: FaxConfig,
    pub rng_seed: u64,
}

impl ResizerConfig {
    pub fn new(target_h: usize, target_w: usize, target_c: usize) -> Self {
        Self { target_h, target_w, target_c, n_repeats: 4, r_blocks: 2, fax: FaxConfig::default(), rng_seed: 0 }
    }

    /// Aligner input width `2 * C_S`.
    pub fn c_in(&self) -> usize {
        2 * self.target_c
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.target_h >= 1 && self.target_w >= 1 && self.target_c >= 1,
            InvalidArgument,
            "resizer target dims must be positive: {}x{}x{}",
            self.target_h,
            self.target_w,
            self.target_c
        );
        ensure!(self.n_repeats >= 1, InvalidArgument, "n_repeats must be at least 1");
        self.fax.validate()
    }
}

/// How `C_T` input channels become the aligner's `C_in` inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelPlan {
    Exact,
    /// One sorted channel subset of size `C_in` per repeat.
    Drop(Vec<Vec<usize>>),
    /// Channels appended after the original `C_T`, sampled with replacement.
    Pad(Vec<usize>),
}

impl ChannelPlan {
    pub fn draw<R: Rng + ?Sized>(c_t: usize, c_in: usize, n_repeats: usize, rng: &mut R) -> Self {
        use std::cmp::Ordering::*;
        match c_t.cmp(&c_in) {
            Equal => ChannelPlan::Exact,
            Greater => ChannelPlan::Drop(
                (0..n_repeats.max(1))
                    .map(|_| {
                        let mut keep = sample(rng, c_t, c_in).into_vec();
                        keep.sort_unstable();
                        keep
                    })
                    .collect(),
            ),
            Less => ChannelPlan::Pad((0..c_in - c_t).map(|_| rng.random_range(0..c_t)).collect()),
        }
    }

    /// Channel index lists fed to the convolution, one per averaged pass.
    pub fn passes(&self, c_t: usize) -> Vec<Vec<usize>> {
        match self {
            ChannelPlan::Exact => vec![(0..c_t).collect()],
            ChannelPlan::Drop(subsets) => subsets.clone(),
            ChannelPlan::Pad(extra) => vec![(0..c_t).chain(extra.iter().copied()).collect()],
        }
    }
}

/// `1x1` convolution `C_in -> C_S` applied after channel drop or pad.
#[derive(Debug, Clone)]
pub struct ChannelAligner {
    pub conv: Linear,
    pub c_in: usize,
}

impl ChannelAligner {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self { conv: Linear::new(store, &format!("{name}.conv"), c_in, c_out, Init::Scaled(1.0), true, rng), c_in }
    }

    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, x: Var, plan: &ChannelPlan) -> Result<Var> {
        let t = b.tape();
        let c_t = *t.shape(x).last().expect("rank");
        let passes = plan.passes(c_t);
        let mut outs = Vec::with_capacity(passes.len());
        for idx in passes {
            ensure!(idx.len() == self.c_in, Shape, "channel plan yields {} channels, aligner needs {}", idx.len(), self.c_in);
            let identity = idx.iter().enumerate().all(|(i, &c)| i == c) && c_t == self.c_in;
            let xi = if identity { x } else { t.gather_last(x, Arc::new(idx))? };
            outs.push(self.conv.forward(b, xi)?);
        }
        if outs.len() == 1 {
            return Ok(outs[0]);
        }
        let n = outs.len();
        Ok(t.scale(t.add_n(&outs)?, 1.0 / n as f64))
    }
}

/// `y + conv2(relu(conv1(y)))` with `conv2` zero-initialized.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
}

impl ResBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, c: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv3x3::new(store, &format!("{name}.conv1"), c, c, Init::Scaled(2f64.sqrt()), rng),
            conv2: Conv3x3::new(store, &format!("{name}.conv2"), c, c, Init::Zeros, rng),
        }
    }

    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, y: Var) -> Result<Var> {
        let t = b.tape();
        let h = t.relu(self.conv1.forward(b, y)?);
        let r = self.conv2.forward(b, h)?;
        t.add(y, r)
    }
}

/// The feature resizer: `F_T' = res_blocks(resize(fax_branch(x)) + resize(x))`
/// with `x = align(F_T)`. The bilinear skip carries the identity path, so the
/// main path uses only the FAX residual branch.
#[derive(Debug, Clone)]
pub struct FeatureResizer {
    pub cfg: ResizerConfig,
    pub aligner: ChannelAligner,
    pub fax: FaxBlock,
    pub blocks: Vec<ResBlock>,
}

impl FeatureResizer {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: ResizerConfig, rng: &mut R) -> Self {
        let c = cfg.target_c;
        Self {
            cfg,
            aligner: ChannelAligner::new(store, &format!("{name}.align"), cfg.c_in(), c, rng),
            fax: FaxBlock::new(store, &format!("{name}.fax"), c, cfg.fax, Init::Zeros, rng),
            blocks: (0..cfg.r_blocks).map(|i| ResBlock::new(store, &format!("{name}.res{i}"), c, rng)).collect(),
        }
    }

    pub fn plan<R: Rng + ?Sized>(&self, c_t: usize, rng: &mut R) -> ChannelPlan {
        ChannelPlan::draw(c_t, self.cfg.c_in(), self.cfg.n_repeats, rng)
    }

    /// Zeroes the FAX value/output projections and every res-block's second conv.
    pub fn zero_branches<T: Real>(&self, store: &mut ParamStore<T>) {
        self.fax.zero_branches(store);
        for blk in &self.blocks {
            let shape = store.get(blk.conv2.weight).shape().to_vec();
            store.set(blk.conv2.weight, crate::Tensor::zeros(&shape)).expect("shape");
            store.set(blk.conv2.bias, crate::Tensor::zeros(&[blk.conv2.c_out])).expect("shape");
        }
    }

    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, f_t: Var, plan: &ChannelPlan) -> Result<Var> {
        let t = b.tape();
        let shape = t.shape(f_t);
        ensure!(shape.len() == 4, Shape, "resizer input must be [N,H,W,C], got {:?}", shape);
        self.cfg.fax.check_spatial(shape[1], shape[2])?;
        let (oh, ow) = (self.cfg.target_h, self.cfg.target_w);
        let policy = ResizePolicy::default();
        let x = self.aligner.forward(b, f_t, plan)?;
        let branch = self.fax.branch(b, x, x, x)?;
        let main = bilinear_resize_var(t, branch, oh, ow, policy)?;
        let skip = bilinear_resize_var(t, x, oh, ow, policy)?;
        let mut y = t.add(main, skip)?;
        for blk in &self.blocks {
            y = blk.forward(b, y)?;
        }
        Ok(y)
    }
}

/// `Q = W_Q F'`, `K = W_K F_S`, `V = W_V F_S`;
/// `F^ = Q + LN1(FAX(Q, K, V))`, `F'' = F^ + LN2(FFN(F^))`.
///
/// Initialized as an exact identity: `W_Q = I`, zero FAX output projections,
/// zero second FFN layer, zero LN shifts.
#[derive(Debug, Clone)]
pub struct CrossDomainTransformer {
    pub dim: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub fax: FaxBlock,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

pub const FFN_EXPANSION: usize = 2;

impl CrossDomainTransformer {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, dim: usize, fax: FaxConfig, rng: &mut R) -> Self {
        let hidden = FFN_EXPANSION * dim;
        Self {
            dim,
            wq: Linear::new(store, &format!("{name}.wq"), dim, dim, Init::Identity, true, rng),
            wk: Linear::new(store, &format!("{name}.wk"), dim, dim, Init::Scaled(1.0), true, rng),
            wv: Linear::new(store, &format!("{name}.wv"), dim, dim, Init::Scaled(1.0), true, rng),
            fax: FaxBlock::new(store, &format!("{name}.fax"), dim, fax, Init::Zeros, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ffn1: Linear::new(store, &format!("{name}.ffn1"), dim, hidden, Init::Scaled(2f64.sqrt()), true, rng),
            ffn2: Linear::new(store, &format!("{name}.ffn2"), hidden, dim, Init::Zeros, true, rng),
        }
    }

    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, f_t_prime: Var, f_s: Var) -> Result<Var> {
        let t = b.tape();
        let (ts, ss) = (t.shape(f_t_prime), t.shape(f_s));
        ensure!(
            ts.len() == 4 && ss.len() == 4 && ts[1..] == ss[1..],
            Shape,
            "cross-domain inputs differ: target {:?}, source {:?}",
            ts,
            ss
        );
        ensure!(ss[0] == 1 || ss[0] == ts[0], Shape, "source map must have one agent, got {}", ss[0]);
        ensure!(ts[3] == self.dim, Shape, "cross-domain block built for {} channels, got {}", self.dim, ts[3]);
        let q = self.wq.forward(b, f_t_prime)?;
        let k = self.wk.forward(b, f_s)?;
        let v = self.wv.forward(b, f_s)?;
        let attn = self.fax.branch(b, q, k, v)?;
        let f_hat = t.add(q, self.ln1.forward(b, attn)?)?;
        let h = t.gelu(self.ffn1.forward(b, f_hat)?);
        let ffn = self.ffn2.forward(b, h)?;
        t.add(f_hat, self.ln2.forward(b, ffn)?)
    }
}

/// The composite `G`: resizer followed by the cross-domain transformer.
#[derive(Debug, Clone)]
pub struct AdapterPipeline {
    pub resizer: FeatureResizer,
    pub transformer: CrossDomainTransformer,
}

impl AdapterPipeline {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, cfg: ResizerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            resizer: FeatureResizer::new(store, &format!("{name}.resizer"), cfg, rng),
            transformer: CrossDomainTransformer::new(store, &format!("{name}.cdt"), cfg.target_c, cfg.fax, rng),
        })
    }

    pub fn cfg(&self) -> &ResizerConfig {
        &self.resizer.cfg
    }

    /// `F_T'' = cdt(resize(F_T), F_S)`.
    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, f_t: Var, f_s: Var, plan: &ChannelPlan) -> Result<Var> {
        let f_t_prime = self.resizer.forward(b, f_t, plan)?;
        self.transformer.forward(b, f_t_prime, f_s)
    }

    /// Inference on feature maps with the channel plan drawn from the configured seed.
    pub fn adapt<T: Real>(&self, store: &ParamStore<T>, f_t: &FeatureMap<T>, f_s: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        ensure!(f_s.agents() == 1, Shape, "ego map must have one agent, got {}", f_s.agents());
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg().rng_seed);
        let plan = self.resizer.plan(f_t.channels(), &mut rng);
        let b = Binding::inference(store);
        let t = b.tape();
        let out = self.forward(&b, t.constant(f_t.data().clone()), t.constant(f_s.data().clone()), &plan)?;
        let data = (*t.value(out)).clone();
        FeatureMap::new(data, f_s.domain_id(), f_t.agent_ids().to_vec())
    }
}

/// `channel_align` on a feature map with the plan drawn from `cfg.rng_seed`.
pub fn channel_align<T: Real>(
    store: &ParamStore<T>,
    aligner: &ChannelAligner,
    f_t: &FeatureMap<T>,
    cfg: &ResizerConfig,
) -> Result<FeatureMap<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let plan = ChannelPlan::draw(f_t.channels(), cfg.c_in(), cfg.n_repeats, &mut rng);
    let b = Binding::inference(store);
    let out = aligner.forward(&b, b.tape().constant(f_t.data().clone()), &plan)?;
    FeatureMap::new((*b.tape().value(out)).clone(), f_t.domain_id(), f_t.agent_ids().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_appends_exactly_the_deficit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            match ChannelPlan::draw(5, 8, 4, &mut rng) {
                ChannelPlan::Pad(extra) => {
                    assert_eq!(extra.len(), 3);
                    assert!(extra.iter().all(|&c| c < 5));
                }
                other => panic!("expected padding, got {other:?}"),
            }
        }
    }

    #[test]
    fn drop_subsets_are_sorted_and_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ChannelPlan::Drop(subsets) = ChannelPlan::draw(10, 4, 3, &mut rng) else { panic!() };
        assert_eq!(subsets.len(), 3);
        for s in subsets {
            assert_eq!(s.len(), 4);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            assert!(s.iter().all(|&c| c < 10));
        }
    }

    #[test]
    fn exact_width_ignores_repeats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(ChannelPlan::draw(8, 8, 7, &mut rng), ChannelPlan::Exact);
    }
}

//! Finite-difference checks of every learnable operation on small f64 instances.

use std::sync::Arc;

use mpda_core::adapter::{ChannelAligner, ChannelPlan, CrossDomainTransformer, FeatureResizer, ResizerConfig};
use mpda_core::adversary::{domain_loss, grl, DomainClassifier, GrlSetting};
use mpda_core::autodiff::{Tape, Var};
use mpda_core::fax_attention::{FaxBlock, FaxConfig};
use mpda_core::feature_core::{bilinear_resize_var, ResizePolicy};
use mpda_core::fusion_head::{detection_loss, BBox, BoxSet, DetectionHead, FocalParams, FusionModel, RasterTargets};
use mpda_core::gradcheck::{check_fn, check_module, rel_err, GradCheckConfig, GradCheckReport, Mismatch};
use mpda_core::nn::{Init, ParamStore};
use mpda_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const SUITE_TOL: f64 = 1e-3;
pub const GRL_TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Overwrites every parameter with N(0, 0.5^2) so zero-initialized branches carry gradient.
fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let s = store.get(id).shape().to_vec();
        store.set(id, Tensor::randn(&s, 0.5, &mut r)).expect("shape");
    }
}

/// `sum(y * w)` with a fixed random `w`.
fn project(t: &Tape<f64>, y: Var, seed: u64) -> mpda_core::Result<Var> {
    let w = t.constant(randn(&t.shape(y), seed));
    Ok(t.sum_all(t.mul(y, w)?))
}

fn cfg() -> GradCheckConfig {
    GradCheckConfig { coords_per_tensor: 8, eps: 1e-5, abs_floor: 1e-4, ..GradCheckConfig::default() }.with_tol(SUITE_TOL)
}

fn small_fax() -> FaxConfig {
    FaxConfig { window_p: 4, grid_g: 2, heads: 2, head_dim: 4 }
}

/// Runs every check; instances use at most two collaborators, 8x8 maps and 8 channels.
pub fn run_gradient_suite() -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();

    out.push(check_fn("bilinear_resize", &[randn(&[2, 5, 3, 4], 1)], cfg(), |t, xs| {
        let y = bilinear_resize_var(t, xs[0], 8, 7, ResizePolicy::default())?;
        project(t, y, 2)
    })?);

    {
        let mut store = ParamStore::new();
        let blk = FaxBlock::new(&mut store, "fax", 8, small_fax(), Init::Scaled(1.0), &mut rng(3));
        randomize(&mut store, 4);
        out.push(check_module("fax_block", &store, &[randn(&[2, 8, 8, 8], 5), randn(&[2, 8, 8, 8], 6)], cfg(), |b, xs| {
            let y = blk.forward(b, xs[0], xs[1], xs[1])?;
            project(b.tape(), y, 7)
        })?);
    }

    for (name, c_t) in [("channel_aligner_pad", 5), ("channel_aligner_drop", 8)] {
        let mut store = ParamStore::new();
        let al = ChannelAligner::new(&mut store, "align", 6, 4, &mut rng(8));
        let plan = ChannelPlan::draw(c_t, 6, 3, &mut rng(9));
        out.push(check_module(name, &store, &[randn(&[2, 4, 4, c_t], 10)], cfg(), |b, xs| {
            let y = al.forward(b, xs[0], &plan)?;
            project(b.tape(), y, 11)
        })?);
    }

    {
        let mut store = ParamStore::new();
        let rc = ResizerConfig { n_repeats: 2, r_blocks: 1, fax: small_fax(), ..ResizerConfig::new(8, 8, 4) };
        let rz = FeatureResizer::new(&mut store, "resizer", rc, &mut rng(12));
        randomize(&mut store, 13);
        let plan = rz.plan(6, &mut rng(14));
        out.push(check_module("feature_resizer", &store, &[randn(&[2, 4, 8, 6], 15)], cfg(), |b, xs| {
            let y = rz.forward(b, xs[0], &plan)?;
            project(b.tape(), y, 16)
        })?);
    }

    {
        let mut store = ParamStore::new();
        let cdt = CrossDomainTransformer::new(&mut store, "cdt", 8, small_fax(), &mut rng(17));
        randomize(&mut store, 18);
        out.push(check_module("cross_domain_transformer", &store, &[randn(&[2, 8, 8, 8], 19), randn(&[1, 8, 8, 8], 20)], cfg(), |b, xs| {
            let y = cdt.forward(b, xs[0], xs[1])?;
            project(b.tape(), y, 21)
        })?);
    }

    {
        let mut store = ParamStore::new();
        let clf = DomainClassifier::new(&mut store, "clf", 8, &mut rng(22));
        out.push(check_module("domain_classifier", &store, &[randn(&[1, 8, 8, 8], 23), randn(&[2, 8, 8, 8], 24)], cfg(), |b, xs| {
            let ls = clf.forward(b, xs[0])?;
            let lt = clf.forward(b, xs[1])?;
            domain_loss(b.tape(), ls, lt)
        })?);
    }

    {
        let mut store = ParamStore::new();
        let m = FusionModel::new(&mut store, "fusion", 8, 2, 4, &mut rng(25));
        randomize(&mut store, 26);
        out.push(check_module("fusion", &store, &[randn(&[1, 8, 8, 8], 27), randn(&[2, 8, 8, 8], 28)], cfg(), |b, xs| {
            let v = m.forward(b, xs[0], Some(xs[1]))?;
            project(b.tape(), v, 29)
        })?);
    }

    let gts = BoxSet::new(vec![
        BBox::gt(1.3, 2.6, 2.0, 1.5).expect("box"),
        BBox::gt(6.2, 5.5, 1.2, 3.0).expect("box"),
    ]);
    let targets = RasterTargets::new(8, 8, &gts);
    {
        let mut store = ParamStore::new();
        let head = DetectionHead::new(&mut store, "head", 8, &mut rng(30));
        randomize(&mut store, 31);
        out.push(check_module("detection_head", &store, &[randn(&[1, 8, 8, 8], 32)], cfg(), |b, xs| {
            let y = head.forward(b, xs[0])?;
            Ok(detection_loss(b.tape(), y, &targets, FocalParams::default())?.0)
        })?);
    }

    out.push(check_fn("detection_loss", &[randn(&[1, 8, 8, 5], 33)], cfg(), |t, xs| {
        Ok(detection_loss(t, xs[0], &targets, FocalParams::default())?.0)
    })?);

    out.push(check_fn("domain_loss", &[randn(&[1], 34), randn(&[2], 35)], cfg(), |t, xs| domain_loss(t, xs[0], xs[1]))?);

    let labels = Arc::new(vec![0.0, 1.0, 1.0]);
    let weights = Arc::new(vec![0.5, 0.25, 0.25]);
    out.push(check_fn("weighted_bce", &[randn(&[3], 36)], cfg(), |t, xs| {
        mpda_core::adversary::weighted_bce(t, xs[0], labels.clone(), weights.clone())
    })?);

    for lambda in [0.0, 0.5, 1.0] {
        out.push(grl_composite(lambda, 37)?);
    }

    Ok(out)
}

/// Analytic gradient of `f(grl(x))` against `-lambda` times the central
/// difference of `f(x)`, with `f(u) = sum(w * u^2)`.
pub fn grl_composite(lambda: f64, seed: u64) -> Result<GradCheckReport> {
    let x = randn(&[2, 4, 4, 3], seed);
    let w = randn(x.shape(), seed + 1);
    let f = |u: &[f64]| u.iter().zip(w.data()).map(|(u, w)| w * u * u).sum::<f64>();
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let g = grl(&tape, xv, GrlSetting::new(lambda)?);
    let sq = tape.mul(g, g)?;
    let out = tape.sum_all(tape.mul(sq, tape.constant(w.clone()))?);
    let grads = tape.backward(out);
    let analytic = grads.get(xv).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
    let eps = 1e-6;
    let mut report = GradCheckReport {
        name: format!("grl_composite(lambda={lambda})"),
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        tol: GRL_TOL,
    };
    for i in 0..x.numel() {
        let mut p = x.data().to_vec();
        let mut m = x.data().to_vec();
        p[i] += eps;
        m[i] -= eps;
        let numeric = -lambda * (f(&p) - f(&m)) / (2.0 * eps);
        let e = rel_err(analytic[i], numeric, 1e-6);
        report.checked += 1;
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some(Mismatch { tensor: "x".into(), coord: i, analytic: analytic[i], numeric, rel_err: e });
        }
    }
    Ok(report)
}

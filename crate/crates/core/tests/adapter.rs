use mpda_core::adapter::{channel_align, AdapterPipeline, ChannelAligner, ChannelPlan, CrossDomainTransformer, FeatureResizer, ResizerConfig};
use mpda_core::fax_attention::FaxConfig;
use mpda_core::feature_core::{bilinear_resize, FeatureMap, ResizePolicy};
use mpda_core::gradcheck::{check_module, GradCheckConfig};
use mpda_core::nn::{Binding, ParamStore};
use mpda_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_fax() -> FaxConfig {
    FaxConfig { window_p: 2, grid_g: 2, heads: 2, head_dim: 2 }
}

fn cfg(h: usize, w: usize, c: usize) -> ResizerConfig {
    ResizerConfig { fax: small_fax(), ..ResizerConfig::new(h, w, c) }
}

fn randomize(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        let base = if store.name(id).ends_with("gamma") { 1.0 } else { 0.0 };
        store.set(id, Tensor::<f64>::randn(&shape, 0.4, &mut r).map(|v| v + base)).unwrap();
    }
}

fn run_resizer(store: &ParamStore<f64>, rz: &FeatureResizer, x: &Tensor<f64>, plan: &ChannelPlan) -> Tensor<f64> {
    let b = Binding::inference(store);
    let out = rz.forward(&b, b.tape().constant(x.clone()), plan).unwrap();
    (*b.tape().value(out)).clone()
}

fn run_aligner(store: &ParamStore<f64>, al: &ChannelAligner, x: &Tensor<f64>, plan: &ChannelPlan) -> Tensor<f64> {
    let b = Binding::inference(store);
    let out = al.forward(&b, b.tape().constant(x.clone()), plan).unwrap();
    (*b.tape().value(out)).clone()
}

#[test]
fn padding_count_oracle() {
    // C_S = 4 -> C_in = 8, C_T = 5: the padding rule appends 8 - 5 channels from [0, 5)
    let mut r = rng(1);
    for _ in 0..200 {
        let plan = ChannelPlan::draw(5, 8, 4, &mut r);
        let passes = plan.passes(5);
        assert_eq!(passes.len(), 1);
        assert_eq!(&passes[0][..5], &[0, 1, 2, 3, 4]);
        assert_eq!(passes[0].len() - 5, 3);
        assert!(passes[0][5..].iter().all(|&c| c < 5));
    }
}

#[test]
fn drop_branch_replays_recorded_subsets() {
    // C_S = 2 -> C_in = 4, C_T = 6, three repeats
    let mut store = ParamStore::<f64>::new();
    let al = ChannelAligner::new(&mut store, "al", 4, 2, &mut rng(2));
    randomize(&mut store, 3);
    let x = Tensor::<f64>::randn(&[2, 3, 3, 6], 1.0, &mut rng(4));
    let rc = ResizerConfig { n_repeats: 3, rng_seed: 99, ..ResizerConfig::new(3, 3, 2) };
    let fm = FeatureMap::from_tensor(x.clone(), 1).unwrap();
    let got = channel_align(&store, &al, &fm, &rc).unwrap();

    let ChannelPlan::Drop(subsets) = ChannelPlan::draw(6, 4, 3, &mut rng(99)) else { panic!("drop branch") };
    assert_eq!(subsets.len(), 3);
    let w = store.get(al.conv.weight).data().to_vec();
    let bias = store.get(al.conv.bias.unwrap()).data().to_vec();
    let mut want = vec![0.0; 2 * 3 * 3 * 2];
    for subset in &subsets {
        for (p, px) in x.data().chunks(6).enumerate() {
            for o in 0..2 {
                let s: f64 = bias[o] + subset.iter().enumerate().map(|(i, &c)| px[c] * w[i * 2 + o]).sum::<f64>();
                want[p * 2 + o] += s / 3.0;
            }
        }
    }
    for (a, b) in got.data().data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn exact_width_is_a_single_pass() {
    let mut store = ParamStore::<f64>::new();
    let al = ChannelAligner::new(&mut store, "al", 4, 2, &mut rng(5));
    let x = Tensor::<f64>::randn(&[1, 2, 2, 4], 1.0, &mut rng(6));
    let fm = FeatureMap::from_tensor(x, 0).unwrap();
    let a = channel_align(&store, &al, &fm, &ResizerConfig { n_repeats: 1, ..ResizerConfig::new(2, 2, 2) }).unwrap();
    let b = channel_align(&store, &al, &fm, &ResizerConfig { n_repeats: 9, rng_seed: 7, ..ResizerConfig::new(2, 2, 2) }).unwrap();
    assert_eq!(a, b);
}

#[test]
fn drop_selection_is_uniform() {
    let (c_t, c_in, repeats) = (96, 64, 10_000);
    let ChannelPlan::Drop(subsets) = ChannelPlan::draw(c_t, c_in, repeats, &mut rng(11)) else { panic!() };
    let mut counts = vec![0usize; c_t];
    for s in &subsets {
        for &c in s {
            counts[c] += 1;
        }
    }
    let expected = repeats as f64 * c_in as f64 / c_t as f64;
    for (c, &n) in counts.iter().enumerate() {
        let rel = (n as f64 - expected).abs() / expected;
        assert!(rel <= 0.05, "channel {c}: {n} vs {expected:.1}");
    }
}

#[test]
fn shape_contract_over_grid() {
    let (hs, ws, cs) = (8, 12, 4);
    let mut store = ParamStore::<f32>::new();
    let rz = FeatureResizer::new(&mut store, "rz", cfg(hs, ws, cs), &mut rng(12));
    let mut r = rng(13);
    let mut n = 0;
    for h in [4, 8, 12] {
        for w in [8, 16, 20] {
            for c in [5, 8, 13] {
                let x = Tensor::<f32>::randn(&[2, h, w, c], 1.0, &mut r);
                let plan = rz.plan(c, &mut r);
                let b = Binding::inference(&store);
                let out = rz.forward(&b, b.tape().constant(x), &plan).unwrap();
                assert_eq!(b.tape().shape(out), vec![2, hs, ws, cs], "input {h}x{w}x{c}");
                n += 1;
            }
        }
    }
    assert_eq!(n, 27);
}

#[test]
fn zero_branch_resizer_is_resized_alignment() {
    let mut store = ParamStore::<f64>::new();
    let rz = FeatureResizer::new(&mut store, "rz", cfg(12, 8, 4), &mut rng(14));
    randomize(&mut store, 15);
    rz.zero_branches(&mut store);
    let x = Tensor::<f64>::randn(&[2, 4, 6, 11], 1.0, &mut rng(16));
    let plan = rz.plan(11, &mut rng(17));
    let got = run_resizer(&store, &rz, &x, &plan);
    let aligned = run_aligner(&store, &rz.aligner, &x, &plan);
    let want = bilinear_resize(&aligned, 12, 8, ResizePolicy::default()).unwrap();
    assert_eq!(got, want);
}

#[test]
fn zero_branch_resizer_at_native_size_is_one_conv() {
    let mut store = ParamStore::<f64>::new();
    let rz = FeatureResizer::new(&mut store, "rz", cfg(4, 6, 3), &mut rng(18));
    randomize(&mut store, 19);
    rz.zero_branches(&mut store);
    let x = Tensor::<f64>::randn(&[1, 4, 6, 6], 1.0, &mut rng(20));
    let got = run_resizer(&store, &rz, &x, &ChannelPlan::Exact);
    let w = store.get(rz.aligner.conv.weight).data().to_vec();
    let bias = store.get(rz.aligner.conv.bias.unwrap()).data().to_vec();
    let b = Binding::inference(&store);
    let t = b.tape();
    let lin = t.linear(t.constant(x.clone()), t.constant(Tensor::from_vec(&[6, 3], w).unwrap()), Some(t.constant(Tensor::from_vec(&[3], bias).unwrap()))).unwrap();
    assert_eq!(got, *t.value(lin));
}

#[test]
fn fresh_transformer_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let cdt = CrossDomainTransformer::new(&mut store, "cdt", 8, small_fax(), &mut rng(21));
    let mut r = rng(22);
    let f_t = Tensor::<f64>::randn(&[3, 4, 4, 8], 1.0, &mut r);
    let f_s = Tensor::<f64>::randn(&[1, 4, 4, 8], 1.0, &mut r);
    let b = Binding::inference(&store);
    let t = b.tape();
    let out = cdt.forward(&b, t.constant(f_t.clone()), t.constant(f_s)).unwrap();
    assert_eq!(*t.value(out), f_t);
}

#[test]
fn transformer_rejects_mismatched_inputs() {
    let mut store = ParamStore::<f64>::new();
    let cdt = CrossDomainTransformer::new(&mut store, "cdt", 4, small_fax(), &mut rng(23));
    let b = Binding::inference(&store);
    let t = b.tape();
    let f_t = t.constant(Tensor::zeros(&[1, 4, 4, 4]));
    assert!(cdt.forward(&b, f_t, t.constant(Tensor::zeros(&[1, 4, 2, 4]))).is_err());
    assert!(cdt.forward(&b, f_t, t.constant(Tensor::zeros(&[1, 4, 4, 2]))).is_err());
}

fn trained_like_pipeline(seed: u64) -> (ParamStore<f64>, AdapterPipeline) {
    let mut store = ParamStore::<f64>::new();
    let p = AdapterPipeline::new(&mut store, "g", cfg(4, 4, 4), &mut rng(seed)).unwrap();
    randomize(&mut store, seed + 1);
    (store, p)
}

#[test]
fn identical_collaborators_give_identical_outputs() {
    let (store, p) = trained_like_pipeline(30);
    let mut r = rng(31);
    let one = Tensor::<f64>::randn(&[1, 4, 4, 6], 1.0, &mut r);
    let two = Tensor::from_vec(&[2, 4, 4, 6], [one.data(), one.data()].concat()).unwrap();
    let f_s = FeatureMap::from_tensor(Tensor::<f64>::randn(&[1, 4, 4, 4], 1.0, &mut r), 0).unwrap();
    let out = p.adapt(&store, &FeatureMap::from_tensor(two, 1).unwrap(), &f_s).unwrap();
    let n = out.data().numel() / 2;
    assert_eq!(out.data().data()[..n], out.data().data()[n..]);
}

#[test]
fn permuting_collaborators_permutes_outputs() {
    let (store, p) = trained_like_pipeline(32);
    let mut r = rng(33);
    let x = Tensor::<f64>::randn(&[3, 4, 4, 10], 1.0, &mut r);
    let f_s = FeatureMap::from_tensor(Tensor::<f64>::randn(&[1, 4, 4, 4], 1.0, &mut r), 0).unwrap();
    let slab = x.numel() / 3;
    let perm = [2usize, 0, 1];
    let px: Vec<f64> = perm.iter().flat_map(|&a| x.data()[a * slab..(a + 1) * slab].to_vec()).collect();
    let a = p.adapt(&store, &FeatureMap::from_tensor(x, 1).unwrap(), &f_s).unwrap();
    let b = p.adapt(&store, &FeatureMap::from_tensor(Tensor::from_vec(&[3, 4, 4, 10], px).unwrap(), 1).unwrap(), &f_s).unwrap();
    let oslab = a.data().numel() / 3;
    for (k, &src) in perm.iter().enumerate() {
        let lhs = &b.data().data()[k * oslab..(k + 1) * oslab];
        let rhs = &a.data().data()[src * oslab..(src + 1) * oslab];
        let err = lhs.iter().zip(rhs).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
    }
}

#[test]
fn seeded_adaptation_is_deterministic() {
    let (store, p) = trained_like_pipeline(34);
    let mut r = rng(35);
    let x = FeatureMap::from_tensor(Tensor::<f64>::randn(&[2, 4, 4, 12], 1.0, &mut r), 1).unwrap();
    let s = FeatureMap::from_tensor(Tensor::<f64>::randn(&[1, 4, 4, 4], 1.0, &mut r), 0).unwrap();
    assert_eq!(p.adapt(&store, &x, &s).unwrap(), p.adapt(&store, &x, &s).unwrap());
}

#[test]
fn end_to_end_gradients() {
    let mut store = ParamStore::<f64>::new();
    let p = AdapterPipeline::new(&mut store, "g", ResizerConfig { n_repeats: 2, ..cfg(8, 8, 4) }, &mut rng(40)).unwrap();
    randomize(&mut store, 41);
    let mut r = rng(42);
    let f_t = Tensor::<f64>::randn(&[2, 4, 8, 10], 1.0, &mut r);
    let f_s = Tensor::<f64>::randn(&[1, 8, 8, 4], 1.0, &mut r);
    let w = Tensor::<f64>::randn(&[2, 8, 8, 4], 1.0, &mut r);
    let plan = p.resizer.plan(10, &mut r);
    let gc = GradCheckConfig { coords_per_tensor: 4, eps: 1e-5, abs_floor: 1e-4, ..GradCheckConfig::default() };
    let report = check_module("adapter", &store, &[f_t, f_s], gc, |b, xs| {
        let t = b.tape();
        let y = p.forward(b, xs[0], xs[1], &plan)?;
        let z = t.mul(y, t.constant(w.clone()))?;
        Ok(t.sum_all(z))
    })
    .unwrap();
    assert!(report.passed(), "{}", report.summary());
}

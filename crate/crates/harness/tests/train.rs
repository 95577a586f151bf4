use mpda_core::adversary::GrlSetting;
use mpda_core::nn::Binding;
use mpda_harness::config::PrecisionMode;
use mpda_harness::error::HarnessError;
use mpda_harness::model::{is_adapter_param, Arch, CollabMode, Model, World};
use mpda_harness::synth::SceneConfig;
use mpda_harness::train::{scenario_domains, train, train_seeds, LossReport};
use mpda_harness::{Scenario, TrainingConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn quick(scenario: Scenario) -> TrainingConfig {
    TrainingConfig { scenario, epochs: 1, scenes_per_epoch: 4, ..Default::default() }
}

#[test]
fn loss_identity_holds_at_every_step() {
    let cfg = quick(Scenario::Hetero1);
    let out = train::<f64>(&cfg, Arch::default(), None).unwrap();
    assert_eq!(out.report.steps.len(), 4);
    assert!(out.report.steps.iter().all(|s| s.l_domain > 0.0));
    assert!(out.report.identity_error() <= 1e-6);
    for s in &out.report.steps {
        assert!((s.l - (s.l_det + 0.1 * s.l_domain)).abs() <= 1e-6);
        assert!((s.l_det - (s.focal + s.regression)).abs() <= 1e-9);
    }
}

#[test]
fn lr_drops_tenfold_every_ten_epochs() {
    let cfg = TrainingConfig::default();
    for e in 0..35 {
        let expect = 1e-3 * 0.1f64.powi((e / 10) as i32);
        assert_eq!(cfg.lr_at(e), expect, "epoch {e}");
    }
    let cfg = TrainingConfig { epochs: 21, scenes_per_epoch: 1, no_fusion: true, scenario: Scenario::Normal, ..Default::default() };
    let rep = train::<f32>(&cfg, Arch::default(), None).unwrap().report;
    let lrs: Vec<f64> = rep.steps.iter().map(|s| s.lr).collect();
    for (e, lr) in lrs.iter().enumerate() {
        assert_eq!(*lr, cfg.lr_at(e));
        if e > 0 {
            let ratio = lr / lrs[e - 1];
            let expect = if e % 10 == 0 { 0.1 } else { 1.0 };
            assert!((ratio - expect).abs() <= 1e-12, "epoch {e}: ratio {ratio}");
        }
    }
}

#[test]
fn zero_reversal_blocks_domain_gradient_into_adapter() {
    let (model, store) = Model::build::<f64>(Arch::default(), 3).unwrap();
    let (s, tr, _) = scenario_domains(Scenario::Hetero1, 0.05);
    let world = World::new(s, tr, SceneConfig::default());
    let sample = world.sample::<f64>(train_seeds(3, 1)[0], CollabMode::Adapter);
    let b = Binding::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (_, _, dom) = model.losses(&b, &sample, CollabMode::Adapter, GrlSetting::new(0.0).unwrap(), &mut rng).unwrap();
    let grads = b.param_grads(&b.tape().backward(dom.unwrap()));
    let mut clf_norm = 0.0;
    for ((_, name, _), g) in store.iter().zip(&grads) {
        let norm: f64 = g.as_ref().map_or(0.0, |g| g.data().iter().map(|v| v * v).sum());
        if is_adapter_param(name) {
            assert_eq!(norm, 0.0, "{name}");
        } else if name.starts_with("clf.") {
            clf_norm += norm;
        }
    }
    assert!(clf_norm > 0.0);
}

#[test]
fn reversal_scales_adapter_gradient_by_minus_lambda() {
    let (model, store) = Model::build::<f64>(Arch::default(), 4).unwrap();
    let (s, tr, _) = scenario_domains(Scenario::Hetero1, 0.05);
    let world = World::new(s, tr, SceneConfig::default());
    let sample = world.sample::<f64>(train_seeds(4, 1)[0], CollabMode::Adapter);
    let grad_at = |lambda: f64| {
        let b = Binding::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, _, dom) = model.losses(&b, &sample, CollabMode::Adapter, GrlSetting::new(lambda).unwrap(), &mut rng).unwrap();
        b.param_grads(&b.tape().backward(dom.unwrap()))
    };
    let (g1, g3) = (grad_at(0.1), grad_at(0.3));
    for ((_, name, _), (a, b)) in store.iter().zip(g1.iter().zip(&g3)) {
        let (Some(a), Some(b)) = (a, b) else { continue };
        for (x, y) in a.data().iter().zip(b.data()) {
            if is_adapter_param(name) {
                assert!((3.0 * x - y).abs() <= 1e-9 * (1.0 + y.abs()), "{name}: {x} {y}");
            } else {
                assert_eq!(x, y, "{name}");
            }
        }
    }
}

#[test]
fn f64_runs_are_bit_identical() {
    let cfg = TrainingConfig { precision: PrecisionMode::F64, ..quick(Scenario::Hetero1) };
    let a = train::<f64>(&cfg, Arch::default(), None).unwrap();
    let b = train::<f64>(&cfg, Arch::default(), None).unwrap();
    let bits = |r: &LossReport| -> Vec<u64> {
        r.steps.iter().flat_map(|s| [s.l, s.l_det, s.l_domain, s.focal, s.regression]).map(f64::to_bits).collect()
    };
    assert_eq!(bits(&a.report), bits(&b.report));
    assert_eq!(a.report, b.report);
    for ((_, _, x), (_, _, y)) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(x.data(), y.data());
    }
}

#[test]
fn detection_loss_falls_over_two_epochs() {
    let cfg = TrainingConfig {
        scenario: Scenario::Normal,
        no_fusion: true,
        epochs: 2,
        scenes_per_epoch: 150,
        lr: 3e-3,
        ..Default::default()
    };
    let rep = train::<f32>(&cfg, Arch::default(), None).unwrap().report;
    let mean = |r: &[mpda_harness::train::StepRecord]| r.iter().map(|s| s.l_det).sum::<f64>() / r.len() as f64;
    let (first, last) = (mean(&rep.steps[..30]), mean(&rep.steps[rep.steps.len() - 30..]));
    assert!(last < 0.7 * first, "{first} -> {last}");
}

#[test]
fn divergence_is_reported() {
    let cfg = TrainingConfig { lr: 1e38, ..quick(Scenario::Normal) };
    match train::<f32>(&cfg, Arch::default(), None) {
        Err(HarnessError::Divergence { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.report.steps.len())),
    }
}

#[test]
fn frozen_task_parameters_stay_fixed() {
    let cfg = TrainingConfig { freeze_task: true, ..quick(Scenario::Hetero1) };
    let (_, init) = Model::build::<f32>(Arch::default(), cfg.seed).unwrap();
    let out = train::<f32>(&cfg, Arch::default(), Some(&init)).unwrap();
    let mut moved_adapter = false;
    for ((_, name, a), (_, _, b)) in init.iter().zip(out.store.iter()) {
        if mpda_harness::model::is_task_param(name) {
            assert_eq!(a.data(), b.data(), "{name}");
        } else if is_adapter_param(name) && a.data() != b.data() {
            moved_adapter = true;
        }
    }
    assert!(moved_adapter);
}

#[test]
fn config_text_round_trips_through_checkpoint_meta() {
    let cfg = TrainingConfig { seed: 5, beta: 0.25, naive_align: true, ..Default::default() };
    let (_, store) = Model::build::<f32>(Arch::default(), 5).unwrap();
    let bytes = mpda_harness::train::checkpoint_bytes(&cfg, &store);
    let ck = mpda_core::checkpoint::decode_checkpoint(&bytes).unwrap();
    assert_eq!(TrainingConfig::parse(&ck.meta).unwrap(), cfg);
}

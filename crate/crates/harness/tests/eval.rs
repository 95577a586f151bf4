use mpda_core::fusion_head::{BBox, BoxSet};
use mpda_core::Tensor;
use mpda_harness::bench::bench_inference;
use mpda_harness::eval::{detections, evaluate, probe, split_agents, Method};
use mpda_harness::model::{Arch, CollabMode, Model, World};
use mpda_harness::synth::SceneConfig;
use mpda_harness::train::{eval_seeds, scenario_domains};
use mpda_harness::{HarnessError, Scenario};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn world(scenario: Scenario) -> World {
    let (s, _, te) = scenario_domains(scenario, 0.05);
    World::new(s, te, SceneConfig::default())
}

#[test]
fn evaluation_is_deterministic() {
    let (model, store) = Model::build::<f32>(Arch::default(), 1).unwrap();
    let w = world(Scenario::Hetero1);
    let samples = w.samples::<f32>(&eval_seeds(0, 3), CollabMode::Adapter);
    let a = evaluate(&model, &store, &samples, Method::Mpda, "hetero1").unwrap();
    let b = evaluate(&model, &store, &samples, Method::Mpda, "hetero1").unwrap();
    assert_eq!(a, b);
    assert_eq!(a.num_gt, samples.iter().map(|s| s.scene.boxes.len()).sum::<usize>());
    assert!(a.to_string().starts_with("method=mpda scenario=hetero1 ap_at_050="));
}

#[test]
fn no_fusion_ignores_collaborators() {
    let (model, store) = Model::build::<f32>(Arch::default(), 2).unwrap();
    let w = world(Scenario::Normal);
    let with = w.samples::<f32>(&eval_seeds(1, 4), CollabMode::Direct);
    let mut zeroed = with.clone();
    for s in &mut zeroed {
        if let Some(c) = &s.collab {
            let (a, h, ww, ch) = c.dims();
            let z = mpda_core::feature_core::FeatureMap::new(Tensor::zeros(&[a, h, ww, ch]), c.domain_id(), c.agent_ids().to_vec());
            s.collab = Some(z.unwrap());
        }
    }
    let a = detections(&model, &store, &with, CollabMode::None).unwrap();
    let b = detections(&model, &store, &zeroed, CollabMode::None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn wrong_ego_grid_is_rejected() {
    let (model, store) = Model::build::<f32>(Arch::default(), 3).unwrap();
    let (_, tr, _) = scenario_domains(Scenario::Hetero1, 0.05);
    let w = World::new(tr.clone(), tr, SceneConfig::default());
    let samples = w.samples::<f32>(&eval_seeds(2, 1), CollabMode::None);
    assert!(matches!(evaluate(&model, &store, &samples, Method::NoFusion, "x"), Err(HarnessError::Validation(_))));
}

#[test]
fn probe_separates_shifted_populations() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut draw = |shift: f64, n: usize| -> Vec<Tensor<f64>> {
        (0..n).map(|_| Tensor::randn(&[1, 8, 8, 4], 1.0, &mut rng).map(|v| v + shift)).collect()
    };
    let (a, b, c, d) = (draw(0.0, 20), draw(2.0, 20), draw(0.0, 20), draw(2.0, 20));
    let r = probe(4, (&a, &b), (&c, &d), 200, 1).unwrap();
    assert!(r.train_accuracy >= 0.95 && r.test_accuracy >= 0.95, "{r:?}");
    let (e, f) = (draw(0.0, 20), draw(0.0, 20));
    let same = probe(4, (&e, &f), (&c, &draw(0.0, 20)), 200, 1).unwrap();
    assert!(same.test_accuracy <= 0.8, "{same:?}");
}

#[test]
fn split_agents_inverts_stacking() {
    let x = Tensor::from_vec(&[3, 1, 2, 2], (0..12).map(f64::from).collect()).unwrap();
    let parts = split_agents(&x);
    assert_eq!(parts.len(), 3);
    assert_eq!(parts[2].data(), &[8.0, 9.0, 10.0, 11.0]);
}

#[test]
fn bench_reports_one_row_per_agent_count() {
    let (model, store) = Model::build::<f32>(Arch::default(), 4).unwrap();
    let w = world(Scenario::Hetero1);
    let rows = bench_inference(&model, &store, &w, &[1, 2], 0, 1).unwrap();
    assert_eq!(rows.iter().map(|r| r.n_agents).collect::<Vec<_>>(), vec![1, 2]);
    assert!(rows.iter().all(|r| r.fps_mean > 0.0 && r.iterations == 1));
    assert!(matches!(bench_inference(&model, &store, &w, &[1], 0, 0), Err(HarnessError::EmptyBenchmark)));
    assert!(matches!(bench_inference(&model, &store, &w, &[], 1, 1), Err(HarnessError::EmptyBenchmark)));
}

#[test]
fn perfect_detections_score_full_ap() {
    let gt = BoxSet::new(vec![BBox::gt(4.0, 4.0, 2.0, 2.0).unwrap()]);
    let det = BoxSet::new(vec![BBox::new(4.0, 4.0, 2.0, 2.0, 0.9).unwrap()]);
    let ap = mpda_core::fusion_head::average_precision(&det, &gt, 0.7);
    assert!((ap - 1.0).abs() < 1e-12);
}

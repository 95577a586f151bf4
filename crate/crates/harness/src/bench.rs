//! Forward-pass throughput of adapter + fusion + head.

use std::time::Instant;

use mpda_core::nn::{Binding, ParamStore};
use mpda_core::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::model::{CollabMode, Model, World};
use crate::synth::SceneConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n_agents: usize,
    pub fps_mean: f64,
    pub fps_std: f64,
    pub iterations: usize,
}

/// Times `iterations` forward passes per agent count after `warmup` untimed ones.
/// `n_agents` counts the ego, so `n_agents - 1` collaborators pass through G.
pub fn bench_inference<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    world: &World,
    agent_counts: &[usize],
    warmup: usize,
    iterations: usize,
) -> Result<Vec<BenchRow>> {
    if iterations == 0 || agent_counts.is_empty() {
        return Err(HarnessError::EmptyBenchmark);
    }
    let mut rows = Vec::new();
    for &n in agent_counts {
        if n == 0 {
            return Err(HarnessError::Validation("n_agents must be at least 1".into()));
        }
        let scenes = SceneConfig { min_collaborators: n - 1, max_collaborators: n - 1, ..world.scenes.clone() };
        let w = World::new(world.source.clone(), world.collab.clone(), scenes);
        let sample = w.sample::<T>(n as u64, CollabMode::Adapter);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut times = Vec::with_capacity(iterations);
        for i in 0..warmup + iterations {
            let start = Instant::now();
            let b = Binding::inference(store);
            let f = model.forward(&b, &sample, CollabMode::Adapter, &mut rng)?;
            std::hint::black_box(b.tape().value(f.head_out));
            if i >= warmup {
                times.push(start.elapsed().as_secs_f64());
            }
        }
        let fps: Vec<f64> = times.iter().map(|t| 1.0 / t.max(1e-12)).collect();
        let mean = fps.iter().sum::<f64>() / fps.len() as f64;
        let var = fps.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / fps.len() as f64;
        rows.push(BenchRow { n_agents: n, fps_mean: mean, fps_std: var.sqrt(), iterations });
    }
    Ok(rows)
}

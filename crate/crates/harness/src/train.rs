//! The adversarial training loop `L = alpha * L_det + beta * L_domain`.

use mpda_core::adversary::GrlSchedule;
use mpda_core::checkpoint::{decode_checkpoint, encode_checkpoint};
use mpda_core::nn::{Adam, Binding, ParamStore};
use mpda_core::Real;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Scenario, TrainingConfig};
use crate::error::{HarnessError, Result};
use crate::model::{is_task_param, Arch, CollabMode, Model, Sample, World};
use crate::synth::{DomainSpec, SceneConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l: f64,
    pub l_det: f64,
    pub l_domain: f64,
    pub focal: f64,
    pub regression: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub epoch: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub alpha: f64,
    pub beta: f64,
    pub steps: Vec<StepRecord>,
    pub probe: Vec<ProbeRecord>,
    pub ap: Vec<crate::eval::ApReport>,
}

impl LossReport {
    /// Largest `|L - (alpha L_det + beta L_domain)|` over all steps.
    pub fn identity_error(&self) -> f64 {
        self.steps.iter().map(|s| (s.l - (self.alpha * s.l_det + self.beta * s.l_domain)).abs()).fold(0.0, f64::max)
    }
}

/// Domains used for training and testing collaborators in a scenario.
pub fn scenario_domains(scenario: Scenario, noise_sigma: f64) -> (DomainSpec, DomainSpec, DomainSpec) {
    let with_noise = |d: DomainSpec| DomainSpec { noise_sigma, ..d };
    let s = with_noise(DomainSpec::source());
    let (tr, te) = match scenario {
        Scenario::Normal => (s.clone(), s.clone()),
        Scenario::Hetero1 => (DomainSpec::target_train(), DomainSpec::target_test()),
        Scenario::Hetero2 => (DomainSpec::target_test(), DomainSpec::target_train()),
    };
    (s, with_noise(tr), with_noise(te))
}

pub fn train_mode(cfg: &TrainingConfig) -> CollabMode {
    if cfg.no_fusion {
        CollabMode::None
    } else if cfg.naive_align {
        CollabMode::Naive
    } else if cfg.scenario.is_hetero() {
        CollabMode::Adapter
    } else {
        CollabMode::Direct
    }
}

const TRAIN_SALT: u64 = 0x7472_6169_6e00_0000;
const EVAL_SALT: u64 = 0x6576_616c_0000_0000;
const PROBE_SALT: u64 = 0x7072_6f62_6500_0000;

fn mix(seed: u64, salt: u64, i: u64) -> u64 {
    let mut x = seed ^ salt ^ i.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x ^= x >> 31;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^ (x >> 29)
}

pub fn train_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| mix(seed, TRAIN_SALT, i)).collect()
}

pub fn eval_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| mix(seed, EVAL_SALT, i)).collect()
}

pub fn probe_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| mix(seed, PROBE_SALT, i)).collect()
}

pub struct TrainOutput<T: Real> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub report: LossReport,
}

/// Optional per-step hook; return `false` to stop early.
pub type StepHook<'a> = dyn FnMut(&StepRecord) -> bool + 'a;

/// Trains from `cfg`, starting from `init` parameters when given.
pub fn train<T: Real>(cfg: &TrainingConfig, arch: Arch, init: Option<&ParamStore<T>>) -> Result<TrainOutput<T>> {
    train_with_hook(cfg, arch, init, &mut |_| true)
}

pub fn train_with_hook<T: Real>(
    cfg: &TrainingConfig,
    arch: Arch,
    init: Option<&ParamStore<T>>,
    hook: &mut StepHook<'_>,
) -> Result<TrainOutput<T>> {
    cfg.validate()?;
    let (source, collab, _) = scenario_domains(cfg.scenario, cfg.noise_sigma);
    let (model, mut store) = Model::build::<T>(Arch { source: source.clone(), ..arch }, cfg.seed)?;
    if let Some(p) = init {
        store.copy_matching(p, "");
    }
    if let Some(path) = &cfg.init {
        decode_checkpoint(&std::fs::read(path)?)?.load_into(&mut store)?;
    }
    let world = World::new(source, collab, SceneConfig::default());
    let mode = train_mode(cfg);
    let seeds = train_seeds(cfg.seed, cfg.scenes_per_epoch);
    let schedule = if cfg.grl_warmup > 0 {
        GrlSchedule::LinearWarmup { target: cfg.grl_lambda, steps: cfg.grl_warmup }
    } else {
        GrlSchedule::Constant(cfg.grl_lambda)
    };

    let mut opt = Adam::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x00ad_a000);
    let mut report = LossReport { alpha: cfg.alpha, beta: cfg.beta, ..Default::default() };
    let mut order: Vec<usize> = (0..seeds.len()).collect();
    let mut step = 0usize;
    'outer: for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let mut grl_setting = schedule.at(step as u64);
            grl_setting.lambda *= cfg.beta;
            let (rec, grads) = {
                let freeze = cfg.freeze_task;
                let b = Binding::with_frozen(&store, |n| freeze && is_task_param(n));
                let t = b.tape();
                let inv = 1.0 / chunk.len() as f64;
                let mut terms = Vec::new();
                let (mut l_det, mut l_dom, mut focal, mut reg) = (0.0, 0.0, 0.0, 0.0);
                for &i in chunk {
                    let sample: Sample<T> = world.sample(seeds[i], mode);
                    let (det, parts, dom) = model.losses(&b, &sample, mode, grl_setting, &mut rng)?;
                    l_det += t.scalar(det).as_f64() * inv;
                    focal += parts.focal * inv;
                    reg += parts.regression * inv;
                    terms.push(t.scale(det, cfg.alpha * inv));
                    if let Some(d) = dom {
                        l_dom += t.scalar(d).as_f64() * inv;
                        // the classifier sees L_domain at unit weight; beta enters G through the reversal
                        terms.push(t.scale(d, inv));
                    }
                }
                let objective = t.add_n(&terms)?;
                let l = cfg.alpha * l_det + cfg.beta * l_dom;
                let rec = StepRecord { step, epoch, lr, l, l_det, l_domain: l_dom, focal, regression: reg };
                if !l.is_finite() || !t.scalar(objective).as_f64().is_finite() {
                    return Err(HarnessError::Divergence { step, what: format!("loss {l}") });
                }
                (rec, b.param_grads(&t.backward(objective)))
            };
            opt.step(&mut store, &grads, lr);
            if !store.all_finite() {
                return Err(HarnessError::Divergence { step, what: "non-finite parameters".into() });
            }
            let go_on = hook(&rec);
            report.steps.push(rec);
            step += 1;
            if !go_on {
                break 'outer;
            }
        }
    }
    Ok(TrainOutput { model, store, report })
}

/// Checkpoint bytes with the training config as metadata.
pub fn checkpoint_bytes<T: Real>(cfg: &TrainingConfig, store: &ParamStore<T>) -> Vec<u8> {
    encode_checkpoint(store, &cfg.to_text())
}

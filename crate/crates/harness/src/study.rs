//! End-to-end heterogeneous adaptation study: pretrain on homogeneous
//! collaborators, adapt to dom_T_train, evaluate on dom_T_test against the
//! naive and no-fusion baselines, and probe domain separability.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{Scenario, TrainingConfig};
use crate::error::Result;
use crate::eval::{evaluate, probe, probe_maps, ApReport, Method, ProbeResult, PROBE_STEPS};
use crate::model::{Arch, CollabMode, World};
use crate::synth::SceneConfig;
use crate::train::{eval_seeds, probe_seeds, scenario_domains, train};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub seed: u64,
    /// Homogeneous pretraining steps (one scene per step).
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    /// Heterogeneous adaptation steps.
    pub adapt_steps: usize,
    pub adapt_lr: f64,
    pub beta: f64,
    pub freeze_task: bool,
    pub eval_scenes: usize,
    /// Scenes per probe split (train and test each).
    pub probe_scenes: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_steps: 3000,
            pretrain_lr: 1e-3,
            adapt_steps: 1500,
            adapt_lr: 1e-3,
            beta: 0.1,
            freeze_task: false,
            eval_scenes: 100,
            probe_scenes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub no_fusion: ApReport,
    pub naive: ApReport,
    pub mpda: ApReport,
    /// Probe on naively aligned dom_T_test maps.
    pub probe_unadapted: ProbeResult,
    /// Probe on G's dom_T_test outputs.
    pub probe_adapted: ProbeResult,
    pub seconds: f64,
}

impl StudyResult {
    pub fn probe_ok(&self) -> bool {
        self.probe_adapted.test_accuracy <= 0.6 && self.probe_unadapted.test_accuracy >= 0.95
    }

    pub fn beats_naive(&self) -> bool {
        self.mpda.ap_at_050 - self.naive.ap_at_050 >= 0.05
    }

    pub fn beats_no_fusion(&self) -> bool {
        self.mpda.ap_at_050 > self.no_fusion.ap_at_050
    }
}

/// Runs the study.
///
/// * no-fusion: trained without collaborators for `pretrain_steps + adapt_steps`.
/// * naive: the pretrained model fed bilinearly resized, channel-subsampled maps.
/// * MPDA: the pretrained model adapted with G on dom_T_train.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyResult> {
    let start = Instant::now();
    let arch = Arch::default();
    let pre_cfg = TrainingConfig {
        scenario: Scenario::Normal,
        epochs: 1,
        scenes_per_epoch: cfg.pretrain_steps,
        lr: cfg.pretrain_lr,
        seed: cfg.seed,
        ..TrainingConfig::default()
    };
    let pre = train::<f32>(&pre_cfg, arch.clone(), None)?;

    let nf_cfg = TrainingConfig { no_fusion: true, scenes_per_epoch: cfg.pretrain_steps + cfg.adapt_steps, ..pre_cfg.clone() };
    let nf = train::<f32>(&nf_cfg, arch.clone(), None)?;

    let het_cfg = TrainingConfig {
        scenario: Scenario::Hetero1,
        epochs: 1,
        scenes_per_epoch: cfg.adapt_steps,
        lr: cfg.adapt_lr,
        beta: cfg.beta,
        freeze_task: cfg.freeze_task,
        seed: cfg.seed.wrapping_add(1),
        ..TrainingConfig::default()
    };
    let het = train::<f32>(&het_cfg, arch, Some(&pre.store))?;

    let (s, _, te) = scenario_domains(Scenario::Hetero1, het_cfg.noise_sigma);
    let world = World::new(s.clone(), te, SceneConfig::default());
    let seeds = eval_seeds(cfg.seed, cfg.eval_scenes);
    let name = "hetero1";
    let no_fusion = evaluate(&nf.model, &nf.store, &world.samples(&seeds, CollabMode::None), Method::NoFusion, name)?;
    let naive = evaluate(&pre.model, &pre.store, &world.samples(&seeds, CollabMode::Naive), Method::Naive, name)?;
    let mpda = evaluate(&het.model, &het.store, &world.samples(&seeds, CollabMode::Adapter), Method::Mpda, name)?;

    let ps = probe_seeds(cfg.seed, 2 * cfg.probe_scenes);
    let (ptr, pte) = ps.split_at(cfg.probe_scenes);
    let probe_with = |mode: CollabMode| -> Result<ProbeResult> {
        let (a, b) = probe_maps(&het.model, &het.store, &world.samples::<f32>(ptr, mode), mode)?;
        let (c, d) = probe_maps(&het.model, &het.store, &world.samples::<f32>(pte, mode), mode)?;
        probe(s.c, (&a, &b), (&c, &d), PROBE_STEPS, cfg.seed ^ 0x9e0b)
    };
    let probe_unadapted = probe_with(CollabMode::Naive)?;
    let probe_adapted = probe_with(CollabMode::Adapter)?;
    Ok(StudyResult { no_fusion, naive, mpda, probe_unadapted, probe_adapted, seconds: start.elapsed().as_secs_f64() })
}

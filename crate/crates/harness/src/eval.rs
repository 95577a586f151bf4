//! AP evaluation of the three methods and the post hoc domain probe.

use std::fmt;

use mpda_core::adversary::{domain_accuracy, domain_loss, DomainClassifier};
use mpda_core::fusion_head::{average_precision_scenes, detect, ApMode, BoxSet};
use mpda_core::nn::{Adam, Binding, ParamStore};
use mpda_core::{Real, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::model::{CollabMode, Model, Sample};

pub const SCORE_THRESHOLD: f64 = 0.3;
pub const NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    NoFusion,
    Naive,
    Mpda,
    /// Homogeneous collaborators fed directly.
    Direct,
}

impl Method {
    pub fn mode(self) -> CollabMode {
        match self {
            Method::NoFusion => CollabMode::None,
            Method::Naive => CollabMode::Naive,
            Method::Mpda => CollabMode::Adapter,
            Method::Direct => CollabMode::Direct,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::NoFusion => "nofusion",
            Method::Naive => "naive",
            Method::Mpda => "mpda",
            Method::Direct => "direct",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub method: String,
    pub scenario: String,
    pub ap_at_050: f64,
    pub ap_at_070: f64,
    pub num_gt: usize,
    pub num_det: usize,
}

impl fmt::Display for ApReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "method={} scenario={} ap_at_050={:.4} ap_at_070={:.4} num_gt={} num_det={}",
            self.method, self.scenario, self.ap_at_050, self.ap_at_070, self.num_gt, self.num_det
        )
    }
}

/// Detections of `model` on each sample.
pub fn detections<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    samples: &[Sample<T>],
    mode: CollabMode,
) -> Result<Vec<BoxSet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(model.adapter.cfg().rng_seed);
    samples
        .iter()
        .map(|s| {
            let b = Binding::inference(store);
            let f = model.forward(&b, s, mode, &mut rng)?;
            Ok(detect(&b.tape().value(f.head_out), SCORE_THRESHOLD, NMS_IOU)?)
        })
        .collect()
}

/// AP@0.5 and AP@0.7 pooled over the samples.
pub fn evaluate<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    samples: &[Sample<T>],
    method: Method,
    scenario: &str,
) -> Result<ApReport> {
    if let Some(s) = samples.first() {
        let (_, h, w, c) = s.ego.dims();
        let src = &model.arch.source;
        if (h, w, c) != (src.h, src.w, src.c) {
            return Err(HarnessError::Validation(format!(
                "ego maps are {h}x{w}x{c}, model expects {}x{}x{}",
                src.h, src.w, src.c
            )));
        }
    }
    let dets = detections(model, store, samples, method.mode())?;
    let pairs: Vec<(&BoxSet, &BoxSet)> = dets.iter().zip(samples).map(|(d, s)| (d, &s.scene.boxes)).collect();
    Ok(ApReport {
        method: method.name().into(),
        scenario: scenario.into(),
        ap_at_050: average_precision_scenes(&pairs, 0.5, ApMode::Step),
        ap_at_070: average_precision_scenes(&pairs, 0.7, ApMode::Step),
        num_gt: samples.iter().map(|s| s.scene.boxes.len()).sum(),
        num_det: dets.iter().map(BoxSet::len).sum(),
    })
}

pub const PROBE_STEPS: usize = 200;
pub const PROBE_LR: f64 = 1e-2;

/// Source-vs-collaborator domain probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

/// Trains a fresh classifier for `steps` Adam steps on single-agent maps,
/// alternating one source and one collaborator map per step, and reports
/// accuracy on the held-out pairs.
pub fn probe<T: Real>(
    channels: usize,
    train: (&[Tensor<T>], &[Tensor<T>]),
    test: (&[Tensor<T>], &[Tensor<T>]),
    steps: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if train.0.is_empty() || train.1.is_empty() {
        return Err(HarnessError::Validation("probe needs maps from both domains".into()));
    }
    let mut store = ParamStore::<T>::new();
    let clf = DomainClassifier::new(&mut store, "probe", channels, &mut ChaCha8Rng::seed_from_u64(seed));
    let mut opt = Adam::new(&store);
    for step in 0..steps {
        let (s, t) = (&train.0[step % train.0.len()], &train.1[step % train.1.len()]);
        let grads = {
            let b = Binding::new(&store);
            let tp = b.tape();
            let ls = clf.forward(&b, tp.constant(s.clone()))?;
            let lt = clf.forward(&b, tp.constant(t.clone()))?;
            let loss = domain_loss(tp, ls, lt)?;
            b.param_grads(&tp.backward(loss))
        };
        opt.step(&mut store, &grads, PROBE_LR);
    }
    let acc = |src: &[Tensor<T>], tgt: &[Tensor<T>]| -> Result<f64> {
        let ls: Vec<f64> = src.iter().map(|x| clf.logits(&store, x)).collect::<mpda_core::Result<Vec<_>>>()?.concat();
        let lt: Vec<f64> = tgt.iter().map(|x| clf.logits(&store, x)).collect::<mpda_core::Result<Vec<_>>>()?.concat();
        Ok(domain_accuracy(&ls, &lt))
    };
    Ok(ProbeResult { train_accuracy: acc(train.0, train.1)?, test_accuracy: acc(test.0, test.1)? })
}

/// Splits an `[N, H, W, C]` tensor into N single-agent tensors.
pub fn split_agents<T: Real>(x: &Tensor<T>) -> Vec<Tensor<T>> {
    let s = x.shape();
    let per = s[1] * s[2] * s[3];
    x.data()
        .chunks(per)
        .map(|c| Tensor::from_vec(&[1, s[1], s[2], s[3]], c.to_vec()).expect("shape"))
        .collect()
}

/// Ego maps and the first collaborator map as the fusion model sees it, one pair per sample.
pub fn probe_maps<T: Real>(
    model: &Model,
    store: &ParamStore<T>,
    samples: &[Sample<T>],
    mode: CollabMode,
) -> Result<(Vec<Tensor<T>>, Vec<Tensor<T>>)> {
    let mut src = Vec::new();
    let mut tgt = Vec::new();
    for s in samples {
        if let Some(view) = model.collaborator_view(store, s, mode)? {
            src.push(s.ego.data().clone());
            tgt.push(split_agents(view.data()).swap_remove(0));
        }
    }
    Ok((src, tgt))
}

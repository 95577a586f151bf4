//! Gradient reversal, the two-conv domain classifier and the domain loss.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::nn::{Binding, Conv3x3, Init, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrlSetting {
    pub lambda: f64,
}

impl GrlSetting {
    pub fn new(lambda: f64) -> Result<Self> {
        ensure!(lambda.is_finite() && lambda >= 0.0, InvalidArgument, "grl lambda must be >= 0, got {lambda}");
        Ok(Self { lambda })
    }
}

impl Default for GrlSetting {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

/// Reversal strength over training. Constant by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GrlSchedule {
    Constant(f64),
    /// Ramps linearly from 0 to `target` over `steps` steps, then holds.
    LinearWarmup { target: f64, steps: u64 },
}

impl GrlSchedule {
    pub fn at(&self, step: u64) -> GrlSetting {
        let lambda = match *self {
            GrlSchedule::Constant(l) => l,
            GrlSchedule::LinearWarmup { target, steps } if steps > 0 => target * (step.min(steps) as f64 / steps as f64),
            GrlSchedule::LinearWarmup { target, .. } => target,
        };
        GrlSetting { lambda }
    }
}

/// Identity forward; backward multiplies the incoming gradient by `-lambda`.
pub fn grl<T: Real>(tape: &Tape<T>, x: Var, setting: GrlSetting) -> Var {
    let value = (*tape.value(x)).clone();
    let s = T::lit(-setting.lambda);
    tape.push(value, &[x], move |g, _| vec![Some(g.map(|v| v * s))])
}

/// `conv3x3(C -> C/2) -> relu -> conv3x3(C/2 -> 1) -> spatial mean`: one logit per agent.
#[derive(Debug, Clone)]
pub struct DomainClassifier {
    pub conv1: Conv3x3,
    pub conv2: Conv3x3,
    pub channels: usize,
}

impl DomainClassifier {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut R) -> Self {
        let hidden = (channels / 2).max(1);
        Self {
            conv1: Conv3x3::new(store, &format!("{name}.conv1"), channels, hidden, Init::Scaled(2f64.sqrt()), rng),
            conv2: Conv3x3::new(store, &format!("{name}.conv2"), hidden, 1, Init::Scaled(1.0), rng),
            channels,
        }
    }

    /// Logits `[A]` for an `[A, H, W, C]` map.
    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, x: Var) -> Result<Var> {
        let t = b.tape();
        let s = t.shape(x);
        ensure!(s.len() == 4, Shape, "classifier input must be [A,H,W,C], got {:?}", s);
        ensure!(s[3] == self.channels, Shape, "classifier built for {} channels, got {}", self.channels, s[3]);
        let h = t.relu(self.conv1.forward(b, x)?);
        let z = self.conv2.forward(b, h)?;
        let flat = t.reshape(z, &[s[0] * s[1] * s[2]])?;
        t.mean_blocks(flat, s[0])
    }

    /// Inference logits as plain numbers.
    pub fn logits<T: Real>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Vec<f64>> {
        let b = Binding::inference(store);
        let z = self.forward(&b, b.tape().constant(x.clone()))?;
        Ok(b.tape().value(z).to_f64_vec())
    }
}

/// Per-agent logits of `fm` under `clf`.
pub fn classify_domain<T: Real>(
    store: &ParamStore<T>,
    fm: &crate::feature_core::FeatureMap<T>,
    clf: &DomainClassifier,
) -> Result<Vec<f64>> {
    clf.logits(store, fm.data())
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stable `-(y ln p + (1-y) ln(1-p))` with `p = sigmoid(z)`.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Weighted binary cross-entropy on logits: `sum_i w_i * bce(z_i, y_i)`.
pub fn weighted_bce<T: Real>(tape: &Tape<T>, logits: Var, labels: Arc<Vec<f64>>, weights: Arc<Vec<f64>>) -> Result<Var> {
    let z = tape.value(logits);
    ensure!(
        z.numel() == labels.len() && labels.len() == weights.len(),
        Shape,
        "bce: {} logits, {} labels, {} weights",
        z.numel(),
        labels.len(),
        weights.len()
    );
    let zs = z.to_f64_vec();
    let loss: f64 = zs.iter().zip(labels.iter()).zip(weights.iter()).map(|((&z, &y), &w)| w * bce_with_logits(z, y)).sum();
    let shape = z.shape().to_vec();
    Ok(tape.push(Tensor::scalar(T::lit(loss)), &[logits], move |g, _| {
        let g0 = g.data()[0].as_f64();
        let gz = zs.iter().zip(labels.iter()).zip(weights.iter()).map(|((&z, &y), &w)| T::lit(g0 * w * (sigmoid(z) - y))).collect();
        vec![Some(Tensor::from_vec(&shape, gz).expect("shape"))]
    }))
}

/// Balanced domain loss: the average of the source-group mean BCE (label 0)
/// and the target-group mean BCE (label 1). With one group empty it is that
/// group's mean.
pub fn domain_loss<T: Real>(tape: &Tape<T>, logits_s: Var, logits_t: Var) -> Result<Var> {
    let (ns, nt) = (tape.value(logits_s).numel(), tape.value(logits_t).numel());
    ensure!(ns + nt > 0, InvalidArgument, "domain loss needs at least one logit");
    let groups = (ns > 0) as usize + (nt > 0) as usize;
    let ws = if ns > 0 { 1.0 / (ns * groups) as f64 } else { 0.0 };
    let wt = if nt > 0 { 1.0 / (nt * groups) as f64 } else { 0.0 };
    let all = tape.concat0(&[tape.reshape(logits_s, &[ns])?, tape.reshape(logits_t, &[nt])?])?;
    let labels = Arc::new([vec![0.0; ns], vec![1.0; nt]].concat());
    let weights = Arc::new([vec![ws; ns], vec![wt; nt]].concat());
    weighted_bce(tape, all, labels, weights)
}

/// Closed-form [`domain_loss`] on plain numbers.
pub fn domain_loss_value(logits_s: &[f64], logits_t: &[f64]) -> Result<f64> {
    ensure!(!logits_s.is_empty() || !logits_t.is_empty(), InvalidArgument, "domain loss needs at least one logit");
    let mean = |z: &[f64], y: f64| z.iter().map(|&v| bce_with_logits(v, y)).sum::<f64>() / z.len() as f64;
    Ok(match (logits_s.is_empty(), logits_t.is_empty()) {
        (false, false) => 0.5 * (mean(logits_s, 0.0) + mean(logits_t, 1.0)),
        (false, true) => mean(logits_s, 0.0),
        _ => mean(logits_t, 1.0),
    })
}

/// Fraction of logits on the correct side of 0 (source < 0, target > 0).
pub fn domain_accuracy(logits_s: &[f64], logits_t: &[f64]) -> f64 {
    let correct = logits_s.iter().filter(|&&z| z < 0.0).count() + logits_t.iter().filter(|&&z| z > 0.0).count();
    correct as f64 / (logits_s.len() + logits_t.len()).max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_closed_forms() {
        assert!((bce_with_logits(0.0, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_with_logits(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_with_logits(-50.0, 0.0) < 1e-20);
        assert!((bce_with_logits(800.0, 0.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn warmup_schedule() {
        let s = GrlSchedule::LinearWarmup { target: 1.0, steps: 10 };
        assert_eq!(s.at(0).lambda, 0.0);
        assert_eq!(s.at(5).lambda, 0.5);
        assert_eq!(s.at(50).lambda, 1.0);
        assert_eq!(GrlSchedule::Constant(0.3).at(7).lambda, 0.3);
    }

    #[test]
    fn negative_lambda_is_rejected() {
        assert!(GrlSetting::new(-0.1).is_err());
        assert!(GrlSetting::new(0.0).is_ok());
    }
}

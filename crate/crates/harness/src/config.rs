//! Flat `key = value` training configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Collaborators share the ego's domain.
    Normal,
    /// Train with dom_T_train collaborators, test with dom_T_test.
    Hetero1,
    /// Train with dom_T_test collaborators, test with dom_T_train.
    Hetero2,
}

impl Scenario {
    pub fn is_hetero(self) -> bool {
        self != Scenario::Normal
    }
}

impl FromStr for Scenario {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Scenario::Normal),
            "hetero1" => Ok(Scenario::Hetero1),
            "hetero2" => Ok(Scenario::Hetero2),
            _ => Err(HarnessError::Config(format!("unknown scenario {s:?}"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::Normal => "normal",
            Scenario::Hetero1 => "hetero1",
            Scenario::Hetero2 => "hetero2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionMode {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub scenes_per_epoch: usize,
    pub batch: usize,
    pub seed: u64,
    pub scenario: Scenario,
    pub precision: PrecisionMode,
    pub grl_lambda: f64,
    /// Steps over which the reversal strength ramps up from 0; 0 disables the ramp.
    pub grl_warmup: u64,
    /// Train and evaluate without collaborators.
    pub no_fusion: bool,
    /// Feed collaborators through bilinear resize and random channel selection instead of G.
    pub naive_align: bool,
    /// Keep fusion and head parameters fixed; only G and the classifier train.
    pub freeze_task: bool,
    pub noise_sigma: f64,
    /// Checkpoint whose matching parameters initialize the model.
    pub init: Option<String>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.1,
            lr: 1e-3,
            lr_decay: 0.1,
            decay_every: 10,
            epochs: 2,
            scenes_per_epoch: 64,
            batch: 1,
            seed: 0,
            scenario: Scenario::Hetero1,
            precision: PrecisionMode::F32,
            grl_lambda: 1.0,
            grl_warmup: 0,
            no_fusion: false,
            naive_align: false,
            freeze_task: false,
            noise_sigma: 0.05,
            init: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| HarnessError::Config(format!("bad value for {key}: {v:?}")))
}

impl TrainingConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected key = value", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "alpha" => cfg.alpha = parse(k, v)?,
                "beta" => cfg.beta = parse(k, v)?,
                "lr" => cfg.lr = parse(k, v)?,
                "lr_decay" => cfg.lr_decay = parse(k, v)?,
                "decay_every" => cfg.decay_every = parse(k, v)?,
                "epochs" => cfg.epochs = parse(k, v)?,
                "scenes_per_epoch" => cfg.scenes_per_epoch = parse(k, v)?,
                "batch" => cfg.batch = parse(k, v)?,
                "seed" => cfg.seed = parse(k, v)?,
                "scenario" => cfg.scenario = v.parse()?,
                "precision" => {
                    cfg.precision = match v {
                        "f32" => PrecisionMode::F32,
                        "f64" => PrecisionMode::F64,
                        _ => return Err(HarnessError::Config(format!("bad precision {v:?}"))),
                    }
                }
                "grl_lambda" => cfg.grl_lambda = parse(k, v)?,
                "grl_warmup" => cfg.grl_warmup = parse(k, v)?,
                "no_fusion" => cfg.no_fusion = parse(k, v)?,
                "naive_align" => cfg.naive_align = parse(k, v)?,
                "freeze_task" => cfg.freeze_task = parse(k, v)?,
                "noise_sigma" => cfg.noise_sigma = parse(k, v)?,
                "init" => cfg.init = Some(v.to_string()),
                _ => return Err(HarnessError::Config(format!("line {}: unknown key {k:?}", n + 1))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return bad("alpha and beta must lie in [0, 1]");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if self.decay_every == 0 || self.batch == 0 || self.scenes_per_epoch == 0 {
            return bad("decay_every, batch and scenes_per_epoch must be positive");
        }
        if !(self.grl_lambda >= 0.0) || !(self.noise_sigma >= 0.0) {
            return bad("grl_lambda and noise_sigma must be nonnegative");
        }
        Ok(())
    }

    /// `lr * lr_decay^floor(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.scenes_per_epoch.div_ceil(self.batch)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "alpha = {}\nbeta = {}\nlr = {}\nlr_decay = {}\ndecay_every = {}\nepochs = {}\nscenes_per_epoch = {}\n\
             batch = {}\nseed = {}\nscenario = {}\nprecision = {}\ngrl_lambda = {}\ngrl_warmup = {}\nno_fusion = {}\nnaive_align = {}\nfreeze_task = {}\nnoise_sigma = {}\n",
            self.alpha,
            self.beta,
            self.lr,
            self.lr_decay,
            self.decay_every,
            self.epochs,
            self.scenes_per_epoch,
            self.batch,
            self.seed,
            self.scenario,
            if self.precision == PrecisionMode::F64 { "f64" } else { "f32" },
            self.grl_lambda,
            self.grl_warmup,
            self.no_fusion,
            self.naive_align,
            self.freeze_task,
            self.noise_sigma,
        );
        if let Some(p) = &self.init {
            s.push_str(&format!("init = {p}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_defaults() {
        let cfg = TrainingConfig::parse("# run\nalpha = 1.0\nbeta=0.1 # adversarial weight\n\nscenario = normal\n").unwrap();
        assert_eq!(cfg.scenario, Scenario::Normal);
        assert_eq!(cfg.beta, 0.1);
        assert_eq!(cfg.lr, 1e-3);
    }

    #[test]
    fn rejects_unknown_keys_and_ranges() {
        assert!(matches!(TrainingConfig::parse("gamma = 1"), Err(HarnessError::Config(_))));
        assert!(TrainingConfig::parse("beta = 1.5").is_err());
        assert!(TrainingConfig::parse("lr = 0").is_err());
        assert!(TrainingConfig::parse("alpha 1").is_err());
    }

    #[test]
    fn text_round_trip() {
        let cfg = TrainingConfig { seed: 9, init: Some("a.ckpt".into()), ..Default::default() };
        assert_eq!(TrainingConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}

//! Central finite-difference gradient checks against the tape's analytic
//! gradients. Only forward evaluations feed the numeric side.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Result};
use crate::nn::{Binding, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Magnitudes below this are compared absolutely: the error denominator
    /// is `max(|analytic|, |numeric|, abs_floor)`.
    pub abs_floor: f64,
    /// Coordinates sampled per tensor (all of them when the tensor is smaller).
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-6, tol: 1e-3, abs_floor: 1e-6, coords_per_tensor: 24, seed: 0x5eed }
    }
}

impl GradCheckConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub tensor: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= self.tol
    }

    pub fn summary(&self) -> String {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        let worst = self
            .worst
            .as_ref()
            .map(|m| format!(" worst={}[{}] analytic={:.6e} numeric={:.6e}", m.tensor, m.coord, m.analytic, m.numeric))
            .unwrap_or_default();
        format!(
            "{status} {:<28} coords={:<5} max_rel_err={:.3e} tol={:.0e}{worst}",
            self.name, self.checked, self.max_rel_err, self.tol
        )
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Accumulator {
    cfg: GradCheckConfig,
    checked: usize,
    worst: Option<Mismatch>,
    max_rel: f64,
}

impl Accumulator {
    fn new(cfg: GradCheckConfig) -> Self {
        Self { cfg, checked: 0, worst: None, max_rel: 0.0 }
    }

    fn record(&mut self, tensor: &str, coord: usize, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric, self.cfg.abs_floor);
        self.checked += 1;
        if e >= self.max_rel {
            self.max_rel = e;
            self.worst = Some(Mismatch { tensor: tensor.to_string(), coord, analytic, numeric, rel_err: e });
        }
    }

    fn finish(self, name: &str) -> GradCheckReport {
        GradCheckReport {
            name: name.to_string(),
            checked: self.checked,
            max_rel_err: self.max_rel,
            worst: self.worst,
            tol: self.cfg.tol,
        }
    }
}

fn pick_coords(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        let mut idx = sample(rng, n, k).into_vec();
        idx.sort_unstable();
        idx
    }
}

/// Checks a scalar function of plain input tensors.
pub fn check_fn<F>(name: &str, inputs: &[Tensor<f64>], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let store = ParamStore::new();
    check_module(name, &store, inputs, cfg, |b, xs| f(b.tape(), xs))
}

/// Checks a scalar function of both the parameters in `store` and `inputs`.
pub fn check_module<F>(
    name: &str,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    cfg: GradCheckConfig,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&Binding<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let b = Binding::inference(store);
        let xs: Vec<Var> = inputs.iter().map(|t| b.tape().constant(t.clone())).collect();
        let out = f(&b, &xs)?;
        Ok(b.tape().scalar(out))
    };

    let b = Binding::new(store);
    let xs: Vec<Var> = inputs.iter().map(|t| b.tape().leaf(t.clone())).collect();
    let out = f(&b, &xs)?;
    ensure!(
        b.tape().value(out).numel() == 1,
        Shape,
        "gradient check target must be scalar, got {:?}",
        b.tape().shape(out)
    );
    let grads = b.tape().backward(out);
    let pgrads = b.param_grads(&grads);
    let igrads: Vec<Option<Tensor<f64>>> = xs.iter().map(|&x| grads.get(x).cloned()).collect();
    drop(b);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut acc = Accumulator::new(cfg);
    let mut work_store = store.clone();
    let mut work_inputs = inputs.to_vec();
    let zero_grad = |n: usize| vec![0.0; n];

    for id in store.ids() {
        let n = store.get(id).numel();
        let analytic = pgrads[id.index()].as_ref().map(|g| g.data().to_vec()).unwrap_or_else(|| zero_grad(n));
        for c in pick_coords(n, cfg.coords_per_tensor, &mut rng) {
            let orig = store.get(id).data()[c];
            work_store.get_mut(id).data_mut()[c] = orig + cfg.eps;
            let fp = eval(&work_store, &work_inputs)?;
            work_store.get_mut(id).data_mut()[c] = orig - cfg.eps;
            let fm = eval(&work_store, &work_inputs)?;
            work_store.get_mut(id).data_mut()[c] = orig;
            acc.record(store.name(id), c, analytic[c], (fp - fm) / (2.0 * cfg.eps));
        }
    }
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let analytic = igrads[i].as_ref().map(|g| g.data().to_vec()).unwrap_or_else(|| zero_grad(n));
        for c in pick_coords(n, cfg.coords_per_tensor, &mut rng) {
            let orig = input.data()[c];
            work_inputs[i].data_mut()[c] = orig + cfg.eps;
            let fp = eval(&work_store, &work_inputs)?;
            work_inputs[i].data_mut()[c] = orig - cfg.eps;
            let fm = eval(&work_store, &work_inputs)?;
            work_inputs[i].data_mut()[c] = orig;
            acc.record(&format!("input{i}"), c, analytic[c], (fp - fm) / (2.0 * cfg.eps));
        }
    }
    Ok(acc.finish(name))
}

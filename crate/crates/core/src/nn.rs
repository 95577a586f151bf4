//! Named parameter storage, tape binding, basic layers and the Adam optimizer.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{ensure, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, insertion-ordered store of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), values: Vec::new(), lookup: HashMap::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter name {name}");
        self.lookup.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.values).enumerate().map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        ensure!(
            self.values[id.0].shape() == value.shape(),
            Shape,
            "parameter {} has shape {:?}, got {:?}",
            self.names[id.0],
            self.values[id.0].shape(),
            value.shape()
        );
        self.values[id.0] = value;
        Ok(())
    }

    /// Copies every parameter of `other` whose name starts with `prefix` and
    /// exists here with the same shape. Returns the number copied.
    pub fn copy_matching(&mut self, other: &ParamStore<T>, prefix: &str) -> usize {
        let mut copied = 0;
        for (_, name, value) in other.iter() {
            if !name.starts_with(prefix) {
                continue;
            }
            if let Some(id) = self.id(name) {
                if self.values[id.0].shape() == value.shape() {
                    self.values[id.0] = value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            lookup: self.lookup.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

/// A tape plus lazily bound parameters from a store.
///
/// Frozen parameters enter the tape as constants and receive no gradient.
pub struct Binding<'s, T: Real> {
    tape: Tape<T>,
    store: &'s ParamStore<T>,
    vars: RefCell<Vec<Option<Var>>>,
    frozen: Vec<bool>,
}

impl<'s, T: Real> Binding<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self::with_frozen(store, |_| false)
    }

    pub fn with_frozen(store: &'s ParamStore<T>, frozen: impl Fn(&str) -> bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            vars: RefCell::new(vec![None; store.len()]),
            frozen: store.names.iter().map(|n| frozen(n)).collect(),
        }
    }

    /// Gradient-free evaluation: every parameter enters as a constant.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self::with_frozen(store, |_| true)
    }

    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var {
        if let Some(v) = self.vars.borrow()[id.0] {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.frozen[id.0] { self.tape.constant(value) } else { self.tape.leaf(value) };
        self.vars.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients per parameter id; `None` for unbound, frozen, or untouched ones.
    pub fn param_grads(&self, grads: &Grads<T>) -> Vec<Option<Tensor<T>>> {
        self.vars
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std `gain / sqrt(fan_in)`.
    Scaled(f64),
    Zeros,
    /// Square identity matrix (linear layers only).
    Identity,
}

fn init_weight<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor<T> {
    match init {
        Init::Scaled(gain) => Tensor::randn(shape, gain / (fan_in.max(1) as f64).sqrt(), rng),
        Init::Zeros => Tensor::zeros(shape),
        Init::Identity => {
            assert!(shape.len() == 2 && shape[0] == shape[1], "identity init needs a square weight");
            Tensor::eye(shape[0])
        }
    }
}

/// Per-pixel affine map (1x1 convolution) over the channel axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_weight(&[d_in, d_out], d_in, init, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        Self { weight, bias, d_in, d_out }
    }

    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, x: Var) -> Result<Var> {
        let w = b.param(self.weight);
        let bias = self.bias.map(|id| b.param(id));
        b.tape().linear(x, w, bias)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv3x3 {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), init_weight(&[9 * c_in, c_out], 9 * c_in, init, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Self { weight, bias, c_in, c_out }
    }

    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, x: Var) -> Result<Var> {
        b.tape().conv3x3(x, b.param(self.weight), Some(b.param(self.bias)))
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta, dim }
    }

    pub fn forward<T: Real>(&self, b: &Binding<'_, T>, x: Var) -> Result<Var> {
        b.tape().layer_norm(x, b.param(self.gamma), b.param(self.beta), LAYER_NORM_EPS)
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    steps: Vec<u64>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
            v: store.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
            steps: vec![0; store.len()],
        }
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left untouched, including their moment estimates.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        assert_eq!(grads.len(), store.len(), "one gradient slot per parameter");
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let step = T::lit(lr / bc1);
            let (b1t, b2t) = (T::lit(b1), T::lit(b2));
            let (ob1, ob2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
            let inv_bc2 = T::lit(1.0 / bc2);
            let eps = T::lit(self.eps);
            let decay = T::lit(1.0 - lr * self.weight_decay);
            let p = store.values[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pj, mj), vj), &gj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mj = b1t * *mj + ob1 * gj;
                *vj = b2t * *vj + ob2 * gj * gj;
                let denom = (*vj * inv_bc2).sqrt() + eps;
                *pj = *pj * decay - step * *mj / denom;
            }
        }
    }
}

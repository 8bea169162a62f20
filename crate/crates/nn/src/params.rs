//! Named parameters, their optimizer moments, and the AdamW update.

use std::collections::BTreeMap;

use rand::Rng;

use crate::float::Float;
use crate::graph::Gradients;
use crate::tensor::Tensor;
use crate::{NnError, Result};

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]` with `bound = gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Normal { std: f64 },
}

#[derive(Debug, Clone, PartialEq)]
struct Entry<T> {
    value: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
}

/// All learned tensors of a model, keyed by dotted names, plus AdamW state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore<T> {
    entries: BTreeMap<String, Entry<T>>,
    step: u64,
}

impl<T: Float> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParameterStore<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new(), step: 0 }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        self.entries.insert(name.to_string(), Entry { value, m, v });
        Ok(())
    }

    /// Creates a parameter drawn from `init`.
    pub fn init<R: Rng>(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut R) -> Result<()> {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, T::one()),
            Init::FanIn { fan_in, gain } => {
                let bound = gain / (fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(shape, |_| T::of(rng.gen_range(-bound..=bound)))
            }
            Init::Normal { std } => Tensor::from_fn(shape, |_| {
                // Box-Muller keeps this independent of distribution crates.
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                T::of(std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos())
            }),
        };
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, e)| (k.as_str(), &e.value))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn moments(&self, name: &str) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.entries.get(name).map(|e| (&e.m, &e.v))
    }

    pub(crate) fn set_moments(&mut self, name: &str, m: Tensor<T>, v: Tensor<T>) -> Result<()> {
        let e = self.entries.get_mut(name).ok_or_else(|| NnError::MissingParam(name.to_string()))?;
        if m.shape() != e.value.shape() || v.shape() != e.value.shape() {
            return Err(NnError::Shape {
                op: "optimizer state",
                expected: format!("{:?}", e.value.shape()),
                actual: format!("{:?} / {:?}", m.shape(), v.shape()),
            });
        }
        e.m = m;
        e.v = v;
        Ok(())
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Same parameters in another precision; optimizer state is carried over.
    pub fn cast<U: Float>(&self) -> ParameterStore<U> {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), Entry { value: e.value.cast(), m: e.m.cast(), v: e.v.cast() }))
                .collect(),
            step: self.step,
        }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip applied before the moment update.
    pub clip_norm: Option<f64>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 5.0e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: None }
    }
}

impl AdamW {
    /// Applies one update to every parameter that has a gradient. Returns the
    /// global gradient norm before clipping.
    pub fn step<T: Float>(&self, store: &mut ParameterStore<T>, grads: &Gradients<T>) -> Result<f64> {
        let mut sq = 0.0f64;
        for (_, g) in grads.params() {
            if !g.all_finite() {
                return Err(NnError::NonFinite { op: "optimizer" });
            }
            sq += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
        let norm = sq.sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads.params() {
            let e = store.entries.get_mut(name).ok_or_else(|| NnError::MissingParam(name.to_string()))?;
            if g.shape() != e.value.shape() {
                return Err(NnError::Shape {
                    op: "optimizer",
                    expected: format!("{:?}", e.value.shape()),
                    actual: format!("{:?}", g.shape()),
                });
            }
            let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
            let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
            let values = e.value.data_mut();
            let (m, v) = (e.m.data_mut(), e.v.data_mut());
            for i in 0..values.len() {
                let gi = g.data()[i] * T::of(clip);
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i].as_f64() / bc1;
                let vhat = v[i].as_f64() / bc2;
                let p = values[i].as_f64();
                values[i] = T::of(p - lr * (mhat / (vhat.sqrt() + eps) + wd * p));
            }
        }
        Ok(norm)
    }
}

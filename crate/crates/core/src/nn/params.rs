use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::graph::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot uniform over `(fan_in, fan_out) = (rows, cols)`.
    Xavier,
}

/// 64-bit FNV-1a, used to derive per-parameter seeds from names.
pub(crate) fn fnv1a(seed: u64, text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Rounds every entry to the nearest `f32`, so parameters survive a 32-bit
/// checkpoint bit-exactly.
pub fn quantize_f32(m: &mut Mat) {
    m.mapv_inplace(|v| v as f32 as f64);
}

/// Named, ordered collection of model parameters.
///
/// Initial values depend only on the store seed and the parameter name, never
/// on registration order, so two architectures that share a parameter name
/// start from the same values.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    seed: u64,
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers a parameter. Panics on a duplicate name: that is a wiring
    /// bug, not a runtime condition.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, name));
        let mut value = match init {
            Init::Zeros => Mat::zeros((rows, cols)),
            Init::Ones => Mat::ones((rows, cols)),
            Init::Normal(std) => Mat::from_shape_simple_fn((rows, cols), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            }),
            Init::Xavier => {
                let a = (6.0 / (rows + cols) as f64).sqrt();
                Mat::from_shape_simple_fn((rows, cols), || rng.random_range(-a..a))
            }
        };
        quantize_f32(&mut value);
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Overwrites a parameter by name, checking the shape.
    pub fn assign(&mut self, name: &str, value: Mat) -> Result<(), String> {
        let id = self
            .id(name)
            .ok_or_else(|| format!("unknown parameter {name}"))?;
        let slot = &mut self.values[id.0];
        if slot.dim() != value.dim() {
            return Err(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                slot.dim(),
                value.dim()
            ));
        }
        *slot = value;
        Ok(())
    }
}

/// Gradient accumulator indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Gradients {
    slots: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            slots: vec![None; store.len()],
        }
    }

    pub fn accumulate(&mut self, grads: Vec<(ParamId, Mat)>) {
        for (id, g) in grads {
            match &mut self.slots[id.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.slots[id.0].as_ref()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.slots.iter_mut().flatten() {
            *g *= c;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.slots
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm does not exceed `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Conventional L2 weight decay added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with 32-bit master weights: each updated parameter is rounded to the
/// nearest `f32` after the step.
pub struct Adam {
    config: AdamConfig,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            t: 0,
        }
    }

    /// One update with learning rate `lr`. Parameters rejected by `trainable`
    /// are left untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &Gradients,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            if !trainable(store.name(id)) {
                continue;
            }
            let p = &mut store.values[id.0];
            let mut g = g.clone();
            if c.weight_decay != 0.0 {
                g.scaled_add(c.weight_decay, p);
            }
            let m = self.m[id.0].get_or_insert_with(|| Mat::zeros(p.raw_dim()));
            let v = self.v[id.0].get_or_insert_with(|| Mat::zeros(p.raw_dim()));
            ndarray::Zip::from(&mut *p)
                .and(m)
                .and(v)
                .and(&g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + c.eps);
                    *p = *p as f32 as f64;
                });
        }
    }
}

//! Named parameter storage, Adam, and the cosine learning-rate schedule.
//!
//! Parameters live in a sorted map so every traversal (updates, checkpoints,
//! hashing) is order-deterministic. Optimizer moments stay beside the
//! parameters but are not part of the checkpoint format.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamHparams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHparams {
    fn default() -> Self {
        AdamHparams { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    /// Number of optimizer steps taken; drives bias correction and resumes
    /// monotonically from checkpoints.
    pub step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Linear-layer initialization: uniform on (-1/sqrt(fan_in), +1/sqrt(fan_in)).
    pub fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::from_fn(fan_in, fan_out, |_, _| rng.uniform(-bound, bound));
        let b = Tensor::from_fn(1, fan_out, |_, _| rng.uniform(-bound, bound));
        self.insert(&format!("{name}.w"), w);
        self.insert(&format!("{name}.b"), b);
    }

    /// Embedding-table initialization: normal(0, 0.02).
    pub fn init_embedding(&mut self, name: &str, rows: usize, cols: usize, rng: &mut Rng) {
        let t = Tensor::from_fn(rows, cols, |_, _| 0.02 * rng.next_normal());
        self.insert(name, t);
    }

    /// One bias-corrected Adam update from named gradients.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, lr: f64, hp: &AdamHparams) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        for (name, g) in grads {
            let p = self
                .params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name:?}"));
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {name}");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let (pv, mv, vv, gv) = (p.values_mut(), m.values_mut(), v.values_mut(), g.values());
            for i in 0..pv.len() {
                let gi = gv[i];
                mv[i] = hp.beta1 * mv[i] + (1.0 - hp.beta1) * gi;
                vv[i] = hp.beta2 * vv[i] + (1.0 - hp.beta2) * gi * gi;
                let mhat = mv[i] / bc1;
                let vhat = vv[i] / bc2;
                pv[i] -= lr * (mhat / (vhat.sqrt() + hp.eps) + hp.weight_decay * pv[i]);
            }
        }
    }
}

/// Cosine decay from `lr0` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    let frac = if total_steps == 0 {
        1.0
    } else {
        (step.min(total_steps) as f64) / (total_steps as f64)
    };
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * frac).cos())
}

//! Run configuration: one JSON-serializable tree with full defaulting, so a
//! partial config file (or none at all) resolves to the standard recipe.
//! A stable FNV-1a hash of the resolved config ties checkpoints and metrics
//! back to the exact settings that produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VaddError};
use crate::models::ModelDims;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    /// checkerboard | swissroll | circles
    pub name: String,
    /// Training pool size.
    pub n: usize,
    /// Seed for the data stream (the ground-truth pool uses `gt_seed`).
    pub seed: u64,
    /// Checkerboard cells per side (even), ignored by the other densities.
    pub board: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { name: "checkerboard".into(), n: 100_000, seed: 1, board: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Vocabulary size per position (bins per dimension).
    pub v: usize,
    /// Sequence length (coordinates per point).
    pub n_positions: usize,
    /// Latent dimensionality.
    pub d_latent: usize,
    /// Hidden width of every MLP block.
    pub width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { v: 100, n_positions: 2, d_latent: 2, width: 512 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Peak learning rate of the cosine schedule.
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr0: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: u64,
    pub batch: usize,
    /// Epochs over which the KL weight ramps linearly from 0 to 1.
    pub anneal_epochs: u64,
    /// Clamp on the loss-weight singularity near t = 0.
    pub t_min: f64,
    /// Cadence (in steps) of loss logging and best-checkpoint tracking.
    pub log_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { epochs: 500, batch: 256, anneal_epochs: 100, t_min: 1e-5, log_every: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// Reverse-time grid sizes to sample at.
    pub t_steps: Vec<usize>,
    pub n_samples: usize,
    /// Reuse one latent draw across a trajectory instead of redrawing per step.
    pub shared_z: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { t_steps: vec![1, 5], n_samples: 100_000, shared_z: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Importance samples per (t, x_t) pair in the likelihood protocol.
    pub k: usize,
    /// Fresh (t, x_t) draws per test sequence.
    pub n_time_pairs: usize,
    /// Test sequences scored from the ground-truth pool.
    pub n_sequences: usize,
    /// Seed of the held-out ground-truth pool; defaults to dataset seed + 1.
    pub gt_seed: Option<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: 1000, n_time_pairs: 100, n_sequences: 256, gt_seed: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed for training, sampling, and evaluation streams.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub sampling: SamplingConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            VaddError::Usage(format!("config {} is not valid: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |msg: String| Err(VaddError::Usage(msg));
        if self.dataset.n < 1 {
            return usage("dataset.n must be at least 1".into());
        }
        if self.dataset.board < 2 || self.dataset.board % 2 != 0 {
            return usage(format!("dataset.board must be even and >= 2, got {}", self.dataset.board));
        }
        if self.model.v < 1 || self.model.n_positions < 1 || self.model.width < 1 {
            return usage("model dimensions must be positive".into());
        }
        if self.model.d_latent < 1 {
            return usage("model.d_latent must be positive".into());
        }
        if self.training.epochs < 1 || self.training.batch < 1 {
            return usage("training.epochs and training.batch must be positive".into());
        }
        if !(self.training.t_min > 0.0 && self.training.t_min < 1.0) {
            return usage(format!("training.t_min must lie in (0, 1), got {}", self.training.t_min));
        }
        if self.training.log_every < 1 {
            return usage("training.log_every must be positive".into());
        }
        if self.sampling.t_steps.is_empty() || self.sampling.t_steps.iter().any(|&t| t < 1) {
            return usage("sampling.t_steps needs at least one positive entry".into());
        }
        if self.sampling.n_samples < 1 {
            return usage("sampling.n_samples must be positive".into());
        }
        if self.eval.k < 1 || self.eval.n_time_pairs < 1 || self.eval.n_sequences < 1 {
            return usage("eval counts must be positive".into());
        }
        if !self.optimizer.lr0.is_finite() || self.optimizer.lr0 <= 0.0 {
            return usage(format!("optimizer.lr0 must be positive, got {}", self.optimizer.lr0));
        }
        Ok(())
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            v: self.model.v,
            n_positions: self.model.n_positions,
            d_latent: self.model.d_latent,
            width: self.model.width,
        }
    }

    /// Seed of the held-out ground-truth pool.
    pub fn gt_seed(&self) -> u64 {
        self.eval.gt_seed.unwrap_or(self.dataset.seed.wrapping_add(1))
    }

    /// Stable hex digest of the resolved configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a64(json.as_bytes()))
    }
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_standard_recipe() {
        let c = RunConfig::default();
        assert_eq!(c.model.width, 512);
        assert_eq!(c.model.v, 100);
        assert_eq!(c.model.n_positions, 2);
        assert_eq!(c.model.d_latent, 2);
        assert_eq!(c.training.epochs, 500);
        assert_eq!(c.training.anneal_epochs, 100);
        assert_eq!(c.training.batch, 256);
        assert_eq!(c.training.t_min, 1e-5);
        assert_eq!(c.optimizer.lr0, 3e-4);
        assert_eq!(c.optimizer.beta1, 0.9);
        assert_eq!(c.optimizer.beta2, 0.999);
        assert_eq!(c.dataset.n, 100_000);
        assert_eq!(c.sampling.t_steps, vec![1, 5]);
        assert_eq!(c.sampling.n_samples, 100_000);
        assert_eq!(c.eval.k, 1000);
        assert_eq!(c.eval.n_time_pairs, 100);
        c.validate().unwrap();
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"training": {"epochs": 3}, "model": {"width": 32}}"#).unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.training.epochs, 3);
        assert_eq!(c.training.batch, 256);
        assert_eq!(c.model.width, 32);
        assert_eq!(c.model.v, 100);
    }

    #[test]
    fn malformed_or_invalid_configs_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(VaddError::Usage(_))));
        std::fs::write(&path, r#"{"training": {"t_min": 2.0}}"#).unwrap();
        assert!(matches!(RunConfig::load(&path), Err(VaddError::Usage(_))));
        std::fs::write(&path, r#"{"sampling": {"t_steps": []}}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
        std::fs::write(&path, r#"{"dataset": {"board": 3}}"#).unwrap();
        assert!(RunConfig::load(&path).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.hash(), b.hash());
        let mut c = RunConfig::default();
        c.training.epochs = 501;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn gt_seed_defaults_next_to_the_data_seed() {
        let mut c = RunConfig::default();
        c.dataset.seed = 7;
        assert_eq!(c.gt_seed(), 8);
        c.eval.gt_seed = Some(99);
        assert_eq!(c.gt_seed(), 99);
    }

    #[test]
    fn fnv_matches_reference_values() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}

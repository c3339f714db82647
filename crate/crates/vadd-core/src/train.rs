//! Training loop: shuffled epochs over a token pool, per-step derived RNG
//! streams, cosine learning-rate decay, KL annealing converted from epochs
//! to steps, a non-finite-loss guard, and deterministic logging.
//!
//! Determinism contract: every random draw comes from a stream keyed by the
//! run seed and the global step (or epoch, for shuffles), so two runs with
//! the same resolved config produce byte-identical loss logs and
//! checkpoints. Wall-clock timings go to a separate file that carries no
//! determinism promise.

use std::path::Path;
use std::time::Instant;

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::datagen::Dataset;
use crate::error::{Result, VaddError};
use crate::graph::Graph;
use crate::masking::Schedule;
use crate::models::{infer_dims, Denoiser, Recognizer};
use crate::objective::{
    batch_loss_mdlm, batch_loss_vadd, kl_anneal_weight, AnnealSchedule, BatchRngs,
};
use crate::params::{cosine_lr, AdamHparams, ParamStore};
use crate::rng::{Rng, STREAM_INIT, STREAM_SHUFFLE};

/// Tune glibc's malloc for the training and evaluation loops.
///
/// Every step allocates and frees dozens of ~1 MB tensors; with the default
/// dynamic thresholds much of that traffic becomes `mmap`/`brk` syscalls
/// (measured at ~20% of step wall time). Raising the thresholds keeps the
/// buffers on the heap free lists. No-op on non-glibc targets. Safe to call
/// any number of times.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Vadd,
    Mdlm,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<ModelKind> {
        match s {
            "vadd" => Ok(ModelKind::Vadd),
            "mdlm" => Ok(ModelKind::Mdlm),
            other => Err(VaddError::Usage(format!(
                "unknown model '{other}' (expected vadd or mdlm)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Vadd => "vadd",
            ModelKind::Mdlm => "mdlm",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub struct BuiltModel {
    pub store: ParamStore,
    pub den: Denoiser,
    pub rec: Option<Recognizer>,
}

/// Fresh parameter store and model heads for the configured dimensions,
/// initialized from the run seed's init stream.
pub fn build_model(config: &RunConfig, kind: ModelKind) -> BuiltModel {
    let dims = config.model_dims();
    let mut store = ParamStore::new();
    let mut rng = Rng::new(config.seed, STREAM_INIT);
    match kind {
        ModelKind::Vadd => {
            let den = Denoiser { dims: dims.clone(), has_latent: true };
            den.init(&mut store, &mut rng);
            let rec = Recognizer { dims };
            rec.init(&mut store, &mut rng);
            BuiltModel { store, den, rec: Some(rec) }
        }
        ModelKind::Mdlm => {
            let den = Denoiser { dims, has_latent: false };
            den.init(&mut store, &mut rng);
            BuiltModel { store, den, rec: None }
        }
    }
}

/// Reconstruct model heads for a loaded parameter store.
pub fn model_from_store(store: &ParamStore) -> (Denoiser, Option<Recognizer>) {
    let (dims, has_latent, has_recognizer) = infer_dims(store);
    let den = Denoiser { dims: dims.clone(), has_latent };
    let rec = if has_recognizer { Some(Recognizer { dims }) } else { None };
    (den, rec)
}

#[derive(Debug)]
pub struct TrainResult {
    pub store: ParamStore,
    pub best_store: ParamStore,
    pub best_loss: f64,
    pub final_loss: f64,
    pub total_steps: u64,
}

/// File names written into a run directory.
pub const LOSSES_FILE: &str = "losses.csv";
pub const TIMINGS_FILE: &str = "timings.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint-final.json";
pub const BEST_CHECKPOINT: &str = "checkpoint-best.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

/// Run the training loop. `resume` continues from a loaded store's step
/// count (schedules pick up where they left off; optimizer moments restart).
/// With a `run_dir`, loss/timing logs and final/best checkpoints are
/// written there.
pub fn train_model(
    config: &RunConfig,
    kind: ModelKind,
    data: &Dataset,
    run_dir: Option<&Path>,
    resume: Option<ParamStore>,
) -> Result<TrainResult> {
    config.validate()?;
    let n = data.tokens.len();
    let batch = config.training.batch;
    let steps_per_epoch = (n / batch) as u64;
    if steps_per_epoch == 0 {
        return Err(VaddError::Usage(format!(
            "batch size {batch} exceeds the pool size {n}"
        )));
    }
    let total_steps = config.training.epochs * steps_per_epoch;
    let anneal =
        AnnealSchedule { total_anneal_steps: config.training.anneal_epochs * steps_per_epoch };

    let (mut store, den, rec) = match resume {
        None => {
            let built = build_model(config, kind);
            (built.store, built.den, built.rec)
        }
        Some(loaded) => {
            let (den, rec) = model_from_store(&loaded);
            if den.has_latent != (kind == ModelKind::Vadd) {
                return Err(VaddError::Usage(format!(
                    "checkpoint holds a {} model but {kind} was requested",
                    if den.has_latent { "vadd" } else { "mdlm" }
                )));
            }
            if den.dims != config.model_dims() {
                return Err(VaddError::Usage(
                    "checkpoint dimensions disagree with the config".into(),
                ));
            }
            if loaded.step_count >= total_steps {
                return Err(VaddError::Usage(format!(
                    "checkpoint already has {} steps; nothing left of the {total_steps}-step plan",
                    loaded.step_count
                )));
            }
            (loaded, den, rec)
        }
    };

    let hp = AdamHparams {
        beta1: config.optimizer.beta1,
        beta2: config.optimizer.beta2,
        eps: config.optimizer.eps,
        weight_decay: config.optimizer.weight_decay,
    };
    let sched = Schedule::Linear;
    let t_min = config.training.t_min;
    let log_every = config.training.log_every;

    let mut loss_rows = vec!["step,lambda,lr,loss,recon,kl".to_string()];
    let mut timing_rows = vec!["step,wallclock_ms".to_string()];
    let clock = Instant::now();

    let mut perm: Vec<usize> = Vec::new();
    let mut perm_epoch = u64::MAX;
    let mut best_loss = f64::INFINITY;
    let mut best_store = store.clone();
    let mut final_loss = f64::NAN;

    for step in store.step_count..total_steps {
        let epoch = step / steps_per_epoch;
        if epoch != perm_epoch {
            perm = (0..n).collect();
            Rng::new(config.seed, STREAM_SHUFFLE).derive(epoch).shuffle(&mut perm);
            perm_epoch = epoch;
        }
        let offset = (step % steps_per_epoch) as usize * batch;
        let x0s: Vec<_> =
            perm[offset..offset + batch].iter().map(|&i| data.tokens[i].clone()).collect();

        let lambda = kl_anneal_weight(step, &anneal);
        let lr = cosine_lr(step, total_steps, config.optimizer.lr0);
        let rngs = BatchRngs::for_step(config.seed, step);

        let mut g = Graph::new();
        let (loss_node, stats) = match (kind, &rec) {
            (ModelKind::Vadd, Some(r)) => {
                batch_loss_vadd(&mut g, &store, &den, r, &x0s, lambda, &rngs, sched, t_min)?
            }
            (ModelKind::Mdlm, None) => {
                batch_loss_mdlm(&mut g, &store, &den, &x0s, &rngs, sched, t_min)?
            }
            _ => unreachable!("model kind and recognizer presence always agree"),
        };

        if !stats.loss.is_finite() {
            if let Some(dir) = run_dir {
                std::fs::create_dir_all(dir)?;
                let diag = serde_json::json!({
                    "step": step,
                    "lambda": lambda,
                    "lr": lr,
                    "loss": format!("{}", stats.loss),
                    "recon": format!("{}", stats.recon),
                    "kl": format!("{}", stats.kl),
                    "n_masked": stats.n_masked,
                    "params_finite": store.all_finite(),
                });
                std::fs::write(dir.join(DIAGNOSTICS_FILE), diag.to_string())?;
            }
            return Err(VaddError::NonFinite(format!(
                "loss became non-finite at step {step}"
            )));
        }
        final_loss = stats.loss;

        if step % log_every == 0 || step + 1 == total_steps {
            loss_rows.push(format!(
                "{step},{},{lr},{},{},{}",
                stats.lambda, stats.loss, stats.recon, stats.kl
            ));
            timing_rows.push(format!("{step},{}", clock.elapsed().as_millis()));
            if stats.loss < best_loss {
                best_loss = stats.loss;
                best_store = store.clone();
            }
        }

        let grads = g.backward(loss_node);
        let param_grads = g.param_grads(&grads);
        store.adam_step(&param_grads, lr, &hp);
    }

    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(LOSSES_FILE), loss_rows.join("\n") + "\n")?;
        std::fs::write(dir.join(TIMINGS_FILE), timing_rows.join("\n") + "\n")?;
        let hash = config.hash();
        save_checkpoint(&dir.join(FINAL_CHECKPOINT), &store, &hash)?;
        save_checkpoint(&dir.join(BEST_CHECKPOINT), &best_store, &hash)?;
    }

    Ok(TrainResult { store, best_store, best_loss, final_loss, total_steps })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::load_checkpoint;
    use crate::datagen::DatasetName;

    fn tiny_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.seed = 3;
        c.dataset.n = 512;
        c.dataset.seed = 9;
        c.model.width = 8;
        c.training.epochs = 2;
        c.training.batch = 128;
        c.training.anneal_epochs = 1;
        c.training.log_every = 2;
        c
    }

    fn tiny_data(c: &RunConfig) -> Dataset {
        Dataset::generate(DatasetName::Checkerboard, c.dataset.n, c.dataset.seed, c.dataset.board)
            .unwrap()
    }

    #[test]
    fn training_completes_and_writes_artifacts() {
        let c = tiny_config();
        let data = tiny_data(&c);
        let dir = tempfile::tempdir().unwrap();
        let result =
            train_model(&c, ModelKind::Vadd, &data, Some(dir.path()), None).unwrap();
        assert_eq!(result.total_steps, 8);
        assert_eq!(result.store.step_count, 8);
        assert!(result.final_loss.is_finite());
        assert!(result.best_loss <= result.final_loss + 1e-12);
        for f in [LOSSES_FILE, TIMINGS_FILE, FINAL_CHECKPOINT, BEST_CHECKPOINT] {
            assert!(dir.path().join(f).exists(), "{f} missing");
        }
        // Logged at steps 0, 2, 4, 6 and the final step 7.
        let losses = std::fs::read_to_string(dir.path().join(LOSSES_FILE)).unwrap();
        assert_eq!(losses.lines().count(), 6);
        assert!(losses.starts_with("step,lambda,lr,loss,recon,kl\n"));
    }

    #[test]
    fn identical_runs_are_byte_identical() {
        let c = tiny_config();
        let data = tiny_data(&c);
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        train_model(&c, ModelKind::Vadd, &data, Some(da.path()), None).unwrap();
        train_model(&c, ModelKind::Vadd, &data, Some(db.path()), None).unwrap();
        for f in [LOSSES_FILE, FINAL_CHECKPOINT, BEST_CHECKPOINT] {
            let a = std::fs::read(da.path().join(f)).unwrap();
            let b = std::fs::read(db.path().join(f)).unwrap();
            assert_eq!(a, b, "{f} differs between identical runs");
        }
    }

    #[test]
    fn baseline_training_logs_zero_kl() {
        let c = tiny_config();
        let data = tiny_data(&c);
        let dir = tempfile::tempdir().unwrap();
        train_model(&c, ModelKind::Mdlm, &data, Some(dir.path()), None).unwrap();
        let losses = std::fs::read_to_string(dir.path().join(LOSSES_FILE)).unwrap();
        for line in losses.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[1], "0", "lambda column");
            assert_eq!(cols[5], "0", "kl column");
        }
    }

    #[test]
    fn lambda_ramps_to_one_at_the_anneal_boundary() {
        let mut c = tiny_config();
        c.training.log_every = 1;
        let data = tiny_data(&c);
        let dir = tempfile::tempdir().unwrap();
        train_model(&c, ModelKind::Vadd, &data, Some(dir.path()), None).unwrap();
        let losses = std::fs::read_to_string(dir.path().join(LOSSES_FILE)).unwrap();
        let lambdas: Vec<f64> = losses
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect();
        // One anneal epoch = 4 steps: 0, 0.25, 0.5, 0.75, then pinned at 1.
        assert_eq!(&lambdas[..6], &[0.0, 0.25, 0.5, 0.75, 1.0, 1.0]);
        // Learning rate starts at the peak and decays.
        let lrs: Vec<f64> = losses
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect();
        assert_eq!(lrs[0], c.optimizer.lr0);
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn resume_continues_the_step_count() {
        let mut one_epoch = tiny_config();
        one_epoch.training.epochs = 1;
        let c = tiny_config();
        let data = tiny_data(&c);
        let dir = tempfile::tempdir().unwrap();
        train_model(&one_epoch, ModelKind::Vadd, &data, Some(dir.path()), None).unwrap();
        let (loaded, meta) = load_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(meta.step_count, 4);
        let result = train_model(&c, ModelKind::Vadd, &data, None, Some(loaded)).unwrap();
        assert_eq!(result.store.step_count, 8);
        // A checkpoint that already fulfilled the plan is rejected.
        let (done, _) = load_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert!(train_model(&one_epoch, ModelKind::Vadd, &data, None, Some(done)).is_err());
    }

    #[test]
    fn resume_rejects_a_mismatched_model_kind() {
        let mut c = tiny_config();
        c.training.epochs = 1;
        let data = tiny_data(&c);
        let built = build_model(&c, ModelKind::Mdlm);
        assert!(matches!(
            train_model(&c, ModelKind::Vadd, &data, None, Some(built.store)),
            Err(VaddError::Usage(_))
        ));
    }

    #[test]
    fn oversized_batches_are_rejected() {
        let mut c = tiny_config();
        c.dataset.n = 64;
        let data = tiny_data(&c);
        assert!(matches!(
            train_model(&c, ModelKind::Vadd, &data, None, None),
            Err(VaddError::Usage(_))
        ));
    }

    #[test]
    fn non_finite_losses_trip_the_guard() {
        let c = tiny_config();
        let data = tiny_data(&c);
        let mut built = build_model(&c, ModelKind::Vadd);
        built.store.get_mut("den.out.l0.w").values_mut()[0] = f64::NAN;
        let dir = tempfile::tempdir().unwrap();
        let err = train_model(&c, ModelKind::Vadd, &data, Some(dir.path()), Some(built.store))
            .unwrap_err();
        assert!(matches!(err, VaddError::NonFinite(_)));
        assert!(dir.path().join(DIAGNOSTICS_FILE).exists());
    }

    #[test]
    fn model_kind_parsing_round_trips() {
        assert_eq!(ModelKind::parse("vadd").unwrap(), ModelKind::Vadd);
        assert_eq!(ModelKind::parse("mdlm").unwrap(), ModelKind::Mdlm);
        assert!(ModelKind::parse("vae").is_err());
        assert_eq!(ModelKind::Vadd.to_string(), "vadd");
    }
}

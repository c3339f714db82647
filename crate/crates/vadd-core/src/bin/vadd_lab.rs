//! Command-line laboratory: dataset generation, training, sampling,
//! evaluation, and self-verification oracles.
//!
//! Output layout under the resolved root (`--out`, else `VADD_LAB_OUT`,
//! else `./out`):
//!   data/<dataset>/{points.csv, tokens.csv, manifest.json}
//!   runs/<model>-<dataset>/{losses.csv, timings.csv, checkpoint-*.json,
//!                           samples-T*.csv, samples-T*.ppm, metrics.json}
//!   oracle/report.json
//!
//! Exit codes: 0 success, 1 failed check, 2 usage error, 3 numerical error.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use vadd_core::checkpoint::load_checkpoint;
use vadd_core::config::RunConfig;
use vadd_core::datagen::{Dataset, DatasetName, BIN_WIDTH, VOCAB};
use vadd_core::error::{Result, VaddError};
use vadd_core::eval::{js_divergence, nll, Histogram2D};
use vadd_core::io::{
    read_tokens_csv, write_histogram_csv, write_histogram_ppm, write_manifest, write_metrics,
    write_points_csv, write_tokens_csv, DatasetManifest, EvalMetrics,
};
use vadd_core::masking::Schedule;
use vadd_core::oracle::run_scope;
use vadd_core::params::ParamStore;
use vadd_core::rng::{Rng, STREAM_CATEGORICAL, STREAM_TIME};
use vadd_core::sampler::{sample_many, TimeGrid};
use vadd_core::train::{model_from_store, train_model, ModelKind, FINAL_CHECKPOINT};

#[derive(Parser)]
#[command(
    name = "vadd-lab",
    version,
    about = "Latent-variable masked discrete diffusion on 2-D toy densities"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON config file; omitted fields fall back to the standard recipe.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Model variant: vadd (latent) or mdlm (baseline).
    #[arg(long, global = true)]
    model: Option<String>,

    /// Dataset: checkerboard, swissroll, or circles.
    #[arg(long, global = true)]
    dataset: Option<String>,

    /// Reverse-time steps T (replaces the config's sampling list).
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// Count override: pool size for gen-data, sample count for sample/eval.
    #[arg(long, global = true)]
    n: Option<usize>,

    /// Master seed (also reseeds the dataset stream).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output root; takes precedence over VADD_LAB_OUT and ./out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset pool under <out>/data/<dataset>/.
    GenData,
    /// Train a model; artifacts land under <out>/runs/<model>-<dataset>/.
    Train {
        /// Continue from this run's final checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Draw samples from a trained checkpoint and render their histogram.
    Sample {
        /// Checkpoint path (default: the run's final checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a trained checkpoint: Jensen-Shannon per step count, and NLL.
    Eval {
        /// Checkpoint path (default: the run's final checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run self-verification suites and write a machine-readable report.
    Oracle {
        /// posterior | gradcheck | bounds | masking | all
        #[arg(long, default_value = "all")]
        scope: String,
    },
}

fn main() {
    vadd_core::train::tune_allocator();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn resolve_out(cli: &Cli) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    if let Ok(env_out) = std::env::var("VADD_LAB_OUT") {
        if !env_out.is_empty() {
            return PathBuf::from(env_out);
        }
    }
    PathBuf::from("out")
}

fn run(cli: Cli) -> Result<()> {
    if let Some(k) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| VaddError::Usage(format!("thread pool setup failed: {e}")))?;
    }
    let out = resolve_out(&cli);
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &cli.dataset {
        DatasetName::parse(name)?;
        config.dataset.name = name.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.dataset.seed = seed;
    }
    if let Some(t) = cli.steps {
        config.sampling.t_steps = vec![t];
    }
    let kind = ModelKind::parse(cli.model.as_deref().unwrap_or("vadd"))?;
    let name = DatasetName::parse(&config.dataset.name)?;

    match cli.command {
        Command::GenData => {
            if let Some(n) = cli.n {
                config.dataset.n = n;
            }
            config.validate()?;
            cmd_gen_data(&config, name, &out)
        }
        Command::Train { resume } => {
            config.validate()?;
            cmd_train(&config, kind, name, &out, resume)
        }
        Command::Sample { checkpoint } => {
            if let Some(n) = cli.n {
                config.sampling.n_samples = n;
            }
            config.validate()?;
            cmd_sample(&config, kind, name, &out, checkpoint.as_deref())
        }
        Command::Eval { checkpoint } => {
            if let Some(n) = cli.n {
                config.sampling.n_samples = n;
            }
            config.validate()?;
            cmd_eval(&config, kind, name, &out, checkpoint.as_deref())
        }
        Command::Oracle { scope } => {
            config.validate()?;
            cmd_oracle(&config, &scope, &out)
        }
    }
}

fn data_dir(out: &Path, name: DatasetName) -> PathBuf {
    out.join("data").join(name.as_str())
}

fn run_dir(out: &Path, kind: ModelKind, name: DatasetName) -> PathBuf {
    out.join("runs").join(format!("{kind}-{name}"))
}

fn cmd_gen_data(config: &RunConfig, name: DatasetName, out: &Path) -> Result<()> {
    let ds = Dataset::generate(name, config.dataset.n, config.dataset.seed, config.dataset.board)?;
    let dir = data_dir(out, name);
    std::fs::create_dir_all(&dir)?;
    write_points_csv(&dir.join("points.csv"), &ds.points)?;
    write_tokens_csv(&dir.join("tokens.csv"), &ds.tokens)?;
    write_manifest(
        &dir.join("manifest.json"),
        &DatasetManifest {
            name: name.as_str().to_string(),
            n: ds.n(),
            seed: ds.seed,
            board: ds.board,
            bin_width: BIN_WIDTH,
            vocab: VOCAB,
        },
    )?;
    println!("wrote {} {} points to {}", ds.n(), name, dir.display());
    Ok(())
}

fn load_pool(config: &RunConfig, name: DatasetName, out: &Path) -> Result<Dataset> {
    let tokens_path = data_dir(out, name).join("tokens.csv");
    if !tokens_path.exists() {
        return Err(VaddError::Usage(format!(
            "no dataset at {}; run gen-data first",
            tokens_path.display()
        )));
    }
    let tokens = read_tokens_csv(&tokens_path)?;
    Ok(Dataset {
        name,
        points: Vec::new(),
        tokens,
        seed: config.dataset.seed,
        board: config.dataset.board,
    })
}

fn cmd_train(
    config: &RunConfig,
    kind: ModelKind,
    name: DatasetName,
    out: &Path,
    resume: bool,
) -> Result<()> {
    let data = load_pool(config, name, out)?;
    let dir = run_dir(out, kind, name);
    let resume_store = if resume {
        let (store, meta) = load_checkpoint(&dir.join(FINAL_CHECKPOINT))?;
        println!("resuming from step {}", meta.step_count);
        Some(store)
    } else {
        None
    };
    let result = train_model(config, kind, &data, Some(&dir), resume_store)?;
    println!(
        "trained {kind} on {name} for {} steps: final loss {:.4}, best {:.4}; artifacts in {}",
        result.total_steps,
        result.final_loss,
        result.best_loss,
        dir.display()
    );
    Ok(())
}

/// Load a checkpoint and check that it holds the requested model variant.
fn load_model(
    path: &Path,
    kind: ModelKind,
) -> Result<(ParamStore, vadd_core::models::Denoiser, Option<vadd_core::models::Recognizer>)> {
    let (store, _meta) = load_checkpoint(path)?;
    let (den, rec) = model_from_store(&store);
    if den.has_latent != (kind == ModelKind::Vadd) {
        return Err(VaddError::Usage(format!(
            "checkpoint {} holds a {} model but {kind} was requested",
            path.display(),
            if den.has_latent { "vadd" } else { "mdlm" }
        )));
    }
    Ok((store, den, rec))
}

fn cmd_sample(
    config: &RunConfig,
    kind: ModelKind,
    name: DatasetName,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let dir = run_dir(out, kind, name);
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dir.join(FINAL_CHECKPOINT));
    let (store, den, _rec) = load_model(&ckpt, kind)?;
    std::fs::create_dir_all(&dir)?;
    let count = config.sampling.n_samples;
    for &t_steps in &config.sampling.t_steps {
        let grid = TimeGrid::new(t_steps)?;
        let base = Rng::new(config.seed, STREAM_CATEGORICAL).derive(t_steps as u64);
        let samples = sample_many(
            &store,
            &den,
            &grid,
            count,
            &base,
            config.sampling.shared_z,
            Schedule::Linear,
        )?;
        let hist = Histogram2D::from_sequences(&samples, den.dims.v)?;
        write_tokens_csv(&dir.join(format!("samples-T{t_steps}.csv")), &samples)?;
        write_histogram_csv(&dir.join(format!("samples-T{t_steps}-counts.csv")), &hist)?;
        write_histogram_ppm(&dir.join(format!("samples-T{t_steps}.ppm")), &hist)?;
        println!(
            "sampled {count} sequences at T={t_steps} from {kind}-{name} into {}",
            dir.display()
        );
    }
    Ok(())
}

fn cmd_eval(
    config: &RunConfig,
    kind: ModelKind,
    name: DatasetName,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let dir = run_dir(out, kind, name);
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dir.join(FINAL_CHECKPOINT));
    let (store, den, rec) = load_model(&ckpt, kind)?;
    std::fs::create_dir_all(&dir)?;

    let n_samples = config.sampling.n_samples;
    let n_sequences = config.eval.n_sequences;
    let pool_n = n_samples.max(n_sequences);
    let gt = Dataset::generate(name, pool_n, config.gt_seed(), config.dataset.board)?;
    let gt_hist = Histogram2D::from_sequences(&gt.tokens[..n_samples], den.dims.v)?;

    let mut js_by_steps = std::collections::BTreeMap::new();
    for &t_steps in &config.sampling.t_steps {
        let grid = TimeGrid::new(t_steps)?;
        let base = Rng::new(config.seed, STREAM_CATEGORICAL).derive(t_steps as u64);
        let samples = sample_many(
            &store,
            &den,
            &grid,
            n_samples,
            &base,
            config.sampling.shared_z,
            Schedule::Linear,
        )?;
        let hist = Histogram2D::from_sequences(&samples, den.dims.v)?;
        let js = js_divergence(&hist, &gt_hist)?;
        println!("JS(T={t_steps}) = {js:.4} nats");
        js_by_steps.insert(t_steps.to_string(), js);
    }

    let nll_rng = Rng::new(config.gt_seed(), STREAM_TIME);
    let nll_value = nll(
        &store,
        &den,
        rec.as_ref(),
        &gt.tokens[..n_sequences],
        config.eval.k,
        config.eval.n_time_pairs,
        &nll_rng,
        Schedule::Linear,
        config.training.t_min,
    )?;
    println!(
        "NLL = {nll_value:.4} nats/sequence (K={}, {} pairs, {} sequences)",
        config.eval.k, config.eval.n_time_pairs, n_sequences
    );

    write_metrics(
        &dir.join("metrics.json"),
        &EvalMetrics {
            js: js_by_steps,
            nll: nll_value,
            k: config.eval.k,
            n_time_pairs: config.eval.n_time_pairs,
            n_sequences,
            seed: config.seed,
            config_hash: config.hash(),
        },
    )?;
    println!("metrics written to {}", dir.join("metrics.json").display());
    Ok(())
}

fn cmd_oracle(config: &RunConfig, scope: &str, out: &Path) -> Result<()> {
    let suites = run_scope(scope, config.seed)?;
    let dir = out.join("oracle");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&suites)?)?;
    let mut failures = 0usize;
    for suite in &suites {
        for check in &suite.checks {
            let status = if check.pass { "PASS" } else { "FAIL" };
            println!(
                "[{status}] {}/{}: {} (margin {:+.3e})",
                suite.scope, check.name, check.detail, check.margin
            );
            failures += !check.pass as usize;
        }
    }
    println!("report written to {}", dir.join("report.json").display());
    if failures > 0 {
        return Err(VaddError::CheckFailed(format!(
            "{failures} oracle check(s) failed; see report.json"
        )));
    }
    Ok(())
}

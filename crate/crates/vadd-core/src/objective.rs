//! Training and evaluation objectives.
//!
//! The baseline loss is the time-weighted masked cross-entropy; the VADD loss
//! lower-bounds it further through the latent variable, giving per-example
//! terms `weight(t) * [log p(x0|xt,z) - lambda * KL(r || prior)]` with the
//! annealing weight `lambda`. Training uses the closed-form Gaussian KL
//! (variance reduction; identical expectation to the sampled log-ratio),
//! while the K-sample likelihood estimator keeps per-draw importance weights
//! `log p(x0|xt,z_k) + log p(z_k) - log r(z_k)` as the estimator requires.
//!
//! Stochastic choices (time draws, mask coins, latent noise) come from
//! per-element derived RNG streams so that the baseline and the latent model
//! consume identical mask randomness: extra latent draws never shift the
//! mask coins. [`BatchRngs`] documents the derivation convention.

use crate::error::{Result, VaddError};
use crate::graph::{Graph, NodeId};
use crate::masking::{forward_mask, loss_weight, mask_token, Schedule, Token, TokenSequence};
use crate::models::{draw_eps, sample_latent, Denoiser, GaussianPosterior, Recognizer};
use crate::params::ParamStore;
use crate::rng::{Rng, STREAM_LATENT, STREAM_MASK, STREAM_TIME};
use crate::tensor::Tensor;

/// Smallest time used for loss weighting; `weight(t) = 1/t` is clamped here.
pub const T_MIN: f64 = 1e-5;

/// Per-example loss pieces, stored as the bound contribution (to maximize):
/// `total = recon - lambda * kl` where `recon = weight * log p` and
/// `kl = weight * KL` (unannealed).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub lambda: f64,
    pub total: f64,
    pub t: f64,
    pub n_masked: usize,
}

/// Linear KL annealing: `lambda_h = min(1, h / total_anneal_steps)`.
#[derive(Clone, Copy, Debug)]
pub struct AnnealSchedule {
    pub total_anneal_steps: u64,
}

/// Annealing weight at epoch/step index `h` (0-based).
pub fn kl_anneal_weight(h: u64, anneal: &AnnealSchedule) -> f64 {
    if anneal.total_anneal_steps == 0 {
        return 1.0;
    }
    (h as f64 / anneal.total_anneal_steps as f64).min(1.0)
}

/// Positions of `xt` carrying the mask symbol, after validating that `xt` is
/// a masking of `x0` (agreement at unmasked positions, tokens in range).
pub fn masked_positions(x0: &[Token], xt: &[Token], v: usize) -> Result<Vec<usize>> {
    if x0.len() != xt.len() {
        return Err(VaddError::Usage(format!(
            "sequence length mismatch: {} vs {}",
            x0.len(),
            xt.len()
        )));
    }
    let mask = mask_token(v);
    let mut out = Vec::new();
    for (i, (&a, &b)) in x0.iter().zip(xt).enumerate() {
        if a >= v as Token {
            return Err(VaddError::Usage(format!("clean token {a} at {i} outside vocab {v}")));
        }
        if b == mask {
            out.push(i);
        } else if b != a {
            return Err(VaddError::Usage(format!(
                "noisy sequence disagrees with clean sequence at unmasked position {i}"
            )));
        }
    }
    Ok(out)
}

/// Sum of `log_mu[i, x0_i]` over masked positions; unmasked positions
/// contribute zero. `log_mu` has one row per position.
pub fn masked_log_likelihood(
    g: &mut Graph,
    log_mu: NodeId,
    x0: &TokenSequence,
    xt: &TokenSequence,
    v: usize,
) -> Result<NodeId> {
    let picks: Vec<(usize, usize, f64)> = masked_positions(x0, xt, v)?
        .into_iter()
        .map(|i| (i, x0[i] as usize, 1.0))
        .collect();
    Ok(g.weighted_gather(log_mu, &picks))
}

/// `sum_b row_weights[b] * KL(N(mean_b, std_b^2) || N(0, I))` using the
/// closed form `0.5 * sum_j (mean^2 + std^2 - 1 - 2 log std)`.
fn weighted_gauss_kl(g: &mut Graph, post: &GaussianPosterior, row_weights: &[f64]) -> NodeId {
    let m2 = g.mul(post.mean, post.mean);
    let two_s = g.scale(post.logstd, 2.0);
    let e2s = g.exp(two_s);
    let a = g.add(m2, e2s);
    let b = g.sub(a, two_s);
    let c = g.add_const(b, -1.0);
    let halves: Vec<f64> = row_weights.iter().map(|w| 0.5 * w).collect();
    g.weighted_row_sum(c, &halves)
}

/// Total Gaussian KL to the standard-normal prior over all rows of the
/// posterior. Zero exactly when mean = 0 and std = 1.
pub fn gauss_kl(g: &mut Graph, post: &GaussianPosterior) -> NodeId {
    let rows = g.value(post.mean).rows();
    weighted_gauss_kl(g, post, &vec![1.0; rows])
}

/// Log-density of a standard normal at `z`.
pub fn log_standard_normal(z: &[f64]) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    z.iter().map(|&x| -half_ln_2pi - 0.5 * x * x).sum()
}

/// Log-density of a diagonal normal at `z`.
pub fn log_diag_normal(z: &[f64], mean: &[f64], std: &[f64]) -> f64 {
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    z.iter()
        .zip(mean)
        .zip(std)
        .map(|((&x, &m), &s)| {
            let u = (x - m) / s;
            -s.ln() - half_ln_2pi - 0.5 * u * u
        })
        .sum()
}

/// Max-subtracted `log((1/K) * sum exp(xs))`; exact for constant inputs.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty(), "log_mean_exp of nothing");
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + (xs.iter().map(|&x| (x - m).exp()).sum::<f64>() / xs.len() as f64).ln()
}

/// Mutable mask/latent randomness for one loss term.
pub struct TermRngs<'a> {
    pub mask: &'a mut Rng,
    pub latent: &'a mut Rng,
}

/// One annealed lower-bound term at a given time `t`: draws the masking and
/// the reparameterized latent, returns the graph node (to maximize) and the
/// evaluated pieces. `total = recon - lambda * kl` holds bit-exactly.
#[allow(clippy::too_many_arguments)]
pub fn delbo_term(
    g: &mut Graph,
    store: &ParamStore,
    den: &Denoiser,
    rec: &Recognizer,
    x0: &TokenSequence,
    t: f64,
    rngs: TermRngs,
    lambda: f64,
    sched: Schedule,
    t_min: f64,
) -> Result<(NodeId, LossBreakdown)> {
    let v = den.dims.v;
    let xt = forward_mask(x0, t, sched, rngs.mask, v);
    let post = rec.posterior(g, store, std::slice::from_ref(x0), std::slice::from_ref(&xt), &[t]);
    let eps = draw_eps(rngs.latent, 1, den.dims.d_latent);
    let z = sample_latent(g, &post, eps);
    let log_mu = den.log_mu(g, store, std::slice::from_ref(&xt), Some(z), &[t]);
    let n_masked = masked_positions(x0, &xt, v)?.len();
    let mll = masked_log_likelihood(g, log_mu, x0, &xt, v)?;
    let kl = gauss_kl(g, &post);
    let w = loss_weight(t, sched, t_min);
    let recon = g.scale(mll, w);
    let kl_w = g.scale(kl, w);
    let kl_pen = g.scale(kl_w, lambda);
    let total = g.sub(recon, kl_pen);
    let recon_v = g.value(recon).item();
    let kl_v = g.value(kl_w).item();
    let breakdown = LossBreakdown {
        recon: recon_v,
        kl: kl_v,
        lambda,
        total: recon_v - lambda * kl_v,
        t,
        n_masked,
    };
    Ok((total, breakdown))
}

/// One baseline bound term: `weight(t) * masked_log_likelihood` with the
/// latent-free denoiser.
pub fn elbo_term_mdlm(
    g: &mut Graph,
    store: &ParamStore,
    den: &Denoiser,
    x0: &TokenSequence,
    t: f64,
    mask_rng: &mut Rng,
    sched: Schedule,
    t_min: f64,
) -> Result<(NodeId, LossBreakdown)> {
    assert!(!den.has_latent, "baseline term expects a latent-free denoiser");
    let v = den.dims.v;
    let xt = forward_mask(x0, t, sched, mask_rng, v);
    let log_mu = den.log_mu(g, store, std::slice::from_ref(&xt), None, &[t]);
    let n_masked = masked_positions(x0, &xt, v)?.len();
    let mll = masked_log_likelihood(g, log_mu, x0, &xt, v)?;
    let w = loss_weight(t, sched, t_min);
    let total = g.scale(mll, w);
    let total_v = g.value(total).item();
    let breakdown = LossBreakdown {
        recon: total_v,
        kl: 0.0,
        lambda: 0.0,
        total: total_v,
        t,
        n_masked,
    };
    Ok((total, breakdown))
}

/// Per-step randomness for a batch. Element `b` of the batch uses
/// `time.derive(b)`, `mask.derive(b)`, and `latent.derive(b)`; the three
/// base streams are derived from the run seed and the global step index, so
/// every element of every step sees fresh, independent, reproducible draws.
pub struct BatchRngs {
    pub time: Rng,
    pub mask: Rng,
    pub latent: Rng,
}

impl BatchRngs {
    pub fn for_step(seed: u64, step: u64) -> Self {
        BatchRngs {
            time: Rng::new(seed, STREAM_TIME).derive(step),
            mask: Rng::new(seed, STREAM_MASK).derive(step),
            latent: Rng::new(seed, STREAM_LATENT).derive(step),
        }
    }
}

/// Evaluated batch statistics; `loss = recon + lambda * kl` exactly as
/// floats (the logged pieces are the same expressions the loss node uses).
#[derive(Clone, Copy, Debug)]
pub struct BatchStats {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub lambda: f64,
    pub n_masked: usize,
}

struct BatchDraws {
    ts: Vec<f64>,
    xts: Vec<TokenSequence>,
    weights: Vec<f64>,
    picks: Vec<(usize, usize, f64)>,
    n_masked: usize,
}

fn draw_batch(
    x0s: &[TokenSequence],
    rngs: &BatchRngs,
    sched: Schedule,
    t_min: f64,
    n: usize,
    v: usize,
) -> Result<BatchDraws> {
    if x0s.is_empty() {
        return Err(VaddError::Usage("empty batch".into()));
    }
    let mask = mask_token(v);
    let mut draws = BatchDraws {
        ts: Vec::with_capacity(x0s.len()),
        xts: Vec::with_capacity(x0s.len()),
        weights: Vec::with_capacity(x0s.len()),
        picks: Vec::new(),
        n_masked: 0,
    };
    for (b, x0) in x0s.iter().enumerate() {
        assert_eq!(x0.len(), n, "sequence length mismatch in batch");
        let t = rngs.time.derive(b as u64).uniform(t_min, 1.0);
        let xt = forward_mask(x0, t, sched, &mut rngs.mask.derive(b as u64), v);
        let w = loss_weight(t, sched, t_min);
        for (i, &tok) in xt.iter().enumerate() {
            if tok == mask {
                draws.picks.push((b * n + i, x0[i] as usize, w));
                draws.n_masked += 1;
            }
        }
        draws.ts.push(t);
        draws.xts.push(xt);
        draws.weights.push(w);
    }
    Ok(draws)
}

/// Monte Carlo batch loss for the latent model (minimized): one fresh
/// `(t, mask, z)` triple per element, averaged, negated.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_vadd(
    g: &mut Graph,
    store: &ParamStore,
    den: &Denoiser,
    rec: &Recognizer,
    x0s: &[TokenSequence],
    lambda: f64,
    rngs: &BatchRngs,
    sched: Schedule,
    t_min: f64,
) -> Result<(NodeId, BatchStats)> {
    let (n, v, d) = (den.dims.n_positions, den.dims.v, den.dims.d_latent);
    let draws = draw_batch(x0s, rngs, sched, t_min, n, v)?;
    let b = x0s.len();
    let mut eps = Tensor::zeros(b, d);
    for bi in 0..b {
        let mut lr = rngs.latent.derive(bi as u64);
        for j in 0..d {
            eps.set(bi, j, lr.next_normal());
        }
    }
    let post = rec.posterior(g, store, x0s, &draws.xts, &draws.ts);
    let z = sample_latent(g, &post, eps);
    let log_mu = den.log_mu(g, store, &draws.xts, Some(z), &draws.ts);
    let recon_sum = g.weighted_gather(log_mu, &draws.picks);
    let kl_sum = weighted_gauss_kl(g, &post, &draws.weights);
    let inv_b = 1.0 / b as f64;
    let recon_loss = g.scale(recon_sum, -inv_b);
    let kl_loss = g.scale(kl_sum, inv_b);
    let kl_pen = g.scale(kl_loss, lambda);
    let loss = g.add(recon_loss, kl_pen);
    let stats = BatchStats {
        loss: g.value(loss).item(),
        recon: g.value(recon_loss).item(),
        kl: g.value(kl_loss).item(),
        lambda,
        n_masked: draws.n_masked,
    };
    Ok((loss, stats))
}

/// Monte Carlo batch loss for the baseline (minimized). Consumes the same
/// time and mask streams as [`batch_loss_vadd`], so with a shared seed the
/// two models see identical corruptions.
pub fn batch_loss_mdlm(
    g: &mut Graph,
    store: &ParamStore,
    den: &Denoiser,
    x0s: &[TokenSequence],
    rngs: &BatchRngs,
    sched: Schedule,
    t_min: f64,
) -> Result<(NodeId, BatchStats)> {
    assert!(!den.has_latent, "baseline loss expects a latent-free denoiser");
    let (n, v) = (den.dims.n_positions, den.dims.v);
    let draws = draw_batch(x0s, rngs, sched, t_min, n, v)?;
    let b = x0s.len();
    let log_mu = den.log_mu(g, store, &draws.xts, None, &draws.ts);
    let recon_sum = g.weighted_gather(log_mu, &draws.picks);
    let loss = g.scale(recon_sum, -1.0 / b as f64);
    let stats = BatchStats {
        loss: g.value(loss).item(),
        recon: g.value(loss).item(),
        kl: 0.0,
        lambda: 0.0,
        n_masked: draws.n_masked,
    };
    Ok((loss, stats))
}

/// Per-draw importance log-weights at fixed `(x0, xt, t)`:
/// `log p(x0|xt,z_k) + log p(z_k) - log r(z_k | x0, xt)` for `k` draws
/// `z_k ~ r`. The prior and recognizer densities keep all constants — they
/// cancel in the KL but not in the importance weights.
#[allow(clippy::too_many_arguments)]
pub fn delbo_log_weights(
    store: &ParamStore,
    den: &Denoiser,
    rec: &Recognizer,
    x0: &TokenSequence,
    xt: &TokenSequence,
    t: f64,
    k: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    assert!(k >= 1);
    let (n, v, d) = (den.dims.n_positions, den.dims.v, den.dims.d_latent);
    let masked = masked_positions(x0, xt, v)?;
    let (mean, std) = rec.posterior_values(store, x0, xt, t);
    let mut zmat = Tensor::zeros(k, d);
    for ki in 0..k {
        for j in 0..d {
            zmat.set(ki, j, mean[j] + std[j] * rng.next_normal());
        }
    }
    let xts = vec![xt.clone(); k];
    let ts = vec![t; k];
    let mut g = Graph::new();
    let zleaf = g.leaf(zmat.clone());
    let log_mu_node = den.log_mu(&mut g, store, &xts, Some(zleaf), &ts);
    let log_mu = g.value(log_mu_node);
    let mut out = Vec::with_capacity(k);
    for ki in 0..k {
        let logp: f64 = masked
            .iter()
            .map(|&i| log_mu.get(ki * n + i, x0[i] as usize))
            .sum();
        let z = zmat.row(ki);
        out.push(logp + log_standard_normal(z) - log_diag_normal(z, &mean, &std));
    }
    Ok(out)
}

/// K-sample lower-bound estimates for every draw count in `ks` (ascending,
/// each dividing the next), sharing one nested pool of `ks.last()` latent
/// draws per `(t, xt)` pair and averaging over `n_time_pairs` fresh pairs.
/// Returns one estimate per requested K.
///
/// The K-draw estimate averages `log mean exp` over the pool's `k_max / K`
/// disjoint blocks of size K — each block is an independent K-sample
/// estimate, so the average is one too, with less noise. Because the log of
/// the pool mean is at least the mean of the block logs, the returned
/// estimates are nondecreasing in K by construction for every fixed RNG,
/// not merely in expectation.
#[allow(clippy::too_many_arguments)]
pub fn k_sample_delbo_nested(
    store: &ParamStore,
    den: &Denoiser,
    rec: &Recognizer,
    x0: &TokenSequence,
    ks: &[usize],
    n_time_pairs: usize,
    rng: &Rng,
    sched: Schedule,
    t_min: f64,
) -> Result<Vec<f64>> {
    if ks.is_empty() || ks[0] < 1 || ks.windows(2).any(|w| w[0] >= w[1] || w[1] % w[0] != 0) {
        return Err(VaddError::Usage(
            "draw counts must be ascending, each dividing the next".into(),
        ));
    }
    if n_time_pairs < 1 {
        return Err(VaddError::Usage("need at least one time pair".into()));
    }
    let k_max = *ks.last().unwrap();
    let v = den.dims.v;
    let mut acc = vec![0.0; ks.len()];
    for j in 0..n_time_pairs {
        let pair = rng.derive(j as u64);
        let t = pair.derive(0).next_f64();
        let xt = forward_mask(x0, t, sched, &mut pair.derive(1), v);
        let lw = delbo_log_weights(store, den, rec, x0, &xt, t, k_max, &mut pair.derive(2))?;
        let w = loss_weight(t, sched, t_min);
        for (s, &kk) in ks.iter().enumerate() {
            let n_blocks = k_max / kk;
            let mut sum = 0.0;
            for blk in 0..n_blocks {
                sum += log_mean_exp(&lw[blk * kk..(blk + 1) * kk]);
            }
            acc[s] += w * sum / n_blocks as f64;
        }
    }
    for a in &mut acc {
        *a /= n_time_pairs as f64;
    }
    Ok(acc)
}

/// K-sample lower bound on `log p(x0)` (one K).
#[allow(clippy::too_many_arguments)]
pub fn k_sample_delbo(
    store: &ParamStore,
    den: &Denoiser,
    rec: &Recognizer,
    x0: &TokenSequence,
    k: usize,
    n_time_pairs: usize,
    rng: &Rng,
    sched: Schedule,
    t_min: f64,
) -> Result<f64> {
    Ok(k_sample_delbo_nested(store, den, rec, x0, &[k], n_time_pairs, rng, sched, t_min)?[0])
}

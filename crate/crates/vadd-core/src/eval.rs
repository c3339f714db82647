//! Evaluation machinery: token histograms and Jensen–Shannon divergence,
//! a Gauss–Hermite quadrature oracle for the latent integral, an enumeration
//! oracle for the reverse-time posterior, a chi-square goodness-of-fit test
//! for masking counts, and the K-sample likelihood protocol.
//!
//! The quadrature and enumeration routines deliberately take different
//! arithmetic routes from the production code paths they check, so agreement
//! between the two is evidence of correctness rather than shared bugs.

use rayon::prelude::*;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete};

use crate::error::{Result, VaddError};
use crate::graph::Graph;
use crate::masking::{
    forward_mask, loss_weight, mask_token, Schedule, Token, TokenSequence,
};
use crate::models::{Denoiser, Recognizer};
use crate::objective::{k_sample_delbo, masked_positions};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Histograms and Jensen–Shannon divergence
// ---------------------------------------------------------------------------

/// Dense 2-D count grid over token pairs. Index convention: the first token
/// of a sequence selects the row block (`x`), the second the column (`y`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram2D {
    side: usize,
    counts: Vec<u64>,
    total: u64,
}

impl Histogram2D {
    pub fn new(side: usize) -> Histogram2D {
        assert!(side >= 1);
        Histogram2D { side, counts: vec![0; side * side], total: 0 }
    }

    /// Count length-2 token sequences into a `side`-by-`side` grid.
    pub fn from_sequences(seqs: &[TokenSequence], side: usize) -> Result<Histogram2D> {
        let mut h = Histogram2D::new(side);
        for (i, s) in seqs.iter().enumerate() {
            if s.len() != 2 {
                return Err(VaddError::Usage(format!(
                    "histogram needs length-2 sequences, sequence {i} has length {}",
                    s.len()
                )));
            }
            let (x, y) = (s[0] as usize, s[1] as usize);
            if x >= side || y >= side {
                return Err(VaddError::Usage(format!(
                    "sequence {i} token outside the {side}x{side} grid"
                )));
            }
            h.add(x, y);
        }
        Ok(h)
    }

    pub fn add(&mut self, x: usize, y: usize) {
        self.counts[x * self.side + y] += 1;
        self.total += 1;
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn count(&self, x: usize, y: usize) -> u64 {
        self.counts[x * self.side + y]
    }

    pub fn max_count(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }
}

/// Jensen–Shannon divergence in nats between two normalized histograms:
/// `JS(p, q) = KL(p || m)/2 + KL(q || m)/2` with `m = (p + q)/2`, each KL
/// summed only over bins where its numerator is positive. Always lands in
/// `[0, ln 2]`.
pub fn js_divergence(a: &Histogram2D, b: &Histogram2D) -> Result<f64> {
    if a.side != b.side {
        return Err(VaddError::Usage(format!(
            "histogram sides differ: {} vs {}",
            a.side, b.side
        )));
    }
    if a.total == 0 || b.total == 0 {
        return Err(VaddError::Usage("Jensen-Shannon of an empty histogram".into()));
    }
    let (ta, tb) = (a.total as f64, b.total as f64);
    let mut kl_a = 0.0;
    let mut kl_b = 0.0;
    for (&ca, &cb) in a.counts.iter().zip(&b.counts) {
        let p = ca as f64 / ta;
        let q = cb as f64 / tb;
        let m = (p + q) / 2.0;
        if p > 0.0 {
            kl_a += p * (p / m).ln();
        }
        if q > 0.0 {
            kl_b += q * (q / m).ln();
        }
    }
    Ok((0.5 * kl_a + 0.5 * kl_b).max(0.0))
}

// ---------------------------------------------------------------------------
// Gauss–Hermite quadrature for the latent integral
// ---------------------------------------------------------------------------

/// Eigenvalues of a symmetric tridiagonal matrix (diagonal `d`, off-diagonal
/// `e` with `e[i]` coupling rows `i` and `i+1`) by the implicit QL method
/// with Wilkinson shifts, eigenvalues only. Returned ascending.
fn tridiag_eigenvalues(mut d: Vec<f64>, mut e: Vec<f64>) -> Result<Vec<f64>> {
    let n = d.len();
    assert_eq!(e.len(), n - 1);
    e.push(0.0);
    for l in 0..n {
        let mut iterations = 0;
        'restart: loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iterations += 1;
            if iterations > 60 {
                return Err(VaddError::NonFinite(
                    "tridiagonal eigenvalue iteration did not converge".into(),
                ));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let (mut s, mut c) = (1.0f64, 1.0f64);
            let mut p = 0.0;
            for i in (l..m).rev() {
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    continue 'restart;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    d.sort_by(f64::total_cmp);
    Ok(d)
}

/// Nodes and weights integrating exactly against the standard normal
/// measure: `sum_j w_j f(x_j) ~ E[f(Z)]`, `Z ~ N(0,1)`, exact for
/// polynomials up to degree `2m - 1`. Weights sum to one.
///
/// Built by the Golub–Welsch construction: nodes are the eigenvalues of the
/// Jacobi matrix of the (probabilists') Hermite recurrence, weights are the
/// Christoffel numbers `1 / sum_k p_k(x_j)^2` over the orthonormal
/// polynomials, which avoids needing eigenvectors.
pub fn gauss_hermite(m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if m < 1 {
        return Err(VaddError::Usage("quadrature needs at least one node".into()));
    }
    if m == 1 {
        return Ok((vec![0.0], vec![1.0]));
    }
    let d = vec![0.0; m];
    let e: Vec<f64> = (1..m).map(|k| (k as f64).sqrt()).collect();
    let nodes = tridiag_eigenvalues(d, e)?;
    let weights = nodes
        .iter()
        .map(|&x| {
            let mut p_prev = 0.0;
            let mut p = 1.0;
            let mut sum_sq = 1.0;
            for k in 0..m - 1 {
                let p_next = (x * p - (k as f64).sqrt() * p_prev) / ((k + 1) as f64).sqrt();
                p_prev = p;
                p = p_next;
                sum_sq += p * p;
            }
            1.0 / sum_sq
        })
        .collect();
    Ok((nodes, weights))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Deterministic quadrature estimate of `log p(x0 | xt, t)` for a
/// latent-conditioned denoiser: the latent integral against the standard
/// normal prior on a tensor-product Gauss–Hermite grid, accumulated in log
/// space. Supports up to three latent dimensions; beyond that the grid is
/// the wrong tool and the call is rejected.
pub fn quadrature_logp(
    store: &ParamStore,
    den: &Denoiser,
    x0: &TokenSequence,
    xt: &TokenSequence,
    t: f64,
    nodes_per_dim: usize,
) -> Result<f64> {
    if !den.has_latent {
        return Err(VaddError::Usage(
            "latent quadrature called on a model without a latent pathway".into(),
        ));
    }
    let d = den.dims.d_latent;
    if d > 3 {
        return Err(VaddError::Usage(format!(
            "quadrature grid supports at most 3 latent dimensions, got {d}"
        )));
    }
    let n = den.dims.n_positions;
    let masked = masked_positions(x0, xt, den.dims.v)?;
    let (nodes, weights) = gauss_hermite(nodes_per_dim)?;
    let grid_size = nodes_per_dim.pow(d as u32);
    let mut z = Tensor::zeros(grid_size, d);
    let mut log_w = vec![0.0; grid_size];
    for gi in 0..grid_size {
        let mut rem = gi;
        for j in 0..d {
            let idx = rem % nodes_per_dim;
            rem /= nodes_per_dim;
            z.set(gi, j, nodes[idx]);
            log_w[gi] += weights[idx].ln();
        }
    }
    let xts = vec![xt.clone(); grid_size];
    let ts = vec![t; grid_size];
    let mut g = Graph::new();
    let z_leaf = g.leaf(z);
    let lm_node = den.log_mu(&mut g, store, &xts, Some(z_leaf), &ts);
    let lm = g.value(lm_node);
    let terms: Vec<f64> = (0..grid_size)
        .map(|gi| {
            let logp: f64 =
                masked.iter().map(|&i| lm.get(gi * n + i, x0[i] as usize)).sum();
            log_w[gi] + logp
        })
        .collect();
    Ok(log_sum_exp(&terms))
}

// ---------------------------------------------------------------------------
// Reverse-posterior enumeration oracle
// ---------------------------------------------------------------------------

/// Brute-force reverse-time posterior `q(x_s | x_t, x_0)` for one position,
/// computed by enumerating every intermediate state `y` and applying Bayes:
/// `q(x_s = y | x_t, x_0) ∝ q(x_t | x_s = y) * q(x_s = y | x_0)`.
/// Argument order matches the closed-form routine it cross-checks.
pub fn posterior_oracle(
    xt_i: Token,
    x0_i: Token,
    s: f64,
    t: f64,
    sched: Schedule,
    v: usize,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) || s >= t {
        return Err(VaddError::Usage(format!(
            "posterior_oracle needs 0 <= s < t <= 1, got s={s}, t={t}"
        )));
    }
    if x0_i as usize >= v {
        return Err(VaddError::Usage(format!(
            "clean token {x0_i} outside vocabulary of size {v}"
        )));
    }
    let mask = mask_token(v);
    if xt_i != mask && xt_i != x0_i {
        return Err(VaddError::Usage(
            "noisy token disagrees with the clean token at an unmasked position".into(),
        ));
    }
    let (a_s, a_t) = (sched.alpha(s), sched.alpha(t));
    let mut numer = vec![0.0; v + 1];
    for y in 0..=v {
        let q_s = if y == v {
            1.0 - a_s
        } else if y as Token == x0_i {
            a_s
        } else {
            0.0
        };
        let q_t = if y == v {
            // Mass on the absorbing state never leaves it.
            if xt_i == mask {
                1.0
            } else {
                0.0
            }
        } else if xt_i == y as Token {
            a_t / a_s
        } else if xt_i == mask {
            1.0 - a_t / a_s
        } else {
            0.0
        };
        numer[y] = q_s * q_t;
    }
    let total: f64 = numer.iter().sum();
    if total <= 0.0 {
        return Err(VaddError::Usage("zero-probability token pair".into()));
    }
    Ok(numer.into_iter().map(|x| x / total).collect())
}

// ---------------------------------------------------------------------------
// Masking-count goodness of fit
// ---------------------------------------------------------------------------

/// Chi-square goodness-of-fit p-value of per-trial success counts against
/// `Binomial(len, p_success)`, where `counts[k]` is the number of trials
/// with `k` successes. Adjacent count bins are pooled until each expected
/// count reaches 5; degenerate setups return 1.
pub fn binomial_gof_pvalue(counts: &[u64], p_success: f64) -> Result<f64> {
    if counts.len() < 2 {
        return Err(VaddError::Usage("counts must cover 0..=len".into()));
    }
    if !(0.0..=1.0).contains(&p_success) || !p_success.is_finite() {
        return Err(VaddError::Usage(format!("invalid success probability {p_success}")));
    }
    if p_success == 0.0 || p_success == 1.0 {
        return Ok(1.0);
    }
    let len = counts.len() - 1;
    let trials: u64 = counts.iter().sum();
    if trials == 0 {
        return Err(VaddError::Usage("no trials recorded".into()));
    }
    let binom = Binomial::new(p_success, len as u64)
        .map_err(|e| VaddError::Usage(format!("binomial setup failed: {e}")))?;
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut obs_acc = 0.0;
    let mut exp_acc = 0.0;
    for (k, &c) in counts.iter().enumerate() {
        obs_acc += c as f64;
        exp_acc += trials as f64 * binom.pmf(k as u64);
        if exp_acc >= 5.0 {
            bins.push((obs_acc, exp_acc));
            obs_acc = 0.0;
            exp_acc = 0.0;
        }
    }
    if obs_acc > 0.0 || exp_acc > 0.0 {
        match bins.last_mut() {
            Some(last) => {
                last.0 += obs_acc;
                last.1 += exp_acc;
            }
            None => return Ok(1.0),
        }
    }
    if bins.len() < 2 {
        return Ok(1.0);
    }
    let chi2: f64 = bins.iter().map(|(o, e)| (o - e) * (o - e) / e).sum();
    let dof = (bins.len() - 1) as f64;
    let dist = ChiSquared::new(dof)
        .map_err(|e| VaddError::Usage(format!("chi-square setup failed: {e}")))?;
    Ok(1.0 - dist.cdf(chi2))
}

/// Draw `trials` forward maskings of a length-`len` sequence at time `t` and
/// test the masked-position counts against the Binomial law implied by the
/// linear schedule. The degenerate endpoints (`t` = 0 or 1) are deterministic
/// and return p = 1.
pub fn mask_count_test(t: f64, len: usize, trials: usize, rng: &Rng) -> Result<f64> {
    if !(0.0..=1.0).contains(&t) {
        return Err(VaddError::Usage(format!("mask time {t} outside [0,1]")));
    }
    if len < 1 || trials < 1 {
        return Err(VaddError::Usage("need len >= 1 and trials >= 1".into()));
    }
    let sched = Schedule::Linear;
    let p_mask = sched.mask_prob(t);
    if p_mask <= 0.0 || p_mask >= 1.0 {
        return Ok(1.0);
    }
    let v = 2;
    let x0 = vec![0 as Token; len];
    let mut counts = vec![0u64; len + 1];
    for i in 0..trials {
        let mut r = rng.derive(i as u64);
        let xt = forward_mask(&x0, t, sched, &mut r, v);
        let n_masked = xt.iter().filter(|&&tok| tok == mask_token(v)).count();
        counts[n_masked] += 1;
    }
    binomial_gof_pvalue(&counts, p_mask)
}

// ---------------------------------------------------------------------------
// K-sample likelihood protocol
// ---------------------------------------------------------------------------

/// Lower bound on `log p(x0)` for a model without a latent pathway: the
/// weighted masked log-likelihood averaged over `n_time_pairs` draws of
/// `(t, x_t)`. The per-pair randomness derivation matches the latent
/// protocol exactly, so paired model comparisons share their noise.
fn plain_sequence_bound(
    store: &ParamStore,
    den: &Denoiser,
    x0: &TokenSequence,
    n_time_pairs: usize,
    seq_rng: &Rng,
    sched: Schedule,
    t_min: f64,
) -> Result<f64> {
    if n_time_pairs < 1 {
        return Err(VaddError::Usage("need at least one time pair".into()));
    }
    let (n, v) = (den.dims.n_positions, den.dims.v);
    let mut ts = Vec::with_capacity(n_time_pairs);
    let mut xts = Vec::with_capacity(n_time_pairs);
    for j in 0..n_time_pairs {
        let pair = seq_rng.derive(j as u64);
        let t = pair.derive(0).next_f64();
        let xt = forward_mask(x0, t, sched, &mut pair.derive(1), v);
        ts.push(t);
        xts.push(xt);
    }
    let mut g = Graph::new();
    let lm_node = den.log_mu(&mut g, store, &xts, None, &ts);
    let lm = g.value(lm_node);
    let mut acc = 0.0;
    for j in 0..n_time_pairs {
        let masked = masked_positions(x0, &xts[j], v)?;
        let logp: f64 = masked.iter().map(|&i| lm.get(j * n + i, x0[i] as usize)).sum();
        acc += loss_weight(ts[j], sched, t_min) * logp;
    }
    Ok(acc / n_time_pairs as f64)
}

/// Per-sequence lower bounds on `log p(x0)` for a pool of test sequences.
/// Latent models use the K-sample importance-weighted bound with the
/// recognizer as proposal; plain models use the direct weighted masked
/// log-likelihood with the same `(t, x_t)` draws. Sequences are processed
/// in parallel with per-sequence derived RNG streams, so results are
/// independent of thread count.
#[allow(clippy::too_many_arguments)]
pub fn nll_per_sequence(
    store: &ParamStore,
    den: &Denoiser,
    rec: Option<&Recognizer>,
    tokens: &[TokenSequence],
    k: usize,
    n_time_pairs: usize,
    base_rng: &Rng,
    sched: Schedule,
    t_min: f64,
) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(VaddError::Usage("likelihood evaluation needs test sequences".into()));
    }
    match (den.has_latent, rec.is_some()) {
        (true, false) => {
            return Err(VaddError::Usage(
                "latent-conditioned model needs a recognizer for likelihood".into(),
            ))
        }
        (false, true) => {
            return Err(VaddError::Usage(
                "plain model cannot use a recognizer for likelihood".into(),
            ))
        }
        _ => {}
    }
    tokens
        .par_iter()
        .enumerate()
        .map(|(s, x0)| {
            let seq_rng = base_rng.derive(s as u64);
            match rec {
                Some(r) => {
                    k_sample_delbo(store, den, r, x0, k, n_time_pairs, &seq_rng, sched, t_min)
                }
                None => plain_sequence_bound(store, den, x0, n_time_pairs, &seq_rng, sched, t_min),
            }
        })
        .collect()
}

/// Negative log-likelihood estimate in nats per sequence: the mean over the
/// pool of minus the per-sequence lower bound.
#[allow(clippy::too_many_arguments)]
pub fn nll(
    store: &ParamStore,
    den: &Denoiser,
    rec: Option<&Recognizer>,
    tokens: &[TokenSequence],
    k: usize,
    n_time_pairs: usize,
    base_rng: &Rng,
    sched: Schedule,
    t_min: f64,
) -> Result<f64> {
    let bounds =
        nll_per_sequence(store, den, rec, tokens, k, n_time_pairs, base_rng, sched, t_min)?;
    Ok(-bounds.iter().sum::<f64>() / bounds.len() as f64)
}

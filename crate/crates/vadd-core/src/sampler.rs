//! Ancestral generation over a discretized time grid, for both the latent
//! model (fresh prior draw per backward step, optionally shared across
//! steps) and the latent-free baseline.
//!
//! Samples are embarrassingly parallel: sample `i` owns the RNG derived from
//! the base stream with label `i`, so results are independent of chunking
//! and thread count up to the floating-point shape of the batched forward
//! (fixed here by a constant chunk size).

use rayon::prelude::*;

use crate::error::{Result, VaddError};
use crate::graph::Graph;
use crate::masking::{mask_token, Schedule, Token, TokenSequence};
use crate::models::Denoiser;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Samples processed per batched forward; fixed so results are reproducible
/// regardless of thread count.
pub const SAMPLE_CHUNK: usize = 512;

/// Uniform grid `t_i = i / T`, `i = 0..=T`.
#[derive(Clone, Copy, Debug)]
pub struct TimeGrid {
    pub t_steps: usize,
}

impl TimeGrid {
    pub fn new(t_steps: usize) -> Result<Self> {
        if t_steps < 1 {
            return Err(VaddError::Usage("need at least one time step".into()));
        }
        Ok(TimeGrid { t_steps })
    }

    pub fn time(&self, i: usize) -> f64 {
        debug_assert!(i <= self.t_steps);
        i as f64 / self.t_steps as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.t_steps).map(|i| self.time(i)).collect()
    }
}

/// One backward transition from time `t` to `s < t`: unmasked tokens are
/// carried over; a masked position stays masked with probability
/// `(1-alpha_s)/(1-alpha_t)` and otherwise unmasks into a draw from its
/// `mu` row.
pub fn transition_step(
    xt: &[Token],
    s: f64,
    t: f64,
    mu: &Tensor,
    rng: &mut Rng,
    sched: Schedule,
    v: usize,
) -> Result<TokenSequence> {
    if !(0.0..1.0).contains(&s) || !(0.0..=1.0).contains(&t) || s >= t {
        return Err(VaddError::Usage(format!("need 0 <= s < t <= 1, got s={s}, t={t}")));
    }
    assert_eq!(mu.shape(), (xt.len(), v), "one mu row per position");
    let mask = mask_token(v);
    let p_stay = sched.mask_prob(s) / sched.mask_prob(t);
    let mut out = Vec::with_capacity(xt.len());
    for (i, &tok) in xt.iter().enumerate() {
        if tok != mask {
            out.push(tok);
        } else if rng.next_f64() < p_stay {
            out.push(mask);
        } else {
            out.push(rng.categorical(mu.row(i)) as Token);
        }
    }
    Ok(out)
}

fn still_masked(seq: &[Token], mask: Token) -> bool {
    seq.iter().any(|&t| t == mask)
}

/// Latent draws for one backward step of a chunk of samples: row `c` holds
/// this step's z for chunk member `c`. With `shared_z` the per-sample z is
/// drawn once and repeated.
struct LatentPlan {
    shared: Option<Vec<Vec<f64>>>,
}

impl LatentPlan {
    fn new(shared_z: bool, z_rngs: &mut [Rng], d: usize) -> Self {
        let shared = shared_z.then(|| {
            z_rngs
                .iter_mut()
                .map(|r| (0..d).map(|_| r.next_normal()).collect())
                .collect()
        });
        LatentPlan { shared }
    }

    fn step_draws(&self, z_rngs: &mut [Rng], d: usize) -> Tensor {
        match &self.shared {
            Some(rows) => Tensor::from_fn(rows.len(), d, |r, c| rows[r][c]),
            None => {
                let mut z = Tensor::zeros(z_rngs.len(), d);
                for (r, rng) in z_rngs.iter_mut().enumerate() {
                    for c in 0..d {
                        z.set(r, c, rng.next_normal());
                    }
                }
                z
            }
        }
    }
}

/// Run the full backward chain for a chunk of samples. Sample `c` draws its
/// latent noise from `rngs[c].derive(0)` and its transition coins from
/// `rngs[c].derive(1)`.
fn sample_chunk(
    store: &ParamStore,
    den: &Denoiser,
    grid: &TimeGrid,
    rngs: &[Rng],
    shared_z: bool,
    sched: Schedule,
) -> Result<Vec<TokenSequence>> {
    let (n, v, d) = (den.dims.n_positions, den.dims.v, den.dims.d_latent);
    let mask = mask_token(v);
    let count = rngs.len();
    let mut z_rngs: Vec<Rng> = rngs.iter().map(|r| r.derive(0)).collect();
    let mut t_rngs: Vec<Rng> = rngs.iter().map(|r| r.derive(1)).collect();
    let plan = den.has_latent.then(|| LatentPlan::new(shared_z, &mut z_rngs, d));
    let mut states: Vec<TokenSequence> = vec![vec![mask; n]; count];
    for i in (1..=grid.t_steps).rev() {
        let t = grid.time(i);
        let s = grid.time(i - 1);
        let ts = vec![t; count];
        let mut g = Graph::new();
        let z = plan.as_ref().map(|p| {
            let draws = p.step_draws(&mut z_rngs, d);
            g.leaf(draws)
        });
        let log_mu = den.log_mu(&mut g, store, &states, z, &ts);
        let probs = g.value(log_mu).map(f64::exp);
        for c in 0..count {
            let mu = Tensor::from_fn(n, v, |r, col| probs.get(c * n + r, col));
            let next = transition_step(&states[c], s, t, &mu, &mut t_rngs[c], sched, v)?;
            // Carry-over property: unmasking is monotone along a trajectory.
            debug_assert!(states[c]
                .iter()
                .zip(&next)
                .all(|(&a, &b)| a == mask || a == b));
            states[c] = next;
        }
    }
    for s in &states {
        assert!(!still_masked(s, mask), "backward chain ended with masks");
    }
    Ok(states)
}

/// Generate one sequence; works for either model flavor. The latent model
/// draws a fresh prior z at every backward step unless `shared_z`.
pub fn ancestral_sample(
    store: &ParamStore,
    den: &Denoiser,
    grid: &TimeGrid,
    sample_rng: &Rng,
    shared_z: bool,
    sched: Schedule,
) -> Result<TokenSequence> {
    Ok(sample_chunk(store, den, grid, std::slice::from_ref(sample_rng), shared_z, sched)?
        .pop()
        .unwrap())
}

/// Latent-model ancestral sampling with per-step prior draws.
pub fn vadd_ancestral(
    store: &ParamStore,
    den: &Denoiser,
    t_steps: usize,
    sample_rng: &Rng,
) -> Result<TokenSequence> {
    assert!(den.has_latent);
    ancestral_sample(store, den, &TimeGrid::new(t_steps)?, sample_rng, false, Schedule::Linear)
}

/// Baseline ancestral sampling.
pub fn mdlm_ancestral(
    store: &ParamStore,
    den: &Denoiser,
    t_steps: usize,
    sample_rng: &Rng,
) -> Result<TokenSequence> {
    assert!(!den.has_latent);
    ancestral_sample(store, den, &TimeGrid::new(t_steps)?, sample_rng, false, Schedule::Linear)
}

/// Generate `count` sequences; sample `i` uses `base.derive(i)`, processed
/// in fixed chunks of [`SAMPLE_CHUNK`] (parallel across chunks).
pub fn sample_many(
    store: &ParamStore,
    den: &Denoiser,
    grid: &TimeGrid,
    count: usize,
    base: &Rng,
    shared_z: bool,
    sched: Schedule,
) -> Result<Vec<TokenSequence>> {
    sample_many_chunked(store, den, grid, count, base, shared_z, sched, SAMPLE_CHUNK)
}

#[allow(clippy::too_many_arguments)]
pub fn sample_many_chunked(
    store: &ParamStore,
    den: &Denoiser,
    grid: &TimeGrid,
    count: usize,
    base: &Rng,
    shared_z: bool,
    sched: Schedule,
    chunk_size: usize,
) -> Result<Vec<TokenSequence>> {
    assert!(chunk_size >= 1);
    let starts: Vec<usize> = (0..count).step_by(chunk_size).collect();
    let chunks: Vec<Vec<TokenSequence>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + chunk_size).min(count);
            let rngs: Vec<Rng> = (start..end).map(|i| base.derive(i as u64)).collect();
            sample_chunk(store, den, grid, &rngs, shared_z, sched)
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

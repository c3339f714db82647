//! The absorbing-mask forward process and its exact posterior.
//!
//! Tokens are independently replaced by the mask symbol with probability
//! `1 - alpha(t)`; once masked they stay masked. With the linear schedule
//! `alpha(t) = 1 - t`, the per-position posterior of the earlier state `x_s`
//! given `(x_t, x_0)` has the closed form used both by the reverse sampler
//! and by the enumeration oracle that cross-checks it.

use crate::error::{Result, VaddError};
use crate::rng::Rng;

/// Token id; real classes are `0..v`, the mask symbol is `v`.
pub type Token = u32;

/// Token sequence of length `n_positions`.
pub type TokenSequence = Vec<Token>;

/// Mask symbol for vocabulary size `v`.
pub fn mask_token(v: usize) -> Token {
    v as Token
}

/// Noise schedule for the survival probability `alpha(t)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// `alpha(t) = 1 - t`.
    Linear,
}

impl Schedule {
    pub fn alpha(&self, t: f64) -> f64 {
        match self {
            Schedule::Linear => 1.0 - t,
        }
    }

    pub fn alpha_prime(&self, _t: f64) -> f64 {
        match self {
            Schedule::Linear => -1.0,
        }
    }

    /// Mask probability `1 - alpha(t)` in a cancellation-free form, so tiny
    /// times keep full precision.
    pub fn mask_prob(&self, t: f64) -> f64 {
        match self {
            Schedule::Linear => t,
        }
    }
}

/// Likelihood weight `-alpha'(t) / (1 - alpha(t))` with `t` clamped below by
/// `t_min` to keep the weight finite near zero.
pub fn loss_weight(t: f64, sched: Schedule, t_min: f64) -> f64 {
    let tc = t.max(t_min);
    -sched.alpha_prime(tc) / sched.mask_prob(tc)
}

/// Independently mask each position with probability `1 - alpha(t)`.
/// Consumes exactly one uniform per position, in position order.
pub fn forward_mask(x0: &[Token], t: f64, sched: Schedule, rng: &mut Rng, v: usize) -> TokenSequence {
    let p_mask = sched.mask_prob(t);
    x0.iter()
        .map(|&tok| {
            let u = rng.next_f64();
            if u < p_mask {
                mask_token(v)
            } else {
                tok
            }
        })
        .collect()
}

/// True where the sequence carries the mask symbol.
pub fn mask_indicator(seq: &[Token], v: usize) -> Vec<bool> {
    seq.iter().map(|&tok| tok == mask_token(v)).collect()
}

/// Exact single-position posterior `q(x_s | x_t, x_0)` over the `v + 1`
/// states (classes then mask), for times `0 <= s < t <= 1`.
///
/// An unmasked `x_t` is carried over as a point mass; a masked `x_t` either
/// stays masked with probability `(1 - alpha_s)/(1 - alpha_t)` or reveals
/// `x_0` with the complementary mass.
pub fn posterior_probs(
    xt_i: Token,
    x0_i: Token,
    s: f64,
    t: f64,
    sched: Schedule,
    v: usize,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&t) || s >= t {
        return Err(VaddError::Usage(format!(
            "posterior_probs needs 0 <= s < t <= 1, got s={s}, t={t}"
        )));
    }
    if x0_i as usize >= v {
        return Err(VaddError::Usage(format!(
            "clean token {x0_i} outside vocabulary of size {v}"
        )));
    }
    let mut probs = vec![0.0; v + 1];
    if xt_i != mask_token(v) {
        probs[xt_i as usize] = 1.0;
        return Ok(probs);
    }
    let (alpha_s, alpha_t) = (sched.alpha(s), sched.alpha(t));
    let stay_masked = sched.mask_prob(s) / sched.mask_prob(t);
    probs[v] = stay_masked;
    probs[x0_i as usize] += (alpha_s - alpha_t) / sched.mask_prob(t);
    Ok(probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Rng, STREAM_MASK};
    use proptest::prelude::*;

    const V: usize = 100;

    #[test]
    fn no_noise_at_time_zero() {
        let x0: Vec<Token> = (0..50).collect();
        let mut rng = Rng::new(1, STREAM_MASK);
        let xt = forward_mask(&x0, 0.0, Schedule::Linear, &mut rng, V);
        assert_eq!(xt, x0);
    }

    #[test]
    fn fully_masked_at_time_one() {
        let x0: Vec<Token> = (0..50).collect();
        let mut rng = Rng::new(2, STREAM_MASK);
        let xt = forward_mask(&x0, 1.0, Schedule::Linear, &mut rng, V);
        assert!(xt.iter().all(|&tok| tok == mask_token(V)));
    }

    #[test]
    fn mask_rate_tracks_schedule() {
        // At t = 0.3 the count of masked positions over many draws should
        // match Binomial(n, 0.3) in mean within 5 sigma.
        let n = 200;
        let trials = 2000;
        let t = 0.3;
        let mut rng = Rng::new(3, STREAM_MASK);
        let x0 = vec![7u32; n];
        let mut total = 0usize;
        for _ in 0..trials {
            let xt = forward_mask(&x0, t, Schedule::Linear, &mut rng, V);
            total += mask_indicator(&xt, V).iter().filter(|&&b| b).count();
        }
        let mean = total as f64 / trials as f64;
        let se = (n as f64 * t * (1.0 - t) / trials as f64).sqrt();
        assert!(
            (mean - n as f64 * t).abs() < 5.0 * se,
            "mean {mean}, expect {}",
            n as f64 * t
        );
    }

    #[test]
    fn unmasked_observation_is_a_point_mass() {
        let p = posterior_probs(13, 13, 0.2, 0.7, Schedule::Linear, V).unwrap();
        assert_eq!(p[13], 1.0);
        assert_eq!(p.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn masked_posterior_matches_hand_value() {
        // alpha_s = 0.8, alpha_t = 0.5 -> stay-masked 0.4, reveal 0.6.
        let p = posterior_probs(mask_token(V), 42, 0.2, 0.5, Schedule::Linear, V).unwrap();
        assert!((p[V] - 0.4).abs() < 1e-15);
        assert!((p[42] - 0.6).abs() < 1e-15);
        let total: f64 = p.iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn posterior_at_s_zero_always_reveals() {
        let p = posterior_probs(mask_token(V), 5, 0.0, 0.9, Schedule::Linear, V).unwrap();
        assert!((p[5] - 1.0).abs() < 1e-15);
        assert_eq!(p[V], 0.0);
    }

    #[test]
    fn invalid_time_order_is_a_usage_error() {
        assert!(posterior_probs(0, 0, 0.7, 0.2, Schedule::Linear, V).is_err());
        assert!(posterior_probs(0, 0, 0.5, 0.5, Schedule::Linear, V).is_err());
    }

    #[test]
    fn loss_weight_is_inverse_time_for_linear_schedule() {
        assert!((loss_weight(0.5, Schedule::Linear, 1e-5) - 2.0).abs() < 1e-15);
        assert!((loss_weight(1.0, Schedule::Linear, 1e-5) - 1.0).abs() < 1e-15);
        // Clamp kicks in below t_min.
        assert!((loss_weight(1e-9, Schedule::Linear, 1e-5) - 1e5).abs() < 1e-9);
    }

    #[test]
    fn masking_composes_like_a_single_heavier_step() {
        // Masking at t then carrying the result to u > t (masking survivors
        // with the conditional rate) must equal masking once at u: compare
        // marginal mask counts. Conditional survive prob = alpha_u/alpha_t.
        let n = 100;
        let (t, u) = (0.3, 0.75);
        let trials = 4000;
        let mut rng = Rng::new(5, STREAM_MASK);
        let x0 = vec![1u32; n];
        let mut masked_two_step = 0usize;
        for _ in 0..trials {
            let xt = forward_mask(&x0, t, Schedule::Linear, &mut rng, V);
            let cond_t = 1.0 - Schedule::Linear.alpha(u) / Schedule::Linear.alpha(t);
            let xu = forward_mask(&xt, cond_t, Schedule::Linear, &mut rng, V);
            masked_two_step += mask_indicator(&xu, V).iter().filter(|&&b| b).count();
        }
        let mean = masked_two_step as f64 / trials as f64;
        let expect = n as f64 * u;
        let se = (n as f64 * u * (1.0 - u) / trials as f64).sqrt();
        assert!((mean - expect).abs() < 5.0 * se, "mean {mean} vs {expect}");
    }

    proptest! {
        #[test]
        fn posterior_rows_are_normalized_and_nonnegative(
            x0 in 0u32..(V as u32),
            masked: bool,
            sf in 0.0f64..0.98,
            gap in 0.01f64..0.5,
        ) {
            let s = sf;
            let t = (sf + gap).min(1.0);
            prop_assume!(s < t);
            let xt = if masked { mask_token(V) } else { x0 };
            let p = posterior_probs(xt, x0, s, t, Schedule::Linear, V).unwrap();
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn forward_mask_only_masks_and_never_invents_tokens(
            seed: u64,
            t in 0.0f64..=1.0,
        ) {
            let x0: Vec<Token> = (0..32).map(|i| (i * 3) % V as u32).collect();
            let mut rng = Rng::new(seed, STREAM_MASK);
            let xt = forward_mask(&x0, t, Schedule::Linear, &mut rng, V);
            for (a, b) in x0.iter().zip(xt.iter()) {
                prop_assert!(*b == *a || *b == mask_token(V));
            }
        }
    }
}

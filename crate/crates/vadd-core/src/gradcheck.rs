//! Finite-difference verification of reverse-mode gradients.
//!
//! The only trustworthy referee for an autodiff engine is an independent
//! derivative estimate. [`grad_check`] perturbs chosen parameter coordinates
//! by a fixed epsilon, re-evaluates the loss closure, and compares the
//! central difference against the engine's analytic gradient.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// One compared coordinate.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub finite_diff: f64,
    pub rel_err: f64,
}

/// Relative error with a floor so that near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compare analytic gradients against central differences `(f(x+eps) -
/// f(x-eps)) / 2eps` at the given `(parameter, flat index)` coordinates.
/// The store is restored to its original values before returning.
pub fn grad_check(
    mut f: impl FnMut(&ParamStore) -> f64,
    store: &mut ParamStore,
    analytic: &BTreeMap<String, Tensor>,
    coords: &[(String, usize)],
    eps: f64,
) -> Vec<CoordCheck> {
    let mut out = Vec::with_capacity(coords.len());
    for (name, idx) in coords {
        let orig = store.get(name).values()[*idx];

        store.get_mut(name).values_mut()[*idx] = orig + eps;
        let plus = f(store);
        store.get_mut(name).values_mut()[*idx] = orig - eps;
        let minus = f(store);
        store.get_mut(name).values_mut()[*idx] = orig;

        let fd = (plus - minus) / (2.0 * eps);
        let an = analytic
            .get(name)
            .map(|t| t.values()[*idx])
            .unwrap_or(0.0);
        out.push(CoordCheck {
            name: name.clone(),
            index: *idx,
            analytic: an,
            finite_diff: fd,
            rel_err: rel_err(an, fd),
        });
    }
    out
}

/// Largest relative error over the checked coordinates.
pub fn max_rel_err(checks: &[CoordCheck]) -> f64 {
    checks.iter().map(|c| c.rel_err).fold(0.0, f64::max)
}

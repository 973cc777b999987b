//! Power iteration for nonnegative operators with Collatz–Wielandt brackets.
//!
//! For a nonnegative operator `A` and a positive vector `v`,
//! `min_i (Av)_i / v_i ≤ ρ(A) ≤ max_i (Av)_i / v_i`. Iterating `v ← (A + εI) v`
//! keeps both bounds monotone and, when the top eigenvalue is simple and
//! dominant, drives them together.

use std::fmt;

/// Certified interval containing a spectral radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub lower: f64,
    pub upper: f64,
}

impl Bracket {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.lower + self.upper)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

impl fmt::Display for Bracket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:.12}, {:.12}]", self.lower, self.upper)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PowerOptions {
    /// Stop once `upper - lower < tol * upper`.
    pub tol: f64,
    pub max_iter: usize,
    /// Diagonal shift `ε` used in the iteration (not in the brackets).
    pub shift: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct PowerResult {
    pub bracket: Bracket,
    /// Positive right vector, normalized to max entry 1.
    pub vector: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum PowerFailure {
    NotConverged { bracket: Bracket, iterations: usize },
    LostPositivity { iterations: usize },
}

/// Runs power iteration with `apply(x, out)` computing `out = A x`.
pub(crate) fn power_iterate<F>(
    n: usize,
    mut apply: F,
    init: Option<&[f64]>,
    opts: PowerOptions,
) -> Result<PowerResult, PowerFailure>
where
    F: FnMut(&[f64], &mut [f64]),
{
    let mut v = match init {
        Some(x) if x.len() == n && x.iter().all(|&e| e > 0.0 && e.is_finite()) => x.to_vec(),
        _ => vec![1.0; n],
    };
    normalize_max(&mut v);
    let mut w = vec![0.0; n];
    let mut best = Bracket { lower: 0.0, upper: f64::INFINITY };

    for it in 1..=opts.max_iter {
        apply(&v, &mut w);
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for (wi, vi) in w.iter().zip(&v) {
            let q = wi / vi;
            lo = lo.min(q);
            hi = hi.max(q);
        }
        best.lower = best.lower.max(lo);
        best.upper = best.upper.min(hi);
        if best.upper - best.lower <= opts.tol * best.upper {
            return Ok(PowerResult { bracket: best, vector: v, iterations: it });
        }
        for (wi, vi) in w.iter_mut().zip(&v) {
            *wi += opts.shift * vi;
        }
        std::mem::swap(&mut v, &mut w);
        normalize_max(&mut v);
        if v.iter().any(|&e| !(e > 0.0 && e.is_finite())) {
            return Err(PowerFailure::LostPositivity { iterations: it });
        }
    }
    Err(PowerFailure::NotConverged { bracket: best, iterations: opts.max_iter })
}

fn normalize_max(v: &mut [f64]) {
    let m = v.iter().cloned().fold(0.0f64, f64::max);
    if m > 0.0 {
        v.iter_mut().for_each(|e| *e /= m);
    }
}

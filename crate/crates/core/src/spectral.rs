//! Perron–Frobenius analysis of the memoryless model.

use thiserror::Error;

use crate::model::MeanMatrix;
use crate::power::{power_iterate, Bracket, PowerFailure, PowerOptions};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("mean matrix is not primitive; the Perron eigen-elements are not unique")]
    NotPrimitive,
    #[error("power iteration did not converge after {iterations} iterations; last enclosure {bracket}")]
    NotConverged { bracket: Bracket, iterations: usize },
    #[error("power iteration lost positivity after {iterations} iterations")]
    LostPositivity { iterations: usize },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
}

impl From<PowerFailure> for SpectralError {
    fn from(f: PowerFailure) -> Self {
        match f {
            PowerFailure::NotConverged { bracket, iterations } => {
                Self::NotConverged { bracket, iterations }
            }
            PowerFailure::LostPositivity { iterations } => Self::LostPositivity { iterations },
        }
    }
}

/// Principal eigenvalue `r` with left eigen-law `rho` (a probability vector)
/// and right eigenvector `h > 0`, normalized so that `Σ rho(s) h(s) = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct PFTriple {
    pub r: f64,
    pub rho: Vec<f64>,
    pub h: Vec<f64>,
    /// Collatz–Wielandt enclosure of `r` from the right iteration.
    pub bracket: Bracket,
}

impl PFTriple {
    pub fn h_min(&self) -> f64 {
        self.h.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn h_max(&self) -> f64 {
        self.h.iter().cloned().fold(0.0, f64::max)
    }

    /// `‖ρm − rρ‖₁` and `‖mh − rh‖∞`.
    pub fn residuals(&self, m: &MeanMatrix) -> (f64, f64) {
        let n = m.dim();
        let left: f64 = (0..n)
            .map(|t| ((0..n).map(|s| self.rho[s] * m.get(s, t)).sum::<f64>() - self.r * self.rho[t]).abs())
            .sum();
        let right = (0..n)
            .map(|s| (m.row(s).iter().zip(&self.h).map(|(a, b)| a * b).sum::<f64>() - self.r * self.h[s]).abs())
            .fold(0.0, f64::max);
        (left, right)
    }
}

fn is_balanced(m: &MeanMatrix) -> Option<f64> {
    let sums = m.row_sums();
    let c = sums[0];
    sums.iter()
        .all(|&s| (s - c).abs() <= 1e-12 * c.abs().max(1.0))
        .then(|| sums.iter().sum::<f64>() / sums.len() as f64)
}

pub fn perron_frobenius(m: &MeanMatrix, tol: f64) -> Result<PFTriple, SpectralError> {
    perron_frobenius_with(m, tol, DEFAULT_MAX_ITER)
}

/// Power iteration on `m` for `h` and on its transpose for `rho`, stopped by
/// the Collatz–Wielandt bracket.
pub fn perron_frobenius_with(
    m: &MeanMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<PFTriple, SpectralError> {
    if !(tol > 0.0) {
        return Err(SpectralError::BadTolerance(tol));
    }
    if !m.is_primitive() {
        return Err(SpectralError::NotPrimitive);
    }
    let n = m.dim();
    let opts = PowerOptions { tol, max_iter, shift: 0.0 };

    let transpose = |x: &[f64], out: &mut [f64]| {
        for (t, o) in out.iter_mut().enumerate() {
            *o = (0..n).map(|s| x[s] * m.get(s, t)).sum();
        }
    };
    let left = power_iterate(n, transpose, None, opts)?;
    let mut rho = left.vector;
    let total: f64 = rho.iter().sum();
    rho.iter_mut().for_each(|x| *x /= total);

    // Balanced rows: h is exactly constant and r is the common row sum.
    if let Some(c) = is_balanced(m) {
        let h = vec![1.0; n];
        return Ok(PFTriple { r: c, rho, h, bracket: Bracket { lower: c, upper: c } });
    }

    let forward = |x: &[f64], out: &mut [f64]| {
        for (s, o) in out.iter_mut().enumerate() {
            *o = m.row(s).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    };
    let right = power_iterate(n, forward, None, opts)?;
    let mut h = right.vector;

    let rho_h: f64 = rho.iter().zip(&h).map(|(a, b)| a * b).sum();
    let rho_m_h: f64 = (0..n)
        .map(|s| rho[s] * m.row(s).iter().zip(&h).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let r = (rho_m_h / rho_h).clamp(right.bracket.lower, right.bracket.upper);
    h.iter_mut().for_each(|x| *x /= rho_h);

    Ok(PFTriple { r, rho, h, bracket: right.bracket })
}

/// Row-stochastic matrix `m(s,t) h(t) / (r h(s))`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl NormalizedMatrix {
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.entries[s * self.n + t]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.entries[s * self.n..(s + 1) * self.n]
    }
}

/// Rows are rescaled by their sums, which differ from 1 only by the
/// eigen-residual of `h`.
pub fn normalized(m: &MeanMatrix, pf: &PFTriple) -> NormalizedMatrix {
    let n = m.dim();
    let mut entries = vec![0.0; n * n];
    for s in 0..n {
        let row = &mut entries[s * n..(s + 1) * n];
        for (t, e) in row.iter_mut().enumerate() {
            *e = m.get(s, t) * pf.h[t] / (pf.r * pf.h[s]);
        }
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|e| *e /= sum);
    }
    NormalizedMatrix { n, entries }
}

/// `(r·min h / max h, r·max h / min h)`, the a priori enclosure of the memory growth rate.
pub fn harnack_enclosure(pf: &PFTriple) -> Bracket {
    let ratio = pf.h_max() / pf.h_min();
    Bracket { lower: pf.r / ratio, upper: pf.r * ratio }
}

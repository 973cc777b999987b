//! The memory operator truncated to lookback `< ℓ`, acting on functions of
//! the first `k ≥ ℓ` memory entries, applied without materializing it.
//!
//! Prefixes `(s_0, …, s_{k-1})` are indexed lexicographically with `s_0` the
//! most significant digit, so the child prefix `t·p` of index `i` has index
//! `t·|S|^{k-1} + i / |S|`.

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{MeanMatrix, MemoryLaw, Prefix};
use crate::power::{power_iterate, Bracket, PowerFailure, PowerOptions};
use crate::spectral::{harnack_enclosure, perron_frobenius, SpectralError};

/// Largest state space (in entries of one vector) accepted by default.
pub const DEFAULT_MAX_STATES: usize = 1 << 27;
pub const DEFAULT_MAX_ITER: usize = 1_000_000;
/// Relative diagonal shift `ε / max row sum` used by the power iterations.
pub const SHIFT_FRACTION: f64 = 1e-3;
/// Largest operator `to_dense` will materialize.
pub const MAX_DENSE_STATES: usize = 4096;

const CHUNK: usize = 1 << 12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LiftError {
    #[error("truncation depth must be at least 1")]
    ZeroDepth,
    #[error("state depth {depth} is smaller than the truncation depth {truncation}")]
    DepthBelowTruncation { truncation: usize, depth: usize },
    #[error("{n}^{depth} states exceed the budget of {max_states}; deepest feasible depth is {reachable}")]
    Budget { n: usize, depth: usize, max_states: usize, reachable: usize },
    #[error("vector has length {got}, operator has {expected} states")]
    LengthMismatch { expected: usize, got: usize },
    #[error("power iteration did not converge after {iterations} iterations; last enclosure {bracket}")]
    NotConverged { bracket: Bracket, iterations: usize },
    #[error("power iteration lost positivity after {iterations} iterations")]
    LostPositivity { iterations: usize },
    #[error("left iteration did not converge after {iterations} iterations (residual {residual:e})")]
    LeftNotConverged { residual: f64, iterations: usize },
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("operator with {0} states is too large to materialize")]
    TooLargeForDense(usize),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
}

impl From<PowerFailure> for LiftError {
    fn from(f: PowerFailure) -> Self {
        match f {
            PowerFailure::NotConverged { bracket, iterations } => {
                Self::NotConverged { bracket, iterations }
            }
            PowerFailure::LostPositivity { iterations } => Self::LostPositivity { iterations },
        }
    }
}

/// Number of prefixes `n^depth`, or `None` past `max_states`.
pub fn state_count(n: usize, depth: usize, max_states: usize) -> Option<usize> {
    let mut size = 1usize;
    for _ in 0..depth {
        size = size.checked_mul(n)?;
        if size > max_states {
            return None;
        }
    }
    Some(size)
}

fn deepest_feasible(n: usize, max_states: usize) -> usize {
    if n <= 1 {
        return usize::MAX;
    }
    let mut d = 0;
    while state_count(n, d + 1, max_states).is_some() {
        d += 1;
    }
    d
}

#[derive(Debug, Clone)]
pub struct LiftedOperator {
    m: MeanMatrix,
    /// `τ(0), …, τ(ℓ-1)`.
    weights: Vec<f64>,
    depth: usize,
    n: usize,
    size: usize,
    /// `n^(depth-1)`.
    high: usize,
    /// `n^(depth-1-j)` for each lookback `j < ℓ`.
    place: Vec<usize>,
}

/// Operator truncated at `depth`, acting on prefixes of the same length.
pub fn lift(m: &MeanMatrix, tau: &MemoryLaw, depth: usize) -> Result<LiftedOperator, LiftError> {
    LiftedOperator::new(m, tau, depth, depth, DEFAULT_MAX_STATES)
}

impl LiftedOperator {
    /// Truncation `ℓ` (lookbacks `j < ℓ`) acting on prefixes of length `depth ≥ ℓ`.
    pub fn new(
        m: &MeanMatrix,
        tau: &MemoryLaw,
        truncation: usize,
        depth: usize,
        max_states: usize,
    ) -> Result<Self, LiftError> {
        if truncation == 0 {
            return Err(LiftError::ZeroDepth);
        }
        if depth < truncation {
            return Err(LiftError::DepthBelowTruncation { truncation, depth });
        }
        let n = m.dim();
        let size = state_count(n, depth, max_states).ok_or(LiftError::Budget {
            n,
            depth,
            max_states,
            reachable: deepest_feasible(n, max_states),
        })?;
        let high = size / n;
        let place = (0..truncation).map(|j| n.pow((depth - 1 - j) as u32)).collect();
        Ok(Self {
            m: m.clone(),
            weights: (0..truncation).map(|j| tau.prob(j)).collect(),
            depth,
            n,
            size,
            high,
            place,
        })
    }

    pub fn truncation(&self) -> usize {
        self.weights.len()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_types(&self) -> usize {
        self.n
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn index_of(&self, p: &Prefix) -> usize {
        assert_eq!(p.len(), self.depth, "prefix length must equal the operator depth");
        p.0.iter().fold(0, |acc, &s| acc * self.n + s)
    }

    pub fn prefix_of(&self, mut index: usize) -> Prefix {
        let mut v = vec![0; self.depth];
        for slot in v.iter_mut().rev() {
            *slot = index % self.n;
            index /= self.n;
        }
        Prefix(v)
    }

    #[inline]
    pub fn child_index(&self, t: usize, index: usize) -> usize {
        t * self.high + index / self.n
    }

    /// Per-child weights `c(t) = Σ_{j<ℓ} τ(j) m(p_j, t)` of prefix `index`,
    /// accumulated via the activated-type weights `W(p, s')`.
    fn child_weights(&self, index: usize, activated: &mut [f64], out: &mut [f64]) {
        activated.iter_mut().for_each(|w| *w = 0.0);
        for (j, &tau) in self.weights.iter().enumerate() {
            activated[(index / self.place[j]) % self.n] += tau;
        }
        out.iter_mut().for_each(|c| *c = 0.0);
        for (s, &w) in activated.iter().enumerate() {
            if w > 0.0 {
                for (c, &mst) in out.iter_mut().zip(self.m.row(s)) {
                    *c += w * mst;
                }
            }
        }
    }

    fn check_len(&self, len: usize) -> Result<(), LiftError> {
        if len != self.size {
            return Err(LiftError::LengthMismatch { expected: self.size, got: len });
        }
        Ok(())
    }

    /// `(m_ℓ f)(p) = Σ_{j<ℓ} τ(j) Σ_t m(p_j, t) f(t·p)`.
    pub fn apply(&self, f: &[f64]) -> Result<Vec<f64>, LiftError> {
        let mut out = vec![0.0; self.size];
        self.apply_into(f, &mut out)?;
        Ok(out)
    }

    pub fn apply_into(&self, f: &[f64], out: &mut [f64]) -> Result<(), LiftError> {
        self.check_len(f.len())?;
        self.check_len(out.len())?;
        out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
            let mut activated = vec![0.0; self.n];
            let mut weights = vec![0.0; self.n];
            for (k, o) in chunk.iter_mut().enumerate() {
                let i = c * CHUNK + k;
                self.child_weights(i, &mut activated, &mut weights);
                let base = i / self.n;
                *o = weights
                    .iter()
                    .enumerate()
                    .map(|(t, w)| w * f[t * self.high + base])
                    .sum();
            }
        });
        Ok(())
    }

    /// Adjoint action on measures: `(μ m_ℓ)(q) = Σ_p μ(p) m_ℓ(p, q)`.
    pub fn apply_transpose(&self, mu: &[f64]) -> Result<Vec<f64>, LiftError> {
        let mut out = vec![0.0; self.size];
        self.apply_transpose_into(mu, &mut out)?;
        Ok(out)
    }

    pub fn apply_transpose_into(&self, mu: &[f64], out: &mut [f64]) -> Result<(), LiftError> {
        self.check_len(mu.len())?;
        self.check_len(out.len())?;
        let n = self.n;
        // Targets t·high + b are fed by the n sources b·n + x; gather per b, then scatter.
        let mut gathered = vec![0.0; self.size];
        gathered.par_chunks_mut(CHUNK * n).enumerate().for_each(|(c, chunk)| {
            let mut activated = vec![0.0; n];
            let mut weights = vec![0.0; n];
            for (k, block) in chunk.chunks_mut(n).enumerate() {
                let b = c * CHUNK + k;
                block.iter_mut().for_each(|x| *x = 0.0);
                for x in 0..n {
                    let p = b * n + x;
                    if mu[p] == 0.0 {
                        continue;
                    }
                    self.child_weights(p, &mut activated, &mut weights);
                    for (acc, w) in block.iter_mut().zip(&weights) {
                        *acc += mu[p] * w;
                    }
                }
            }
        });
        for b in 0..self.high {
            for t in 0..n {
                out[t * self.high + b] = gathered[b * n + t];
            }
        }
        Ok(())
    }

    /// `m_ℓ^k f`.
    pub fn apply_power(&self, f: &[f64], k: usize) -> Result<Vec<f64>, LiftError> {
        self.check_len(f.len())?;
        let mut cur = f.to_vec();
        let mut next = vec![0.0; self.size];
        for _ in 0..k {
            self.apply_into(&cur, &mut next)?;
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.apply(&vec![1.0; self.size]).expect("length matches")
    }

    pub fn to_dense(&self) -> Result<Vec<Vec<f64>>, LiftError> {
        if self.size > MAX_DENSE_STATES {
            return Err(LiftError::TooLargeForDense(self.size));
        }
        let mut activated = vec![0.0; self.n];
        let mut weights = vec![0.0; self.n];
        Ok((0..self.size)
            .map(|i| {
                let mut row = vec![0.0; self.size];
                self.child_weights(i, &mut activated, &mut weights);
                for (t, &w) in weights.iter().enumerate() {
                    row[self.child_index(t, i)] += w;
                }
                row
            })
            .collect())
    }

    fn shift(&self) -> f64 {
        SHIFT_FRACTION * self.row_sums().into_iter().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct RadiusEstimate {
    pub radius: f64,
    pub bracket: Bracket,
    pub iterations: usize,
    /// Positive right vector (max entry 1) from the last iteration.
    pub vector: Vec<f64>,
}

/// Spectral radius with a Collatz–Wielandt bracket of relative width `< tol`.
///
/// Iterates on `m_ℓ + εI` so reducible or periodic lifts still converge.
pub fn radius(op: &LiftedOperator, tol: f64) -> Result<RadiusEstimate, LiftError> {
    radius_from(op, tol, None, DEFAULT_MAX_ITER)
}

pub fn radius_from(
    op: &LiftedOperator,
    tol: f64,
    init: Option<&[f64]>,
    max_iter: usize,
) -> Result<RadiusEstimate, LiftError> {
    if !(tol > 0.0) {
        return Err(LiftError::BadTolerance(tol));
    }
    let opts = PowerOptions { tol, max_iter, shift: op.shift() };
    let apply = |x: &[f64], out: &mut [f64]| op.apply_into(x, out).expect("sized by power_iterate");
    let res = power_iterate(op.size(), apply, init, opts)?;
    Ok(RadiusEstimate {
        radius: res.bracket.midpoint(),
        bracket: res.bracket,
        iterations: res.iterations,
        vector: res.vector,
    })
}

/// Probability vector over prefixes of a fixed length.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixDistribution {
    pub depth: usize,
    pub num_types: usize,
    pub probs: Vec<f64>,
}

impl PrefixDistribution {
    pub fn point_mass(op: &LiftedOperator, p: &Prefix) -> Self {
        let mut probs = vec![0.0; op.size()];
        probs[op.index_of(p)] = 1.0;
        Self { depth: op.depth(), num_types: op.num_types(), probs }
    }

    /// Image under `(s_0, …, s_k) ↦ (s_0, …, s_{k-1})`.
    pub fn project(&self) -> PrefixDistribution {
        assert!(self.depth >= 1);
        let n = self.num_types;
        let mut probs = vec![0.0; self.probs.len() / n];
        for (i, p) in self.probs.iter().enumerate() {
            probs[i / n] += p;
        }
        Self { depth: self.depth - 1, num_types: n, probs }
    }

    /// Law of `s_0`.
    pub fn head_marginal(&self) -> Vec<f64> {
        let mut d = self.clone();
        while d.depth > 1 {
            d = d.project();
        }
        d.probs
    }
}

/// `(r̂, ‖μ m_ℓ − r̂ μ‖₁)` with `r̂ = μ m_ℓ 𝟙` for a probability vector `μ`.
pub fn left_residual(op: &LiftedOperator, mu: &[f64]) -> Result<(f64, f64), LiftError> {
    let y = op.apply_transpose(mu)?;
    let r: f64 = y.iter().sum();
    let res = y.iter().zip(mu).map(|(a, b)| (a - r * b).abs()).sum();
    Ok((r, res))
}

/// Left eigen-law: probability `μ` with `‖μ m_ℓ − r μ‖₁ ≤ tol · r`.
pub fn eigen_law(op: &LiftedOperator, tol: f64) -> Result<PrefixDistribution, LiftError> {
    eigen_law_with(op, tol, DEFAULT_MAX_ITER)
}

pub fn eigen_law_with(
    op: &LiftedOperator,
    tol: f64,
    max_iter: usize,
) -> Result<PrefixDistribution, LiftError> {
    if !(tol > 0.0) {
        return Err(LiftError::BadTolerance(tol));
    }
    let shift = op.shift();
    let mut mu = vec![1.0 / op.size() as f64; op.size()];
    let mut y = vec![0.0; op.size()];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        op.apply_transpose_into(&mu, &mut y)?;
        let r: f64 = y.iter().sum();
        residual = y.iter().zip(&mu).map(|(a, b)| (a - r * b).abs()).sum();
        if residual <= tol * r {
            return Ok(PrefixDistribution { depth: op.depth(), num_types: op.num_types(), probs: mu });
        }
        let total = r + shift;
        for (yi, mi) in y.iter().zip(mu.iter_mut()) {
            *mi = (yi + shift * *mi) / total;
        }
    }
    Err(LiftError::LeftNotConverged { residual, iterations: max_iter })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthRadius {
    pub depth: usize,
    pub radius: f64,
    pub bracket: Bracket,
}

/// Enclosure of the memory growth rate from increasing truncation depths.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiusEnclosure {
    /// Certified lower bound (bracket lower end at the last depth).
    pub lower: f64,
    /// Certified upper bound: the last bracket when the truncation is exact,
    /// otherwise the Harnack bound.
    pub upper: f64,
    /// `min(Harnack upper, r_ℓ + a_ℓ · max row sum)`; not a certificate.
    pub heuristic_upper: f64,
    /// The last depth covers the support of τ, so `r_ℓ` is the exact radius.
    pub exact: bool,
    /// Stopped because `|r_ℓ − r_{ℓ-1}| < tol` (a heuristic for unbounded τ).
    pub converged: bool,
    pub trace: Vec<DepthRadius>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeOptions {
    pub tol: f64,
    pub max_depth: usize,
    pub max_states: usize,
}

impl Default for ConvergeOptions {
    fn default() -> Self {
        Self { tol: 1e-10, max_depth: 12, max_states: DEFAULT_MAX_STATES }
    }
}

pub fn converge_radius(
    m: &MeanMatrix,
    tau: &MemoryLaw,
    opts: &ConvergeOptions,
) -> Result<RadiusEnclosure, LiftError> {
    let pf = perron_frobenius(m, opts.tol.max(1e-14))?;
    let harnack = harnack_enclosure(&pf);
    let exact_depth = tau.exact_depth();
    let n = m.dim();
    let mut trace: Vec<DepthRadius> = Vec::new();
    let mut warm: Option<Vec<f64>> = None;
    let mut exact = false;
    let mut converged = false;

    for depth in 1..=opts.max_depth.max(1) {
        let op = LiftedOperator::new(m, tau, depth, depth, opts.max_states)?;
        let init = warm.as_ref().map(|v| (0..op.size()).map(|i| v[i / n]).collect::<Vec<_>>());
        let est = radius_from(&op, opts.tol, init.as_deref(), DEFAULT_MAX_ITER)?;
        let prev = trace.last().map(|d| d.radius);
        trace.push(DepthRadius { depth, radius: est.radius, bracket: est.bracket });
        warm = Some(est.vector);
        if exact_depth.is_some_and(|l| depth >= l) {
            exact = true;
            break;
        }
        if prev.is_some_and(|p| (est.radius - p).abs() < opts.tol) {
            converged = true;
            break;
        }
    }

    let last = trace.last().expect("at least one depth");
    let upper = if exact { last.bracket.upper } else { harnack.upper };
    let drop = tau.tail(last.depth) * m.max_row_sum();
    Ok(RadiusEnclosure {
        lower: last.bracket.lower,
        upper,
        heuristic_upper: harnack.upper.min(last.radius + drop),
        exact,
        converged,
        trace,
    })
}

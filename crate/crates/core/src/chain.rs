//! The biased (spine) chain on symbols `(Y, memory)` and its asymptotic coupling.
//!
//! One step activates `s_j` with `j ~ τ`, draws the child type `t ~ m̄(s_j, ·)`
//! and moves to the symbol `(s_j, t·memory)`.

use std::sync::Arc;

use rand::distr::Distribution;
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rayon::prelude::*;

use crate::model::{InitialMemory, MeanMatrix, MemoryLaw, Prefix};
use crate::spectral::{normalized, perron_frobenius, NormalizedMatrix, PFTriple, SpectralError, DEFAULT_TOL};
use crate::stream::replicate_rng;

/// Default cap on the common-prefix scan between two initial memories.
pub const DEFAULT_PREFIX_HORIZON: usize = 10_000;

/// Read access to an (infinite) memory sequence.
pub trait Memory {
    /// Type of the forebear `depth` generations back; depth 0 is the individual itself.
    fn type_at(&self, depth: usize) -> usize;

    fn prefix(&self, len: usize) -> Prefix {
        Prefix((0..len).map(|d| self.type_at(d)).collect())
    }
}

impl Memory for InitialMemory {
    fn type_at(&self, depth: usize) -> usize {
        InitialMemory::type_at(self, depth)
    }
}

/// Draws lookback depths `j ~ τ`.
#[derive(Debug, Clone)]
pub enum LookbackSampler {
    Zero,
    Alias(WeightedAliasIndex<f64>),
    /// Inverse CDF: `⌊ln U / ln(1-p)⌋`.
    Geometric { ln_q: f64 },
}

impl LookbackSampler {
    pub fn new(tau: &MemoryLaw) -> Self {
        if let Some(p) = tau.geometric_param() {
            return if p >= 1.0 { Self::Zero } else { Self::Geometric { ln_q: (1.0 - p).ln() } };
        }
        let probs = tau.finite_probs().expect("finite law");
        if probs.len() == 1 {
            return Self::Zero;
        }
        Self::Alias(WeightedAliasIndex::new(probs.to_vec()).expect("memory law with positive mass"))
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            Self::Zero => 0,
            Self::Alias(a) => a.sample(rng),
            Self::Geometric { ln_q } => {
                let u = 1.0 - rng.random::<f64>();
                (u.ln() / ln_q) as usize
            }
        }
    }
}

/// Symbol of the biased chain: the activated type `Y_k` and the memory `𝐗_k`.
///
/// The memory is the recorded history `X_k, X_{k-1}, …, X_1` followed by the
/// initial memory `𝐗_0`.
#[derive(Debug, Clone)]
pub struct ChainState {
    activated: usize,
    history: Vec<u32>,
    initial: Arc<InitialMemory>,
}

impl ChainState {
    /// Starts from `(s_0, 𝐬)`, i.e. with `Y_0` equal to the individual's own type.
    pub fn new(initial: InitialMemory) -> Self {
        let y0 = initial.type_at(0);
        Self::with_activated(y0, initial)
    }

    pub fn with_activated(y0: usize, initial: InitialMemory) -> Self {
        Self { activated: y0, history: Vec::new(), initial: Arc::new(initial) }
    }

    pub fn activated(&self) -> usize {
        self.activated
    }

    /// `X_k`, the first entry of the memory.
    pub fn current(&self) -> usize {
        self.type_at(0)
    }

    pub fn steps(&self) -> usize {
        self.history.len()
    }

    #[inline]
    fn push(&mut self, activated: usize, child: usize) {
        self.activated = activated;
        self.history.push(child as u32);
    }
}

impl Memory for ChainState {
    #[inline]
    fn type_at(&self, depth: usize) -> usize {
        let k = self.history.len();
        if depth < k {
            self.history[k - 1 - depth] as usize
        } else {
            self.initial.type_at(depth - k)
        }
    }
}

/// Outcome of one transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub lookback: usize,
    pub activated: usize,
    pub child: usize,
}

/// Running functionals along one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStats {
    pub steps: usize,
    /// `Σ_j (log h(Y_j) − log h(X_j))`.
    pub birkhoff_sum: f64,
    /// Counts of `Y_j`.
    pub activated_counts: Vec<u64>,
    /// Counts of `(Y_j, X_j)`, row-major over `(activated, child)`.
    pub pair_counts: Vec<u64>,
}

impl TrajectoryStats {
    fn new(n: usize) -> Self {
        Self {
            steps: 0,
            birkhoff_sum: 0.0,
            activated_counts: vec![0; n],
            pair_counts: vec![0; n * n],
        }
    }

    /// Many-to-one weight `Π h(Y_j) / h(X_j)`.
    pub fn weight(&self) -> f64 {
        self.birkhoff_sum.exp()
    }

    pub fn birkhoff_average(&self) -> f64 {
        self.birkhoff_sum / self.steps as f64
    }
}

/// Empirical laws of `Y` and `(Y, s_0)` along a trajectory next to their
/// predicted values `ρ(t)h(t)` and `ρ(t)m(t,u)h(u)/r`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalReport {
    pub activated: Vec<f64>,
    pub pair: Vec<f64>,
    pub predicted_activated: Vec<f64>,
    pub predicted_pair: Vec<f64>,
    pub birkhoff_gap: f64,
}

fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

impl MarginalReport {
    pub fn activated_deviation(&self) -> f64 {
        sup_dist(&self.activated, &self.predicted_activated)
    }

    pub fn pair_deviation(&self) -> f64 {
        sup_dist(&self.pair, &self.predicted_pair)
    }
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self { mean, std_error: (var / n as f64).sqrt(), samples: n }
    }

    /// `|mean − target|` in units of the standard error (0 when both vanish).
    pub fn z_score(&self, target: f64) -> f64 {
        let d = (self.mean - target).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.std_error
        }
    }
}

/// The biased chain of a model: Perron data of `m`, the normalized matrix `m̄`
/// and samplers for `τ` and the rows of `m̄`.
#[derive(Debug, Clone)]
pub struct BiasedChain {
    m: MeanMatrix,
    pf: PFTriple,
    mbar: NormalizedMatrix,
    tau: MemoryLaw,
    lookback: LookbackSampler,
    rows: Vec<WeightedAliasIndex<f64>>,
    log_h: Vec<f64>,
}

impl BiasedChain {
    pub fn new(m: &MeanMatrix, tau: &MemoryLaw) -> Result<Self, SpectralError> {
        let pf = perron_frobenius(m, DEFAULT_TOL)?;
        let mbar = normalized(m, &pf);
        let rows = (0..m.dim())
            .map(|s| WeightedAliasIndex::new(mbar.row(s).to_vec()).expect("stochastic row"))
            .collect();
        let log_h = pf.h.iter().map(|h| h.ln()).collect();
        Ok(Self {
            m: m.clone(),
            lookback: LookbackSampler::new(tau),
            tau: tau.clone(),
            mbar,
            pf,
            rows,
            log_h,
        })
    }

    pub fn perron(&self) -> &PFTriple {
        &self.pf
    }

    pub fn normalized(&self) -> &NormalizedMatrix {
        &self.mbar
    }

    pub fn memory_law(&self) -> &MemoryLaw {
        &self.tau
    }

    pub fn num_types(&self) -> usize {
        self.m.dim()
    }

    #[inline]
    pub fn sample_child<R: Rng + ?Sized>(&self, activated: usize, rng: &mut R) -> usize {
        self.rows[activated].sample(rng)
    }

    #[inline]
    pub fn sample_lookback<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.lookback.sample(rng)
    }

    /// One transition of `Q̄`.
    #[inline]
    pub fn step<R: Rng + ?Sized>(&self, state: &mut ChainState, rng: &mut R) -> Transition {
        let lookback = self.lookback.sample(rng);
        let activated = state.type_at(lookback);
        let child = self.rows[activated].sample(rng);
        state.push(activated, child);
        Transition { lookback, activated, child }
    }

    /// Exact law of `(Y_1, X_1)` from `memory`, row-major; unbounded τ is
    /// summed until the remaining tail is below `1e-16`.
    pub fn one_step_law<M: Memory>(&self, memory: &M) -> Vec<f64> {
        let n = self.num_types();
        let mut law = vec![0.0; n * n];
        let mut j = 0;
        while self.tau.tail(j) > 1e-16 {
            let w = self.tau.prob(j);
            let s = memory.type_at(j);
            for t in 0..n {
                law[s * n + t] += w * self.mbar.get(s, t);
            }
            j += 1;
        }
        law
    }

    /// Runs `k` steps, accumulating the Birkhoff sum and empirical laws.
    pub fn run<R: Rng + ?Sized>(&self, state: &mut ChainState, k: usize, rng: &mut R) -> TrajectoryStats {
        let n = self.num_types();
        let mut stats = TrajectoryStats::new(n);
        state.history.reserve(k);
        for _ in 0..k {
            let tr = self.step(state, rng);
            stats.steps += 1;
            stats.birkhoff_sum += self.log_h[tr.activated] - self.log_h[tr.child];
            stats.activated_counts[tr.activated] += 1;
            stats.pair_counts[tr.activated * n + tr.child] += 1;
        }
        stats
    }

    /// `(1/k) Σ_{j≤k} (log h(Y_j) − log h(X_j))` along one trajectory.
    pub fn birkhoff_gap<R: Rng + ?Sized>(&self, initial: &InitialMemory, k: usize, rng: &mut R) -> f64 {
        let mut state = ChainState::new(initial.clone());
        self.run(&mut state, k, rng).birkhoff_average()
    }

    pub fn predicted_activated(&self) -> Vec<f64> {
        self.pf.rho.iter().zip(&self.pf.h).map(|(r, h)| r * h).collect()
    }

    pub fn predicted_pair(&self) -> Vec<f64> {
        let n = self.num_types();
        let mut out = vec![0.0; n * n];
        for t in 0..n {
            for u in 0..n {
                out[t * n + u] = self.pf.rho[t] * self.m.get(t, u) * self.pf.h[u] / self.pf.r;
            }
        }
        out
    }

    pub fn empirical_marginals<R: Rng + ?Sized>(
        &self,
        initial: &InitialMemory,
        k: usize,
        rng: &mut R,
    ) -> MarginalReport {
        let mut state = ChainState::new(initial.clone());
        let stats = self.run(&mut state, k, rng);
        let total = stats.steps as f64;
        MarginalReport {
            activated: stats.activated_counts.iter().map(|&c| c as f64 / total).collect(),
            pair: stats.pair_counts.iter().map(|&c| c as f64 / total).collect(),
            predicted_activated: self.predicted_activated(),
            predicted_pair: self.predicted_pair(),
            birkhoff_gap: stats.birkhoff_average(),
        }
    }

    /// Monte Carlo side of `m^k f(𝐬) = r^k E_𝐬[f(𝐗_k) Π_{j≤k} h(Y_j)/h(X_j)]`
    /// over `samples` independent trajectories; replicate `i` uses stream `(seed, i)`.
    pub fn many_to_one<F>(
        &self,
        f: F,
        initial: &InitialMemory,
        k: usize,
        samples: usize,
        seed: u64,
    ) -> Estimate
    where
        F: Fn(&ChainState) -> f64 + Sync,
    {
        let scale = self.pf.r.powi(k as i32);
        let initial = Arc::new(initial.clone());
        let values: Vec<f64> = (0..samples as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = replicate_rng(seed, i);
                let mut state = ChainState {
                    activated: initial.type_at(0),
                    history: Vec::with_capacity(k),
                    initial: Arc::clone(&initial),
                };
                let mut log_w = 0.0;
                for _ in 0..k {
                    let tr = self.step(&mut state, &mut rng);
                    log_w += self.log_h[tr.activated] - self.log_h[tr.child];
                }
                scale * f(&state) * log_w.exp()
            })
            .collect();
        Estimate::from_samples(&values)
    }
}

/// Counters describing one coupled run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CouplingStats {
    pub steps: usize,
    pub failures: usize,
    pub last_failure: Option<usize>,
    /// First `k ≥ 0` with `X_k = X'_k`.
    pub gamma: Option<usize>,
    /// First step ending a run of `merge_run` consecutive successes.
    pub merged_at: Option<usize>,
    pub failures_after_merge: usize,
}

/// Two biased chains driven by the coupling kernel.
///
/// With `ℓ` the common-prefix length of the memories, one shared `j ~ τ` is
/// drawn; for `j < ℓ` both chains activate the same type and share the child
/// draw, otherwise each activates its own `s_j` and draws independently.
#[derive(Debug, Clone)]
pub struct CouplingState {
    pub first: ChainState,
    pub second: ChainState,
    /// Common-prefix length, exact below `horizon` and a lower bound at it.
    common: usize,
    horizon: usize,
    merge_run: Option<usize>,
    success_run: usize,
    pub stats: CouplingStats,
}

/// Outcome of one coupled step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoupledTransition {
    pub shared: bool,
    pub first: Transition,
    pub second: Transition,
}

impl CoupledTransition {
    pub fn successful(&self) -> bool {
        self.first.activated == self.second.activated && self.first.child == self.second.child
    }
}

impl CouplingState {
    /// `merge_run` is the number of consecutive successes after which the
    /// chains can no longer separate (the support length of a bounded τ).
    pub fn new(first: ChainState, second: ChainState, horizon: usize, merge_run: Option<usize>) -> Self {
        let common = (0..horizon)
            .find(|&d| first.type_at(d) != second.type_at(d))
            .unwrap_or(horizon);
        let gamma = (first.current() == second.current()).then_some(0);
        Self {
            first,
            second,
            common,
            horizon,
            merge_run,
            success_run: 0,
            stats: CouplingStats {
                steps: 0,
                failures: 0,
                last_failure: None,
                gamma,
                merged_at: None,
                failures_after_merge: 0,
            },
        }
    }

    pub fn common_prefix(&self) -> usize {
        self.common
    }

    pub fn advance<R: Rng + ?Sized>(&mut self, chain: &BiasedChain, rng: &mut R) -> CoupledTransition {
        let j = chain.sample_lookback(rng);
        let shared = j < self.common;
        let (first, second) = if shared {
            let s = self.first.type_at(j);
            let t = chain.sample_child(s, rng);
            let tr = Transition { lookback: j, activated: s, child: t };
            (tr, tr)
        } else {
            let s = self.first.type_at(j);
            let s2 = self.second.type_at(j);
            let t = chain.sample_child(s, rng);
            let t2 = chain.sample_child(s2, rng);
            (
                Transition { lookback: j, activated: s, child: t },
                Transition { lookback: j, activated: s2, child: t2 },
            )
        };
        self.first.push(first.activated, first.child);
        self.second.push(second.activated, second.child);
        // Memories t·𝐬 and t'·𝐬' agree on 1 + ℓ entries iff t = t'.
        self.common = if first.child == second.child { (self.common + 1).min(self.horizon) } else { 0 };

        let out = CoupledTransition { shared, first, second };
        let k = self.stats.steps + 1;
        self.stats.steps = k;
        if self.stats.gamma.is_none() && first.child == second.child {
            self.stats.gamma = Some(k);
        }
        if out.successful() {
            self.success_run += 1;
            if self.stats.merged_at.is_none() && self.merge_run.is_some_and(|r| self.success_run >= r) {
                self.stats.merged_at = Some(k);
            }
        } else {
            self.success_run = 0;
            self.stats.failures += 1;
            self.stats.last_failure = Some(k);
            if self.stats.merged_at.is_some() {
                self.stats.failures_after_merge += 1;
            }
        }
        out
    }
}

impl BiasedChain {
    /// Runs the coupling for `steps` steps from two initial symbols.
    pub fn coupled_run<R: Rng + ?Sized>(
        &self,
        first: ChainState,
        second: ChainState,
        steps: usize,
        rng: &mut R,
    ) -> CouplingStats {
        let mut c = CouplingState::new(first, second, DEFAULT_PREFIX_HORIZON, self.tau.exact_depth());
        for _ in 0..steps {
            c.advance(self, rng);
        }
        c.stats
    }

    /// Independent coupled runs; run `i` uses stream `(seed, i)`.
    pub fn coupled_batch(
        &self,
        first: &InitialMemory,
        second: &InitialMemory,
        runs: usize,
        steps: usize,
        seed: u64,
    ) -> Vec<CouplingStats> {
        (0..runs as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = replicate_rng(seed, i);
                self.coupled_run(
                    ChainState::new(first.clone()),
                    ChainState::new(second.clone()),
                    steps,
                    &mut rng,
                )
            })
            .collect()
    }
}

/// Lower bound on the probability that the coupling never fails once it
/// has entered the consolidation phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConsolidationBound {
    /// `Π_{k=1}^{kmax} (1 − a_k)`.
    pub product: f64,
    /// `exp(−Σ_{k>kmax} a_k / (1 − a_kmax))`, a lower bound on the remaining factors.
    pub tail_factor: f64,
}

impl ConsolidationBound {
    pub fn lower_bound(&self) -> f64 {
        self.product * self.tail_factor
    }
}

pub fn consolidation_bound(tau: &MemoryLaw, kmax: usize) -> ConsolidationBound {
    let product: f64 = (1..=kmax).map(|k| 1.0 - tau.tail(k)).product();
    let a_max = tau.tail(kmax.max(1));
    let tail_factor = if a_max < 1.0 {
        (-tau.tail_sum_from(kmax + 1) / (1.0 - a_max)).exp()
    } else {
        0.0
    };
    ConsolidationBound { product, tail_factor }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::FillRule;
    use crate::stream::replicate_rng;

    fn example_chain(tau: MemoryLaw) -> BiasedChain {
        let m = MeanMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 2.0]]).unwrap();
        BiasedChain::new(&m, &tau).unwrap()
    }

    #[test]
    fn one_type_chain_is_constant() {
        let m = MeanMatrix::from_rows(&[vec![2.0]]).unwrap();
        let chain = BiasedChain::new(&m, &MemoryLaw::geometric(0.3).unwrap()).unwrap();
        let mut rng = replicate_rng(1, 0);
        let mut s = ChainState::new(InitialMemory::constant(0));
        let stats = chain.run(&mut s, 1000, &mut rng);
        assert_eq!(stats.activated_counts, vec![1000]);
        assert_eq!(stats.birkhoff_sum, 0.0);
        assert_eq!(s.prefix(5).0, vec![0; 5]);
    }

    #[test]
    fn memory_lookup_crosses_into_initial_memory() {
        let chain = example_chain(MemoryLaw::two_point(0.5).unwrap());
        let init = InitialMemory::new(vec![1, 0], FillRule::Periodic(vec![1, 1, 0]));
        let mut s = ChainState::new(init.clone());
        let mut rng = replicate_rng(2, 0);
        let mut history = Vec::new();
        for _ in 0..3 {
            history.push(chain.step(&mut s, &mut rng).child);
        }
        let mut expect: Vec<usize> = history.iter().rev().copied().collect();
        expect.extend(init.materialize(6).0);
        assert_eq!(s.prefix(9).0, expect);
        assert_eq!(s.steps(), 3);
    }

    #[test]
    fn geometric_lookback_has_geometric_tail() {
        let sampler = LookbackSampler::new(&MemoryLaw::geometric(0.5).unwrap());
        let mut rng = replicate_rng(3, 0);
        let n = 200_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let j = sampler.sample(&mut rng);
            if j < 4 {
                counts[j] += 1;
            }
        }
        for (j, &c) in counts.iter().enumerate() {
            let p = 0.5f64.powi(j as i32 + 1);
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((c as f64 / n as f64 - p).abs() < 3.0 * sd, "j={j}");
        }
    }

    #[test]
    fn no_memory_transitions_follow_normalized_matrix() {
        let chain = example_chain(MemoryLaw::delta0());
        let mut rng = replicate_rng(4, 0);
        let mut s = ChainState::new(InitialMemory::constant(0));
        let n = 100_000;
        let mut counts = [[0u64; 2]; 2];
        let mut prev = s.current();
        for _ in 0..n {
            let tr = chain.step(&mut s, &mut rng);
            assert_eq!(tr.activated, prev);
            counts[prev][tr.child] += 1;
            prev = tr.child;
        }
        for (a, row) in counts.iter().enumerate() {
            let total = (row[0] + row[1]) as f64;
            for (b, &c) in row.iter().enumerate() {
                let p = chain.normalized().get(a, b);
                let sd = (p * (1.0 - p) / total).sqrt();
                assert!((c as f64 / total - p).abs() <= 3.0 * sd, "({a},{b})");
            }
        }
    }

    #[test]
    fn one_step_law_matches_enumeration() {
        let chain = example_chain(MemoryLaw::two_point(0.5).unwrap());
        let memory = InitialMemory::from_prefix(vec![0, 1]);
        let law = chain.one_step_law(&memory);
        // j = 0 activates a, j = 1 activates b, each with probability 1/2.
        let mb = chain.normalized();
        let expect = [0.5 * mb.get(0, 0), 0.5 * mb.get(0, 1), 0.5 * mb.get(1, 0), 0.5 * mb.get(1, 1)];
        for (a, b) in law.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let n = 100_000;
        let mut counts = [0u64; 4];
        for i in 0..n {
            let mut rng = replicate_rng(5, i);
            let mut s = ChainState::new(memory.clone());
            let tr = chain.step(&mut s, &mut rng);
            counts[tr.activated * 2 + tr.child] += 1;
        }
        for (c, p) in counts.iter().zip(&law) {
            let sd = (p * (1.0 - p) / n as f64).sqrt();
            assert!((*c as f64 / n as f64 - p).abs() <= 3.0 * sd);
        }
    }

    #[test]
    fn many_to_one_zero_steps_is_exact() {
        let chain = example_chain(MemoryLaw::two_point(0.5).unwrap());
        let init = InitialMemory::from_prefix(vec![1, 0]);
        let est = chain.many_to_one(|s| if s.current() == 1 { 3.0 } else { 0.0 }, &init, 0, 50, 9);
        assert_eq!((est.mean, est.std_error), (3.0, 0.0));
    }

    #[test]
    fn many_to_one_one_step_matches_direct_sum() {
        let chain = example_chain(MemoryLaw::two_point(0.5).unwrap());
        let init = InitialMemory::from_prefix(vec![0, 1]);
        // Σ_j τ(j) Σ_t m(s_j, t) = 0.5·2 + 0.5·3.
        let est = chain.many_to_one(|_| 1.0, &init, 1, 100_000, 10);
        assert!(est.z_score(2.5) <= 3.0, "{est:?}");
    }

    #[test]
    fn balanced_birkhoff_gap_vanishes() {
        let m = MeanMatrix::from_rows(&[vec![0.5, 1.5], vec![1.2, 0.8]]).unwrap();
        let chain = BiasedChain::new(&m, &MemoryLaw::geometric(0.4).unwrap()).unwrap();
        let mut rng = replicate_rng(6, 0);
        assert_eq!(chain.birkhoff_gap(&InitialMemory::constant(1), 10_000, &mut rng), 0.0);
    }

    #[test]
    fn one_type_marginals() {
        let m = MeanMatrix::from_rows(&[vec![1.3]]).unwrap();
        let chain = BiasedChain::new(&m, &MemoryLaw::two_point(0.5).unwrap()).unwrap();
        let mut rng = replicate_rng(7, 0);
        let rep = chain.empirical_marginals(&InitialMemory::constant(0), 100, &mut rng);
        assert_eq!(rep.activated, vec![1.0]);
        assert_eq!(rep.predicted_activated, vec![1.0]);
    }

    #[test]
    fn identical_symbols_with_bounded_memory_never_fail() {
        let chain = example_chain(MemoryLaw::two_point(0.3).unwrap());
        let init = InitialMemory::from_prefix(vec![1, 0, 1]);
        let mut rng = replicate_rng(8, 0);
        let stats = chain.coupled_run(ChainState::new(init.clone()), ChainState::new(init), 5000, &mut rng);
        assert_eq!(stats.failures, 0);
        assert_eq!(stats.gamma, Some(0));
    }

    #[test]
    fn no_memory_coupling_stays_merged_after_first_success() {
        let chain = example_chain(MemoryLaw::delta0());
        for i in 0..200 {
            let mut rng = replicate_rng(9, i);
            let mut c = CouplingState::new(
                ChainState::new(InitialMemory::constant(0)),
                ChainState::new(InitialMemory::constant(1)),
                DEFAULT_PREFIX_HORIZON,
                Some(1),
            );
            let mut merged = false;
            for _ in 0..200 {
                let tr = c.advance(&chain, &mut rng);
                if merged {
                    assert!(tr.successful() && tr.shared);
                }
                merged |= tr.successful();
            }
            assert!(merged);
            assert_eq!(c.stats.failures_after_merge, 0);
        }
    }

    #[test]
    fn common_prefix_tracks_memories() {
        let chain = example_chain(MemoryLaw::geometric(0.4).unwrap());
        let mut rng = replicate_rng(10, 0);
        let mut c = CouplingState::new(
            ChainState::new(InitialMemory::new(vec![0, 1, 1], FillRule::Constant(0))),
            ChainState::new(InitialMemory::new(vec![0, 1, 0], FillRule::Constant(1))),
            DEFAULT_PREFIX_HORIZON,
            None,
        );
        assert_eq!(c.common_prefix(), 2);
        for _ in 0..300 {
            c.advance(&chain, &mut rng);
            let exact = (0..2000).find(|&d| c.first.type_at(d) != c.second.type_at(d)).unwrap();
            assert_eq!(c.common_prefix(), exact);
        }
    }

    #[test]
    fn consolidation_examples() {
        let tau = MemoryLaw::finite(vec![0.5, 0.3, 0.2]).unwrap();
        let b = consolidation_bound(&tau, 10);
        assert!((b.product - 0.5 * 0.8).abs() < 1e-15);
        assert_eq!(b.tail_factor, 1.0);

        // Oracle: the product taken directly to 200 factors.
        let direct: f64 = (1..=200).map(|k| 1.0 - 0.5f64.powi(k)).product();
        let b = consolidation_bound(&MemoryLaw::geometric(0.5).unwrap(), 60);
        assert!((b.product - direct).abs() < 1e-15);
        assert!((direct - 0.288_788_095).abs() < 1e-9);
        assert!(b.lower_bound() <= direct && b.lower_bound() > direct - 1e-15);

        assert_eq!(consolidation_bound(&MemoryLaw::delta0(), 20).lower_bound(), 1.0);
        let stuck = MemoryLaw::finite(vec![0.0, 1.0]).unwrap();
        assert_eq!(consolidation_bound(&stuck, 5).lower_bound(), 0.0);
    }
}

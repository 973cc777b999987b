//! Branching process with memory, simulated on a shared-ancestry tree.
//!
//! Each individual stores its type and a link to its parent; its memory is
//! read by walking parent links and, past the founder, from the founder's
//! initial memory. Ancestors are released once no living descendant refers
//! to them.

use std::rc::Rc;

use rand::distr::Distribution;
use rand::Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::Poisson;
use rayon::prelude::*;
use thiserror::Error;

use crate::chain::{LookbackSampler, Memory};
use crate::lifted::{lift, LiftError, PrefixDistribution};
use crate::model::{FillRule, InitialMemory, ModelSpec, OffspringKernel};
use crate::stream::replicate_rng;

pub const DEFAULT_CAP: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PopulationError {
    #[error("exact means need a memory law with bounded support")]
    UnboundedMemory,
    #[error("initial law has depth {got}, expected {expected}")]
    DepthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Lift(#[from] LiftError),
}

#[derive(Debug)]
enum Origin {
    Parent(Rc<GenealogyNode>),
    Founder(Rc<InitialMemory>),
    Released,
}

/// One individual: its type, generation and a link to its parent.
#[derive(Debug)]
pub struct GenealogyNode {
    ty: u32,
    depth: u32,
    origin: Origin,
}

impl GenealogyNode {
    /// Founder whose own type is `memory.type_at(0)`.
    pub fn founder(memory: Rc<InitialMemory>) -> Rc<Self> {
        Rc::new(Self { ty: memory.type_at(0) as u32, depth: 0, origin: Origin::Founder(memory) })
    }

    pub fn child(parent: &Rc<Self>, ty: usize) -> Rc<Self> {
        Rc::new(Self { ty: ty as u32, depth: parent.depth + 1, origin: Origin::Parent(Rc::clone(parent)) })
    }

    pub fn ty(&self) -> usize {
        self.ty as usize
    }

    pub fn depth(&self) -> usize {
        self.depth as usize
    }

    pub fn parent(&self) -> Option<&Rc<GenealogyNode>> {
        match &self.origin {
            Origin::Parent(p) => Some(p),
            _ => None,
        }
    }

    fn take_parent(&mut self) -> Option<Rc<GenealogyNode>> {
        match std::mem::replace(&mut self.origin, Origin::Released) {
            Origin::Parent(p) => Some(p),
            other => {
                self.origin = other;
                None
            }
        }
    }
}

impl Memory for GenealogyNode {
    fn type_at(&self, depth: usize) -> usize {
        let mut node = self;
        let mut remaining = depth;
        while remaining > 0 {
            match &node.origin {
                Origin::Parent(p) => {
                    node = p;
                    remaining -= 1;
                }
                Origin::Founder(mem) => return mem.type_at(remaining),
                Origin::Released => unreachable!("live nodes keep their ancestry"),
            }
        }
        node.ty as usize
    }
}

impl Drop for GenealogyNode {
    // Unlink long ancestral lines iteratively instead of recursing.
    fn drop(&mut self) {
        let mut link = self.take_parent();
        while let Some(rc) = link {
            match Rc::try_unwrap(rc) {
                Ok(mut node) => link = node.take_parent(),
                Err(_) => break,
            }
        }
    }
}

/// Living individuals of generation `k`.
#[derive(Debug, Clone)]
pub struct Generation {
    pub k: usize,
    pub nodes: Vec<Rc<GenealogyNode>>,
}

impl Generation {
    pub fn founders(memories: &[InitialMemory]) -> Self {
        Self {
            k: 0,
            nodes: memories.iter().map(|m| GenealogyNode::founder(Rc::new(m.clone()))).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn histogram(&self, n: usize) -> Vec<usize> {
        let mut h = vec![0; n];
        for node in &self.nodes {
            h[node.ty()] += 1;
        }
        h
    }
}

#[derive(Debug, Clone)]
enum OffspringSampler {
    /// Independent Poisson counts; `None` where the mean is zero.
    Poisson(Vec<Vec<Option<Poisson<f64>>>>),
    Deterministic(Vec<Vec<u32>>),
    Finite(Vec<(WeightedAliasIndex<f64>, Vec<Vec<u32>>)>),
}

impl OffspringSampler {
    fn new(kernel: &OffspringKernel) -> Self {
        match kernel {
            OffspringKernel::Poisson(m) => Self::Poisson(
                (0..m.dim())
                    .map(|s| m.row(s).iter().map(|&l| (l > 0.0).then(|| Poisson::new(l).expect("positive mean"))).collect())
                    .collect(),
            ),
            OffspringKernel::Deterministic(rows) => Self::Deterministic(rows.clone()),
            OffspringKernel::Finite(rows) => Self::Finite(
                rows.iter()
                    .map(|atoms| {
                        let w = atoms.iter().map(|a| a.prob).collect();
                        let counts = atoms.iter().map(|a| a.counts.clone()).collect();
                        (WeightedAliasIndex::new(w).expect("valid kernel"), counts)
                    })
                    .collect(),
            ),
        }
    }

    #[inline]
    fn sample_into<R: Rng + ?Sized>(&self, s: usize, rng: &mut R, counts: &mut [u32]) {
        match self {
            Self::Poisson(rows) => {
                for (c, d) in counts.iter_mut().zip(&rows[s]) {
                    *c = d.as_ref().map_or(0, |d| d.sample(rng) as u32);
                }
            }
            Self::Deterministic(rows) => counts.copy_from_slice(&rows[s]),
            Self::Finite(rows) => {
                let (alias, atoms) = &rows[s];
                counts.copy_from_slice(&atoms[alias.sample(rng)]);
            }
        }
    }
}

/// Who starts each run.
#[derive(Debug, Clone)]
pub enum Founders {
    Fixed(Vec<InitialMemory>),
    /// One founder per run, its prefix drawn from `law` and completed by `fill`.
    Law { law: PrefixDistribution, fill: FillRule },
}

/// Per-run record.
#[derive(Debug, Clone, PartialEq)]
pub struct RunStats {
    /// `|Z_k|` for every completed generation.
    pub sizes: Vec<usize>,
    pub histograms: Vec<Vec<usize>>,
    /// First generation with no individuals.
    pub extinct_at: Option<usize>,
    /// Generation abandoned because it exceeded the cap; it is not recorded.
    pub capped_at: Option<usize>,
    pub seed: u64,
    pub stream: u64,
}

/// Sampling machinery for one validated model.
#[derive(Debug, Clone)]
pub struct PopulationModel {
    n: usize,
    lookback: LookbackSampler,
    offspring: OffspringSampler,
}

/// Children of one individual together with the type it activated.
#[derive(Debug)]
pub struct Offspring {
    pub activated: usize,
    pub children: Vec<Rc<GenealogyNode>>,
}

impl PopulationModel {
    pub fn new(spec: &ModelSpec) -> Self {
        Self {
            n: spec.num_types(),
            lookback: LookbackSampler::new(&spec.tau),
            offspring: OffspringSampler::new(&spec.kernel),
        }
    }

    pub fn num_types(&self) -> usize {
        self.n
    }

    /// Activates `s_T` with `T ~ τ`, draws an offspring vector from `π(s_T, ·)`
    /// and appends the children (with `node` as parent) to `out`.
    pub fn reproduce_into<R: Rng + ?Sized>(
        &self,
        node: &Rc<GenealogyNode>,
        rng: &mut R,
        counts: &mut [u32],
        out: &mut Vec<Rc<GenealogyNode>>,
    ) -> usize {
        let activated = node.type_at(self.lookback.sample(rng));
        self.offspring.sample_into(activated, rng, counts);
        for (t, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                out.push(GenealogyNode::child(node, t));
            }
        }
        activated
    }

    pub fn sample_offspring<R: Rng + ?Sized>(&self, node: &Rc<GenealogyNode>, rng: &mut R) -> Offspring {
        let mut counts = vec![0; self.n];
        let mut children = Vec::new();
        let activated = self.reproduce_into(node, rng, &mut counts, &mut children);
        Offspring { activated, children }
    }

    /// Runs generations until `k_max`, extinction, or a generation larger than `cap`.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        init: Generation,
        k_max: usize,
        cap: usize,
        rng: &mut R,
    ) -> RunStats {
        let mut stats = RunStats {
            sizes: vec![init.len()],
            histograms: vec![init.histogram(self.n)],
            extinct_at: init.is_empty().then_some(0),
            capped_at: None,
            seed: 0,
            stream: 0,
        };
        let mut current = init.nodes;
        let mut counts = vec![0; self.n];
        for k in 1..=k_max {
            if current.is_empty() {
                stats.sizes.push(0);
                stats.histograms.push(vec![0; self.n]);
                continue;
            }
            let mut next = Vec::with_capacity(current.len() * 2);
            for node in &current {
                self.reproduce_into(node, rng, &mut counts, &mut next);
                if next.len() > cap {
                    stats.capped_at = Some(k);
                    return stats;
                }
            }
            current = next;
            let gen = Generation { k, nodes: current };
            stats.sizes.push(gen.len());
            stats.histograms.push(gen.histogram(self.n));
            if gen.is_empty() && stats.extinct_at.is_none() {
                stats.extinct_at = Some(k);
            }
            current = gen.nodes;
        }
        stats
    }

    /// Independent runs; run `i` uses stream `(seed, i)`.
    pub fn simulate_many(
        &self,
        founders: &Founders,
        runs: usize,
        k_max: usize,
        cap: usize,
        seed: u64,
    ) -> Vec<RunStats> {
        let law_sampler = match founders {
            Founders::Law { law, .. } => {
                Some(WeightedAliasIndex::new(law.probs.clone()).expect("probability vector"))
            }
            Founders::Fixed(_) => None,
        };
        (0..runs as u64)
            .into_par_iter()
            .map(|i| {
                let mut rng = replicate_rng(seed, i);
                let init = match (founders, &law_sampler) {
                    (Founders::Fixed(ms), _) => Generation::founders(ms),
                    (Founders::Law { law, fill }, Some(alias)) => {
                        let idx = alias.sample(&mut rng);
                        let prefix = decode_prefix(idx, law.depth, law.num_types);
                        Generation::founders(&[InitialMemory::new(prefix, fill.clone())])
                    }
                    _ => unreachable!(),
                };
                let mut stats = self.simulate(init, k_max, cap, &mut rng);
                stats.seed = seed;
                stats.stream = i;
                stats
            })
            .collect()
    }
}

fn decode_prefix(mut index: usize, depth: usize, n: usize) -> Vec<usize> {
    let mut v = vec![0; depth];
    for slot in v.iter_mut().rev() {
        *slot = index % n;
        index /= n;
    }
    v
}

/// `μ m^k 𝟙` for `k = 0..=k_max`, with `μ` a law on prefixes of length
/// `max Supp(τ) + 1` (where the lifted operator is the exact memory operator).
pub fn exact_means(spec: &ModelSpec, mu: &PrefixDistribution, k_max: usize) -> Result<Vec<f64>, PopulationError> {
    let depth = spec.tau.exact_depth().ok_or(PopulationError::UnboundedMemory)?;
    if mu.depth != depth {
        return Err(PopulationError::DepthMismatch { expected: depth, got: mu.depth });
    }
    let op = lift(&spec.mean, &spec.tau, depth)?;
    let mut v = vec![1.0; op.size()];
    let mut next = vec![0.0; op.size()];
    let mut out = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        if k > 0 {
            op.apply_into(&v, &mut next)?;
            std::mem::swap(&mut v, &mut next);
        }
        out.push(mu.probs.iter().zip(&v).map(|(a, b)| a * b).sum());
    }
    Ok(out)
}

pub fn exact_mean(spec: &ModelSpec, mu: &PrefixDistribution, k: usize) -> Result<f64, PopulationError> {
    Ok(*exact_means(spec, mu, k)?.last().expect("k + 1 entries"))
}

/// Point mass on the first `max Supp(τ) + 1` entries of `memory`.
pub fn memory_law_of(spec: &ModelSpec, memory: &InitialMemory) -> Result<PrefixDistribution, PopulationError> {
    let depth = spec.tau.exact_depth().ok_or(PopulationError::UnboundedMemory)?;
    let op = lift(&spec.mean, &spec.tau, depth)?;
    Ok(PrefixDistribution::point_mass(&op, &memory.materialize(depth)))
}

/// Mean-based growth summary over a set of runs.
#[derive(Debug, Clone, PartialEq)]
pub struct GrowthEstimate {
    /// Mean `|Z_k|` over runs not truncated before `k`.
    pub mean_sizes: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub valid_runs: Vec<usize>,
    /// `(mean |Z_k|)^{1/k}` for `k ≥ 1`.
    pub rates: Vec<f64>,
    /// Least-squares slope of `log mean |Z_k|` against `k`, over generations with positive mean.
    pub log_slope: Option<f64>,
}

impl GrowthEstimate {
    pub fn from_runs(runs: &[RunStats], k_max: usize) -> Self {
        let mut mean_sizes = Vec::with_capacity(k_max + 1);
        let mut std_errors = Vec::with_capacity(k_max + 1);
        let mut valid_runs = Vec::with_capacity(k_max + 1);
        for k in 0..=k_max {
            let xs: Vec<f64> = runs.iter().filter_map(|r| r.sizes.get(k).map(|&s| s as f64)).collect();
            let n = xs.len();
            valid_runs.push(n);
            if n == 0 {
                mean_sizes.push(f64::NAN);
                std_errors.push(f64::NAN);
                continue;
            }
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
            mean_sizes.push(mean);
            std_errors.push((var / n as f64).sqrt());
        }
        let rates = (1..=k_max).map(|k| mean_sizes[k].powf(1.0 / k as f64)).collect();
        let points: Vec<(f64, f64)> = mean_sizes
            .iter()
            .enumerate()
            .filter(|(_, m)| **m > 0.0)
            .map(|(k, m)| (k as f64, m.ln()))
            .collect();
        let log_slope = (points.len() >= 2 && points.iter().any(|p| p.0 > 0.0)).then(|| {
            let n = points.len() as f64;
            let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
            let my = points.iter().map(|p| p.1).sum::<f64>() / n;
            let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
            sxy / sxx
        });
        Self { mean_sizes, std_errors, valid_runs, rates, log_slope }
    }
}

pub fn estimate_growth(
    spec: &ModelSpec,
    founders: &Founders,
    runs: usize,
    k_max: usize,
    cap: usize,
    seed: u64,
) -> GrowthEstimate {
    let model = PopulationModel::new(spec);
    GrowthEstimate::from_runs(&model.simulate_many(founders, runs, k_max, cap, seed), k_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lifted::{eigen_law, radius};
    use crate::model::{MeanMatrix, MemoryLaw, TypeSpace};

    fn one_type(kernel: OffspringKernel, tau: MemoryLaw) -> ModelSpec {
        let mean = crate::model::mean_from_kernel(&kernel).unwrap();
        ModelSpec {
            types: TypeSpace::new(["x"]).unwrap(),
            mean,
            kernel,
            tau,
            initial_memory: InitialMemory::constant(0),
        }
    }

    #[test]
    fn deterministic_doubling() {
        let spec = one_type(OffspringKernel::Deterministic(vec![vec![2]]), MemoryLaw::geometric(0.5).unwrap());
        let model = PopulationModel::new(&spec);
        let mut rng = replicate_rng(1, 0);
        let node = GenealogyNode::founder(Rc::new(InitialMemory::constant(0)));
        assert_eq!(model.sample_offspring(&node, &mut rng).children.len(), 2);
        let stats = model.simulate(Generation::founders(&[InitialMemory::constant(0)]), 12, DEFAULT_CAP, &mut rng);
        assert_eq!(stats.sizes, (0..=12).map(|k| 1usize << k).collect::<Vec<_>>());
        let g = GrowthEstimate::from_runs(&[stats], 12);
        assert!((g.log_slope.unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cap_truncates_run() {
        let spec = one_type(OffspringKernel::Deterministic(vec![vec![2]]), MemoryLaw::delta0());
        let model = PopulationModel::new(&spec);
        let mut rng = replicate_rng(1, 1);
        let stats = model.simulate(Generation::founders(&[InitialMemory::constant(0)]), 20, 1000, &mut rng);
        assert_eq!(stats.capped_at, Some(10));
        assert_eq!(stats.sizes.len(), 10);
    }

    #[test]
    fn subcritical_goes_extinct() {
        let spec = one_type(
            OffspringKernel::Poisson(MeanMatrix::from_rows(&[vec![0.5]]).unwrap()),
            MemoryLaw::delta0(),
        );
        let model = PopulationModel::new(&spec);
        let runs = model.simulate_many(&Founders::Fixed(vec![InitialMemory::constant(0)]), 100, 50, DEFAULT_CAP, 3);
        for r in &runs {
            assert!(r.extinct_at.is_some_and(|k| k <= 50));
            assert_eq!(*r.sizes.last().unwrap(), 0);
        }
        let g = GrowthEstimate::from_runs(&runs, 50);
        assert_eq!(g.mean_sizes[50], 0.0);
    }

    #[test]
    fn all_extinct_has_no_slope() {
        let runs = vec![RunStats {
            sizes: vec![1, 0, 0],
            histograms: vec![vec![1], vec![0], vec![0]],
            extinct_at: Some(1),
            capped_at: None,
            seed: 0,
            stream: 0,
        }];
        assert_eq!(GrowthEstimate::from_runs(&runs, 2).log_slope, None);
    }

    #[test]
    fn no_memory_poisson_offspring_means() {
        let spec = ModelSpec::poisson(
            TypeSpace::new(["a", "b"]).unwrap(),
            MeanMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 2.0]]).unwrap(),
            MemoryLaw::delta0(),
        );
        let model = PopulationModel::new(&spec);
        let mut rng = replicate_rng(4, 0);
        for s in 0..2 {
            let node = GenealogyNode::founder(Rc::new(InitialMemory::constant(s)));
            let n = 100_000;
            let mut totals = [0usize; 2];
            for _ in 0..n {
                for c in model.sample_offspring(&node, &mut rng).children {
                    totals[c.ty()] += 1;
                }
            }
            for t in 0..2 {
                let m = spec.mean.get(s, t);
                let sd = (m / n as f64).sqrt();
                assert!((totals[t] as f64 / n as f64 - m).abs() <= 3.0 * sd, "({s},{t})");
            }
        }
    }

    #[test]
    fn activated_type_mixes_over_ancestry() {
        let spec = ModelSpec::two_type_example(0.5);
        let model = PopulationModel::new(&spec);
        let founder = GenealogyNode::founder(Rc::new(InitialMemory::constant(1)));
        let node = GenealogyNode::child(&founder, 0); // memory (a, b, b, …)
        let mut rng = replicate_rng(5, 0);
        let n = 100_000;
        let (mut act_a, mut totals) = (0usize, [0usize; 2]);
        for _ in 0..n {
            let off = model.sample_offspring(&node, &mut rng);
            act_a += usize::from(off.activated == 0);
            for c in &off.children {
                totals[c.ty()] += 1;
            }
        }
        let sd = (0.25 / n as f64).sqrt();
        assert!((act_a as f64 / n as f64 - 0.5).abs() <= 3.0 * sd);
        // Mixture 0.5·m(a,·) + 0.5·m(b,·) = (1, 1.5); Poisson mixture variance adds the spread of the means.
        for (t, want) in [1.0, 1.5].into_iter().enumerate() {
            let var = want + 0.25 * (spec.mean.get(0, t) - spec.mean.get(1, t)).powi(2);
            let sd = (var / n as f64).sqrt();
            assert!((totals[t] as f64 / n as f64 - want).abs() <= 3.0 * sd);
        }
    }

    #[test]
    fn parent_walk_matches_explicit_concatenation() {
        let init = InitialMemory::new(vec![1, 0], FillRule::Periodic(vec![1, 1, 0]));
        let founder = GenealogyNode::founder(Rc::new(init.clone()));
        let mut rng = replicate_rng(6, 0);
        let mut node = founder;
        let mut explicit = init.materialize(40).0;
        for _ in 0..25 {
            let t = rng.random_range(0..2);
            node = GenealogyNode::child(&node, t);
            explicit.insert(0, t);
            explicit.truncate(40);
            assert_eq!(node.prefix(40).0, explicit);
        }
    }

    #[test]
    fn deep_lineage_drops_without_recursion() {
        let mut node = GenealogyNode::founder(Rc::new(InitialMemory::constant(0)));
        for _ in 0..1_000_000 {
            node = GenealogyNode::child(&node, 0);
        }
        assert_eq!(node.depth(), 1_000_000);
        drop(node);
    }

    #[test]
    fn dead_ancestors_are_released() {
        let founder = GenealogyNode::founder(Rc::new(InitialMemory::constant(0)));
        let weak = Rc::downgrade(&founder);
        let child = GenealogyNode::child(&founder, 0);
        drop(founder);
        assert!(weak.upgrade().is_some());
        drop(child);
        assert!(weak.upgrade().is_none());
    }

    #[test]
    fn siblings_reproduce_independently() {
        let spec = ModelSpec::two_type_example(0.5);
        let model = PopulationModel::new(&spec);
        let founder = GenealogyNode::founder(Rc::new(InitialMemory::constant(1)));
        let gen = [GenealogyNode::child(&founder, 0), GenealogyNode::child(&founder, 1)];
        let mut rng = replicate_rng(7, 0);
        let n = 100_000;
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let a = model.sample_offspring(&gen[0], &mut rng).children.len() as f64;
                let b = model.sample_offspring(&gen[1], &mut rng).children.len() as f64;
                (a, b)
            })
            .collect();
        let (ma, mb) = (
            pairs.iter().map(|p| p.0).sum::<f64>() / n as f64,
            pairs.iter().map(|p| p.1).sum::<f64>() / n as f64,
        );
        let cov = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / n as f64;
        let va = pairs.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / n as f64;
        let vb = pairs.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / n as f64;
        let corr = cov / (va * vb).sqrt();
        assert!(corr.abs() <= 3.0 / (n as f64).sqrt(), "corr = {corr}");
    }

    #[test]
    fn no_memory_simulation_is_galton_watson() {
        let m = MeanMatrix::from_rows(&[vec![0.6, 0.3], vec![0.9, 0.4]]).unwrap();
        let spec = ModelSpec::poisson(TypeSpace::new(["a", "b"]).unwrap(), m.clone(), MemoryLaw::delta0());
        let model = PopulationModel::new(&spec);
        let mut rng = replicate_rng(8, 0);
        // Parent type × child type totals from whole simulated generations.
        let mut parents = [0usize; 2];
        let mut children = [[0usize; 2]; 2];
        for _ in 0..2000 {
            let mut gen = Generation::founders(&[InitialMemory::constant(0), InitialMemory::constant(1)]);
            for _ in 0..5 {
                let mut next = Vec::new();
                for node in &gen.nodes {
                    parents[node.ty()] += 1;
                    for c in model.sample_offspring(node, &mut rng).children {
                        children[node.ty()][c.ty()] += 1;
                        next.push(c);
                    }
                }
                gen = Generation { k: gen.k + 1, nodes: next };
            }
        }
        for s in 0..2 {
            for t in 0..2 {
                let np = parents[s] as f64;
                let sd = (m.get(s, t) / np).sqrt();
                assert!((children[s][t] as f64 / np - m.get(s, t)).abs() <= 3.0 * sd, "({s},{t})");
            }
        }
    }

    #[test]
    fn exact_mean_examples() {
        let spec = ModelSpec::two_type_example(0.5);
        let mu = memory_law_of(&spec, &InitialMemory::constant(0)).unwrap();
        assert_eq!(exact_mean(&spec, &mu, 0).unwrap(), 1.0);

        let two = one_type(
            OffspringKernel::Poisson(MeanMatrix::from_rows(&[vec![2.0]]).unwrap()),
            MemoryLaw::finite(vec![0.5, 0.5]).unwrap(),
        );
        let mu = memory_law_of(&two, &InitialMemory::constant(0)).unwrap();
        assert_eq!(exact_mean(&two, &mu, 7).unwrap(), 128.0);

        let op = lift(&spec.mean, &spec.tau, 2).unwrap();
        let r = radius(&op, 1e-12).unwrap().radius;
        let rho = eigen_law(&op, 1e-12).unwrap();
        for (k, v) in exact_means(&spec, &rho, 10).unwrap().into_iter().enumerate() {
            assert!((v - r.powi(k as i32)).abs() <= 1e-6 * r.powi(k as i32));
        }

        let mut geo = spec.clone();
        geo.tau = MemoryLaw::geometric(0.5).unwrap();
        assert_eq!(exact_mean(&geo, &rho, 3), Err(PopulationError::UnboundedMemory));
    }

    #[test]
    fn founders_from_law_are_reproducible() {
        let spec = ModelSpec::two_type_example(0.5);
        let op = lift(&spec.mean, &spec.tau, 2).unwrap();
        let founders = Founders::Law { law: eigen_law(&op, 1e-10).unwrap(), fill: FillRule::Constant(0) };
        let model = PopulationModel::new(&spec);
        let a = model.simulate_many(&founders, 20, 6, DEFAULT_CAP, 42);
        let b = model.simulate_many(&founders, 20, 6, DEFAULT_CAP, 42);
        assert_eq!(a, b);
        assert_eq!(a[3].stream, 3);
    }

    fn assert_means_match(spec: &ModelSpec, founder: &InitialMemory, runs: usize, k_max: usize, seed: u64) {
        let exact = exact_means(spec, &memory_law_of(spec, founder).unwrap(), k_max).unwrap();
        let g = estimate_growth(spec, &Founders::Fixed(vec![founder.clone()]), runs, k_max, DEFAULT_CAP, seed);
        for k in 0..=k_max {
            assert_eq!(g.valid_runs[k], runs);
            let gap = (g.mean_sizes[k] - exact[k]).abs();
            assert!(gap <= 3.0 * g.std_errors[k] + 1e-9 * exact[k], "k={k}: {} vs {}", g.mean_sizes[k], exact[k]);
        }
    }

    #[test]
    fn example_mean_sizes_match_exact_means() {
        let spec = ModelSpec::two_type_example(0.5);
        assert_means_match(&spec, &InitialMemory::constant(0), 2000, 10, 9);
    }

    #[test]
    fn random_models_match_exact_means() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let mut done = 0;
        while done < 5 {
            let n = rng.random_range(2..=3);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
            let m = MeanMatrix::from_rows(&rows).unwrap();
            if !m.is_primitive() {
                continue;
            }
            let len = rng.random_range(1..=3);
            let mut w: Vec<f64> = (0..len).map(|_| rng.random_range(0.1..1.0)).collect();
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|x| *x /= total);
            let labels: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
            let spec = ModelSpec::poisson(TypeSpace::new(labels).unwrap(), m, MemoryLaw::finite(w).unwrap());
            let founder = InitialMemory::from_prefix((0..len).map(|_| rng.random_range(0..n)).collect());
            assert_means_match(&spec, &founder, 20_000, 10, 100 + done);
            done += 1;
        }
    }

    #[test]
    fn growth_from_eigen_law_approaches_radius() {
        let spec = ModelSpec::two_type_example(0.5);
        let op = lift(&spec.mean, &spec.tau, 2).unwrap();
        let founders = Founders::Law { law: eigen_law(&op, 1e-12).unwrap(), fill: FillRule::Constant(0) };
        let g = estimate_growth(&spec, &founders, 1000, 12, DEFAULT_CAP, 12);
        let rate = g.rates[11];
        assert!((2.60..=2.69).contains(&rate), "rate = {rate}");
    }

    #[test]
    fn balanced_growth_slope_is_log_row_sum() {
        let spec = ModelSpec::poisson(
            TypeSpace::new(["a", "b"]).unwrap(),
            MeanMatrix::from_rows(&[vec![1.0, 1.0], vec![0.5, 1.5]]).unwrap(),
            MemoryLaw::geometric(0.5).unwrap(),
        );
        let g = estimate_growth(&spec, &Founders::Fixed(vec![InitialMemory::constant(0)]), 2000, 10, DEFAULT_CAP, 13);
        let slope = g.log_slope.unwrap();
        assert!((slope - 2f64.ln()).abs() < 0.02, "slope = {slope}");
    }
}

//! Model inputs: the type space, mean reproduction matrix, offspring kernel,
//! memory law and the rule used to fill memory beyond recorded ancestry.

use std::collections::HashSet;
use std::fmt;

use thiserror::Error;

/// Absolute tolerance for probability vectors summing to one.
pub const PROB_SUM_TOL: f64 = 1e-12;
/// Relative tolerance when cross-checking a kernel's mean against the declared matrix.
pub const MEAN_MATCH_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("type space must contain at least one type")]
    EmptyTypeSpace,
    #[error("duplicate type label `{0}`")]
    DuplicateLabel(String),
    #[error("unknown type label `{0}`")]
    UnknownLabel(String),
    #[error("type index {index} out of range for {n} types")]
    TypeOutOfRange { index: usize, n: usize },
    #[error("matrix must be square with {expected} rows and columns")]
    BadShape { expected: usize },
    #[error("matrix entry ({row}, {col}) = {value} is negative or not finite")]
    BadEntry { row: usize, col: usize, value: f64 },
    #[error("invalid memory law: {0}")]
    BadMemoryLaw(String),
    #[error("invalid offspring kernel: {0}")]
    BadKernel(String),
    #[error("prefixes have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// Ordered list of distinct type names; the index order is canonical.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TypeSpace {
    labels: Vec<String>,
}

impl TypeSpace {
    pub fn new<I, S>(labels: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(ModelError::EmptyTypeSpace);
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(ModelError::DuplicateLabel(l.clone()));
            }
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn index_of(&self, label: &str) -> Result<usize, ModelError> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| ModelError::UnknownLabel(label.to_string()))
    }
}

/// Square nonnegative matrix of expected offspring counts, row-major.
///
/// Entry `(s, t)` is the mean number of type-`t` children of an individual
/// whose activated type is `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl MeanMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let n = rows.len();
        if n == 0 {
            return Err(ModelError::EmptyTypeSpace);
        }
        let mut entries = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(ModelError::BadShape { expected: n });
            }
            for (j, &v) in row.iter().enumerate() {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(ModelError::BadEntry { row: i, col: j, value: v });
                }
                entries.push(v);
            }
        }
        Ok(Self { n, entries })
    }

    /// Builds from a flat row-major slice.
    pub fn from_flat(n: usize, entries: Vec<f64>) -> Result<Self, ModelError> {
        if n == 0 {
            return Err(ModelError::EmptyTypeSpace);
        }
        if entries.len() != n * n {
            return Err(ModelError::BadShape { expected: n });
        }
        if let Some((k, &v)) = entries
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(ModelError::BadEntry { row: k / n, col: k % n, value: v });
        }
        Ok(Self { n, entries })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, s: usize, t: usize) -> f64 {
        self.entries[s * self.n + t]
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.entries[s * self.n..(s + 1) * self.n]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|s| self.row(s).to_vec()).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|s| self.row(s).iter().sum()).collect()
    }

    pub fn max_row_sum(&self) -> f64 {
        self.row_sums().into_iter().fold(0.0, f64::max)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            n: self.n,
            entries: self.entries.iter().map(|v| v * c).collect(),
        }
    }

    /// Irreducible and aperiodic, decided on the support pattern.
    pub fn is_primitive(&self) -> bool {
        is_primitive_pattern(&self.support_pattern(), self.n)
    }

    pub fn support_pattern(&self) -> Vec<bool> {
        self.entries.iter().map(|&v| v > 0.0).collect()
    }
}

fn bool_matmul(a: &[bool], b: &[bool], n: usize) -> Vec<bool> {
    let mut out = vec![false; n * n];
    for i in 0..n {
        for k in 0..n {
            if a[i * n + k] {
                for j in 0..n {
                    out[i * n + j] |= b[k * n + j];
                }
            }
        }
    }
    out
}

/// A nonnegative `n × n` pattern is primitive iff its power
/// `(n-1)^2 + 1` (Wielandt's exponent) is entrywise positive.
pub fn is_primitive_pattern(pattern: &[bool], n: usize) -> bool {
    assert_eq!(pattern.len(), n * n);
    let mut exp = (n - 1) * (n - 1) + 1;
    let mut base = pattern.to_vec();
    let mut acc: Option<Vec<bool>> = None;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = Some(match acc {
                None => base.clone(),
                Some(a) => bool_matmul(&a, &base, n),
            });
        }
        exp >>= 1;
        if exp > 0 {
            base = bool_matmul(&base, &base, n);
        }
    }
    acc.map(|a| a.iter().all(|&x| x)).unwrap_or(false)
}

/// One atom of a finite offspring law: a vector of child counts per type.
#[derive(Debug, Clone, PartialEq)]
pub struct OffspringAtom {
    pub counts: Vec<u32>,
    pub prob: f64,
}

/// Reproduction law `π(s, ·)` for each type `s`.
#[derive(Debug, Clone, PartialEq)]
pub enum OffspringKernel {
    /// Independent Poisson child counts with the given means.
    Poisson(MeanMatrix),
    /// Each type begets exactly the listed counts.
    Deterministic(Vec<Vec<u32>>),
    /// Explicit finite support per type.
    Finite(Vec<Vec<OffspringAtom>>),
}

impl OffspringKernel {
    pub fn num_types(&self) -> usize {
        match self {
            Self::Poisson(m) => m.dim(),
            Self::Deterministic(rows) => rows.len(),
            Self::Finite(rows) => rows.len(),
        }
    }

    /// Structural and probabilistic checks; returns every problem found.
    pub fn check(&self) -> Vec<String> {
        let n = self.num_types();
        let mut problems = Vec::new();
        match self {
            Self::Poisson(_) => {}
            Self::Deterministic(rows) => {
                for (s, row) in rows.iter().enumerate() {
                    if row.len() != n {
                        problems.push(format!("deterministic row {s} has length {}", row.len()));
                    }
                }
            }
            Self::Finite(rows) => {
                for (s, atoms) in rows.iter().enumerate() {
                    if atoms.is_empty() {
                        problems.push(format!("type {s} has an empty offspring support"));
                        continue;
                    }
                    let mut total = 0.0;
                    for a in atoms {
                        if a.counts.len() != n {
                            problems.push(format!(
                                "type {s} has an offspring vector of length {}",
                                a.counts.len()
                            ));
                        }
                        if !(a.prob.is_finite() && a.prob >= 0.0) {
                            problems.push(format!("type {s} has probability {}", a.prob));
                        }
                        total += a.prob;
                    }
                    if (total - 1.0).abs() > PROB_SUM_TOL {
                        problems.push(format!("offspring probabilities of type {s} sum to {total}"));
                    }
                }
            }
        }
        problems
    }
}

/// Mean matrix induced by an offspring kernel.
pub fn mean_from_kernel(kernel: &OffspringKernel) -> Result<MeanMatrix, ModelError> {
    let problems = kernel.check();
    if !problems.is_empty() {
        return Err(ModelError::BadKernel(problems.join("; ")));
    }
    let n = kernel.num_types();
    match kernel {
        OffspringKernel::Poisson(m) => Ok(m.clone()),
        OffspringKernel::Deterministic(rows) => {
            let flat = rows.iter().flatten().map(|&c| f64::from(c)).collect();
            MeanMatrix::from_flat(n, flat)
        }
        OffspringKernel::Finite(rows) => {
            let mut flat = vec![0.0; n * n];
            for (s, atoms) in rows.iter().enumerate() {
                for a in atoms {
                    for (t, &c) in a.counts.iter().enumerate() {
                        flat[s * n + t] += a.prob * f64::from(c);
                    }
                }
            }
            MeanMatrix::from_flat(n, flat)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum LawKind {
    /// Probabilities `τ(0..J)` with suffix sums cached (`tails[k] = Σ_{j≥k} τ(j)`).
    Finite { probs: Vec<f64>, tails: Vec<f64> },
    /// `τ(j) = p (1-p)^j`.
    Geometric { p: f64 },
}

/// Law of the lookback depth `T` that selects which ancestor's type is activated.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLaw {
    kind: LawKind,
}

impl MemoryLaw {
    /// Finite law from `τ(0), …, τ(J)`. Normalization and `τ(0) > 0` are left to [`validate`].
    pub fn finite(probs: Vec<f64>) -> Result<Self, ModelError> {
        if probs.is_empty() {
            return Err(ModelError::BadMemoryLaw("empty probability list".into()));
        }
        if let Some(v) = probs.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(ModelError::BadMemoryLaw(format!("probability {v} is invalid")));
        }
        let mut tails = vec![0.0; probs.len() + 1];
        for j in (0..probs.len()).rev() {
            tails[j] = tails[j + 1] + probs[j];
        }
        Ok(Self { kind: LawKind::Finite { probs, tails } })
    }

    pub fn geometric(p: f64) -> Result<Self, ModelError> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(ModelError::BadMemoryLaw(format!("geometric parameter {p} not in (0, 1]")));
        }
        Ok(Self { kind: LawKind::Geometric { p } })
    }

    /// No memory: `T ≡ 0`.
    pub fn delta0() -> Self {
        Self::finite(vec![1.0]).expect("valid")
    }

    /// `τ = (u, 1-u)`.
    pub fn two_point(u: f64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&u) {
            return Err(ModelError::BadMemoryLaw(format!("u = {u} not in [0, 1]")));
        }
        Self::finite(vec![u, 1.0 - u])
    }

    pub fn geometric_param(&self) -> Option<f64> {
        match self.kind {
            LawKind::Geometric { p } => Some(p),
            LawKind::Finite { .. } => None,
        }
    }

    pub fn finite_probs(&self) -> Option<&[f64]> {
        match &self.kind {
            LawKind::Finite { probs, .. } => Some(probs),
            LawKind::Geometric { .. } => None,
        }
    }

    pub fn prob(&self, j: usize) -> f64 {
        match &self.kind {
            LawKind::Finite { probs, .. } => probs.get(j).copied().unwrap_or(0.0),
            LawKind::Geometric { p } => p * (1.0 - p).powi(j as i32),
        }
    }

    /// `a_k = P(T ≥ k)`; `a_0 = 1`.
    pub fn tail(&self, k: usize) -> f64 {
        if k == 0 {
            return 1.0;
        }
        match &self.kind {
            LawKind::Finite { tails, .. } => tails.get(k).copied().unwrap_or(0.0),
            LawKind::Geometric { p } => (1.0 - p).powi(k as i32),
        }
    }

    /// `Σ_{i ≥ k} a_i`.
    pub fn tail_sum_from(&self, k: usize) -> f64 {
        match &self.kind {
            LawKind::Finite { tails, .. } => {
                (k..tails.len()).map(|i| if i == 0 { 1.0 } else { tails[i] }).sum()
            }
            LawKind::Geometric { p } => {
                let q = 1.0 - p;
                if k == 0 {
                    1.0 + q / p
                } else {
                    q.powi(k as i32) / p
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match &self.kind {
            LawKind::Finite { probs, .. } => {
                probs.iter().enumerate().map(|(j, p)| j as f64 * p).sum()
            }
            LawKind::Geometric { p } => (1.0 - p) / p,
        }
    }

    pub fn total_mass(&self) -> f64 {
        match &self.kind {
            LawKind::Finite { tails, .. } => tails[0],
            LawKind::Geometric { .. } => 1.0,
        }
    }

    /// Largest `j` with `τ(j) > 0`, or `None` when the support is unbounded.
    pub fn max_support(&self) -> Option<usize> {
        match &self.kind {
            LawKind::Finite { probs, .. } => Some(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)),
            LawKind::Geometric { p } => {
                if *p >= 1.0 {
                    Some(0)
                } else {
                    None
                }
            }
        }
    }

    /// Prefix length on which the memory operator acts exactly, when τ is bounded.
    pub fn exact_depth(&self) -> Option<usize> {
        self.max_support().map(|l| l + 1)
    }
}

/// Fills memory entries beyond the recorded part of an initial memory.
#[derive(Debug, Clone, PartialEq)]
pub enum FillRule {
    Constant(usize),
    /// Cycles through the word starting at its first letter.
    Periodic(Vec<usize>),
    /// Independent draws from `law`, derived deterministically from `(seed, position)`.
    Iid { law: Vec<f64>, seed: u64 },
}

/// An infinite memory `(s_0, s_1, …)` given by an explicit prefix and a fill rule.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialMemory {
    prefix: Vec<usize>,
    fill: FillRule,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl InitialMemory {
    pub fn new(prefix: Vec<usize>, fill: FillRule) -> Self {
        Self { prefix, fill }
    }

    pub fn constant(t: usize) -> Self {
        Self::new(Vec::new(), FillRule::Constant(t))
    }

    /// The prefix followed by repetitions of its last entry.
    pub fn from_prefix(prefix: Vec<usize>) -> Self {
        let last = *prefix.last().expect("non-empty prefix");
        Self::new(prefix, FillRule::Constant(last))
    }

    pub fn prefix(&self) -> &[usize] {
        &self.prefix
    }

    pub fn fill(&self) -> &FillRule {
        &self.fill
    }

    pub fn type_at(&self, depth: usize) -> usize {
        if let Some(&t) = self.prefix.get(depth) {
            return t;
        }
        let i = depth - self.prefix.len();
        match &self.fill {
            FillRule::Constant(t) => *t,
            FillRule::Periodic(word) => word[i % word.len()],
            FillRule::Iid { law, seed } => {
                let bits = splitmix64(seed ^ splitmix64(i as u64));
                let u = (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                let mut acc = 0.0;
                for (t, &p) in law.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return t;
                    }
                }
                law.iter().rposition(|&p| p > 0.0).unwrap_or(0)
            }
        }
    }

    pub fn materialize(&self, len: usize) -> Prefix {
        Prefix((0..len).map(|d| self.type_at(d)).collect())
    }

    fn check(&self, n: usize) -> Vec<String> {
        let mut problems = Vec::new();
        let bad = |t: usize| t >= n;
        if self.prefix.iter().any(|&t| bad(t)) {
            problems.push("initial memory prefix has an out-of-range type".to_string());
        }
        match &self.fill {
            FillRule::Constant(t) if bad(*t) => problems.push("constant fill type out of range".into()),
            FillRule::Periodic(w) if w.is_empty() || w.iter().any(|&t| bad(t)) => {
                problems.push("periodic fill word is empty or has an out-of-range type".into())
            }
            FillRule::Iid { law, .. } => {
                if law.len() != n || law.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                    problems.push("i.i.d. fill law has the wrong length or invalid entries".into());
                } else if (law.iter().sum::<f64>() - 1.0).abs() > PROB_SUM_TOL {
                    problems.push("i.i.d. fill law does not sum to 1".into());
                }
            }
            _ => {}
        }
        problems
    }
}

/// Finite memory sequence `(s_0, …, s_{k-1})`; `s_0` is the individual's own type.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Prefix(pub Vec<usize>);

impl Prefix {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Length of the longest common prefix with `other`.
    pub fn common_prefix_len(&self, other: &Prefix) -> usize {
        self.0
            .iter()
            .zip(&other.0)
            .take_while(|(a, b)| a == b)
            .count()
    }

    /// `t·p`, keeping the length (the oldest entry is dropped).
    pub fn child(&self, t: usize) -> Prefix {
        let mut v = Vec::with_capacity(self.len());
        v.push(t);
        v.extend_from_slice(&self.0[..self.len().saturating_sub(1)]);
        Prefix(v)
    }
}

/// Pseudo-distance `a_L` with `L` the common prefix length; identical prefixes are at distance 0.
pub fn memory_distance(p: &Prefix, q: &Prefix, tau: &MemoryLaw) -> Result<f64, ModelError> {
    if p.len() != q.len() {
        return Err(ModelError::LengthMismatch(p.len(), q.len()));
    }
    if p == q {
        return Ok(0.0);
    }
    Ok(tau.tail(p.common_prefix_len(q)))
}

/// Everything needed to describe one population model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub types: TypeSpace,
    pub mean: MeanMatrix,
    pub kernel: OffspringKernel,
    pub tau: MemoryLaw,
    pub initial_memory: InitialMemory,
}

impl ModelSpec {
    /// Poisson offspring with the given means, memory filled with the first type.
    pub fn poisson(types: TypeSpace, mean: MeanMatrix, tau: MemoryLaw) -> Self {
        Self {
            types,
            kernel: OffspringKernel::Poisson(mean.clone()),
            mean,
            tau,
            initial_memory: InitialMemory::constant(0),
        }
    }

    /// Two types with means `[[1,1],[1,2]]` and `τ = (u, 1-u)`.
    pub fn two_type_example(u: f64) -> Self {
        let types = TypeSpace::new(["a", "b"]).expect("valid");
        let mean = MeanMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 2.0]]).expect("valid");
        Self::poisson(types, mean, MemoryLaw::two_point(u).expect("u in [0,1]"))
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    ShapeMismatch(String),
    NotPrimitive,
    MemoryLawNotNormalized(f64),
    NoMassAtZero,
    Kernel(String),
    KernelMeanMismatch { row: usize, col: usize, kernel: f64, declared: f64 },
    InitialMemory(String),
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Self::NotPrimitive => write!(f, "mean matrix is not primitive (reducible or periodic)"),
            Self::MemoryLawNotNormalized(s) => write!(f, "memory law sums to {s}, not 1"),
            Self::NoMassAtZero => write!(f, "memory law puts no mass at 0"),
            Self::Kernel(msg) => write!(f, "offspring kernel: {msg}"),
            Self::KernelMeanMismatch { row, col, kernel, declared } => write!(
                f,
                "kernel mean ({row}, {col}) = {kernel} differs from declared {declared}"
            ),
            Self::InitialMemory(msg) => write!(f, "initial memory: {msg}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return write!(f, "ok");
        }
        let parts: Vec<String> = self.issues.iter().map(ToString::to_string).collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Checks the standing assumptions: primitive mean matrix, normalized `τ` with
/// `τ(0) > 0`, a well-formed kernel whose mean matches the matrix.
pub fn validate(spec: &ModelSpec) -> ValidationReport {
    let mut issues = Vec::new();
    let n = spec.types.len();
    if spec.mean.dim() != n {
        issues.push(ValidationIssue::ShapeMismatch(format!(
            "{} types but a {}x{} mean matrix",
            n,
            spec.mean.dim(),
            spec.mean.dim()
        )));
    } else if !spec.mean.is_primitive() {
        issues.push(ValidationIssue::NotPrimitive);
    }

    let mass = spec.tau.total_mass();
    if (mass - 1.0).abs() > PROB_SUM_TOL {
        issues.push(ValidationIssue::MemoryLawNotNormalized(mass));
    }
    if spec.tau.prob(0) <= 0.0 {
        issues.push(ValidationIssue::NoMassAtZero);
    }

    if spec.kernel.num_types() != n {
        issues.push(ValidationIssue::ShapeMismatch(format!(
            "{} types but a kernel over {} types",
            n,
            spec.kernel.num_types()
        )));
    } else {
        match mean_from_kernel(&spec.kernel) {
            Err(e) => issues.push(ValidationIssue::Kernel(e.to_string())),
            Ok(km) if spec.mean.dim() == n => {
                for s in 0..n {
                    for t in 0..n {
                        let (k, d) = (km.get(s, t), spec.mean.get(s, t));
                        if (k - d).abs() > MEAN_MATCH_TOL * d.abs().max(1.0) {
                            issues.push(ValidationIssue::KernelMeanMismatch {
                                row: s,
                                col: t,
                                kernel: k,
                                declared: d,
                            });
                        }
                    }
                }
            }
            Ok(_) => {}
        }
    }

    for msg in spec.initial_memory.check(n) {
        issues.push(ValidationIssue::InitialMemory(msg));
    }
    ValidationReport { issues }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> MeanMatrix {
        MeanMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn deterministic_kernel_mean() {
        let k = OffspringKernel::Deterministic(vec![vec![1, 1], vec![0, 2]]);
        let m = mean_from_kernel(&k).unwrap();
        assert_eq!(m.row(0), &[1.0, 1.0]);
        assert_eq!(m.row(1), &[0.0, 2.0]);
    }

    #[test]
    fn poisson_kernel_mean_is_parameter() {
        let m = mat(&[&[1.0, 1.0], &[1.0, 2.0]]);
        assert_eq!(mean_from_kernel(&OffspringKernel::Poisson(m.clone())).unwrap(), m);
    }

    #[test]
    fn finite_kernel_mean_is_weighted_sum() {
        let atoms = vec![
            OffspringAtom { counts: vec![0, 0], prob: 0.5 },
            OffspringAtom { counts: vec![2, 2], prob: 0.5 },
        ];
        let k = OffspringKernel::Finite(vec![atoms.clone(), atoms]);
        let m = mean_from_kernel(&k).unwrap();
        assert_eq!(m.row(0), &[1.0, 1.0]);
    }

    #[test]
    fn finite_kernel_rejects_bad_probabilities() {
        let k = OffspringKernel::Finite(vec![vec![OffspringAtom { counts: vec![1], prob: 0.7 }]]);
        assert!(matches!(mean_from_kernel(&k), Err(ModelError::BadKernel(_))));
        let k = OffspringKernel::Finite(vec![vec![
            OffspringAtom { counts: vec![1], prob: -0.5 },
            OffspringAtom { counts: vec![2], prob: 1.5 },
        ]]);
        assert!(mean_from_kernel(&k).is_err());
    }

    #[test]
    fn validate_accepts_two_type_example() {
        for u in [0.1, 0.5, 0.9] {
            assert!(validate(&ModelSpec::two_type_example(u)).is_ok());
        }
    }

    #[test]
    fn validate_rejects_periodic_matrix() {
        let mut spec = ModelSpec::two_type_example(0.5);
        spec.mean = mat(&[&[0.0, 1.0], &[1.0, 0.0]]);
        spec.kernel = OffspringKernel::Poisson(spec.mean.clone());
        let report = validate(&spec);
        assert_eq!(report.issues, vec![ValidationIssue::NotPrimitive]);
    }

    #[test]
    fn validate_rejects_no_mass_at_zero() {
        let mut spec = ModelSpec::two_type_example(0.5);
        spec.tau = MemoryLaw::finite(vec![0.0, 1.0]).unwrap();
        assert_eq!(validate(&spec).issues, vec![ValidationIssue::NoMassAtZero]);
    }

    #[test]
    fn validate_reports_every_failure() {
        let mut spec = ModelSpec::two_type_example(0.5);
        spec.tau = MemoryLaw::finite(vec![0.0, 0.7]).unwrap();
        spec.kernel = OffspringKernel::Poisson(mat(&[&[1.0, 1.0], &[1.0, 3.0]]));
        spec.initial_memory = InitialMemory::constant(5);
        let report = validate(&spec);
        assert_eq!(report.issues.len(), 4, "{report}");
    }

    #[test]
    fn tail_examples() {
        let tau = MemoryLaw::finite(vec![0.5, 0.5]).unwrap();
        assert_eq!(tau.tail(1), 0.5);
        assert_eq!(tau.tail(0), 1.0);
        assert_eq!(tau.tail(7), 0.0);
        let g = MemoryLaw::geometric(0.5).unwrap();
        assert_eq!(g.tail(3), 0.125);
        assert_eq!(g.tail(0), 1.0);
    }

    #[test]
    fn distance_examples() {
        let g = MemoryLaw::geometric(0.5).unwrap();
        let p = Prefix(vec![0, 1, 0, 1]);
        assert_eq!(memory_distance(&p, &p, &g).unwrap(), 0.0);
        assert_eq!(memory_distance(&p, &Prefix(vec![1, 1, 0, 1]), &g).unwrap(), 1.0);
        assert_eq!(memory_distance(&p, &Prefix(vec![0, 1, 1, 1]), &g).unwrap(), 0.25);
        assert!(memory_distance(&p, &Prefix(vec![0]), &g).is_err());
    }

    #[test]
    fn distance_vanishes_beyond_bounded_support() {
        let tau = MemoryLaw::finite(vec![0.5, 0.5]).unwrap();
        let d = memory_distance(&Prefix(vec![0, 1, 0]), &Prefix(vec![0, 1, 1]), &tau).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn initial_memory_rules() {
        let m = InitialMemory::new(vec![1, 0], FillRule::Periodic(vec![2, 1]));
        assert_eq!(m.materialize(6).0, vec![1, 0, 2, 1, 2, 1]);
        let iid = InitialMemory::new(vec![], FillRule::Iid { law: vec![0.5, 0.5], seed: 3 });
        let a = iid.materialize(200);
        assert_eq!(a, iid.materialize(200));
        let ones = a.0.iter().filter(|&&t| t == 1).count();
        assert!(ones > 60 && ones < 140);
    }

    /// Brute-force primitivity: strongly connected and period 1.
    fn primitive_oracle(pattern: &[bool], n: usize) -> bool {
        let reach = |from: usize| {
            let mut seen = vec![false; n];
            let mut stack = vec![from];
            seen[from] = true;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    if pattern[i * n + j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen
        };
        if !(0..n).all(|i| reach(i).iter().all(|&x| x)) {
            return false;
        }
        // BFS levels from 0; the period is the gcd of level[i] + 1 - level[j] over edges i→j.
        let mut level = vec![usize::MAX; n];
        level[0] = 0;
        let mut queue = std::collections::VecDeque::from([0]);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if pattern[i * n + j] && level[j] == usize::MAX {
                    level[j] = level[i] + 1;
                    queue.push_back(j);
                }
            }
        }
        fn gcd(a: i64, b: i64) -> i64 {
            if b == 0 { a.abs() } else { gcd(b, a % b) }
        }
        let mut g = 0;
        for i in 0..n {
            for j in 0..n {
                if pattern[i * n + j] {
                    g = gcd(g, level[i] as i64 + 1 - level[j] as i64);
                }
            }
        }
        g == 1
    }

    #[test]
    fn primitivity_matches_brute_force_on_all_small_patterns() {
        for n in 1..=3usize {
            for bits in 0u32..(1 << (n * n)) {
                let pattern: Vec<bool> = (0..n * n).map(|k| bits >> k & 1 == 1).collect();
                assert_eq!(
                    is_primitive_pattern(&pattern, n),
                    primitive_oracle(&pattern, n),
                    "n={n} bits={bits:b}"
                );
            }
        }
    }

    fn arb_law() -> impl Strategy<Value = MemoryLaw> {
        prop_oneof![
            prop::collection::vec(0.0f64..1.0, 1..8).prop_map(|w| {
                let s: f64 = w.iter().sum::<f64>() + 1e-3;
                let mut probs: Vec<f64> = w.iter().map(|x| x / s).collect();
                probs[0] += 1e-3 / s;
                MemoryLaw::finite(probs).unwrap()
            }),
            (0.05f64..1.0).prop_map(|p| MemoryLaw::geometric(p).unwrap()),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn distance_dominates_weighted_mismatch(
            tau in arb_law(),
            pairs in prop::collection::vec((0usize..3, 0usize..3), 1..12),
        ) {
            let p = Prefix(pairs.iter().map(|x| x.0).collect());
            let q = Prefix(pairs.iter().map(|x| x.1).collect());
            let lhs: f64 = (0..p.len()).filter(|&j| p.0[j] != q.0[j]).map(|j| tau.prob(j)).sum();
            prop_assert!(lhs <= memory_distance(&p, &q, &tau).unwrap() + 1e-15);
        }

        #[test]
        fn tail_identities(tau in arb_law()) {
            prop_assert_eq!(tau.tail(0), 1.0);
            for k in 0..40 {
                prop_assert!(tau.tail(k + 1) <= tau.tail(k) + 1e-15);
            }
            // Σ_k P(T ≥ k) = 1 + E[T]; geometric tails summed numerically far enough.
            let total: f64 = (0..5000).map(|k| tau.tail(k)).sum();
            prop_assert!((total - (1.0 + tau.mean())).abs() < 1e-9);
            prop_assert!((tau.tail_sum_from(0) - (1.0 + tau.mean())).abs() < 1e-9);
        }

        #[test]
        fn poisson_kernel_round_trip(entries in prop::collection::vec(0.0f64..5.0, 9)) {
            let m = MeanMatrix::from_flat(3, entries).unwrap();
            let back = mean_from_kernel(&OffspringKernel::Poisson(m.clone())).unwrap();
            for (a, b) in back.entries().iter().zip(m.entries()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}

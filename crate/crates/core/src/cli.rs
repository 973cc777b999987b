//! Command-line front end: model files, subcommands, CSV and reports.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::chain::{consolidation_bound, BiasedChain};
use crate::lifted::{converge_radius, lift, radius, ConvergeOptions, LiftError, DEFAULT_MAX_STATES};
use crate::model::{
    mean_from_kernel, validate, FillRule, InitialMemory, MeanMatrix, MemoryLaw, ModelError, ModelSpec,
    OffspringAtom, OffspringKernel, TypeSpace,
};
use crate::population::{
    exact_means, memory_law_of, Founders, GrowthEstimate, PopulationModel, DEFAULT_CAP,
};
use crate::spectral::{harnack_enclosure, perron_frobenius, SpectralError};
use crate::stream::derive_seed;

/// Significant digits written to CSV files.
pub const CSV_DIGITS: usize = 6;

/// Failure categories, each with its own exit status.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Parse(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Budget(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Parse(_) => 3,
            Self::Validation(_) => 4,
            Self::Budget(_) => 5,
            Self::Numerical(_) => 6,
            Self::Io(_) => 7,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Self::Usage(_) => "usage",
            Self::Parse(_) => "parse",
            Self::Validation(_) => "validation",
            Self::Budget(_) => "budget",
            Self::Numerical(_) => "numerical",
            Self::Io(_) => "io",
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::Validation(e.to_string())
    }
}

impl From<SpectralError> for CliError {
    fn from(e: SpectralError) -> Self {
        match e {
            SpectralError::NotPrimitive => Self::Validation(e.to_string()),
            SpectralError::BadTolerance(_) => Self::Usage(e.to_string()),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

impl From<LiftError> for CliError {
    fn from(e: LiftError) -> Self {
        match e {
            LiftError::Budget { .. } | LiftError::TooLargeForDense(_) => Self::Budget(e.to_string()),
            LiftError::ZeroDepth
            | LiftError::DepthBelowTruncation { .. }
            | LiftError::BadTolerance(_)
            | LiftError::LengthMismatch { .. } => Self::Usage(e.to_string()),
            LiftError::Spectral(s) => s.into(),
            _ => Self::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

/// Inclusive grid `a:b:n` of `n` evenly spaced values.
#[derive(Debug, Clone, PartialEq)]
pub struct UGrid {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

impl UGrid {
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.start];
        }
        let step = (self.end - self.start) / (self.count - 1) as f64;
        (0..self.count)
            .map(|i| if i + 1 == self.count { self.end } else { self.start + i as f64 * step })
            .collect()
    }
}

impl FromStr for UGrid {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, n] = parts[..] else {
            return Err(format!("expected a:b:n, got `{s}`"));
        };
        let start: f64 = a.trim().parse().map_err(|_| format!("bad start `{a}`"))?;
        let end: f64 = b.trim().parse().map_err(|_| format!("bad end `{b}`"))?;
        let count: usize = n.trim().parse().map_err(|_| format!("bad count `{n}`"))?;
        if count == 0 {
            return Err("grid needs at least one point".into());
        }
        if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&end) {
            return Err("grid values must lie in [0, 1]".into());
        }
        Ok(Self { start, end, count })
    }
}

#[derive(Debug, Clone, Parser)]
#[command(name = "atavism", version, about = "Branching processes with ancestral memory")]
pub struct RunConfig {
    /// Model file (JSON).
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Master seed; required by stochastic commands.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// CSV output path.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Perron data of the mean matrix.
    Spectral {
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
    /// Entries of the lifted memory operator.
    Lift {
        #[arg(long)]
        depth: usize,
        /// Replace the memory law by τ = (u, 1-u).
        #[arg(long)]
        u: Option<f64>,
    },
    /// Growth rate with memory: at one depth, or an enclosure over increasing depths.
    Radius {
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        u: Option<f64>,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 12)]
        max_depth: usize,
    },
    /// Biased chain marginals, Birkhoff gap and optional many-to-one estimates.
    Chain {
        #[arg(long, default_value_t = 1_000_000)]
        steps: usize,
        /// Compare many-to-one estimates of m^k 1 for k = 1..=K.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 100_000)]
        replicates: usize,
    },
    /// Coupled biased chains from the model's memory and a second one.
    Couple {
        #[arg(long, default_value_t = 1000)]
        replicates: usize,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        /// Second initial memory as comma-separated labels (last one repeats).
        #[arg(long)]
        against: Option<String>,
    },
    /// Population simulation on the genealogy tree.
    Simulate {
        #[arg(long, default_value_t = 1000)]
        replicates: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: usize,
        /// Per-run CSV (run, k, size, one column per type).
        #[arg(long)]
        runs_out: Option<PathBuf>,
    },
    /// Radius of the two-type example over a grid of u.
    Sweep {
        #[arg(long, default_value = "0:1:500")]
        u_grid: UGrid,
        #[arg(long, default_value_t = 2)]
        depth: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
}

/// What a successful command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub report: String,
    pub files: Vec<PathBuf>,
}

// ---------------------------------------------------------------------------
// Model files

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    types: Vec<String>,
    #[serde(default)]
    mean: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    kernel: Option<KernelFile>,
    tau: TauFile,
    #[serde(default)]
    initial_memory: Option<InitialMemoryFile>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum KernelFile {
    Poisson(Vec<Vec<f64>>),
    Deterministic(Vec<Vec<u32>>),
    Finite(Vec<Vec<AtomFile>>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AtomFile {
    counts: Vec<u32>,
    prob: f64,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum TauFile {
    Finite(Vec<f64>),
    Geometric(f64),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialMemoryFile {
    #[serde(default)]
    prefix: Vec<String>,
    fill: FillFile,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
enum FillFile {
    Constant(String),
    Periodic(Vec<String>),
    Iid { law: Vec<f64>, seed: u64 },
}

fn labels_to_indices(types: &TypeSpace, labels: &[String]) -> Result<Vec<usize>, CliError> {
    labels.iter().map(|l| types.index_of(l).map_err(CliError::from)).collect()
}

/// Parses a model document. Syntax and schema errors are `Parse`; ill-formed
/// values are `Validation`. The standing assumptions are checked by [`validate`].
pub fn parse_model(text: &str) -> Result<ModelSpec, CliError> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| CliError::Parse(e.to_string()))?;
    let types = TypeSpace::new(file.types)?;
    let kernel = match file.kernel {
        Some(KernelFile::Poisson(rows)) => Some(OffspringKernel::Poisson(MeanMatrix::from_rows(&rows)?)),
        Some(KernelFile::Deterministic(rows)) => Some(OffspringKernel::Deterministic(rows)),
        Some(KernelFile::Finite(rows)) => Some(OffspringKernel::Finite(
            rows.into_iter()
                .map(|atoms| atoms.into_iter().map(|a| OffspringAtom { counts: a.counts, prob: a.prob }).collect())
                .collect(),
        )),
        None => None,
    };
    let (mean, kernel) = match (file.mean, kernel) {
        (Some(rows), Some(k)) => (MeanMatrix::from_rows(&rows)?, k),
        (Some(rows), None) => {
            let m = MeanMatrix::from_rows(&rows)?;
            (m.clone(), OffspringKernel::Poisson(m))
        }
        (None, Some(k)) => {
            let problems = k.check();
            if !problems.is_empty() {
                return Err(CliError::Validation(format!("offspring kernel: {}", problems.join("; "))));
            }
            (mean_from_kernel(&k)?, k)
        }
        (None, None) => return Err(CliError::Parse("model needs `mean` or `kernel`".into())),
    };
    let tau = match file.tau {
        TauFile::Finite(p) => MemoryLaw::finite(p)?,
        TauFile::Geometric(p) => MemoryLaw::geometric(p)?,
    };
    let initial_memory = match file.initial_memory {
        None => InitialMemory::constant(0),
        Some(im) => {
            let prefix = labels_to_indices(&types, &im.prefix)?;
            let fill = match im.fill {
                FillFile::Constant(l) => FillRule::Constant(types.index_of(&l)?),
                FillFile::Periodic(w) => FillRule::Periodic(labels_to_indices(&types, &w)?),
                FillFile::Iid { law, seed } => FillRule::Iid { law, seed },
            };
            InitialMemory::new(prefix, fill)
        }
    };
    Ok(ModelSpec { types, mean, kernel, tau, initial_memory })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// A validated model with the hash of the file it came from.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub spec: ModelSpec,
    pub path: PathBuf,
    pub sha256: String,
}

pub fn load_model(path: &Path) -> Result<LoadedModel, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| CliError::Parse(e.to_string()))?;
    let spec = parse_model(text)?;
    let report = validate(&spec);
    if !report.is_ok() {
        return Err(CliError::Validation(report.to_string()));
    }
    Ok(LoadedModel { spec, path: path.to_path_buf(), sha256: sha256_hex(&bytes) })
}

// ---------------------------------------------------------------------------
// Output

/// `x` rounded to `digits` significant digits.
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let digits = digits.max(1) as i32;
    let mut exp = x.abs().log10().floor() as i32;
    // Rounding can carry into the next decade (9.9999996 -> 10.00000).
    let rounded = |exp: i32| format!("{:.*}", (digits - 1 - exp).max(0) as usize, x);
    if !(-5..=15).contains(&exp) {
        return format!("{:.*e}", (digits - 1) as usize, x);
    }
    let mut s = rounded(exp);
    if s.trim_start_matches('-').parse::<f64>().is_ok_and(|v| v >= 10f64.powi(exp + 1)) {
        exp += 1;
        s = rounded(exp);
    }
    s
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Small RFC 4180 writer with LF line endings.
#[derive(Debug, Default)]
pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut c = Self::default();
        c.row(header);
        c
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) {
        let line: Vec<String> = fields.iter().map(|f| csv_field(f.as_ref())).collect();
        self.buf.push_str(&line.join(","));
        self.buf.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| CliError::Io(format!("{}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(contents.as_bytes()).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands

struct Ctx<'a> {
    config: &'a RunConfig,
    report: String,
    files: Vec<(PathBuf, String)>,
}

impl Ctx<'_> {
    fn line(&mut self, s: impl AsRef<str>) {
        self.report.push_str(s.as_ref());
        self.report.push('\n');
    }

    fn model(&mut self) -> Result<LoadedModel, CliError> {
        let path = self.config.model.as_ref().ok_or_else(|| CliError::Usage("--model is required".into()))?;
        let loaded = load_model(path)?;
        self.line(format!("model: {} (sha256 {})", loaded.path.display(), loaded.sha256));
        Ok(loaded)
    }

    fn seed(&mut self) -> Result<u64, CliError> {
        let seed = self.config.seed.ok_or_else(|| CliError::Usage("--seed is required for stochastic commands".into()))?;
        self.line(format!("seed: {seed}"));
        Ok(seed)
    }

    fn deterministic(&mut self) {
        self.line("seed: none (deterministic command)");
    }

    fn emit(&mut self, csv: Csv) {
        if let Some(path) = &self.config.out {
            self.files.push((path.clone(), csv.buf));
        }
    }
}

fn tau_override(spec: &mut ModelSpec, u: Option<f64>, ctx: &mut Ctx) -> Result<(), CliError> {
    if let Some(u) = u {
        spec.tau = MemoryLaw::two_point(u)?;
        ctx.line(format!("memory law: tau = ({u}, {})", 1.0 - u));
        if u == 0.0 {
            ctx.line("note: tau(0) = 0, outside the standing assumptions; computed as a degenerate lift");
        }
    }
    Ok(())
}

fn prefix_label(spec: &ModelSpec, p: &[usize]) -> String {
    p.iter().map(|&t| spec.types.label(t)).collect::<Vec<_>>().join(".")
}

fn cmd_spectral(ctx: &mut Ctx, tol: f64) -> Result<(), CliError> {
    let model = ctx.model()?;
    ctx.deterministic();
    let spec = &model.spec;
    let pf = perron_frobenius(&spec.mean, tol)?;
    let harnack = harnack_enclosure(&pf);
    ctx.line(format!("r = {:.7}", pf.r));
    ctx.line(format!("enclosure of r: {}", pf.bracket));
    ctx.line(format!("harnack enclosure for memory radii: {harnack}"));
    let mut csv = Csv::new(&["type", "rho", "h"]);
    for t in 0..spec.num_types() {
        let label = spec.types.label(t);
        ctx.line(format!("  {label}: rho = {:.9}, h = {:.9}", pf.rho[t], pf.h[t]));
        csv.row(&[label.to_string(), fmt_sig(pf.rho[t], CSV_DIGITS), fmt_sig(pf.h[t], CSV_DIGITS)]);
    }
    ctx.emit(csv);
    Ok(())
}

fn cmd_lift(ctx: &mut Ctx, depth: usize, u: Option<f64>) -> Result<(), CliError> {
    let mut spec = ctx.model()?.spec;
    ctx.deterministic();
    tau_override(&mut spec, u, ctx)?;
    let op = lift(&spec.mean, &spec.tau, depth)?;
    let n = spec.num_types();
    let mut csv = Csv::new(&["from", "to", "value"]);
    let mut nonzero = 0usize;
    for i in 0..op.size() {
        let p = op.prefix_of(i);
        for t in 0..n {
            let v: f64 = (0..depth).map(|j| spec.tau.prob(j) * spec.mean.get(p.0[j], t)).sum();
            if v != 0.0 {
                nonzero += 1;
                let q = p.child(t);
                csv.row(&[prefix_label(&spec, &p.0), prefix_label(&spec, &q.0), fmt_sig(v, CSV_DIGITS)]);
            }
        }
    }
    ctx.line(format!("depth {depth}: {} states, {nonzero} nonzero entries", op.size()));
    ctx.emit(csv);
    Ok(())
}

fn cmd_radius(ctx: &mut Ctx, depth: Option<usize>, u: Option<f64>, tol: f64, max_depth: usize) -> Result<(), CliError> {
    let mut spec = ctx.model()?.spec;
    ctx.deterministic();
    tau_override(&mut spec, u, ctx)?;
    let mut csv = Csv::new(&["depth", "radius", "lower", "upper"]);
    match depth {
        Some(d) => {
            let est = radius(&lift(&spec.mean, &spec.tau, d)?, tol)?;
            ctx.line(format!("radius at depth {d}: {:.6}", est.radius));
            ctx.line(format!("enclosure: {}", est.bracket));
            csv.row(&[
                d.to_string(),
                fmt_sig(est.radius, CSV_DIGITS),
                fmt_sig(est.bracket.lower, CSV_DIGITS),
                fmt_sig(est.bracket.upper, CSV_DIGITS),
            ]);
        }
        None => {
            let opts = ConvergeOptions { tol, max_depth, max_states: DEFAULT_MAX_STATES };
            let enc = converge_radius(&spec.mean, &spec.tau, &opts)?;
            for t in &enc.trace {
                csv.row(&[
                    t.depth.to_string(),
                    fmt_sig(t.radius, CSV_DIGITS),
                    fmt_sig(t.bracket.lower, CSV_DIGITS),
                    fmt_sig(t.bracket.upper, CSV_DIGITS),
                ]);
            }
            let last = enc.trace.last().expect("at least one depth");
            ctx.line(format!("radius at depth {}: {:.6}", last.depth, last.radius));
            ctx.line(format!("certified enclosure: [{:.9}, {:.9}]", enc.lower, enc.upper));
            if enc.exact {
                ctx.line("truncation covers the support of tau: the radius is exact");
            } else {
                ctx.line(format!("heuristic upper bound (not certified): {:.9}", enc.heuristic_upper));
                let status = if enc.converged { "met" } else { "not met" };
                ctx.line(format!("stopping rule |r_l+1 - r_l| < {tol}: {status} (heuristic)"));
            }
        }
    }
    ctx.emit(csv);
    Ok(())
}

fn cmd_chain(ctx: &mut Ctx, steps: usize, k: Option<usize>, replicates: usize) -> Result<(), CliError> {
    let spec = ctx.model()?.spec;
    let seed = ctx.seed()?;
    let chain = BiasedChain::new(&spec.mean, &spec.tau)?;
    let mut rng = crate::stream::replicate_rng(derive_seed(seed, 0), 0);
    let rep = chain.empirical_marginals(&spec.initial_memory, steps, &mut rng);
    let n = spec.num_types();
    ctx.line(format!("steps: {steps}"));
    ctx.line(format!("birkhoff gap: {:.6e}", rep.birkhoff_gap));
    ctx.line(format!("max deviation of P(Y = t) from rho(t) h(t): {:.6}", rep.activated_deviation()));
    ctx.line(format!("max deviation of P(Y = t, X = u) from prediction: {:.6}", rep.pair_deviation()));
    let mut csv = Csv::new(&["quantity", "activated", "child", "empirical", "predicted"]);
    for t in 0..n {
        csv.row(&[
            "activated".to_string(),
            spec.types.label(t).to_string(),
            String::new(),
            fmt_sig(rep.activated[t], CSV_DIGITS),
            fmt_sig(rep.predicted_activated[t], CSV_DIGITS),
        ]);
    }
    for t in 0..n {
        for u in 0..n {
            csv.row(&[
                "pair".to_string(),
                spec.types.label(t).to_string(),
                spec.types.label(u).to_string(),
                fmt_sig(rep.pair[t * n + u], CSV_DIGITS),
                fmt_sig(rep.predicted_pair[t * n + u], CSV_DIGITS),
            ]);
        }
    }
    if let Some(kmax) = k {
        let exact = match spec.tau.exact_depth() {
            Some(_) => Some(exact_means(&spec, &memory_law_of(&spec, &spec.initial_memory).map_err(pop_err)?, kmax).map_err(pop_err)?),
            None => None,
        };
        ctx.line(format!("many-to-one estimates of m^k 1 ({replicates} samples each):"));
        for kk in 1..=kmax {
            let est = chain.many_to_one(|_| 1.0, &spec.initial_memory, kk, replicates, derive_seed(seed, kk as u64));
            let mut line = format!("  k = {kk}: {:.6} ± {:.2e}", est.mean, est.std_error);
            if let Some(ex) = &exact {
                let _ = write!(line, " (exact {:.6}, z = {:.2})", ex[kk], est.z_score(ex[kk]));
            }
            ctx.line(line);
        }
    }
    ctx.emit(csv);
    Ok(())
}

fn pop_err(e: crate::population::PopulationError) -> CliError {
    match e {
        crate::population::PopulationError::Lift(l) => l.into(),
        other => CliError::Usage(other.to_string()),
    }
}

fn cmd_couple(ctx: &mut Ctx, replicates: usize, steps: usize, against: Option<&str>) -> Result<(), CliError> {
    let spec = ctx.model()?.spec;
    let seed = ctx.seed()?;
    let chain = BiasedChain::new(&spec.mean, &spec.tau)?;
    let first = spec.initial_memory.clone();
    let second = match against {
        Some(s) => {
            let labels: Vec<String> = s.split(',').map(|l| l.trim().to_string()).collect();
            let idx = labels_to_indices(&spec.types, &labels)?;
            if idx.is_empty() {
                return Err(CliError::Usage("--against needs at least one label".into()));
            }
            InitialMemory::from_prefix(idx)
        }
        None => InitialMemory::constant((first.type_at(0) + 1) % spec.num_types()),
    };
    let runs = chain.coupled_batch(&first, &second, replicates, steps, seed);
    let opt = |v: Option<usize>| v.map_or(String::new(), |x| x.to_string());
    let mut csv = Csv::new(&["run", "steps", "failures", "last_failure", "gamma", "merged_at", "failures_after_merge"]);
    for (i, r) in runs.iter().enumerate() {
        csv.row(&[
            i.to_string(),
            r.steps.to_string(),
            r.failures.to_string(),
            opt(r.last_failure),
            opt(r.gamma),
            opt(r.merged_at),
            r.failures_after_merge.to_string(),
        ]);
    }
    let entered = runs.iter().filter(|r| r.gamma.is_some()).count();
    let merged = runs.iter().filter(|r| r.merged_at.is_some()).count();
    let tail_clean = runs.iter().filter(|r| r.last_failure.is_none_or(|f| f < steps)).count();
    ctx.line(format!("runs: {replicates} of {steps} steps"));
    ctx.line(format!("entered consolidation (gamma finite): {entered}"));
    ctx.line(format!("last failure before the final step: {tail_clean}"));
    if spec.tau.exact_depth().is_some() {
        ctx.line(format!("merged deterministically: {merged}"));
    } else {
        let b = consolidation_bound(&spec.tau, 200);
        ctx.line(format!("consolidation lower bound prod(1 - a_k): {:.6}", b.lower_bound()));
    }
    ctx.emit(csv);
    Ok(())
}

fn cmd_simulate(ctx: &mut Ctx, replicates: usize, k: usize, cap: usize, runs_out: Option<&Path>) -> Result<(), CliError> {
    if cap == 0 || replicates == 0 {
        return Err(CliError::Usage("--cap and --replicates must be at least 1".into()));
    }
    let spec = ctx.model()?.spec;
    let seed = ctx.seed()?;
    let model = PopulationModel::new(&spec);
    let runs = model.simulate_many(&Founders::Fixed(vec![spec.initial_memory.clone()]), replicates, k, cap, seed);
    let g = GrowthEstimate::from_runs(&runs, k);
    let exact = match spec.tau.exact_depth() {
        Some(_) => Some(exact_means(&spec, &memory_law_of(&spec, &spec.initial_memory).map_err(pop_err)?, k).map_err(pop_err)?),
        None => {
            ctx.line("note: tau is unbounded; memory beyond the founder follows the initial-memory rule");
            None
        }
    };
    let mut csv = Csv::new(&["k", "runs", "mean_size", "std_error", "rate", "exact_mean"]);
    for kk in 0..=k {
        let rate = if kk == 0 { String::new() } else { fmt_sig(g.rates[kk - 1], CSV_DIGITS) };
        let ex = exact.as_ref().map_or(String::new(), |e| fmt_sig(e[kk], CSV_DIGITS));
        csv.row(&[
            kk.to_string(),
            g.valid_runs[kk].to_string(),
            fmt_sig(g.mean_sizes[kk], CSV_DIGITS),
            fmt_sig(g.std_errors[kk], CSV_DIGITS),
            rate,
            ex,
        ]);
    }
    let extinct = runs.iter().filter(|r| r.extinct_at.is_some()).count();
    let capped = runs.iter().filter(|r| r.capped_at.is_some()).count();
    ctx.line(format!("runs: {replicates}, generations: {k}, cap: {cap}"));
    ctx.line(format!("extinct: {extinct}, truncated at the cap: {capped}"));
    if k >= 1 {
        ctx.line(format!("mean |Z_{k}| = {:.6} ± {:.2e}", g.mean_sizes[k], g.std_errors[k]));
        ctx.line(format!("(mean |Z_{k}|)^(1/{k}) = {:.6}", g.rates[k - 1]));
    }
    match g.log_slope {
        Some(s) => ctx.line(format!("log-slope of mean size: {s:.6} (rate {:.6})", s.exp())),
        None => ctx.line("log-slope of mean size: undefined (no positive mean sizes)"),
    }
    if let Some(path) = runs_out {
        let mut header = vec!["run".to_string(), "k".into(), "size".into()];
        header.extend(spec.types.labels().iter().cloned());
        let mut per_run = Csv::new(&header);
        for (i, r) in runs.iter().enumerate() {
            for (kk, (size, hist)) in r.sizes.iter().zip(&r.histograms).enumerate() {
                let mut row = vec![i.to_string(), kk.to_string(), size.to_string()];
                row.extend(hist.iter().map(|c| c.to_string()));
                per_run.row(&row);
            }
        }
        ctx.files.push((path.to_path_buf(), per_run.buf));
    }
    ctx.emit(csv);
    Ok(())
}

/// `(u, r(u))` for the two-type example (or the mean matrix of `mean`) with `τ = (u, 1-u)`.
pub fn sweep_example(mean: &MeanMatrix, grid: &[f64], depth: usize, tol: f64) -> Result<Vec<(f64, f64)>, CliError> {
    grid.par_iter()
        .map(|&u| {
            let tau = MemoryLaw::two_point(u)?;
            let est = radius(&lift(mean, &tau, depth)?, tol)?;
            Ok((u, est.radius))
        })
        .collect()
}

fn cmd_sweep(ctx: &mut Ctx, grid: &UGrid, depth: usize, tol: f64) -> Result<(), CliError> {
    let mean = if ctx.config.model.is_some() {
        ctx.model()?.spec.mean
    } else {
        ctx.line("model: built-in two-type example, m = [[1, 1], [1, 2]]");
        ModelSpec::two_type_example(0.5).mean
    };
    ctx.deterministic();
    let curve = sweep_example(&mean, &grid.values(), depth, tol)?;
    let mut csv = Csv::new(&["u", "radius"]);
    for &(u, r) in &curve {
        csv.row(&[fmt_sig(u, CSV_DIGITS), fmt_sig(r, CSV_DIGITS)]);
    }
    let degenerate: Vec<String> = curve.iter().filter(|(u, _)| *u == 0.0).map(|(u, r)| format!("u = {u} (r = {r:.6})")).collect();
    ctx.line(format!("grid: {} points in [{}, {}], depth {depth}", grid.count, grid.start, grid.end));
    if !degenerate.is_empty() {
        ctx.line(format!("degenerate points with tau(0) = 0: {}", degenerate.join(", ")));
    }
    if let Some((u, r)) = curve.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)) {
        ctx.line(format!("maximum radius {r:.6} at u = {u:.6}"));
    }
    ctx.emit(csv);
    Ok(())
}

/// Executes one command. Output files are written only after it succeeds.
pub fn run(config: &RunConfig) -> Result<Outcome, CliError> {
    let mut ctx = Ctx { config, report: String::new(), files: Vec::new() };
    match &config.command {
        Command::Spectral { tol } => cmd_spectral(&mut ctx, *tol)?,
        Command::Lift { depth, u } => cmd_lift(&mut ctx, *depth, *u)?,
        Command::Radius { depth, u, tol, max_depth } => cmd_radius(&mut ctx, *depth, *u, *tol, *max_depth)?,
        Command::Chain { steps, k, replicates } => cmd_chain(&mut ctx, *steps, *k, *replicates)?,
        Command::Couple { replicates, steps, against } => {
            cmd_couple(&mut ctx, *replicates, *steps, against.as_deref())?
        }
        Command::Simulate { replicates, k, cap, runs_out } => {
            cmd_simulate(&mut ctx, *replicates, *k, *cap, runs_out.as_deref())?
        }
        Command::Sweep { u_grid, depth, tol } => cmd_sweep(&mut ctx, u_grid, *depth, *tol)?,
    }
    let mut files = Vec::new();
    for (path, contents) in &ctx.files {
        write_atomic(path, contents)?;
        files.push(path.clone());
        ctx.report.push_str(&format!("wrote {}\n", path.display()));
    }
    Ok(Outcome { report: ctx.report, files })
}

/// Parses `args`, runs, prints the report, and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let config = match RunConfig::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&config) {
        Ok(outcome) => {
            print!("{}", outcome.report);
            0
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            e.exit_code()
        }
    }
}

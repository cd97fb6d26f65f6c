//! Game spec files, graph files, trace CSVs and experiment manifests.
//!
//! Specs are TOML:
//!
//! ```toml
//! spec_version = 1
//! num_agents = 2
//! decision_dim = 1
//!
//! [[local_sets]]
//! lower = [-1.0]
//! upper = [1.0]
//!
//! [[local_sets]]
//! lower = [-1.0]
//! upper = [1.0]
//!
//! [cost]
//! type = "quadratic"
//! q = [1.0, 1.0]
//! c = [[0.5]]
//! d = [[-1.0], [-1.0]]
//!
//! [coupling]
//! A_blocks = [[[1.0]], [[1.0]]]
//! b = [0.5]
//! ```
//!
//! `[coupling]` and `[monotonicity]` (`eta`, `lip_f`) are optional. A cost
//! of `type = "external"` is loaded with [`load_spec_with_oracle`].

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use toml::Spanned;

use crate::error::{Error, Result};
use crate::game::{BoxSet, CostModel, CouplingConstraint, EstimateConvention, GameSpec, Monotonicity, OracleCost, QuadraticCost};
use crate::generate::{random_game, GenParams};
use crate::network::{build_graph, CommGraph, GraphKind};
use crate::preconditioner::{bounds_report, build_apa_matrix, StepPolicy};
use crate::report::{ConvergenceReport, TraceRow};
use crate::solvers::{apa_solve, kns_solve, pfb_solve, SolverConfig};

pub const SPEC_VERSION: i64 = 1;

#[derive(Deserialize)]
struct VersionProbe {
    spec_version: Option<Spanned<i64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpec {
    spec_version: i64,
    num_agents: Spanned<usize>,
    decision_dim: Spanned<usize>,
    local_sets: Vec<Spanned<RawBox>>,
    cost: Spanned<RawCost>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    coupling: Option<Spanned<RawCoupling>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    monotonicity: Option<Spanned<RawMonotonicity>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
enum RawCost {
    Quadratic { q: Vec<f64>, c: Vec<Vec<f64>>, d: Vec<Vec<f64>> },
    External,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCoupling {
    #[serde(rename = "A_blocks")]
    a_blocks: Vec<Spanned<Vec<Vec<f64>>>>,
    b: Spanned<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMonotonicity {
    eta: f64,
    lip_f: f64,
}

fn line_of(text: &str, offset: usize) -> usize {
    1 + text.as_bytes()[..offset.min(text.len())].iter().filter(|&&c| c == b'\n').count()
}

struct Anchor<'a> {
    path: &'a str,
    text: &'a str,
}

impl Anchor<'_> {
    fn dim<T>(&self, spanned: &Spanned<T>, message: String) -> Error {
        Error::SpecDimension {
            path: self.path.to_string(),
            line: Some(line_of(self.text, spanned.span().start)),
            message,
        }
    }

    fn unanchored(&self, message: String) -> Error {
        Error::SpecDimension { path: self.path.to_string(), line: None, message }
    }

    fn parse(&self, err: toml::de::Error) -> Error {
        let message = match err.span() {
            Some(span) => format!("line {}: {}", line_of(self.text, span.start), err.message()),
            None => err.message().to_string(),
        };
        Error::Parse { path: self.path.to_string(), message }
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize) -> Option<DMatrix<f64>> {
    rows.iter().all(|r| r.len() == ncols).then(|| {
        DMatrix::from_row_iterator(rows.len(), ncols, rows.iter().flatten().copied())
    })
}

fn parse_spec(text: &str, path: &str, oracle: Option<OracleCost>) -> Result<GameSpec> {
    let anchor = Anchor { path, text };
    let probe: VersionProbe = toml::from_str(text).map_err(|e| anchor.parse(e))?;
    match probe.spec_version {
        None => return Err(Error::Parse { path: path.to_string(), message: "missing spec_version".into() }),
        Some(v) if *v.get_ref() != SPEC_VERSION => {
            return Err(Error::Version { path: path.to_string(), found: *v.get_ref(), supported: SPEC_VERSION })
        }
        Some(_) => {}
    }
    let raw: RawSpec = toml::from_str(text).map_err(|e| anchor.parse(e))?;
    let big_n = *raw.num_agents.get_ref();
    let n = *raw.decision_dim.get_ref();
    if big_n == 0 {
        return Err(anchor.dim(&raw.num_agents, "num_agents must be positive".into()));
    }
    if n == 0 {
        return Err(anchor.dim(&raw.decision_dim, "decision_dim must be positive".into()));
    }
    if raw.local_sets.len() != big_n {
        return Err(anchor.unanchored(format!(
            "expected {big_n} [[local_sets]] entries, found {}",
            raw.local_sets.len()
        )));
    }
    let mut local_sets = Vec::with_capacity(big_n);
    for (i, set) in raw.local_sets.iter().enumerate() {
        let b = set.get_ref();
        if b.lower.len() != n || b.upper.len() != n {
            return Err(anchor.dim(
                set,
                format!(
                    "local set of agent {i} has lower/upper lengths {}/{}, expected {n}",
                    b.lower.len(),
                    b.upper.len()
                ),
            ));
        }
        let boxed = BoxSet::new(DVector::from_vec(b.lower.clone()), DVector::from_vec(b.upper.clone()))
            .map_err(|e| anchor.dim(set, format!("local set of agent {i}: {e}")))?;
        local_sets.push(boxed);
    }

    let cost = match (raw.cost.get_ref(), oracle) {
        (RawCost::External, Some(oracle)) => CostModel::Oracle(oracle),
        (RawCost::External, None) => return Err(Error::ExternalCost),
        (RawCost::Quadratic { .. }, Some(_)) => {
            return Err(anchor.dim(&raw.cost, "an oracle was supplied but the cost is quadratic".into()))
        }
        (RawCost::Quadratic { q, c, d }, None) => {
            if q.len() != big_n {
                return Err(anchor.dim(&raw.cost, format!("cost.q has {} entries, expected {big_n}", q.len())));
            }
            let c = matrix_from_rows(c, n)
                .filter(|m| m.nrows() == n)
                .ok_or_else(|| anchor.dim(&raw.cost, format!("cost.c must be {n}x{n}")))?;
            if d.len() != big_n {
                return Err(anchor.dim(&raw.cost, format!("cost.d has {} rows, expected {big_n}", d.len())));
            }
            if let Some(i) = d.iter().position(|di| di.len() != n) {
                return Err(anchor.dim(&raw.cost, format!("cost.d for agent {i} has length {}, expected {n}", d[i].len())));
            }
            CostModel::Quadratic(QuadraticCost {
                q: q.clone(),
                c,
                d: d.iter().map(|di| DVector::from_vec(di.clone())).collect(),
            })
        }
    };

    let coupling = match &raw.coupling {
        None => CouplingConstraint::none(big_n, n),
        Some(section) => {
            let RawCoupling { a_blocks, b } = section.get_ref();
            let m = b.get_ref().len();
            if a_blocks.len() != big_n {
                return Err(anchor.dim(section, format!("coupling.A_blocks has {} blocks, expected {big_n}", a_blocks.len())));
            }
            let mut blocks = Vec::with_capacity(big_n);
            for (i, block) in a_blocks.iter().enumerate() {
                let rows = block.get_ref();
                if rows.len() != m {
                    return Err(anchor.dim(
                        block,
                        format!("coupling block of agent {i} has {} rows, expected {m} (length of b)", rows.len()),
                    ));
                }
                let mat = matrix_from_rows(rows, n)
                    .ok_or_else(|| anchor.dim(block, format!("coupling block of agent {i} must have {n} columns")))?;
                blocks.push(mat);
            }
            CouplingConstraint::new(blocks, DVector::from_vec(b.get_ref().clone()))
                .map_err(|e| anchor.dim(section, e.to_string()))?
        }
    };

    let monotonicity = match &raw.monotonicity {
        None => None,
        Some(mono) => {
            let RawMonotonicity { eta, lip_f } = *mono.get_ref();
            Some(Monotonicity::new(eta, lip_f).map_err(|e| anchor.dim(mono, e.to_string()))?)
        }
    };
    GameSpec::new(big_n, n, local_sets, cost, coupling, monotonicity).map_err(|e| anchor.unanchored(e.to_string()))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Read { path: path.display().to_string(), source })
}

pub fn load_spec(path: impl AsRef<Path>) -> Result<GameSpec> {
    let path = path.as_ref();
    parse_spec(&read(path)?, &path.display().to_string(), None)
}

/// Load a spec whose cost is `type = "external"` and attach `oracle`.
pub fn load_spec_with_oracle(path: impl AsRef<Path>, oracle: OracleCost) -> Result<GameSpec> {
    let path = path.as_ref();
    parse_spec(&read(path)?, &path.display().to_string(), Some(oracle))
}

/// Parse spec text; `label` names the source in error messages.
pub fn spec_from_str(text: &str, label: &str) -> Result<GameSpec> {
    parse_spec(text, label, None)
}

fn spanned<T>(value: T) -> Spanned<T> {
    Spanned::new(0..0, value)
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Render a spec as TOML. Floats use the shortest representation that
/// parses back to the same bits. Oracle costs are written as
/// `type = "external"`.
pub fn spec_to_string(spec: &GameSpec) -> Result<String> {
    let cost = match spec.cost() {
        CostModel::Quadratic(qc) => RawCost::Quadratic {
            q: qc.q.clone(),
            c: rows_of(&qc.c),
            d: qc.d.iter().map(|d| d.iter().copied().collect()).collect(),
        },
        CostModel::Oracle(_) => RawCost::External,
    };
    let coupling = (spec.num_constraints() > 0).then(|| {
        spanned(RawCoupling {
            a_blocks: spec.coupling().blocks().iter().map(|blk| spanned(rows_of(blk))).collect(),
            b: spanned(spec.coupling().b().iter().copied().collect()),
        })
    });
    let raw = RawSpec {
        spec_version: SPEC_VERSION,
        num_agents: spanned(spec.num_agents()),
        decision_dim: spanned(spec.decision_dim()),
        local_sets: spec
            .local_sets()
            .iter()
            .map(|s| {
                spanned(RawBox {
                    lower: s.lower().iter().copied().collect(),
                    upper: s.upper().iter().copied().collect(),
                })
            })
            .collect(),
        cost: spanned(cost),
        coupling,
        monotonicity: spec.monotonicity().map(|m| spanned(RawMonotonicity { eta: m.eta, lip_f: m.lip_f })),
    };
    toml::to_string(&raw).map_err(|e| Error::Parse { path: "<spec>".into(), message: e.to_string() })
}

pub fn write_spec(spec: &GameSpec, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, spec_to_string(spec)?)?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
}

/// Graph files are TOML with `num_nodes` and `edges = [[0, 1], ...]`.
pub fn load_graph(path: impl AsRef<Path>) -> Result<CommGraph> {
    let path = path.as_ref();
    let text = read(path)?;
    let label = path.display().to_string();
    let raw: RawGraph = toml::from_str(&text).map_err(|e| Anchor { path: &label, text: &text }.parse(e))?;
    CommGraph::from_edges(raw.num_nodes, &raw.edges)
}

pub fn write_graph(graph: &CommGraph, path: impl AsRef<Path>) -> Result<()> {
    let raw = RawGraph { num_nodes: graph.num_nodes(), edges: graph.edges() };
    let text = toml::to_string(&raw).map_err(|e| Error::Parse { path: "<graph>".into(), message: e.to_string() })?;
    fs::write(path, text)?;
    Ok(())
}

/// Columns `iter,fp_residual_phi,kkt_residual,max_constraint_violation,wall_ns`.
pub fn write_trace_csv(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["iter", "fp_residual_phi", "kkt_residual", "max_constraint_violation", "wall_ns"])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Pfb,
    Apa,
    Kns,
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pfb" => Ok(Algorithm::Pfb),
            "apa" => Ok(Algorithm::Apa),
            "kns" => Ok(Algorithm::Kns),
            other => Err(Error::InvalidParameter(format!("unknown algorithm {other:?} (pfb, apa or kns)"))),
        }
    }
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Pfb => "pfb",
            Algorithm::Apa => "apa",
            Algorithm::Kns => "kns",
        }
    }
}

fn default_alpha_fraction() -> f64 {
    0.9
}

fn default_safety() -> f64 {
    0.99
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Theorem1 {
        #[serde(default = "default_alpha_fraction")]
        alpha_fraction: f64,
        #[serde(default = "default_safety")]
        safety: f64,
    },
    EqualSsce {
        #[serde(default = "default_safety")]
        safety: f64,
    },
    /// A single entry in `alphas` is used for every agent.
    Explicit { alphas: Vec<f64>, gamma: f64 },
}

impl Default for PolicySpec {
    fn default() -> Self {
        PolicySpec::Theorem1 { alpha_fraction: default_alpha_fraction(), safety: default_safety() }
    }
}

impl PolicySpec {
    pub fn to_policy(&self, num_agents: usize) -> StepPolicy {
        match self {
            PolicySpec::Theorem1 { alpha_fraction, safety } => {
                StepPolicy::Theorem1 { alpha_fraction: *alpha_fraction, safety: *safety }
            }
            PolicySpec::EqualSsce { safety } => StepPolicy::EqualSsce { safety: *safety },
            PolicySpec::Explicit { alphas, gamma } => StepPolicy::Explicit {
                alphas: if alphas.len() == 1 { vec![alphas[0]; num_agents] } else { alphas.clone() },
                gamma: *gamma,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenShape {
    pub agents: usize,
    pub dim: usize,
    #[serde(default)]
    pub constraints: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GraphSpec {
    Complete,
    Cycle,
    Path,
    /// Seeded by the entry seed.
    RandomRegular { degree: usize },
}

impl GraphSpec {
    pub fn kind(self, seed: u64) -> GraphKind {
        match self {
            GraphSpec::Complete => GraphKind::Complete,
            GraphSpec::Cycle => GraphKind::Cycle,
            GraphSpec::Path => GraphKind::Path,
            GraphSpec::RandomRegular { degree } => GraphKind::RandomRegular { degree, seed },
        }
    }
}

/// One run. Exactly one of `spec` (a path, relative to the manifest) and
/// `generate` must be given; `seed` drives game generation and random graphs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub spec: Option<PathBuf>,
    #[serde(default)]
    pub generate: Option<GenShape>,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub step_policy: PolicySpec,
    #[serde(default)]
    pub seed: u64,
    /// Trace CSV path, relative to the output directory.
    pub output: PathBuf,
    #[serde(default)]
    pub graph: Option<GraphSpec>,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub allow_unsafe_steps: bool,
}

impl ManifestEntry {
    fn label(&self, index: usize) -> String {
        self.name.clone().unwrap_or_else(|| format!("entry{index}"))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    #[serde(default, rename = "entry")]
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative spec paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.spec.is_some() == e.generate.is_some() {
                return Err(Error::InvalidParameter(format!(
                    "manifest entry {i}: give exactly one of `spec` and `generate`"
                )));
            }
            if !seen.insert(&e.output) {
                return Err(Error::InvalidParameter(format!(
                    "manifest entry {i}: output path {} is used twice",
                    e.output.display()
                )));
            }
        }
        Ok(())
    }
}

/// Manifests are TOML with one `[[entry]]` table per run.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<ExperimentManifest> {
    let path = path.as_ref();
    let text = read(path)?;
    let label = path.display().to_string();
    let mut manifest: ExperimentManifest =
        toml::from_str(&text).map_err(|e| Anchor { path: &label, text: &text }.parse(e))?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Converged,
    MaxIters,
    Diverged,
    Error,
}

/// One row of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntrySummary {
    pub name: String,
    pub algorithm: String,
    pub status: EntryStatus,
    pub iterations: Option<usize>,
    pub final_fp_residual: Option<f64>,
    pub final_kkt_residual: Option<f64>,
    pub gamma_max: Option<f64>,
    pub beta: Option<f64>,
    pub theta: Option<f64>,
    pub trace: String,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunSummary {
    pub entries: Vec<EntrySummary>,
}

impl RunSummary {
    pub fn all_converged(&self) -> bool {
        self.entries.iter().all(|e| e.status == EntryStatus::Converged)
    }

    pub fn exit_code(&self) -> i32 {
        if self.all_converged() { 0 } else { 1 }
    }
}

struct Bounds {
    gamma_max: Option<f64>,
    beta: Option<f64>,
    theta: Option<f64>,
}

fn entry_spec(entry: &ManifestEntry, base_dir: &Path) -> Result<GameSpec> {
    match (&entry.spec, &entry.generate) {
        (Some(path), None) => load_spec(base_dir.join(path)),
        (None, Some(shape)) => random_game(&GenParams {
            agents: shape.agents,
            dim: shape.dim,
            constraints: shape.constraints,
            seed: entry.seed,
        }),
        _ => Err(Error::InvalidParameter("give exactly one of `spec` and `generate`".into())),
    }
}

fn solve_entry(entry: &ManifestEntry, spec: &GameSpec) -> Result<(ConvergenceReport, Bounds)> {
    let mut config = SolverConfig { allow_unsafe_steps: entry.allow_unsafe_steps, ..SolverConfig::default() };
    if let Some(max_iters) = entry.max_iters {
        config.max_iters = max_iters;
    }
    if let Some(tol) = entry.tol {
        config.residual_tol = tol;
    }
    let phi = entry.step_policy.to_policy(spec.num_agents()).resolve(spec)?;
    let bounds = match bounds_report(spec, &phi) {
        Ok(b) => Bounds { gamma_max: b.gamma_max, beta: b.beta, theta: b.theta },
        Err(_) => Bounds { gamma_max: None, beta: None, theta: None },
    };
    let report = match entry.algorithm {
        Algorithm::Pfb => pfb_solve(spec, &phi, &config, None)?.1,
        Algorithm::Apa => {
            let tau = phi.gamma();
            if phi.alphas().iter().any(|a| *a != tau) {
                return Err(Error::InvalidParameter(
                    "apa needs equal primal and dual steps; use the equal_ssce policy".into(),
                ));
            }
            apa_solve(spec, &build_apa_matrix(tau, spec.coupling())?, &config, None)?.1
        }
        Algorithm::Kns => {
            let alpha = phi.alphas()[0];
            if phi.alphas().iter().any(|a| *a != alpha) {
                return Err(Error::InvalidParameter("kns uses one step size for all agents".into()));
            }
            let graph = build_graph(entry.graph.unwrap_or(GraphSpec::Cycle).kind(entry.seed), spec.num_agents())?;
            let (_, kns) = kns_solve(spec, &graph, alpha, &config, EstimateConvention::TotalAtEstimate, None, None)?;
            kns.report
        }
    };
    Ok((report, bounds))
}

fn run_entry(index: usize, entry: &ManifestEntry, base_dir: &Path, out_dir: &Path) -> Result<EntrySummary> {
    let name = entry.label(index);
    let trace_path = out_dir.join(&entry.output);
    let mut summary = EntrySummary {
        name: name.clone(),
        algorithm: entry.algorithm.name().to_string(),
        status: EntryStatus::Error,
        iterations: None,
        final_fp_residual: None,
        final_kkt_residual: None,
        gamma_max: None,
        beta: None,
        theta: None,
        trace: entry.output.display().to_string(),
        message: String::new(),
    };
    match entry_spec(entry, base_dir).and_then(|spec| solve_entry(entry, &spec)) {
        Ok((report, bounds)) => {
            if let Some(parent) = trace_path.parent() {
                fs::create_dir_all(parent)?;
            }
            write_trace_csv(&report.trace, &trace_path)?;
            summary.status = if report.converged { EntryStatus::Converged } else { EntryStatus::MaxIters };
            summary.iterations = Some(report.iterations);
            summary.final_fp_residual = Some(report.final_fp_residual);
            summary.final_kkt_residual = Some(report.final_kkt_residual);
            summary.gamma_max = bounds.gamma_max;
            summary.beta = bounds.beta;
            summary.theta = bounds.theta;
        }
        Err(Error::Io(e)) => return Err(Error::Io(e)),
        Err(e) => {
            warn!("{name}: {e}");
            summary.status = match e {
                Error::Divergence { .. } => EntryStatus::Diverged,
                _ => EntryStatus::Error,
            };
            summary.message = e.to_string();
        }
    }
    Ok(summary)
}

/// Run every entry (in parallel), write one trace CSV per entry under
/// `out_dir` and a `summary.csv` listing them in manifest order. Entry
/// failures are recorded in the summary; I/O failures abort.
pub fn run_experiments(manifest: &ExperimentManifest, out_dir: impl AsRef<Path>) -> Result<RunSummary> {
    manifest.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir)?;
    let entries = manifest
        .entries
        .par_iter()
        .enumerate()
        .map(|(i, e)| run_entry(i, e, &manifest.base_dir, out_dir))
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(out_dir.join("summary.csv"))?;
    if entries.is_empty() {
        w.write_record([
            "name",
            "algorithm",
            "status",
            "iterations",
            "final_fp_residual",
            "final_kkt_residual",
            "gamma_max",
            "beta",
            "theta",
            "trace",
            "message",
        ])?;
    }
    for e in &entries {
        w.serialize(e)?;
    }
    w.flush()?;
    let summary = RunSummary { entries };
    info!(
        "{} of {} entries converged",
        summary.entries.iter().filter(|e| e.status == EntryStatus::Converged).count(),
        summary.entries.len()
    );
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{pseudo_gradient, GradientFn};
    use std::sync::Arc;

    const MINIMAL: &str = r#"
spec_version = 1
num_agents = 1
decision_dim = 1

[[local_sets]]
lower = [-10.0]
upper = [10.0]

[cost]
type = "quadratic"
q = [1.0]
c = [[0.0]]
d = [[-3.0]]
"#;

    const COUPLED: &str = r#"spec_version = 1
num_agents = 2
decision_dim = 1

[[local_sets]]
lower = [-1.0]
upper = [1.0]

[[local_sets]]
lower = [-1.0]
upper = [1.0]

[cost]
type = "quadratic"
q = [1.0, 1.0]
c = [[0.5]]
d = [[-1.0], [-1.0]]

[coupling]
A_blocks = [
    [[1.0]],
    [[1.0], [2.0]],
]
b = [0.5]
"#;

    #[test]
    fn minimal_spec_loads() {
        let spec = spec_from_str(MINIMAL, "minimal.toml").unwrap();
        assert_eq!((spec.num_agents(), spec.decision_dim(), spec.num_constraints()), (1, 1, 0));
    }

    #[test]
    fn block_row_mismatch_names_agent_and_line() {
        let err = spec_from_str(COUPLED, "coupled.toml").unwrap_err();
        match &err {
            Error::SpecDimension { line, message, .. } => {
                assert!(message.contains("agent 1"), "{message}");
                assert_eq!(*line, Some(22));
            }
            other => panic!("wrong error {other:?}"),
        }
        assert!(err.to_string().starts_with("coupled.toml:22:"));
    }

    #[test]
    fn version_and_parse_errors_are_distinct() {
        let wrong = MINIMAL.replace("spec_version = 1", "spec_version = 7");
        assert!(matches!(spec_from_str(&wrong, "x"), Err(Error::Version { found: 7, supported: 1, .. })));
        let broken = MINIMAL.replace("q = [1.0]", "q = [1.0");
        assert!(matches!(spec_from_str(&broken, "x"), Err(Error::Parse { .. })));
        let missing = MINIMAL.replace("spec_version = 1", "");
        assert!(matches!(spec_from_str(&missing, "x"), Err(Error::Parse { .. })));
        let unknown = MINIMAL.replace("decision_dim = 1", "decision_dim = 1\ncolour = 2");
        assert!(matches!(spec_from_str(&unknown, "x"), Err(Error::Parse { .. })));
    }

    #[test]
    fn external_cost_needs_an_oracle() {
        let text = MINIMAL.replace("type = \"quadratic\"\nq = [1.0]\nc = [[0.0]]\nd = [[-3.0]]", "type = \"external\"");
        assert!(matches!(spec_from_str(&text, "x"), Err(Error::ExternalCost)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ext.toml");
        fs::write(&path, &text).unwrap();
        let grad: GradientFn = Arc::new(|_, x, _| x.map(|v| v - 3.0));
        let spec = load_spec_with_oracle(&path, OracleCost { total_gradient: grad, partial_gradient: None, cost: None }).unwrap();
        let g = pseudo_gradient(&DVector::from_vec(vec![1.0]), &spec).unwrap();
        assert_eq!(g[0], -2.0);
        assert!(spec_to_string(&spec).unwrap().contains("external"));
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for seed in 0..20 {
            let spec = random_game(&GenParams { agents: 1 + seed as usize % 4, dim: 1 + seed as usize % 3, constraints: seed as usize % 3, seed })
                .unwrap();
            let text = spec_to_string(&spec).unwrap();
            let back = spec_from_str(&text, "rt").unwrap();
            assert_eq!(spec_to_string(&back).unwrap(), text);
            assert_eq!(back.stacked_bounds(), spec.stacked_bounds());
            assert_eq!(back.coupling(), spec.coupling());
            assert_eq!(back.monotonicity(), spec.monotonicity());
            match (back.cost(), spec.cost()) {
                (CostModel::Quadratic(a), CostModel::Quadratic(b)) => assert_eq!(a, b),
                _ => panic!("cost model changed"),
            }
        }
        let unbounded = MINIMAL.replace("upper = [10.0]", "upper = [inf]");
        let spec = spec_from_str(&unbounded, "x").unwrap();
        let back = spec_from_str(&spec_to_string(&spec).unwrap(), "x").unwrap();
        assert_eq!(back.local_sets()[0].upper()[0], f64::INFINITY);
        let odd = MINIMAL.replace("d = [[-3.0]]", "d = [[0.1e-300]]").replace("q = [1.0]", "q = [0.30000000000000004]");
        let spec = spec_from_str(&odd, "x").unwrap();
        let back = spec_from_str(&spec_to_string(&spec).unwrap(), "x").unwrap();
        match back.cost() {
            CostModel::Quadratic(qc) => {
                assert_eq!(qc.q[0].to_bits(), 0.30000000000000004f64.to_bits());
                assert_eq!(qc.d[0][0].to_bits(), 0.1e-300f64.to_bits());
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn graph_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.toml");
        let g = build_graph(GraphKind::Cycle, 5).unwrap();
        write_graph(&g, &path).unwrap();
        assert_eq!(load_graph(&path).unwrap(), g);
        fs::write(&path, "num_nodes = 2\nedges = [[0, 2]]\n").unwrap();
        assert!(load_graph(&path).is_err());
    }

    #[test]
    fn trace_csv_header_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let rows = vec![TraceRow { iter: 0, fp_residual_phi: 0.5, kkt_residual: 1e-3, max_constraint_violation: 0.0, wall_ns: 12 }];
        write_trace_csv(&rows, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "iter,fp_residual_phi,kkt_residual,max_constraint_violation,wall_ns");
        assert_eq!(read_trace_csv(&path).unwrap(), rows);
    }

    fn entry(name: &str, seed: u64, algorithm: Algorithm) -> ManifestEntry {
        ManifestEntry {
            name: Some(name.into()),
            spec: None,
            generate: Some(GenShape { agents: 3, dim: 1, constraints: if algorithm == Algorithm::Kns { 0 } else { 2 } }),
            algorithm,
            step_policy: PolicySpec::default(),
            seed,
            output: PathBuf::from(format!("{name}.csv")),
            graph: None,
            max_iters: None,
            tol: None,
            allow_unsafe_steps: false,
        }
    }

    #[test]
    fn manifest_of_three_games() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = ExperimentManifest {
            entries: vec![entry("a", 1, Algorithm::Pfb), entry("b", 2, Algorithm::Pfb), entry("c", 3, Algorithm::Kns)],
            base_dir: PathBuf::new(),
        };
        let summary = run_experiments(&manifest, dir.path()).unwrap();
        assert_eq!(summary.exit_code(), 0, "{summary:?}");
        for name in ["a", "b", "c"] {
            assert!(dir.path().join(format!("{name}.csv")).exists());
        }
        let text = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(summary.entries[0].gamma_max.is_some());
    }

    #[test]
    fn diverging_entry_is_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = entry("bad", 4, Algorithm::Pfb);
        bad.step_policy = PolicySpec::Explicit { alphas: vec![1e6], gamma: 1e6 };
        bad.allow_unsafe_steps = true;
        bad.max_iters = Some(2_000);
        let manifest = ExperimentManifest { entries: vec![entry("ok", 5, Algorithm::Pfb), bad], base_dir: PathBuf::new() };
        let summary = run_experiments(&manifest, dir.path()).unwrap();
        assert_ne!(summary.exit_code(), 0);
        assert_eq!(summary.entries[0].status, EntryStatus::Converged);
        assert_ne!(summary.entries[1].status, EntryStatus::Converged);
    }

    #[test]
    fn empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let summary = run_experiments(&ExperimentManifest::default(), dir.path()).unwrap();
        assert_eq!(summary.exit_code(), 0);
        assert!(summary.entries.is_empty());
        assert!(dir.path().join("summary.csv").exists());
    }

    #[test]
    fn manifest_file_parsing_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("g.toml"), MINIMAL).unwrap();
        let path = dir.path().join("m.toml");
        fs::write(
            &path,
            r#"
[[entry]]
spec = "g.toml"
algorithm = "apa"
step_policy = { kind = "equal_ssce" }
output = "one.csv"

[[entry]]
generate = { agents = 2, dim = 1 }
algorithm = "pfb"
step_policy = { kind = "explicit", alphas = [0.1], gamma = 0.1 }
seed = 3
output = "two.csv"
"#,
        )
        .unwrap();
        let manifest = load_manifest(&path).unwrap();
        assert_eq!(manifest.entries.len(), 2);
        let summary = run_experiments(&manifest, dir.path().join("out")).unwrap();
        assert!(summary.all_converged(), "{summary:?}");

        let dup = "[[entry]]\nspec = \"g.toml\"\nalgorithm = \"pfb\"\noutput = \"x.csv\"\n".repeat(2);
        fs::write(&path, dup).unwrap();
        assert!(matches!(load_manifest(&path), Err(Error::InvalidParameter(_))));
    }
}

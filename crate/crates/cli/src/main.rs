use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::LevelFilter;

use gne::error::{Error, Result};
use gne::game::{EstimateConvention, GameSpec, PrimalDualPoint};
use gne::generate::{random_game, GenParams};
use gne::io::{load_graph, load_manifest, load_spec, run_experiments, spec_to_string, write_spec, write_trace_csv, Algorithm};
use gne::network::{build_graph, CommGraph, GraphKind};
use gne::preconditioner::{bounds_report, build_apa_matrix, PreconditionerS, StepPolicy};
use gne::report::ConvergenceReport;
use gne::solvers::{apa_solve, kns_solve, pfb_solve, SolverConfig};
use gne::verification::{
    certify_averagedness, certify_forward_cocoercivity, check_kkt, estimate_constants, oracle_vgne, zer_fix_equivalence_report,
};

#[derive(Parser)]
#[command(name = "gne", version, about = "Variational equilibria of aggregative games with coupling constraints")]
struct Cli {
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: LevelFilter,

    /// Base directory for relative output paths.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a game and print the equilibrium.
    Solve(SolveArgs),
    /// Run the oracle and the numerical certificates on a game.
    Verify(VerifyArgs),
    /// Print step-size bounds and derived constants.
    Bounds(BoundsArgs),
    /// Run an experiment manifest.
    Bench(BenchArgs),
    /// Write a random game with strictly feasible coupling constraints.
    Gen(GenArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgorithmArg {
    Pfb,
    Apa,
    Kns,
}

impl From<AlgorithmArg> for Algorithm {
    fn from(a: AlgorithmArg) -> Self {
        match a {
            AlgorithmArg::Pfb => Algorithm::Pfb,
            AlgorithmArg::Apa => Algorithm::Apa,
            AlgorithmArg::Kns => Algorithm::Kns,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphKindArg {
    Complete,
    Cycle,
    Path,
    RandomRegular,
}

#[derive(Args)]
struct StepArgs {
    /// Primal step for every agent. Requires --gamma unless the game has no
    /// coupling constraints.
    #[arg(long)]
    alpha: Option<f64>,
    /// Dual step.
    #[arg(long)]
    gamma: Option<f64>,
    /// Use equal primal and dual steps below the equal-step bound.
    #[arg(long, conflicts_with_all = ["alpha", "gamma"])]
    equal_steps: bool,
    /// Fraction of the dual (or equal-step) bound to use.
    #[arg(long, default_value_t = 0.99)]
    safety: f64,
    /// Fraction of 2η/ℓ² used as primal step.
    #[arg(long, default_value_t = 0.9)]
    alpha_fraction: f64,
}

impl StepArgs {
    fn policy(&self, spec: &GameSpec) -> Result<StepPolicy> {
        if self.equal_steps {
            return Ok(StepPolicy::EqualSsce { safety: self.safety });
        }
        match (self.alpha, self.gamma) {
            (None, None) => Ok(StepPolicy::Theorem1 { alpha_fraction: self.alpha_fraction, safety: self.safety }),
            (Some(alpha), gamma) => {
                let gamma = match gamma {
                    Some(g) => g,
                    None if spec.num_constraints() == 0 => 1.0,
                    None => return Err(Error::InvalidParameter("--alpha needs --gamma when there are coupling constraints".into())),
                };
                Ok(StepPolicy::Explicit { alphas: vec![alpha; spec.num_agents()], gamma })
            }
            (None, Some(_)) => Err(Error::InvalidParameter("--gamma needs --alpha".into())),
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, value_enum, default_value = "pfb")]
    algorithm: AlgorithmArg,
    /// Graph file (TOML with num_nodes and edges), kns only.
    #[arg(long, conflicts_with = "graph_kind")]
    graph: Option<PathBuf>,
    /// Built-in graph, kns only. Defaults to a cycle.
    #[arg(long, value_enum)]
    graph_kind: Option<GraphKindArg>,
    #[arg(long, default_value_t = 2)]
    degree: usize,
    #[arg(long, default_value_t = 0)]
    graph_seed: u64,
    /// Fixed-point residual tolerance.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 200_000)]
    max_iters: usize,
    /// Write the iteration trace to this CSV file.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    trace_every: usize,
    /// Accept step sizes outside the convergence guarantees.
    #[arg(long = "unsafe")]
    allow_unsafe: bool,
    #[command(flatten)]
    steps: StepArgs,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Sampled pairs per certificate.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[command(flatten)]
    steps: StepArgs,
}

#[derive(Args)]
struct BoundsArgs {
    #[arg(long)]
    spec: PathBuf,
    #[command(flatten)]
    steps: StepArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Experiment manifest (TOML with [[entry]] tables).
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    agents: usize,
    #[arg(long)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    constraints: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; the spec is printed when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve(base: Option<&Path>, path: &Path) -> PathBuf {
    match base {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

fn format_vec(v: &gne::nalgebra::DVector<f64>) -> String {
    let items: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
    format!("[{}]", items.join(", "))
}

fn print_report(report: &ConvergenceReport) {
    let status = if report.converged { "converged" } else { "max-iters" };
    println!("status = \"{status}\"");
    println!("iterations = {}", report.iterations);
    println!("final_fp_residual = {:e}", report.final_fp_residual);
    println!("final_kkt_residual = {:e}", report.final_kkt_residual);
    println!("alphas = {:?}", report.config_echo.alphas);
    if let Some(gamma) = report.config_echo.gamma {
        println!("gamma = {gamma}");
    }
}

fn comm_graph(args: &SolveArgs, num_agents: usize) -> Result<CommGraph> {
    if let Some(path) = &args.graph {
        return load_graph(path);
    }
    let kind = match args.graph_kind.unwrap_or(GraphKindArg::Cycle) {
        GraphKindArg::Complete => GraphKind::Complete,
        GraphKindArg::Cycle => GraphKind::Cycle,
        GraphKindArg::Path => GraphKind::Path,
        GraphKindArg::RandomRegular => GraphKind::RandomRegular { degree: args.degree, seed: args.graph_seed },
    };
    build_graph(kind, num_agents)
}

fn solve(args: &SolveArgs, out: Option<&Path>) -> Result<ExitCode> {
    let spec = load_spec(&args.spec)?;
    let config = SolverConfig {
        max_iters: args.max_iters,
        residual_tol: args.tol,
        trace_every: args.trace_every,
        allow_unsafe_steps: args.allow_unsafe,
        ..SolverConfig::default()
    };
    let phi: PreconditionerS = args.steps.policy(&spec)?.resolve(&spec)?;
    let (point, report) = match Algorithm::from(args.algorithm) {
        Algorithm::Pfb => pfb_solve(&spec, &phi, &config, None)?,
        Algorithm::Apa => {
            let tau = phi.gamma();
            if phi.alphas().iter().any(|a| *a != tau) {
                return Err(Error::InvalidParameter("apa needs equal steps: pass --equal-steps or --alpha = --gamma".into()));
            }
            apa_solve(&spec, &build_apa_matrix(tau, spec.coupling())?, &config, None)?
        }
        Algorithm::Kns => {
            let graph = comm_graph(args, spec.num_agents())?;
            let (x, kns) = kns_solve(&spec, &graph, phi.alphas()[0], &config, EstimateConvention::TotalAtEstimate, None, None)?;
            let max_gap = kns.disagreement.iter().copied().fold(0.0, f64::max);
            println!("max_estimate_disagreement = {max_gap:e}");
            (PrimalDualPoint::new(x, gne::nalgebra::DVector::zeros(0)), kns.report)
        }
    };
    print_report(&report);
    println!("x = {}", format_vec(&point.x));
    println!("lambda = {}", format_vec(&point.lambda));
    if let Some(trace) = &args.trace {
        let path = resolve(out, trace);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_trace_csv(&report.trace, &path)?;
    }
    Ok(if report.converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn verify(args: &VerifyArgs) -> Result<ExitCode> {
    let spec = load_spec(&args.spec)?;
    let phi = args.steps.policy(&spec)?.resolve(&spec)?;
    let mut ok = true;
    let star = oracle_vgne(&spec)?;
    let kkt = check_kkt(&star, &spec)?;
    println!("oracle_x = {}", format_vec(&star.x));
    println!("oracle_mu = {}", format_vec(&star.lambda));
    println!("oracle_kkt = {:e}", kkt.worst());
    ok &= kkt.passes(args.tol);
    if spec.is_compact() {
        match estimate_constants(&spec, args.samples, args.seed) {
            Ok(c) => println!("sampled_eta = {}\nsampled_lip = {}", c.eta_hat, c.lip_hat),
            Err(e) => println!("# sampled constants unavailable: {e}"),
        }
    }
    for cert in certify_forward_cocoercivity(&spec, args.samples, args.seed)? {
        println!("# {}: worst margin {:e}", cert.name, cert.worst_margin);
        ok &= cert.holds(1e-9);
    }
    let bounds = bounds_report(&spec, &phi)?;
    match bounds.theta {
        Some(theta) => {
            let cert = certify_averagedness(&spec, &phi, theta, args.samples, args.seed.wrapping_add(1))?;
            println!("# {} (theta = {theta}): worst margin {:e}", cert.name, cert.worst_margin);
            ok &= cert.holds(1e-9);
        }
        None => println!("# beta <= 1/2 for these steps; averagedness not certified"),
    }
    let eq = zer_fix_equivalence_report(&spec, &phi, args.tol)?;
    println!(
        "# fixed point at oracle: displacement {:e}; near-fixed point residual {:e}",
        eq.oracle_displacement, eq.near_fixed_residual
    );
    ok &= eq.passes();
    println!("verified = {ok}");
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn bounds(args: &BoundsArgs) -> Result<ExitCode> {
    let spec = load_spec(&args.spec)?;
    let phi = args.steps.policy(&spec)?.resolve(&spec)?;
    let b = bounds_report(&spec, &phi)?;
    let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
    println!("eta = {}", b.eta);
    println!("lip_f = {}", b.lip_f);
    println!("coupling_norm = {}", b.coupling_norm);
    println!("alpha_max = {}", b.alpha_max);
    println!("gamma = {}", b.gamma);
    println!("gamma_max = {}", opt(b.gamma_max));
    println!("equal_step_bound = {}", b.equal_step_bound);
    println!("beta = {}", opt(b.beta));
    println!("theta = {}", opt(b.theta));
    Ok(ExitCode::SUCCESS)
}

fn bench(args: &BenchArgs, out: Option<&Path>) -> Result<ExitCode> {
    let manifest = load_manifest(&args.manifest)?;
    let out_dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let summary = run_experiments(&manifest, &out_dir)?;
    for e in &summary.entries {
        println!("{}\t{}\t{:?}\t{}", e.name, e.algorithm, e.status, e.iterations.map_or("-".into(), |i| i.to_string()));
    }
    Ok(ExitCode::from(summary.exit_code() as u8))
}

fn gen(args: &GenArgs, out: Option<&Path>) -> Result<ExitCode> {
    let spec = random_game(&GenParams { agents: args.agents, dim: args.dim, constraints: args.constraints, seed: args.seed })?;
    match &args.out {
        Some(path) => {
            let path = resolve(out, path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            write_spec(&spec, path)?
        }
        None => print!("{}", spec_to_string(&spec)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    let out = cli.output_dir.as_deref();
    let result = match &cli.command {
        Command::Solve(args) => solve(args, out),
        Command::Verify(args) => verify(args),
        Command::Bounds(args) => bounds(args),
        Command::Bench(args) => bench(args, out),
        Command::Gen(args) => gen(args, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

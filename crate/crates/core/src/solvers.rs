//! Fixed-point iterations: the preconditioned forward-backward method, its
//! asymmetric-projection form and the distributed estimate-mixing iteration.

use std::time::Instant;

use log::{debug, info, warn};
use nalgebra::DVector;

use crate::error::{check_len, Error, Result};
use crate::game::{aggregate, extended_pseudo_gradient, feasibility_check, pseudo_gradient, EstimateConvention, GameSpec, PrimalDualPoint};
use crate::network::{mix, CommGraph};
use crate::operators::{eval_t_residual, project_nonneg};
use crate::preconditioner::{check_positive_definite, gamma_max, ApaMatrix, PreconditionerS};
use crate::report::{ConfigEcho, ConvergenceReport, TraceRow};
use crate::verification::{check_fb_inclusion, kns_splitting, pfb_splitting, FbSplitting};

/// Band used by the optional inclusion check performed during a solve.
const INCLUSION_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Tolerance on the fixed-point residual `‖ω^{k+1} − ω^k‖_Φ`.
    pub residual_tol: f64,
    /// Tolerance on the natural KKT residual at termination.
    pub kkt_tol: f64,
    pub trace_every: usize,
    /// Validate every iterate pair against the forward-backward inclusion.
    pub record_inclusion_checks: bool,
    /// Skip the step-size validation against the convergence bounds.
    pub allow_unsafe_steps: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 200_000,
            residual_tol: 1e-8,
            kkt_tol: 1e-6,
            trace_every: 10,
            record_inclusion_checks: false,
            allow_unsafe_steps: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.trace_every == 0 {
            return Err(Error::InvalidParameter("max_iters and trace_every must be at least 1".into()));
        }
        if !(self.residual_tol > 0.0 && self.kkt_tol > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        Ok(())
    }

    fn echo(&self, algorithm: &str, alphas: Vec<f64>, gamma: Option<f64>) -> ConfigEcho {
        ConfigEcho {
            algorithm: algorithm.to_string(),
            max_iters: self.max_iters,
            residual_tol: self.residual_tol,
            kkt_tol: self.kkt_tol,
            trace_every: self.trace_every,
            alphas,
            gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub omega: PrimalDualPoint,
    pub iteration: usize,
    /// Metric length of the last step; `+∞` before the first step.
    pub last_residual: f64,
}

impl SolverState {
    pub fn new(omega: PrimalDualPoint) -> Self {
        Self {
            omega,
            iteration: 0,
            last_residual: f64::INFINITY,
        }
    }
}

fn check_iterate(values: &DVector<f64>, iteration: usize, what: &str) -> Result<()> {
    if let Some(j) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            iteration,
            detail: format!("{what}[{j}] = {}", values[j]),
        });
    }
    Ok(())
}

/// One sweep of
///
/// ```text
/// x⁺ = proj_Ω[x − α(F(x) + Aᵀλ)]
/// λ⁺ = proj_{≥0}[λ + γ(2Ax⁺ − Ax − b)]
/// ```
///
/// The dual update uses the fresh `x⁺`.
pub fn pfb_step(state: &SolverState, spec: &GameSpec, phi: &PreconditionerS) -> Result<SolverState> {
    let omega = &state.omega;
    omega.check_dims(spec)?;
    check_len("preconditioner primal block", spec.primal_dim(), phi.primal_dim())?;
    check_len("preconditioner dual block", spec.num_constraints(), phi.dual_dim())?;
    let iteration = state.iteration + 1;
    let a = spec.coupling().matrix();

    let grad = pseudo_gradient(&omega.x, spec).map_err(|e| divergence_or(e, iteration))? + a.tr_mul(&omega.lambda);
    let mut x = DVector::from_fn(omega.x.len(), |j, _| omega.x[j] - phi.alpha_at(j) * grad[j]);
    spec.project_omega_in_place(&mut x);
    check_iterate(&x, iteration, "x")?;

    let ax_new = a * &x;
    let ax_old = a * &omega.x;
    let lambda = project_nonneg(&(&omega.lambda + (ax_new * 2.0 - ax_old - spec.coupling().b()) * phi.gamma()));
    check_iterate(&lambda, iteration, "lambda")?;

    let last_residual = phi.norm(&(&x - &omega.x), &(&lambda - &omega.lambda));
    Ok(SolverState {
        omega: PrimalDualPoint::new(x, lambda),
        iteration,
        last_residual,
    })
}

fn divergence_or(e: Error, iteration: usize) -> Error {
    match e {
        Error::NonFinite { what, index } => Error::Divergence {
            iteration,
            detail: format!("{what}[{index}] is not finite"),
        },
        other => other,
    }
}

/// One asymmetric-projection step: the solution of the linearized
/// variational inequality with operator `R(ω^k) + D(ω − ω^k)` over
/// `Ω × ℝᵐ≥0`, obtained by block forward substitution through the
/// lower-triangular `D`.
pub fn apa_step(state: &SolverState, spec: &GameSpec, d: &ApaMatrix) -> Result<SolverState> {
    let omega = &state.omega;
    omega.check_dims(spec)?;
    let a = d.coupling_matrix();
    check_len("APA matrix primal block", spec.primal_dim(), a.ncols())?;
    check_len("APA matrix dual block", spec.num_constraints(), a.nrows())?;
    let iteration = state.iteration + 1;
    let tau = d.tau();

    // R(ω) = col(F(x) + Aᵀλ, b − Ax)
    let r_x = pseudo_gradient(&omega.x, spec).map_err(|e| divergence_or(e, iteration))? + a.tr_mul(&omega.lambda);
    let r_l = spec.coupling().b() - a * &omega.x;

    let mut x = &omega.x - r_x * tau;
    spec.project_omega_in_place(&mut x);
    check_iterate(&x, iteration, "x")?;
    let dx = &x - &omega.x;
    // Second block row of D: −2A dx + τ⁻¹ dλ.
    let lambda = project_nonneg(&(&omega.lambda - (r_l - a * &dx * 2.0) * tau));
    check_iterate(&lambda, iteration, "lambda")?;

    let dl = &lambda - &omega.lambda;
    let quad = (dx.norm_squared() + dl.norm_squared()) / tau - 2.0 * dl.dot(&(a * &dx));
    Ok(SolverState {
        omega: PrimalDualPoint::new(x, lambda),
        iteration,
        last_residual: quad.max(0.0).sqrt(),
    })
}

fn require_compact(spec: &GameSpec) -> Result<()> {
    if !spec.is_compact() {
        return Err(Error::InvalidParameter("solvers require bounded local sets".into()));
    }
    Ok(())
}

/// Refuse step sizes outside the convergence guarantees unless overridden.
pub fn validate_steps(spec: &GameSpec, phi: &PreconditionerS) -> Result<()> {
    if !check_positive_definite(phi).sufficient_condition {
        return Err(Error::StepSize(format!(
            "gamma = {} violates gamma < 1/(|A|^2 alpha_max) = {}",
            phi.gamma(),
            1.0 / (phi.coupling_norm().powi(2) * phi.alpha_max())
        )));
    }
    if let Some(mono) = spec.resolved_monotonicity() {
        let gmax = gamma_max(phi.alphas(), mono.eta, mono.lip_f, phi.coupling_norm())?;
        if spec.num_constraints() > 0 && phi.gamma() >= gmax {
            return Err(Error::StepSize(format!("gamma = {} is not below gamma_max = {gmax}", phi.gamma())));
        }
    }
    Ok(())
}

struct Tracer {
    start: Instant,
    every: usize,
    rows: Vec<TraceRow>,
}

impl Tracer {
    fn new(every: usize) -> Self {
        Self {
            start: Instant::now(),
            every,
            rows: Vec::new(),
        }
    }

    fn elapsed(&self) -> u64 {
        self.start.elapsed().as_nanos() as u64
    }

    fn due(&self, iter: usize, last: bool) -> bool {
        (iter.is_multiple_of(self.every) || last) && self.rows.last().is_none_or(|r| r.iter < iter)
    }

    fn push(&mut self, iter: usize, fp: f64, kkt: f64, violation: f64) {
        let wall_ns = self.elapsed();
        self.rows.push(TraceRow {
            iter,
            fp_residual_phi: fp,
            kkt_residual: kkt,
            max_constraint_violation: violation,
            wall_ns,
        });
    }
}

fn run_primal_dual<S>(
    spec: &GameSpec,
    config: &SolverConfig,
    omega0: Option<PrimalDualPoint>,
    echo: ConfigEcho,
    splitting: Option<FbSplitting<'_>>,
    metric_is_pd: bool,
    step: S,
) -> Result<(PrimalDualPoint, ConvergenceReport)>
where
    S: Fn(&SolverState) -> Result<SolverState>,
{
    config.validate()?;
    require_compact(spec)?;
    let omega0 = omega0.unwrap_or_else(|| PrimalDualPoint::default_start(spec));
    omega0.check_dims(spec)?;
    let mut tracer = Tracer::new(config.trace_every);
    let mut state = SolverState::new(omega0);
    let (mut checks, mut failures) = (0, 0);
    let mut converged = false;
    if !metric_is_pd {
        warn!("preconditioner is not positive definite; using the Euclidean step length as residual");
    }

    while state.iteration < config.max_iters {
        let mut next = step(&state)?;
        if !metric_is_pd {
            next.last_residual = (next.omega.stacked() - state.omega.stacked()).norm();
        }
        if let Some(split) = &splitting {
            checks += 1;
            let ok = check_fb_inclusion(&state.omega.stacked(), &next.omega.stacked(), split, INCLUSION_TOL)?;
            if !ok {
                failures += 1;
                warn!("iteration {}: forward-backward inclusion violated", next.iteration);
            }
        }
        state = next;
        converged = state.last_residual < config.residual_tol;
        let last = converged || state.iteration == config.max_iters;
        if tracer.due(state.iteration, last) {
            let kkt = eval_t_residual(&state.omega, spec)?;
            let violation = feasibility_check(&state.omega, spec, 0.0).max_violation();
            tracer.push(state.iteration, state.last_residual, kkt, violation);
        }
        if converged {
            break;
        }
    }

    let final_kkt = eval_t_residual(&state.omega, spec)?;
    if converged {
        info!("{} converged after {} iterations (kkt residual {final_kkt:e})", echo.algorithm, state.iteration);
    } else {
        warn!("{} stopped at max_iters = {} (fp residual {:e})", echo.algorithm, config.max_iters, state.last_residual);
    }
    let report = ConvergenceReport {
        converged,
        kkt_met: final_kkt <= config.kkt_tol,
        iterations: state.iteration,
        final_fp_residual: state.last_residual,
        final_kkt_residual: final_kkt,
        wall_ns: tracer.elapsed(),
        trace: tracer.rows,
        config_echo: echo,
        inclusion_checks: checks,
        inclusion_failures: failures,
    };
    Ok((state.omega, report))
}

/// Iterate [`pfb_step`] until the `Φ_s`-weighted step length drops below
/// `residual_tol` or `max_iters` is reached. Running out of iterations is
/// reported through `converged = false`, not as an error. With unsafe steps
/// `Φ_s` may be indefinite; the Euclidean step length is used then.
pub fn pfb_solve(
    spec: &GameSpec,
    phi: &PreconditionerS,
    config: &SolverConfig,
    omega0: Option<PrimalDualPoint>,
) -> Result<(PrimalDualPoint, ConvergenceReport)> {
    if !config.allow_unsafe_steps {
        validate_steps(spec, phi)?;
    }
    let echo = config.echo("pfb", phi.alphas().to_vec(), Some(phi.gamma()));
    let splitting = config.record_inclusion_checks.then(|| pfb_splitting(spec, phi));
    let pd = check_positive_definite(phi).cholesky_succeeds;
    run_primal_dual(spec, config, omega0, echo, splitting, pd, |s| pfb_step(s, spec, phi))
}

/// [`apa_step`] iterated to convergence; the metric is the symmetric part of `D`.
pub fn apa_solve(
    spec: &GameSpec,
    d: &ApaMatrix,
    config: &SolverConfig,
    omega0: Option<PrimalDualPoint>,
) -> Result<(PrimalDualPoint, ConvergenceReport)> {
    let phi = crate::preconditioner::build_phi_s(&vec![d.tau(); spec.num_agents()], d.tau(), spec.coupling())?;
    if !config.allow_unsafe_steps {
        validate_steps(spec, &phi)?;
    }
    let echo = config.echo("apa", vec![d.tau(); spec.num_agents()], Some(d.tau()));
    let splitting = config.record_inclusion_checks.then(|| pfb_splitting(spec, &phi));
    let pd = check_positive_definite(&phi).cholesky_succeeds;
    run_primal_dual(spec, config, omega0, echo, splitting, pd, |s| apa_step(s, spec, d))
}

/// State of the distributed iteration: decisions, raw estimates `v` and
/// mixed estimates `σ̂ = (W ⊗ I_n) v`.
#[derive(Clone, Debug, PartialEq)]
pub struct KnsState {
    pub x: DVector<f64>,
    pub v: DVector<f64>,
    pub sigma_hat: DVector<f64>,
    pub iteration: usize,
}

impl KnsState {
    pub fn new(x: DVector<f64>, v: DVector<f64>, graph: &CommGraph, n: usize) -> Result<Self> {
        check_len("initial estimates", x.len(), v.len())?;
        let sigma_hat = mix(&v, graph, n)?;
        Ok(Self { x, v, sigma_hat, iteration: 0 })
    }
}

fn check_kns_inputs(spec: &GameSpec, graph: &CommGraph, alpha: f64) -> Result<()> {
    if spec.num_constraints() > 0 {
        return Err(Error::Unsupported(
            "the distributed iteration handles games without coupling constraints only".into(),
        ));
    }
    check_len("graph nodes", spec.num_agents(), graph.num_nodes())?;
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidParameter(format!("alpha = {alpha} must be positive")));
    }
    Ok(())
}

/// One round of
///
/// ```text
/// x⁺ = proj_Ω[x − α F_σ(x, σ̂)]
/// v⁺ = σ̂ + x⁺ − x
/// σ̂⁺ = (W ⊗ I_n) v⁺
/// ```
///
/// The estimate update has no projection (it lives in all of `ℝ^{nN}`).
pub fn kns_step(
    state: &KnsState,
    spec: &GameSpec,
    graph: &CommGraph,
    alpha: f64,
    convention: EstimateConvention,
) -> Result<KnsState> {
    check_kns_inputs(spec, graph, alpha)?;
    let iteration = state.iteration + 1;
    let grad = extended_pseudo_gradient(&state.x, &state.sigma_hat, spec, convention)
        .map_err(|e| divergence_or(e, iteration))?;
    let mut x = &state.x - grad * alpha;
    spec.project_omega_in_place(&mut x);
    check_iterate(&x, iteration, "x")?;
    let v = &state.sigma_hat + &x - &state.x;
    check_iterate(&v, iteration, "v")?;
    let sigma_hat = mix(&v, graph, spec.decision_dim())?;
    Ok(KnsState { x, v, sigma_hat, iteration })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnsReport {
    pub report: ConvergenceReport,
    /// `‖σ̂_i − σ(x)‖` per agent at the final iterate.
    pub disagreement: Vec<f64>,
    pub final_state: KnsState,
}

/// Run the distributed iteration. The residual is the Euclidean length of
/// the step in `col(x, v)`. `v0` defaults to `x0`, `x0` to `proj_Ω(0)`.
#[allow(clippy::too_many_arguments)]
pub fn kns_solve(
    spec: &GameSpec,
    graph: &CommGraph,
    alpha: f64,
    config: &SolverConfig,
    convention: EstimateConvention,
    x0: Option<DVector<f64>>,
    v0: Option<DVector<f64>>,
) -> Result<(DVector<f64>, KnsReport)> {
    config.validate()?;
    require_compact(spec)?;
    check_kns_inputs(spec, graph, alpha)?;
    if !graph.is_regular() {
        warn!("communication graph is not regular; convergence is not certified");
    }
    let n = spec.decision_dim();
    let x0 = x0.unwrap_or_else(|| spec.project_omega(&DVector::zeros(spec.primal_dim())));
    check_len("initial strategy", spec.primal_dim(), x0.len())?;
    let v0 = v0.unwrap_or_else(|| x0.clone());
    let mut state = KnsState::new(x0, v0, graph, n)?;
    let splitting = config
        .record_inclusion_checks
        .then(|| kns_splitting(spec, graph, alpha, convention))
        .transpose()?;
    let mut tracer = Tracer::new(config.trace_every);
    let (mut checks, mut failures) = (0, 0);
    let mut converged = false;
    let mut residual = f64::INFINITY;
    let kkt_of = |x: &DVector<f64>| eval_t_residual(&PrimalDualPoint::new(x.clone(), DVector::zeros(0)), spec);

    while state.iteration < config.max_iters {
        let next = kns_step(&state, spec, graph, alpha, convention)?;
        if let Some(split) = &splitting {
            checks += 1;
            let prev = stack(&state.x, &state.sigma_hat);
            let ok = check_fb_inclusion(&prev, &stack(&next.x, &next.sigma_hat), split, INCLUSION_TOL)?;
            if !ok {
                failures += 1;
                warn!("iteration {}: forward-backward inclusion violated", next.iteration);
            }
        }
        residual = ((&next.x - &state.x).norm_squared() + (&next.v - &state.v).norm_squared()).sqrt();
        state = next;
        converged = residual < config.residual_tol;
        let last = converged || state.iteration == config.max_iters;
        if tracer.due(state.iteration, last) {
            let point = PrimalDualPoint::new(state.x.clone(), DVector::zeros(0));
            let violation = feasibility_check(&point, spec, 0.0).max_violation();
            tracer.push(state.iteration, residual, kkt_of(&state.x)?, violation);
        }
        if converged {
            break;
        }
    }

    let sigma = aggregate(&state.x, spec)?;
    let disagreement = (0..spec.num_agents())
        .map(|i| (state.sigma_hat.rows(i * n, n) - &sigma).norm())
        .collect();
    let final_kkt = kkt_of(&state.x)?;
    debug!("kns finished after {} iterations, residual {residual:e}", state.iteration);
    let report = ConvergenceReport {
        converged,
        kkt_met: final_kkt <= config.kkt_tol,
        iterations: state.iteration,
        final_fp_residual: residual,
        final_kkt_residual: final_kkt,
        wall_ns: tracer.elapsed(),
        trace: tracer.rows,
        config_echo: config.echo("kns", vec![alpha; spec.num_agents()], None),
        inclusion_checks: checks,
        inclusion_failures: failures,
    };
    Ok((state.x.clone(), KnsReport { report, disagreement, final_state: state }))
}

pub(crate) fn stack(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::tests::quadratic_spec;
    use crate::game::{BoxSet, CouplingConstraint};
    use crate::network::{build_graph, GraphKind};
    use crate::preconditioner::{build_apa_matrix, build_phi_s};
    use nalgebra::DMatrix;

    fn scalar_game() -> GameSpec {
        quadratic_spec(
            &[1.0],
            DMatrix::zeros(1, 1),
            vec![vec![-3.0]],
            vec![BoxSet::uniform(1, -10.0, 10.0).unwrap()],
            CouplingConstraint::none(1, 1),
        )
    }

    fn coupled_pair() -> GameSpec {
        quadratic_spec(
            &[1.0, 1.0],
            DMatrix::from_element(1, 1, 1.0),
            vec![vec![-2.0], vec![-2.0]],
            vec![BoxSet::uniform(1, 0.0, 10.0).unwrap(); 2],
            CouplingConstraint::new(
                vec![DMatrix::from_element(1, 1, 1.0); 2],
                DVector::from_vec(vec![1.0]),
            )
            .unwrap(),
        )
    }

    #[test]
    fn scalar_step_by_hand() {
        let spec = scalar_game();
        let phi = build_phi_s(&[0.5], 1.0, spec.coupling()).unwrap();
        let s0 = SolverState::new(PrimalDualPoint::new(DVector::from_vec(vec![0.0]), DVector::zeros(0)));
        let s1 = pfb_step(&s0, &spec, &phi).unwrap();
        assert_eq!(s1.omega.x[0], 1.5);
        assert_eq!(s1.iteration, 1);
    }

    #[test]
    fn inactive_constraint_keeps_multiplier_at_zero() {
        let spec = quadratic_spec(
            &[1.0, 1.0],
            DMatrix::zeros(1, 1),
            vec![vec![0.0], vec![0.0]],
            vec![BoxSet::uniform(1, -1.0, 1.0).unwrap(); 2],
            CouplingConstraint::new(vec![DMatrix::from_element(1, 1, 1.0); 2], DVector::from_vec(vec![5.0])).unwrap(),
        );
        let phi = build_phi_s(&[0.5, 0.5], 0.1, spec.coupling()).unwrap();
        // x = 0 is stationary, so x¹ = x⁰ and the dual step is γ(0 − 5) < 0.
        let s0 = SolverState::new(PrimalDualPoint::new(DVector::zeros(2), DVector::zeros(1)));
        let s1 = pfb_step(&s0, &spec, &phi).unwrap();
        assert_eq!(s1.omega.x, DVector::zeros(2));
        assert_eq!(s1.omega.lambda, DVector::zeros(1));
    }

    #[test]
    fn scalar_solve_converges_to_three() {
        let spec = scalar_game();
        let phi = build_phi_s(&[0.5], 1.0, spec.coupling()).unwrap();
        let (omega, report) = pfb_solve(&spec, &phi, &SolverConfig::default(), None).unwrap();
        assert!(report.converged && report.kkt_met);
        assert!((omega.x[0] - 3.0).abs() < 1e-8);
        assert!(report.trace.windows(2).all(|w| w[0].iter < w[1].iter));
        assert_eq!(report.trace.last().unwrap().iter, report.iterations);
    }

    #[test]
    fn apa_equals_pfb_with_equal_steps() {
        let spec = coupled_pair();
        let tau = 0.2;
        let phi = build_phi_s(&[tau, tau], tau, spec.coupling()).unwrap();
        let d = build_apa_matrix(tau, spec.coupling()).unwrap();
        let mut a = SolverState::new(PrimalDualPoint::new(DVector::from_vec(vec![4.0, 7.0]), DVector::from_vec(vec![0.3])));
        let mut b = a.clone();
        for _ in 0..200 {
            a = pfb_step(&a, &spec, &phi).unwrap();
            b = apa_step(&b, &spec, &d).unwrap();
            assert!(a.omega.max_abs_diff(&b.omega) <= 1e-13);
            assert!((a.last_residual - b.last_residual).abs() <= 1e-12);
        }
    }

    #[test]
    fn apa_without_coupling_is_projected_gradient() {
        let spec = scalar_game();
        let d = build_apa_matrix(0.25, spec.coupling()).unwrap();
        let s = apa_step(&SolverState::new(PrimalDualPoint::default_start(&spec)), &spec, &d).unwrap();
        assert_eq!(s.omega.x[0], 0.75);
    }

    #[test]
    fn unsafe_steps_are_refused_unless_overridden() {
        let spec = coupled_pair();
        let phi = build_phi_s(&[0.5, 0.5], 5.0, spec.coupling()).unwrap();
        assert!(matches!(pfb_solve(&spec, &phi, &SolverConfig::default(), None), Err(Error::StepSize(_))));
        let config = SolverConfig { allow_unsafe_steps: true, max_iters: 1_000, ..SolverConfig::default() };
        match pfb_solve(&spec, &phi, &config, None) {
            Ok(_) | Err(Error::Divergence { .. }) => {}
            Err(e) => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn max_iters_exhaustion_is_not_an_error() {
        let spec = coupled_pair();
        let phi = crate::preconditioner::StepPolicy::default().resolve(&spec).unwrap();
        let config = SolverConfig { max_iters: 3, ..SolverConfig::default() };
        let (_, report) = pfb_solve(&spec, &phi, &config, None).unwrap();
        assert!(!report.converged);
        assert_eq!(report.iterations, 3);
    }

    #[test]
    fn kns_stationary_x_reduces_to_mixing() {
        let spec = quadratic_spec(
            &[1.0, 1.0, 1.0],
            DMatrix::zeros(1, 1),
            vec![vec![0.0]; 3],
            vec![BoxSet::uniform(1, -1.0, 1.0).unwrap(); 3],
            CouplingConstraint::none(3, 1),
        );
        let g = build_graph(GraphKind::Path, 3).unwrap();
        let v = DVector::from_vec(vec![0.0, 3.0, 6.0]);
        let s0 = KnsState::new(DVector::zeros(3), v, &g, 1).unwrap();
        let s1 = kns_step(&s0, &spec, &g, 0.5, EstimateConvention::Partial).unwrap();
        assert_eq!(s1.x, DVector::zeros(3));
        assert_eq!(s1.v, DVector::from_vec(vec![1.5, 3.0, 4.5]));
    }

    #[test]
    fn kns_rejects_coupled_games() {
        let spec = coupled_pair();
        let g = build_graph(GraphKind::Path, 2).unwrap();
        let s0 = KnsState::new(DVector::zeros(2), DVector::zeros(2), &g, 1).unwrap();
        assert!(matches!(kns_step(&s0, &spec, &g, 0.1, EstimateConvention::Partial), Err(Error::Unsupported(_))));
    }

    #[test]
    fn kns_on_single_agent_is_projected_gradient() {
        let spec = scalar_game();
        let g = build_graph(GraphKind::Complete, 1).unwrap();
        let phi = build_phi_s(&[0.5], 1.0, spec.coupling()).unwrap();
        let mut s = KnsState::new(DVector::zeros(1), DVector::zeros(1), &g, 1).unwrap();
        let mut p = SolverState::new(PrimalDualPoint::default_start(&spec));
        for _ in 0..20 {
            s = kns_step(&s, &spec, &g, 0.5, EstimateConvention::TotalAtEstimate).unwrap();
            p = pfb_step(&p, &spec, &phi).unwrap();
            assert_eq!(s.x, p.omega.x);
        }
    }
}

//! The symmetric preconditioner
//!
//! ```text
//! Φ_s = [ α⁻¹   −Aᵀ    ]      α = diag(α_1, …, α_N) ⊗ I_n
//!       [ −A    γ⁻¹ I_m ]
//! ```
//!
//! together with the step-size bounds that make the preconditioned
//! forward-backward iteration converge, the convergence constants `β` and
//! `θ`, and the asymmetric matrix `D` whose symmetric part is `Φ_s` for equal
//! steps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game::{CouplingConstraint, GameSpec, Monotonicity};

/// Largest `min(m, nN)` for which the spectral norm uses a full SVD.
const SVD_LIMIT: usize = 64;
const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct PreconditionerS {
    alphas: Vec<f64>,
    gamma: f64,
    coupling_norm: f64,
    decision_dim: usize,
    a: DMatrix<f64>,
}

impl PreconditionerS {
    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// `‖A‖`, the largest singular value of the coupling matrix.
    pub fn coupling_norm(&self) -> f64 {
        self.coupling_norm
    }

    pub fn alpha_max(&self) -> f64 {
        self.alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn primal_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn dual_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Step size of stacked coordinate `j`.
    pub fn alpha_at(&self, j: usize) -> f64 {
        self.alphas[j / self.decision_dim]
    }

    pub fn dense_matrix(&self) -> DMatrix<f64> {
        let (nx, m) = (self.primal_dim(), self.dual_dim());
        let mut phi = DMatrix::zeros(nx + m, nx + m);
        for j in 0..nx {
            phi[(j, j)] = 1.0 / self.alpha_at(j);
        }
        for r in 0..m {
            phi[(nx + r, nx + r)] = 1.0 / self.gamma;
        }
        phi.view_mut((0, nx), (nx, m)).copy_from(&(-self.a.transpose()));
        phi.view_mut((nx, 0), (m, nx)).copy_from(&(-&self.a));
        phi
    }

    /// `Φ_s ω` without assembling `Φ_s`.
    pub fn apply(&self, dx: &DVector<f64>, dl: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let mut top = -self.a.tr_mul(dl);
        for j in 0..dx.len() {
            top[j] += dx[j] / self.alpha_at(j);
        }
        let bottom = dl / self.gamma - &self.a * dx;
        (top, bottom)
    }

    /// `‖col(dx, dl)‖_Φ`. Clamped at zero when `Φ_s` is indefinite.
    pub fn norm(&self, dx: &DVector<f64>, dl: &DVector<f64>) -> f64 {
        let (top, bottom) = self.apply(dx, dl);
        (dx.dot(&top) + dl.dot(&bottom)).max(0.0).sqrt()
    }

    /// `α⁻¹ − γ AᵀA`, the inverse of the upper-left block of `Φ_s⁻¹`.
    pub fn schur_block(&self) -> DMatrix<f64> {
        let mut block = -(self.a.tr_mul(&self.a) * self.gamma);
        for j in 0..self.primal_dim() {
            block[(j, j)] += 1.0 / self.alpha_at(j);
        }
        block
    }
}

pub fn build_phi_s(alphas: &[f64], gamma: f64, coupling: &CouplingConstraint) -> Result<PreconditionerS> {
    if alphas.len() != coupling.blocks().len() {
        return Err(Error::DimensionMismatch {
            what: "step sizes".into(),
            expected: coupling.blocks().len(),
            got: alphas.len(),
        });
    }
    if let Some((i, a)) = alphas.iter().enumerate().find(|(_, a)| !(**a > 0.0 && a.is_finite())) {
        return Err(Error::InvalidParameter(format!("alpha_{i} = {a} must be positive and finite")));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!("gamma = {gamma} must be positive and finite")));
    }
    let decision_dim = coupling.blocks().first().map(|b| b.ncols()).unwrap_or(1).max(1);
    let a = coupling.matrix().clone();
    Ok(PreconditionerS {
        alphas: alphas.to_vec(),
        gamma,
        coupling_norm: operator_norm(&a)?,
        decision_dim,
        a,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PdCheck {
    /// `γ < 1/(‖A‖² α_max)` with positive steps.
    pub sufficient_condition: bool,
    /// A Cholesky factorization of the dense matrix exists.
    pub cholesky_succeeds: bool,
}

pub fn check_positive_definite(phi: &PreconditionerS) -> PdCheck {
    let positive = phi.gamma > 0.0 && phi.alphas.iter().all(|a| *a > 0.0);
    let norm_sq = phi.coupling_norm * phi.coupling_norm;
    let sufficient_condition = positive && (norm_sq == 0.0 || phi.gamma < 1.0 / (norm_sq * phi.alpha_max()));
    PdCheck {
        sufficient_condition,
        cholesky_succeeds: phi.dense_matrix().cholesky().is_some(),
    }
}

fn check_constants(eta: f64, lip_f: f64) -> Result<f64> {
    if !(eta > 0.0 && lip_f > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "eta={eta} and lip_f={lip_f} must be positive"
        )));
    }
    Ok(eta / (lip_f * lip_f))
}

/// Upper bound on the dual step,
/// `γ_max = (1/‖A‖²)(1/α_max − 1/(2η/ℓ_F²))`. Returns `+∞` when `‖A‖ = 0`.
pub fn gamma_max(alphas: &[f64], eta: f64, lip_f: f64, coupling_norm: f64) -> Result<f64> {
    let coco = check_constants(eta, lip_f)?;
    let alpha_max = alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if alphas.is_empty() || alphas.iter().any(|a| *a <= 0.0) {
        return Err(Error::StepSize("primal steps must be positive".into()));
    }
    if alpha_max >= 2.0 * coco {
        return Err(Error::StepSize(format!(
            "alpha_max = {alpha_max} must be below 2 eta / lip_f^2 = {}",
            2.0 * coco
        )));
    }
    if coupling_norm == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((1.0 / alpha_max - 1.0 / (2.0 * coco)) / (coupling_norm * coupling_norm))
}

/// Bound on a common step `α_i = γ`:
/// `γ < (−1 + √(1 + ‖A‖² k²)) / (‖A‖² k)` with `k = 4η/ℓ_F²`.
///
/// Evaluated as `k / (1 + √(1 + ‖A‖² k²))`, which is the same quantity
/// without cancellation for small `‖A‖`. Returns `+∞` when `‖A‖ = 0`; callers
/// still have to respect `γ < 2η/ℓ_F²` in that case.
pub fn equal_step_bound(eta: f64, lip_f: f64, coupling_norm: f64) -> Result<f64> {
    let k = 4.0 * check_constants(eta, lip_f)?;
    if coupling_norm == 0.0 {
        return Ok(f64::INFINITY);
    }
    let a2 = coupling_norm * coupling_norm;
    Ok(k / (1.0 + (1.0 + a2 * k * k).sqrt()))
}

/// Cocoercivity constant of `Φ_s⁻¹𝒜` in the `Φ_s` norm,
/// `β = (η/ℓ_F²) λ_min(α⁻¹ − γAᵀA)`.
pub fn cocoercivity_beta(phi: &PreconditionerS, eta: f64, lip_f: f64) -> Result<f64> {
    let coco = check_constants(eta, lip_f)?;
    let lam_min = phi.schur_block().symmetric_eigenvalues().min();
    if !(lam_min > 0.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "alpha^-1 - gamma A^T A has smallest eigenvalue {lam_min}"
        )));
    }
    Ok(coco * lam_min)
}

/// Averagedness constant `θ = 2β/(4β − 1)` of the forward-backward map.
pub fn averagedness_theta(beta: f64) -> Result<f64> {
    if !(beta > 0.5) {
        return Err(Error::StepSize(format!(
            "beta = {beta} must exceed 1/2 for an averaged forward-backward map; reduce the step sizes"
        )));
    }
    Ok(2.0 * beta / (4.0 * beta - 1.0))
}

/// Largest singular value. Full SVD for small matrices, power iteration on
/// `AᵀA` from the all-ones vector otherwise.
pub fn operator_norm(a: &DMatrix<f64>) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    if a.nrows().min(a.ncols()) <= SVD_LIMIT {
        return Ok(a.singular_values().max());
    }
    power_iteration_norm(a, POWER_TOL, POWER_MAX_ITERS)
}

pub fn power_iteration_norm(a: &DMatrix<f64>, rel_tol: f64, max_iters: usize) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    let mut v = DVector::from_element(a.ncols(), 1.0 / (a.ncols() as f64).sqrt());
    let mut estimate = 0.0;
    let mut change = f64::INFINITY;
    for _ in 0..max_iters {
        let w = a.tr_mul(&(a * &v));
        let next = v.dot(&w);
        let wn = w.norm();
        if wn == 0.0 {
            return Ok(0.0);
        }
        change = (next - estimate).abs() / next.abs().max(f64::MIN_POSITIVE);
        estimate = next;
        v = w / wn;
        if change <= rel_tol {
            return Ok(estimate.max(0.0).sqrt());
        }
    }
    Err(Error::PowerIteration {
        iterations: max_iters,
        estimate: estimate.max(0.0).sqrt(),
        change,
    })
}

/// `D = [[τ⁻¹I, 0], [−2A, τ⁻¹I]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ApaMatrix {
    tau: f64,
    a: DMatrix<f64>,
}

impl ApaMatrix {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub(crate) fn coupling_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn dense_matrix(&self) -> DMatrix<f64> {
        let (nx, m) = (self.a.ncols(), self.a.nrows());
        let mut d = DMatrix::identity(nx + m, nx + m) / self.tau;
        d.view_mut((nx, 0), (m, nx)).copy_from(&(&self.a * -2.0));
        d
    }

    pub fn symmetric_part(&self) -> DMatrix<f64> {
        let d = self.dense_matrix();
        (&d + d.transpose()) * 0.5
    }
}

pub fn build_apa_matrix(tau: f64, coupling: &CouplingConstraint) -> Result<ApaMatrix> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!("tau = {tau} must be positive and finite")));
    }
    Ok(ApaMatrix {
        tau,
        a: coupling.matrix().clone(),
    })
}

/// How step sizes are chosen for a solve.
#[derive(Clone, Debug, PartialEq)]
pub enum StepPolicy {
    /// `α_i = alpha_fraction · 2η/ℓ_F²`, `γ = safety · γ_max`.
    Theorem1 { alpha_fraction: f64, safety: f64 },
    /// `α_i = γ = safety · min(equal-step bound, 2η/ℓ_F²)`.
    EqualSsce { safety: f64 },
    Explicit { alphas: Vec<f64>, gamma: f64 },
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy::Theorem1 {
            alpha_fraction: 0.9,
            safety: 0.99,
        }
    }
}

/// Dual step used when the coupling bound is vacuous (`‖A‖ = 0` or `m = 0`).
const UNCOUPLED_GAMMA: f64 = 1.0;

impl StepPolicy {
    /// Assemble `Φ_s` for `spec`. Bound-based policies need monotonicity
    /// constants, either declared or exact for quadratic costs.
    pub fn resolve(&self, spec: &GameSpec) -> Result<PreconditionerS> {
        let coupling = spec.coupling();
        let constants = || {
            spec.resolved_monotonicity().ok_or_else(|| {
                Error::StepSize(
                    "no monotonicity constants: declare eta and lip_f or pass explicit steps".into(),
                )
            })
        };
        match self {
            StepPolicy::Explicit { alphas, gamma } => build_phi_s(alphas, *gamma, coupling),
            StepPolicy::Theorem1 { alpha_fraction, safety } => {
                check_fraction("alpha fraction", *alpha_fraction)?;
                check_fraction("safety", *safety)?;
                let Monotonicity { eta, lip_f } = constants()?;
                let alpha = alpha_fraction * 2.0 * eta / (lip_f * lip_f);
                let alphas = vec![alpha; spec.num_agents()];
                let norm = operator_norm(coupling.matrix())?;
                let gmax = gamma_max(&alphas, eta, lip_f, norm)?;
                let gamma = if gmax.is_finite() { safety * gmax } else { UNCOUPLED_GAMMA };
                build_phi_s(&alphas, gamma, coupling)
            }
            StepPolicy::EqualSsce { safety } => {
                check_fraction("safety", *safety)?;
                let Monotonicity { eta, lip_f } = constants()?;
                let norm = operator_norm(coupling.matrix())?;
                let bound = equal_step_bound(eta, lip_f, norm)?.min(2.0 * eta / (lip_f * lip_f));
                let tau = safety * bound;
                build_phi_s(&vec![tau; spec.num_agents()], tau, coupling)
            }
        }
    }
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::InvalidParameter(format!("{name} = {v} must lie in (0, 1)")));
    }
    Ok(())
}

/// `γ_max`, the equal-step bound, `β` and `θ` for a game and a preconditioner.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundsReport {
    pub eta: f64,
    pub lip_f: f64,
    pub coupling_norm: f64,
    pub alpha_max: f64,
    pub gamma: f64,
    pub gamma_max: Option<f64>,
    pub equal_step_bound: f64,
    pub beta: Option<f64>,
    pub theta: Option<f64>,
}

pub fn bounds_report(spec: &GameSpec, phi: &PreconditionerS) -> Result<BoundsReport> {
    let Monotonicity { eta, lip_f } = spec
        .resolved_monotonicity()
        .ok_or_else(|| Error::StepSize("no monotonicity constants available".into()))?;
    let beta = cocoercivity_beta(phi, eta, lip_f).ok();
    Ok(BoundsReport {
        eta,
        lip_f,
        coupling_norm: phi.coupling_norm(),
        alpha_max: phi.alpha_max(),
        gamma: phi.gamma(),
        gamma_max: gamma_max(phi.alphas(), eta, lip_f, phi.coupling_norm()).ok(),
        equal_step_bound: equal_step_bound(eta, lip_f, phi.coupling_norm())?,
        beta,
        theta: beta.and_then(|b| averagedness_theta(b).ok()),
    })
}

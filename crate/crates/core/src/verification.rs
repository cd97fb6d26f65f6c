//! Independent oracles and numerical certificates.
//!
//! Nothing in here is used to *compute* equilibria for the solvers. The
//! active-set oracle solves the KKT system of affine games directly, and the
//! sampled checks test the monotonicity, cocoercivity and averagedness
//! inequalities the convergence theory relies on.

use std::ops::ControlFlow;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};
use crate::game::{extended_pseudo_gradient, pseudo_gradient, BoxSet, CostModel, EstimateConvention, GameSpec, PrimalDualPoint};
use crate::network::{kron_apply, CommGraph};
use crate::operators::{eval_t_residual, normal_cone_membership, whole_space, SplitOperatorPair};
use crate::preconditioner::PreconditionerS;
use crate::solvers::{pfb_step, stack, SolverState};

/// Maximum number of active-set candidates the oracle evaluates.
pub const ORACLE_BUDGET: usize = 1_000_000;
/// Below this many candidates the oracle scans every active set and checks
/// that all verified candidates agree.
pub const ORACLE_FULL_SCAN: usize = 50_000;
const ORACLE_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct KktReport {
    /// Per agent, distance from `−(∇_{x_i}J_i + A_iᵀμ)` to `N_{Ω_i}(x_i)`.
    pub stationarity_residual: Vec<f64>,
    /// `‖max(Ax − b, 0)‖_∞`.
    pub primal_violation: f64,
    /// Largest distance of a coordinate of `x` outside its box.
    pub box_violation: f64,
    /// `‖max(−μ, 0)‖_∞`.
    pub dual_nonneg_violation: f64,
    /// `|μᵀ(Ax − b)|`.
    pub complementarity_gap: f64,
}

impl KktReport {
    pub fn max_stationarity(&self) -> f64 {
        self.stationarity_residual.iter().copied().fold(0.0, f64::max)
    }

    pub fn worst(&self) -> f64 {
        [
            self.max_stationarity(),
            self.primal_violation,
            self.box_violation,
            self.dual_nonneg_violation,
            self.complementarity_gap,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.worst() <= tol
    }
}

/// Distance from `v` to the normal cone of `set` at `x`. Coordinates of `x`
/// outside the box are clamped first; their excess is reported separately.
fn cone_distance(v: &[f64], x: &[f64], set: &BoxSet) -> f64 {
    v.iter()
        .zip(x)
        .zip(set.lower().iter().zip(set.upper().iter()))
        .map(|((&vj, &xj), (&lo, &hi))| {
            let xj = xj.max(lo).min(hi);
            let d = match (xj <= lo, xj >= hi) {
                (true, true) => 0.0,
                (true, false) => vj.max(0.0),
                (false, true) => (-vj).max(0.0),
                (false, false) => vj.abs(),
            };
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Variational KKT conditions with the shared multiplier `point.lambda`.
pub fn check_kkt(point: &PrimalDualPoint, spec: &GameSpec) -> Result<KktReport> {
    point.check_dims(spec)?;
    let n = spec.decision_dim();
    let a = spec.coupling().matrix();
    let g = pseudo_gradient(&point.x, spec)? + a.tr_mul(&point.lambda);
    let stationarity_residual = spec
        .local_sets()
        .iter()
        .enumerate()
        .map(|(i, set)| {
            let neg: Vec<f64> = g.rows(i * n, n).iter().map(|v| -v).collect();
            cone_distance(&neg, spec.block(&point.x, i), set)
        })
        .collect();
    let slack = a * &point.x - spec.coupling().b();
    let (lo, hi) = spec.stacked_bounds();
    let box_violation = (0..point.x.len())
        .map(|j| (lo[j] - point.x[j]).max(point.x[j] - hi[j]).max(0.0))
        .fold(0.0, f64::max);
    Ok(KktReport {
        stationarity_residual,
        primal_violation: slack.iter().fold(0.0, |acc, s| acc.max(*s)),
        box_violation,
        dual_nonneg_violation: point.lambda.iter().fold(0.0, |acc, l| acc.max(-l)),
        complementarity_gap: point.lambda.dot(&slack).abs(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum SlotState {
    Free,
    AtLower,
    AtUpper,
    Inactive,
    Active,
}

/// Affine variational inequality data `F(x) = Hx + h` over
/// `[lo, hi] ∩ {Ax ≤ b}`.
struct AffineVi {
    h: DMatrix<f64>,
    offset: DVector<f64>,
    a: DMatrix<f64>,
    b: DVector<f64>,
    lo: DVector<f64>,
    hi: DVector<f64>,
    tol: f64,
}

impl AffineVi {
    fn nx(&self) -> usize {
        self.h.nrows()
    }

    /// Solve the equality system of one active-set guess and check every
    /// sign and feasibility condition.
    fn candidate(&self, states: &[SlotState]) -> Option<(DVector<f64>, DVector<f64>)> {
        let nx = self.nx();
        let (coord_states, row_states) = states.split_at(nx);
        let free: Vec<usize> = (0..nx).filter(|&j| coord_states[j] == SlotState::Free).collect();
        let active: Vec<usize> = (0..row_states.len())
            .filter(|&r| row_states[r] == SlotState::Active)
            .collect();
        let mut x = DVector::zeros(nx);
        for j in 0..nx {
            match coord_states[j] {
                SlotState::AtLower => x[j] = self.lo[j],
                SlotState::AtUpper => x[j] = self.hi[j],
                _ => {}
            }
        }
        let (f, k) = (free.len(), active.len());
        let mut mu = DVector::zeros(self.b.len());
        if f + k > 0 {
            let mut sys = DMatrix::zeros(f + k, f + k);
            let mut rhs = DVector::zeros(f + k);
            let fixed_grad = &self.h * &x + &self.offset;
            let fixed_slack = &self.a * &x - &self.b;
            for (p, &j) in free.iter().enumerate() {
                for (q, &l) in free.iter().enumerate() {
                    sys[(p, q)] = self.h[(j, l)];
                }
                for (q, &r) in active.iter().enumerate() {
                    sys[(p, f + q)] = self.a[(r, j)];
                }
                rhs[p] = -fixed_grad[j];
            }
            for (p, &r) in active.iter().enumerate() {
                for (q, &l) in free.iter().enumerate() {
                    sys[(f + p, q)] = self.a[(r, l)];
                }
                rhs[f + p] = -fixed_slack[r];
            }
            let sol = sys.clone().lu().solve(&rhs)?;
            if sol.iter().any(|v| !v.is_finite()) || (&sys * &sol - &rhs).amax() > 1e-8 * (1.0 + rhs.amax()) {
                return None;
            }
            for (p, &j) in free.iter().enumerate() {
                x[j] = sol[p];
            }
            for (p, &r) in active.iter().enumerate() {
                mu[r] = sol[f + p];
            }
        }
        let g = &self.h * &x + &self.offset + self.a.tr_mul(&mu);
        let slack = &self.a * &x - &self.b;
        let tol = self.tol;
        let coords_ok = (0..nx).all(|j| match coord_states[j] {
            SlotState::Free => x[j] >= self.lo[j] - tol && x[j] <= self.hi[j] + tol,
            SlotState::AtLower if self.lo[j] == self.hi[j] => true,
            SlotState::AtLower => g[j] >= -tol,
            SlotState::AtUpper => g[j] <= tol,
            _ => unreachable!(),
        });
        let rows_ok = (0..self.b.len()).all(|r| match row_states[r] {
            SlotState::Active => mu[r] >= -tol,
            _ => slack[r] <= tol,
        });
        if !(coords_ok && rows_ok) {
            return None;
        }
        for j in 0..nx {
            x[j] = x[j].max(self.lo[j]).min(self.hi[j]);
        }
        Some((x, mu.map(|v| v.max(0.0))))
    }
}

/// Alternatives per slot; the first entry is the seed guess.
fn slot_alternatives(vi: &AffineVi) -> Vec<Vec<SlotState>> {
    let nx = vi.nx();
    // Seed: the unconstrained stationary point, clamped to the box.
    let guess = vi.h.clone().lu().solve(&(-&vi.offset)).unwrap_or_else(|| DVector::zeros(nx));
    let mut clamped = guess.clone();
    let mut slots = Vec::with_capacity(nx + vi.b.len());
    for j in 0..nx {
        clamped[j] = guess[j].max(vi.lo[j]).min(vi.hi[j]);
        if vi.lo[j] == vi.hi[j] {
            slots.push(vec![SlotState::AtLower]);
            continue;
        }
        let mut alts = vec![SlotState::Free];
        if vi.lo[j].is_finite() {
            alts.push(SlotState::AtLower);
        }
        if vi.hi[j].is_finite() {
            alts.push(SlotState::AtUpper);
        }
        let seed = if guess[j] < vi.lo[j] {
            SlotState::AtLower
        } else if guess[j] > vi.hi[j] {
            SlotState::AtUpper
        } else {
            SlotState::Free
        };
        alts.retain(|s| *s != seed);
        alts.insert(0, seed);
        slots.push(alts);
    }
    let slack = &vi.a * &clamped - &vi.b;
    for r in 0..vi.b.len() {
        slots.push(if slack[r] > 0.0 {
            vec![SlotState::Active, SlotState::Inactive]
        } else {
            vec![SlotState::Inactive, SlotState::Active]
        });
    }
    slots
}

/// Visit every assignment, ordered by the number of slots that differ from
/// the seed.
fn for_each_assignment<F>(slots: &[Vec<SlotState>], mut visit: F) -> Option<usize>
where
    F: FnMut(&[SlotState]) -> ControlFlow<()>,
{
    fn rec<F: FnMut(&[SlotState]) -> ControlFlow<()>>(
        slots: &[Vec<SlotState>],
        start: usize,
        remaining: usize,
        current: &mut Vec<SlotState>,
        visit: &mut F,
        visited: &mut usize,
    ) -> ControlFlow<()> {
        if remaining == 0 {
            *visited += 1;
            return visit(current);
        }
        for s in start..slots.len() {
            if slots.len() - s < remaining {
                break;
            }
            for alt in 1..slots[s].len() {
                current[s] = slots[s][alt];
                let flow = rec(slots, s + 1, remaining - 1, current, visit, visited);
                current[s] = slots[s][0];
                flow?;
            }
        }
        ControlFlow::Continue(())
    }
    let mut current: Vec<SlotState> = slots.iter().map(|alts| alts[0]).collect();
    let mut visited = 0;
    for k in 0..=slots.len() {
        if rec(slots, 0, k, &mut current, &mut visit, &mut visited).is_break() {
            return Some(visited);
        }
    }
    None
}

const SLATER_ITERS: usize = 20_000;

/// Look for `x` in the box with `Ax < b`, starting at the box center and
/// running projected subgradient descent on `max_r (Ax − b)_r`. Returns the
/// best max slack on failure.
fn strictly_feasible_point(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    start: DVector<f64>,
) -> std::result::Result<DVector<f64>, f64> {
    let mut x = start;
    let width = (hi - lo).amax();
    let mut best = f64::INFINITY;
    for k in 0..SLATER_ITERS {
        let slack = a * &x - b;
        let r = slack.imax();
        best = best.min(slack[r]);
        if slack[r] < 0.0 {
            return Ok(x);
        }
        let g = a.row(r).transpose();
        let gn = g.norm();
        if gn == 0.0 {
            break;
        }
        x -= g * (width / (gn * ((k + 1) as f64).sqrt()));
        for j in 0..x.len() {
            x[j] = x[j].max(lo[j]).min(hi[j]);
        }
    }
    Err(best)
}

/// Variational GNE of a quadratic game by active-set enumeration over box
/// faces and coupling rows.
///
/// Every candidate solves the stationarity equations of its free
/// coordinates together with its active coupling rows, and is accepted only
/// if all bound, sign and feasibility conditions hold. Strong monotonicity of
/// the pseudo-gradient makes the primal solution unique, so the search stops
/// at the first verified candidate; small problems are scanned completely and
/// any disagreement between verified candidates is reported as an error.
pub fn oracle_vgne(spec: &GameSpec) -> Result<PrimalDualPoint> {
    oracle_vgne_with_budget(spec, ORACLE_BUDGET)
}

pub fn oracle_vgne_with_budget(spec: &GameSpec, budget: usize) -> Result<PrimalDualPoint> {
    let CostModel::Quadratic(_) = spec.cost() else {
        return Err(Error::Oracle("the enumeration oracle needs a quadratic cost".into()));
    };
    if !spec.is_compact() {
        return Err(Error::Oracle("the enumeration oracle needs bounded local sets".into()));
    }
    let (h, offset) = spec.affine_map().expect("quadratic cost is affine");
    let eta = ((&h + h.transpose()) * 0.5).symmetric_eigenvalues().min();
    if !(eta > 0.0) {
        return Err(Error::Oracle(format!("pseudo-gradient is not strongly monotone (eta = {eta})")));
    }
    let (lo, hi) = spec.stacked_bounds();
    let center = (&lo + &hi) * 0.5;
    let a = spec.coupling().matrix().clone();
    let b = spec.coupling().b().clone();
    if spec.num_constraints() > 0 {
        if let Err(worst) = strictly_feasible_point(&a, &b, &lo, &hi, center) {
            return Err(Error::Oracle(format!(
                "no strictly feasible point found for the coupling constraints (best max slack {worst})"
            )));
        }
    }
    let scale = 1.0 + offset.amax().max(b.amax()).max(lo.amax()).max(hi.amax());
    let vi = AffineVi { h, offset, a, b, lo, hi, tol: ORACLE_TOL * scale };
    let slots = slot_alternatives(&vi);
    let total = slots.iter().try_fold(1usize, |acc, s| acc.checked_mul(s.len()));
    let full_scan = total.is_some_and(|t| t <= ORACLE_FULL_SCAN);

    let mut found: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut evaluated = 0usize;
    let mut conflict = None;
    let mut over_budget = false;
    for_each_assignment(&slots, |states| {
        evaluated += 1;
        if evaluated > budget {
            over_budget = true;
            return ControlFlow::Break(());
        }
        if let Some((x, mu)) = vi.candidate(states) {
            match &found {
                None => found = Some((x, mu)),
                Some((x0, _)) => {
                    if (x0 - &x).amax() > 1e-7 * scale {
                        conflict = Some((x0 - &x).amax());
                        return ControlFlow::Break(());
                    }
                }
            }
            if !full_scan {
                return ControlFlow::Break(());
            }
        }
        ControlFlow::Continue(())
    });
    if let Some(gap) = conflict {
        return Err(Error::Oracle(format!(
            "distinct verified solutions (gap {gap:e}); the game data are inconsistent"
        )));
    }
    match found {
        Some((x, mu)) => {
            debug!("oracle verified a solution after {evaluated} candidates");
            Ok(PrimalDualPoint::new(x, mu))
        }
        None if over_budget => Err(Error::Oracle(format!(
            "no verified active set within the budget of {budget} candidates"
        ))),
        None => Err(Error::Oracle("no active set passed verification".into())),
    }
}

pub type ForwardFn<'a> = Box<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'a>;

/// The pieces of a splitting `𝒜 + ℬ` and preconditioner `Φ` needed to check
/// `−𝒜(ω^k) ∈ ℬ(ω^{k+1}) + Φ(ω^{k+1} − ω^k)`.
pub struct FbSplitting<'a> {
    pub forward: ForwardFn<'a>,
    /// The single-valued linear part of `ℬ`.
    pub linear: DMatrix<f64>,
    /// Consecutive blocks of the product set whose normal cone is the
    /// set-valued part of `ℬ`.
    pub cones: Vec<BoxSet>,
    pub phi: DMatrix<f64>,
}

/// Splitting `𝒜 = col(F, b)`, `ℬ = N_{Ω×ℝᵐ≥0} + [[0, Aᵀ], [−A, 0]]`, `Φ = Φ_s`.
pub fn pfb_splitting<'a>(spec: &'a GameSpec, phi: &PreconditionerS) -> FbSplitting<'a> {
    let pair = SplitOperatorPair::new(spec);
    let linear = pair.backward_skew().clone();
    let cones = pair.backward_cone().to_vec();
    FbSplitting {
        forward: Box::new(move |w| pair.forward(w)),
        linear,
        cones,
        phi: phi.dense_matrix(),
    }
}

/// Splitting of the distributed iteration on `ω = col(x, σ)` with
/// `P = I + E ⊗ I_n` and `L_n = L ⊗ I_n`:
///
/// ```text
/// 𝒜(x, σ) = col(F_σ(x, σ), 0) + ½[[0, −P], [P, 0]] col(x, σ)
/// ℬ(x, σ) = col(N_Ω(x), L_n σ) + ½[[0, P], [−P, 0]] col(x, σ)
/// Φ       = [[α⁻¹I, −½P], [−½P, P]]
/// ```
pub fn kns_splitting<'a>(
    spec: &'a GameSpec,
    graph: &CommGraph,
    alpha: f64,
    convention: EstimateConvention,
) -> Result<FbSplitting<'a>> {
    check_len("graph nodes", spec.num_agents(), graph.num_nodes())?;
    let n = spec.decision_dim();
    let nx = spec.primal_dim();
    let kron = |m: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(nx, nx);
        for c in 0..nx {
            let mut e = DVector::zeros(nx);
            e[c] = 1.0;
            out.set_column(c, &kron_apply(m, &e, n));
        }
        out
    };
    let big_n = graph.num_nodes();
    let p = kron(&(DMatrix::identity(big_n, big_n) + graph.adjacency_matrix()));
    let l = kron(&graph.laplacian());
    let half_p = &p * 0.5;

    let mut skew_fwd = DMatrix::zeros(2 * nx, 2 * nx);
    skew_fwd.view_mut((0, nx), (nx, nx)).copy_from(&(-&half_p));
    skew_fwd.view_mut((nx, 0), (nx, nx)).copy_from(&half_p);
    let mut linear = -&skew_fwd;
    linear.view_mut((nx, nx), (nx, nx)).copy_from(&l);
    let mut phi = DMatrix::zeros(2 * nx, 2 * nx);
    phi.view_mut((0, 0), (nx, nx)).copy_from(&(DMatrix::identity(nx, nx) / alpha));
    phi.view_mut((0, nx), (nx, nx)).copy_from(&(-&half_p));
    phi.view_mut((nx, 0), (nx, nx)).copy_from(&(-&half_p));
    phi.view_mut((nx, nx), (nx, nx)).copy_from(&p);

    let mut cones = spec.local_sets().to_vec();
    cones.push(whole_space(nx));
    let forward = move |w: &DVector<f64>| -> Result<DVector<f64>> {
        check_len("stacked (x, sigma)", 2 * nx, w.len())?;
        let x = w.rows(0, nx).into_owned();
        let sigma = w.rows(nx, nx).into_owned();
        let fs = extended_pseudo_gradient(&x, &sigma, spec, convention)?;
        Ok(stack(&fs, &DVector::zeros(nx)) + &skew_fwd * w)
    };
    Ok(FbSplitting {
        forward: Box::new(forward),
        linear,
        cones,
        phi,
    })
}

/// Whether `−𝒜(prev) − L next − Φ(next − prev)` lies in the normal cone of
/// the product set at `next`, blockwise, up to `tol`.
pub fn check_fb_inclusion(prev: &DVector<f64>, next: &DVector<f64>, split: &FbSplitting<'_>, tol: f64) -> Result<bool> {
    check_len("next point", prev.len(), next.len())?;
    check_len("preconditioner", prev.len(), split.phi.nrows())?;
    let r = -(split.forward)(prev)? - &split.linear * next - &split.phi * (next - prev);
    let mut offset = 0;
    for cone in &split.cones {
        let k = cone.dim();
        let (rb, xb) = (&r.as_slice()[offset..offset + k], &next.as_slice()[offset..offset + k]);
        if !normal_cone_membership(rb, xb, cone, tol)? {
            return Ok(false);
        }
        offset += k;
    }
    check_len("cone blocks", prev.len(), offset)?;
    Ok(true)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledConstants {
    /// Smallest sampled `⟨F(x) − F(y), x − y⟩ / ‖x − y‖²`.
    pub eta_hat: f64,
    /// Largest sampled `‖F(x) − F(y)‖ / ‖x − y‖`.
    pub lip_hat: f64,
    pub sample_count: usize,
    pub seed: u64,
}

pub(crate) fn sample_box(rng: &mut ChaCha8Rng, lo: &DVector<f64>, hi: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(lo.len(), |j, _| if lo[j] == hi[j] { lo[j] } else { rng.random_range(lo[j]..hi[j]) })
}

/// Empirical monotonicity and Lipschitz constants from `samples` random
/// pairs in `Ω`. These are not certified bounds.
pub fn estimate_constants(spec: &GameSpec, samples: usize, seed: u64) -> Result<SampledConstants> {
    if samples < 2 {
        return Err(Error::InvalidParameter("need at least 2 samples".into()));
    }
    if !spec.is_compact() {
        return Err(Error::InvalidParameter("cannot sample an unbounded box".into()));
    }
    let (lo, hi) = spec.stacked_bounds();
    if lo == hi {
        return Err(Error::InvalidParameter("local sets are a single point".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut eta_hat, mut lip_hat) = (f64::INFINITY, 0.0f64);
    let mut used = 0;
    for _ in 0..samples {
        let x = sample_box(&mut rng, &lo, &hi);
        let y = sample_box(&mut rng, &lo, &hi);
        let dx = &x - &y;
        let nsq = dx.norm_squared();
        if nsq == 0.0 {
            continue;
        }
        let df = pseudo_gradient(&x, spec)? - pseudo_gradient(&y, spec)?;
        eta_hat = eta_hat.min(df.dot(&dx) / nsq);
        lip_hat = lip_hat.max(df.norm() / nsq.sqrt());
        used += 1;
    }
    Ok(SampledConstants { eta_hat, lip_hat, sample_count: used, seed })
}

/// Worst slack of a family of sampled inequalities `lhs ≥ rhs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub name: &'static str,
    pub pairs: usize,
    /// `min (lhs − rhs)` over all samples; the inequality holds with slack
    /// `s` when this is `≥ −s`.
    pub worst_margin: f64,
}

impl Certificate {
    pub fn holds(&self, slack: f64) -> bool {
        self.worst_margin >= -slack
    }
}

fn sample_point(rng: &mut ChaCha8Rng, spec: &GameSpec, lambda_max: f64) -> PrimalDualPoint {
    let (lo, hi) = spec.stacked_bounds();
    let x = sample_box(rng, &lo, &hi);
    let lambda = DVector::from_fn(spec.num_constraints(), |_, _| rng.random_range(0.0..lambda_max));
    PrimalDualPoint::new(x, lambda)
}

/// Upper bound for sampled multipliers in the certificates.
const LAMBDA_SAMPLE_MAX: f64 = 5.0;

/// The chain `⟨ΔF, Δx⟩ ≥ η‖Δx‖² ≥ (η/ℓ_F²)‖ΔF‖²` on random pairs, which
/// gives cocoercivity of `𝒜` with constant `η/ℓ_F²` (the `λ` block of `𝒜` is
/// constant). Returns one certificate per link.
pub fn certify_forward_cocoercivity(spec: &GameSpec, pairs: usize, seed: u64) -> Result<[Certificate; 3]> {
    let mono = spec
        .resolved_monotonicity()
        .ok_or_else(|| Error::InvalidParameter("no monotonicity constants".into()))?;
    let coco = mono.cocoercivity();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = [f64::INFINITY; 3];
    for _ in 0..pairs {
        let w1 = sample_point(&mut rng, spec, LAMBDA_SAMPLE_MAX);
        let w2 = sample_point(&mut rng, spec, LAMBDA_SAMPLE_MAX);
        let a1 = crate::operators::eval_forward(&w1, spec)?;
        let a2 = crate::operators::eval_forward(&w2, spec)?;
        let da = a1 - a2;
        let dw = w1.stacked() - w2.stacked();
        let dx = &w1.x - &w2.x;
        let inner = da.dot(&dw);
        let strong = mono.eta * dx.norm_squared();
        let lip = coco * da.norm_squared();
        worst[0] = worst[0].min(inner - strong);
        worst[1] = worst[1].min(strong - lip);
        worst[2] = worst[2].min(inner - lip);
    }
    Ok([
        Certificate { name: "strong monotonicity", pairs, worst_margin: worst[0] },
        Certificate { name: "lipschitz link", pairs, worst_margin: worst[1] },
        Certificate { name: "cocoercivity of forward operator", pairs, worst_margin: worst[2] },
    ])
}

/// `⟨Φ⁻¹𝒜ω₁ − Φ⁻¹𝒜ω₂, ω₁ − ω₂⟩_Φ ≥ β ‖Φ⁻¹𝒜ω₁ − Φ⁻¹𝒜ω₂‖²_Φ` on random pairs.
pub fn certify_phi_cocoercivity(spec: &GameSpec, phi: &PreconditionerS, beta: f64, pairs: usize, seed: u64) -> Result<Certificate> {
    let dense = phi.dense_matrix();
    let chol = dense
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("preconditioner".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..pairs {
        let w1 = sample_point(&mut rng, spec, LAMBDA_SAMPLE_MAX);
        let w2 = sample_point(&mut rng, spec, LAMBDA_SAMPLE_MAX);
        let du = chol.solve(&crate::operators::eval_forward(&w1, spec)?) - chol.solve(&crate::operators::eval_forward(&w2, spec)?);
        let dw = w1.stacked() - w2.stacked();
        let phi_du = &dense * &du;
        worst = worst.min(phi_du.dot(&dw) - beta * phi_du.dot(&du));
    }
    Ok(Certificate { name: "phi-cocoercivity", pairs, worst_margin: worst })
}

/// θ-averagedness of the forward-backward map `T` in the `Φ_s` norm:
/// `‖Tω₁ − Tω₂‖² ≤ ‖ω₁ − ω₂‖² − ((1−θ)/θ)‖(ω₁ − Tω₁) − (ω₂ − Tω₂)‖²`.
pub fn certify_averagedness(spec: &GameSpec, phi: &PreconditionerS, theta: f64, pairs: usize, seed: u64) -> Result<Certificate> {
    let dense = phi.dense_matrix();
    let qf = |v: &DVector<f64>| v.dot(&(&dense * v));
    let map = |w: &PrimalDualPoint| -> Result<DVector<f64>> {
        Ok(pfb_step(&SolverState::new(w.clone()), spec, phi)?.omega.stacked())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::INFINITY;
    for _ in 0..pairs {
        let w1 = sample_point(&mut rng, spec, LAMBDA_SAMPLE_MAX);
        let w2 = sample_point(&mut rng, spec, LAMBDA_SAMPLE_MAX);
        let (t1, t2) = (map(&w1)?, map(&w2)?);
        let (s1, s2) = (w1.stacked(), w2.stacked());
        let lhs = qf(&(&s1 - &s2)) - (1.0 - theta) / theta * qf(&((&s1 - &t1) - (&s2 - &t2)));
        worst = worst.min(lhs - qf(&(t1 - t2)));
    }
    Ok(Certificate { name: "theta-averagedness", pairs, worst_margin: worst })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivalenceReport {
    /// `‖T(ω*) − ω*‖_Φ` at the oracle solution.
    pub oracle_displacement: f64,
    /// `‖T(ω) − ω‖_Φ` at the near-fixed point `ω` found by iterating.
    pub near_fixed_displacement: f64,
    /// The same step measured in the Euclidean norm.
    pub near_fixed_euclidean: f64,
    /// Natural residual at `ω`.
    pub near_fixed_residual: f64,
    pub iterations: usize,
    pub tol: f64,
}

impl EquivalenceReport {
    pub fn passes(&self) -> bool {
        self.oracle_displacement <= self.tol
            && self.near_fixed_displacement <= self.tol / 10.0
            && self.near_fixed_residual <= self.tol
    }
}

const EQUIVALENCE_MAX_ITERS: usize = 1_000_000;

/// Both directions of the zero/fixed-point correspondence: the oracle zero
/// is a fixed point of the forward-backward map `T`, and a point that `T`
/// moves by at most `tol/10` has natural residual at most `tol`.
///
/// Displacements are measured in the `Φ_s` metric, the one in which `T` is
/// averaged and in which the solvers report their fixed-point residual. The
/// natural residual takes a unit step, so against a Euclidean displacement
/// it grows like `1/α`.
pub fn zer_fix_equivalence_report(spec: &GameSpec, phi: &PreconditionerS, tol: f64) -> Result<EquivalenceReport> {
    let star = oracle_vgne(spec)?;
    let oracle_displacement = pfb_step(&SolverState::new(star), spec, phi)?.last_residual;

    let mut state = SolverState::new(PrimalDualPoint::default_start(spec));
    let (mut displacement, mut euclidean) = (f64::INFINITY, f64::INFINITY);
    while state.iteration < EQUIVALENCE_MAX_ITERS {
        let next = pfb_step(&state, spec, phi)?;
        displacement = next.last_residual;
        euclidean = (next.omega.stacked() - state.omega.stacked()).norm();
        if displacement <= tol / 10.0 {
            break;
        }
        state = next;
    }
    if displacement > tol / 10.0 {
        warn!("no point with step below tol/10 found in {EQUIVALENCE_MAX_ITERS} iterations");
    }
    Ok(EquivalenceReport {
        oracle_displacement,
        near_fixed_displacement: displacement,
        near_fixed_euclidean: euclidean,
        near_fixed_residual: eval_t_residual(&state.omega, spec)?,
        iterations: state.iteration,
        tol,
    })
}

pub fn check_zer_fix_equivalence(spec: &GameSpec, phi: &PreconditionerS, tol: f64) -> Result<bool> {
    Ok(zer_fix_equivalence_report(spec, phi, tol)?.passes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::tests::quadratic_spec;
    use crate::game::CouplingConstraint;
    use crate::preconditioner::StepPolicy;

    fn scalar_game(lo: f64, hi: f64) -> GameSpec {
        quadratic_spec(
            &[1.0],
            DMatrix::zeros(1, 1),
            vec![vec![-3.0]],
            vec![BoxSet::uniform(1, lo, hi).unwrap()],
            CouplingConstraint::none(1, 1),
        )
    }

    fn coupled_pair() -> GameSpec {
        quadratic_spec(
            &[1.0, 1.0],
            DMatrix::from_element(1, 1, 1.0),
            vec![vec![-2.0], vec![-2.0]],
            vec![BoxSet::uniform(1, 0.0, 10.0).unwrap(); 2],
            CouplingConstraint::new(vec![DMatrix::from_element(1, 1, 1.0); 2], DVector::from_vec(vec![1.0])).unwrap(),
        )
    }

    #[test]
    fn oracle_scalar_examples() {
        let p = oracle_vgne(&scalar_game(-10.0, 10.0)).unwrap();
        assert!((p.x[0] - 3.0).abs() < 1e-14);
        assert_eq!(p.lambda.len(), 0);
        let p = oracle_vgne(&scalar_game(-10.0, 2.0)).unwrap();
        assert_eq!(p.x[0], 2.0);
    }

    #[test]
    fn oracle_coupled_pair() {
        let spec = coupled_pair();
        let p = oracle_vgne(&spec).unwrap();
        // By symmetry x₁ = x₂ = ½ on the active coupling row; stationarity
        // x_i + σ + σ/2 − 2 + μ = 0 gives μ = 2 − ½ − ½ − ¼ = ¾.
        assert!((p.x[0] - 0.5).abs() < 1e-12 && (p.x[1] - 0.5).abs() < 1e-12);
        assert!((p.lambda[0] - 0.75).abs() < 1e-12);
        assert!(check_kkt(&p, &spec).unwrap().passes(1e-10));

        // Cross-check with a long run of small steps.
        let phi = crate::preconditioner::build_phi_s(&[0.05, 0.05], 0.05, spec.coupling()).unwrap();
        let mut s = SolverState::new(PrimalDualPoint::default_start(&spec));
        for _ in 0..20_000 {
            s = pfb_step(&s, &spec, &phi).unwrap();
        }
        assert!((s.omega.x - &p.x).amax() < 1e-8);
    }

    #[test]
    fn oracle_preconditions() {
        let infeasible = quadratic_spec(
            &[1.0, 1.0],
            DMatrix::zeros(1, 1),
            vec![vec![0.0], vec![0.0]],
            vec![BoxSet::uniform(1, 0.0, 10.0).unwrap(); 2],
            CouplingConstraint::new(vec![DMatrix::from_element(1, 1, 1.0); 2], DVector::from_vec(vec![0.0])).unwrap(),
        );
        assert!(matches!(oracle_vgne(&infeasible), Err(Error::Oracle(_))));
        let unbounded = quadratic_spec(
            &[1.0],
            DMatrix::zeros(1, 1),
            vec![vec![0.0]],
            vec![BoxSet::uniform(1, 0.0, f64::INFINITY).unwrap()],
            CouplingConstraint::none(1, 1),
        );
        assert!(oracle_vgne(&unbounded).is_err());
        assert!(matches!(
            oracle_vgne_with_budget(&coupled_pair(), 0),
            Err(Error::Oracle(msg)) if msg.contains("budget")
        ));
    }

    #[test]
    fn kkt_examples() {
        let spec = coupled_pair();
        let star = oracle_vgne(&spec).unwrap();
        assert!(check_kkt(&star, &spec).unwrap().passes(1e-8));
        let mut moved = star.clone();
        moved.x[0] += 0.1;
        let rep = check_kkt(&moved, &spec).unwrap();
        assert!(rep.max_stationarity() >= 0.05);

        let free = scalar_game(-10.0, 10.0);
        let p = PrimalDualPoint::new(DVector::from_vec(vec![3.0]), DVector::zeros(0));
        let rep = check_kkt(&p, &free).unwrap();
        assert_eq!(rep.worst(), 0.0);
    }

    #[test]
    fn pfb_pairs_satisfy_inclusion() {
        let spec = coupled_pair();
        let phi = StepPolicy::default().resolve(&spec).unwrap();
        let split = pfb_splitting(&spec, &phi);
        let mut s = SolverState::new(PrimalDualPoint::new(DVector::from_vec(vec![9.0, 0.0]), DVector::from_vec(vec![2.0])));
        for _ in 0..100 {
            let next = pfb_step(&s, &spec, &phi).unwrap();
            assert!(check_fb_inclusion(&s.omega.stacked(), &next.omega.stacked(), &split, 1e-8).unwrap());
            s = next;
        }
    }

    #[test]
    fn stationary_inclusion_is_the_zero_condition() {
        let spec = coupled_pair();
        let phi = StepPolicy::default().resolve(&spec).unwrap();
        let split = pfb_splitting(&spec, &phi);
        let star = oracle_vgne(&spec).unwrap().stacked();
        assert!(check_fb_inclusion(&star, &star, &split, 1e-10).unwrap());
        let mut off = star.clone();
        off[0] = 0.2;
        assert!(!check_fb_inclusion(&off, &off, &split, 1e-10).unwrap());
    }

    #[test]
    fn unrelated_points_fail_inclusion() {
        let spec = coupled_pair();
        let phi = StepPolicy::default().resolve(&spec).unwrap();
        let split = pfb_splitting(&spec, &phi);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut failures = 0;
        for _ in 0..100 {
            let prev = sample_point(&mut rng, &spec, 5.0).stacked();
            let next = sample_point(&mut rng, &spec, 5.0).stacked();
            if !check_fb_inclusion(&prev, &next, &split, 1e-8).unwrap() {
                failures += 1;
            }
        }
        assert!(failures >= 99);
        let outside = DVector::from_vec(vec![-1.0, 0.0, 0.0]);
        assert!(check_fb_inclusion(&outside, &outside, &split, 1e-8).is_err());
    }

    #[test]
    fn constants_of_identity_map() {
        let spec = quadratic_spec(
            &[1.0, 1.0],
            DMatrix::zeros(2, 2),
            vec![vec![0.0, 0.0]; 2],
            vec![BoxSet::uniform(2, -1.0, 1.0).unwrap(); 2],
            CouplingConstraint::none(2, 2),
        );
        let est = estimate_constants(&spec, 100, 3).unwrap();
        assert!((est.eta_hat - 1.0).abs() < 1e-12 && (est.lip_hat - 1.0).abs() < 1e-12);
        assert_eq!(est, estimate_constants(&spec, 100, 3).unwrap());
        let point = quadratic_spec(
            &[1.0],
            DMatrix::zeros(1, 1),
            vec![vec![0.0]],
            vec![BoxSet::uniform(1, 1.0, 1.0).unwrap()],
            CouplingConstraint::none(1, 1),
        );
        assert!(estimate_constants(&point, 10, 0).is_err());
        assert!(estimate_constants(&spec, 1, 0).is_err());
    }

    #[test]
    fn sampled_constants_bracket_exact_ones() {
        let spec = quadratic_spec(
            &[1.0, 2.0, 1.5],
            DMatrix::from_row_slice(2, 2, &[1.0, 0.7, -0.3, 0.5]),
            vec![vec![0.0, 0.0]; 3],
            vec![BoxSet::uniform(2, -1.0, 1.0).unwrap(); 3],
            CouplingConstraint::none(3, 2),
        );
        let exact = spec.exact_monotonicity().unwrap();
        let est = estimate_constants(&spec, 10_000, 1).unwrap();
        assert!(exact.eta <= est.eta_hat + 1e-9);
        assert!(est.lip_hat <= exact.lip_f + 1e-9);
        assert!(est.eta_hat <= est.lip_hat);
        let rel = (est.eta_hat - exact.eta) / exact.eta;
        debug!("sampled eta within {:.2}% of the exact value", 100.0 * rel);
    }

    #[test]
    fn equivalence_on_scalar_and_coupled_games() {
        let spec = scalar_game(-10.0, 10.0);
        let phi = crate::preconditioner::build_phi_s(&[0.5], 1.0, spec.coupling()).unwrap();
        let rep = zer_fix_equivalence_report(&spec, &phi, 1e-8).unwrap();
        assert_eq!(rep.oracle_displacement, 0.0);
        assert!(rep.passes());
        let spec = coupled_pair();
        let phi = StepPolicy::default().resolve(&spec).unwrap();
        assert!(check_zer_fix_equivalence(&spec, &phi, 1e-8).unwrap());
    }

    #[test]
    fn certificates_hold_on_a_small_game() {
        let spec = coupled_pair();
        let phi = StepPolicy::default().resolve(&spec).unwrap();
        let mono = spec.resolved_monotonicity().unwrap();
        for cert in certify_forward_cocoercivity(&spec, 200, 1).unwrap() {
            assert!(cert.holds(1e-10), "{cert:?}");
        }
        let beta = crate::preconditioner::cocoercivity_beta(&phi, mono.eta, mono.lip_f).unwrap();
        assert!(certify_phi_cocoercivity(&spec, &phi, beta, 200, 2).unwrap().holds(1e-9));
        let theta = crate::preconditioner::averagedness_theta(beta).unwrap();
        assert!(certify_averagedness(&spec, &phi, theta, 200, 3).unwrap().holds(1e-9));
    }
}

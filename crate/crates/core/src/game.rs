//! Average-aggregative games with box local sets and affine coupling
//! constraints.
//!
//! Agent `i` picks `x_i` in a box `Ω_i ⊂ ℝⁿ` and pays `f_i(x_i, σ(x))`, where
//! `σ(x)` is the average of all decisions. The agents additionally share the
//! coupling constraint `A x ≤ b` with `A = [A_1, …, A_N]`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_finite, check_len, Error, Result};

/// Componentwise interval `[lower, upper]`. Infinite bounds are allowed for
/// modelling, but solvers require a bounded box.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSet {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl BoxSet {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        check_len("box upper bound", lower.len(), upper.len())?;
        for (j, (lo, hi)) in lower.iter().zip(upper.iter()).enumerate() {
            if lo.is_nan() || hi.is_nan() {
                return Err(Error::InvalidParameter(format!("NaN bound at coordinate {j}")));
            }
            if lo > hi {
                return Err(Error::InvalidParameter(format!(
                    "empty box: lower {lo} > upper {hi} at coordinate {j}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[lo, hi]ⁿ`.
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(DVector::from_element(dim, lo), DVector::from_element(dim, hi))
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn is_bounded(&self) -> bool {
        self.lower.iter().chain(self.upper.iter()).all(|v| v.is_finite())
    }

    /// Midpoint of the box. Only meaningful for bounded boxes.
    pub fn center(&self) -> DVector<f64> {
        (&self.lower + &self.upper) * 0.5
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (lo, hi))| *v >= lo - tol && *v <= hi + tol)
    }

    /// Clamp `y` in place.
    pub fn clamp_in_place(&self, y: &mut [f64]) {
        for (v, (lo, hi)) in y.iter_mut().zip(self.lower.iter().zip(self.upper.iter())) {
            *v = v.max(*lo).min(*hi);
        }
    }
}

/// Built-in cost family `f_i(x_i, s) = ½ q_i ‖x_i‖² + (c s + d_i)ᵀ x_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticCost {
    pub q: Vec<f64>,
    pub c: DMatrix<f64>,
    pub d: Vec<DVector<f64>>,
}

/// `(agent, x_i, s) ↦ ℝⁿ`.
pub type GradientFn = Arc<dyn Fn(usize, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
/// `(agent, x_i, s) ↦ f_i(x_i, s)`.
pub type CostFn = Arc<dyn Fn(usize, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;

/// Caller-supplied cost oracle.
///
/// `total_gradient(i, x_i, s)` must return the gradient of agent `i`'s cost
/// with respect to its own decision, *including* the contribution through the
/// aggregate, evaluated at aggregate value `s`. `partial_gradient`, when
/// given, is the partial derivative of `f_i` in its first argument only.
#[derive(Clone)]
pub struct OracleCost {
    pub total_gradient: GradientFn,
    pub partial_gradient: Option<GradientFn>,
    pub cost: Option<CostFn>,
}

impl fmt::Debug for OracleCost {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OracleCost")
            .field("partial_gradient", &self.partial_gradient.is_some())
            .field("cost", &self.cost.is_some())
            .finish_non_exhaustive()
    }
}

#[derive(Clone, Debug)]
pub enum CostModel {
    Quadratic(QuadraticCost),
    Oracle(OracleCost),
}

/// How the extended pseudo-gradient treats the aggregate estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EstimateConvention {
    /// `∂f_i/∂x_i (x_i, z_i)`, no term through the aggregate.
    #[default]
    Partial,
    /// The full game gradient `∂J_i/∂x_i` evaluated with the aggregate
    /// replaced by the estimate `z_i`. With exact estimates this reproduces
    /// the pseudo-gradient.
    TotalAtEstimate,
}

/// Shared affine constraint `A x ≤ b`, with `A` split into per-agent column
/// blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingConstraint {
    blocks: Vec<DMatrix<f64>>,
    b: DVector<f64>,
    matrix: DMatrix<f64>,
}

impl CouplingConstraint {
    pub fn new(blocks: Vec<DMatrix<f64>>, b: DVector<f64>) -> Result<Self> {
        let m = b.len();
        let n = blocks.first().map(|a| a.ncols()).unwrap_or(0);
        for (i, block) in blocks.iter().enumerate() {
            check_len(&format!("row count of A_{i}"), m, block.nrows())?;
            check_len(&format!("column count of A_{i}"), n, block.ncols())?;
        }
        let mut matrix = DMatrix::zeros(m, n * blocks.len());
        for (i, block) in blocks.iter().enumerate() {
            matrix.view_mut((0, i * n), (m, n)).copy_from(block);
        }
        check_finite("coupling matrix", matrix.as_slice())?;
        check_finite("coupling bound", b.as_slice())?;
        Ok(Self { blocks, b, matrix })
    }

    /// No coupling rows (`m = 0`).
    pub fn none(num_agents: usize, dim: usize) -> Self {
        Self {
            blocks: vec![DMatrix::zeros(0, dim); num_agents],
            b: DVector::zeros(0),
            matrix: DMatrix::zeros(0, dim * num_agents),
        }
    }

    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    /// The stacked matrix `A = [A_1, …, A_N]`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Monotonicity {
    /// Strong monotonicity constant of the pseudo-gradient.
    pub eta: f64,
    /// Lipschitz constant of the pseudo-gradient.
    pub lip_f: f64,
}

impl Monotonicity {
    pub fn new(eta: f64, lip_f: f64) -> Result<Self> {
        if !(eta > 0.0 && lip_f > 0.0 && eta.is_finite() && lip_f.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "monotonicity constants must be positive and finite (eta={eta}, lip_f={lip_f})"
            )));
        }
        if eta > lip_f {
            return Err(Error::InvalidParameter(format!(
                "eta={eta} exceeds lip_f={lip_f}"
            )));
        }
        Ok(Self { eta, lip_f })
    }

    /// Cocoercivity constant `η/ℓ_F²` of the pseudo-gradient.
    pub fn cocoercivity(&self) -> f64 {
        self.eta / (self.lip_f * self.lip_f)
    }
}

#[derive(Clone, Debug)]
pub struct GameSpec {
    num_agents: usize,
    decision_dim: usize,
    local_sets: Vec<BoxSet>,
    cost: CostModel,
    coupling: CouplingConstraint,
    monotonicity: Option<Monotonicity>,
}

impl GameSpec {
    pub fn new(
        num_agents: usize,
        decision_dim: usize,
        local_sets: Vec<BoxSet>,
        cost: CostModel,
        coupling: CouplingConstraint,
        monotonicity: Option<Monotonicity>,
    ) -> Result<Self> {
        if num_agents == 0 || decision_dim == 0 {
            return Err(Error::InvalidParameter(
                "num_agents and decision_dim must be positive".into(),
            ));
        }
        check_len("number of local sets", num_agents, local_sets.len())?;
        for (i, set) in local_sets.iter().enumerate() {
            check_len(&format!("dimension of local set {i}"), decision_dim, set.dim())?;
        }
        if let CostModel::Quadratic(qc) = &cost {
            check_len("quadratic q", num_agents, qc.q.len())?;
            check_len("quadratic d", num_agents, qc.d.len())?;
            check_len("quadratic c rows", decision_dim, qc.c.nrows())?;
            check_len("quadratic c cols", decision_dim, qc.c.ncols())?;
            for (i, q) in qc.q.iter().enumerate() {
                if !(*q > 0.0 && q.is_finite()) {
                    return Err(Error::InvalidParameter(format!("q_{i} = {q} must be positive")));
                }
            }
            for (i, d) in qc.d.iter().enumerate() {
                check_len(&format!("quadratic d_{i}"), decision_dim, d.len())?;
                check_finite(&format!("quadratic d_{i}"), d.as_slice())?;
            }
            check_finite("quadratic c", qc.c.as_slice())?;
        }
        check_len("coupling blocks", num_agents, coupling.blocks.len())?;
        if coupling.num_rows() > 0 {
            check_len("coupling block columns", decision_dim, coupling.blocks[0].ncols())?;
        }
        if let Some(mono) = monotonicity {
            Monotonicity::new(mono.eta, mono.lip_f)?;
        }
        Ok(Self {
            num_agents,
            decision_dim,
            local_sets,
            cost,
            coupling,
            monotonicity,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.num_agents
    }

    pub fn decision_dim(&self) -> usize {
        self.decision_dim
    }

    /// Length `nN` of the stacked strategy.
    pub fn primal_dim(&self) -> usize {
        self.num_agents * self.decision_dim
    }

    /// Number of coupling rows `m`.
    pub fn num_constraints(&self) -> usize {
        self.coupling.num_rows()
    }

    pub fn local_sets(&self) -> &[BoxSet] {
        &self.local_sets
    }

    pub fn cost(&self) -> &CostModel {
        &self.cost
    }

    pub fn coupling(&self) -> &CouplingConstraint {
        &self.coupling
    }

    /// Constants declared with the game, if any.
    pub fn monotonicity(&self) -> Option<Monotonicity> {
        self.monotonicity
    }

    pub fn with_monotonicity(mut self, monotonicity: Option<Monotonicity>) -> Result<Self> {
        if let Some(mono) = monotonicity {
            Monotonicity::new(mono.eta, mono.lip_f)?;
        }
        self.monotonicity = monotonicity;
        Ok(self)
    }

    /// Declared constants, falling back to the exact ones of a quadratic cost.
    pub fn resolved_monotonicity(&self) -> Option<Monotonicity> {
        self.monotonicity.or_else(|| self.exact_monotonicity())
    }

    pub fn is_compact(&self) -> bool {
        self.local_sets.iter().all(BoxSet::is_bounded)
    }

    /// The collective box `Ω` as stacked bound vectors.
    pub fn stacked_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.decision_dim;
        let mut lo = DVector::zeros(self.primal_dim());
        let mut hi = DVector::zeros(self.primal_dim());
        for (i, set) in self.local_sets.iter().enumerate() {
            lo.rows_mut(i * n, n).copy_from(set.lower());
            hi.rows_mut(i * n, n).copy_from(set.upper());
        }
        (lo, hi)
    }

    /// Projection onto `Ω`, agent block by agent block.
    pub fn project_omega(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = x.clone();
        self.project_omega_in_place(&mut out);
        out
    }

    pub(crate) fn project_omega_in_place(&self, x: &mut DVector<f64>) {
        let n = self.decision_dim;
        for (i, set) in self.local_sets.iter().enumerate() {
            set.clamp_in_place(&mut x.as_mut_slice()[i * n..(i + 1) * n]);
        }
    }

    pub(crate) fn block<'a>(&self, x: &'a DVector<f64>, i: usize) -> &'a [f64] {
        let n = self.decision_dim;
        &x.as_slice()[i * n..(i + 1) * n]
    }

    /// Affine representation `F(x) = H x + h` of the pseudo-gradient, available
    /// for quadratic costs.
    pub fn affine_map(&self) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let CostModel::Quadratic(qc) = &self.cost else {
            return None;
        };
        let (n, big_n) = (self.decision_dim, self.num_agents);
        let nn = n * big_n;
        let inv_n = 1.0 / big_n as f64;
        let mut h = DMatrix::zeros(nn, nn);
        let mut offset = DVector::zeros(nn);
        for i in 0..big_n {
            for j in 0..big_n {
                let mut blk = &qc.c * inv_n;
                if i == j {
                    blk += qc.c.transpose() * inv_n;
                    for k in 0..n {
                        blk[(k, k)] += qc.q[i];
                    }
                }
                h.view_mut((i * n, j * n), (n, n)).copy_from(&blk);
            }
            offset.rows_mut(i * n, n).copy_from(&qc.d[i]);
        }
        Some((h, offset))
    }

    /// Exact `η = λ_min((H + Hᵀ)/2)` and `ℓ_F = ‖H‖` for quadratic costs.
    /// Returns `None` for oracle costs or when `H` is not strongly monotone.
    pub fn exact_monotonicity(&self) -> Option<Monotonicity> {
        let (h, _) = self.affine_map()?;
        let sym = (&h + h.transpose()) * 0.5;
        let eta = sym.symmetric_eigenvalues().min();
        let lip_f = h.singular_values().max();
        Monotonicity::new(eta, lip_f).ok()
    }
}

/// Stacked primal-dual variable `ω = col(x, λ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimalDualPoint {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
}

impl PrimalDualPoint {
    pub fn new(x: DVector<f64>, lambda: DVector<f64>) -> Self {
        Self { x, lambda }
    }

    /// `x = proj_Ω(0)`, `λ = 0`.
    pub fn default_start(spec: &GameSpec) -> Self {
        Self {
            x: spec.project_omega(&DVector::zeros(spec.primal_dim())),
            lambda: DVector::zeros(spec.num_constraints()),
        }
    }

    pub fn check_dims(&self, spec: &GameSpec) -> Result<()> {
        check_len("primal point", spec.primal_dim(), self.x.len())?;
        check_len("multiplier", spec.num_constraints(), self.lambda.len())
    }

    pub fn stacked(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.x.len() + self.lambda.len());
        out.rows_mut(0, self.x.len()).copy_from(&self.x);
        out.rows_mut(self.x.len(), self.lambda.len()).copy_from(&self.lambda);
        out
    }

    pub fn from_stacked(v: &DVector<f64>, primal_dim: usize) -> Self {
        Self {
            x: v.rows(0, primal_dim).into_owned(),
            lambda: v.rows(primal_dim, v.len() - primal_dim).into_owned(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (&self.x - &other.x)
            .iter()
            .chain((&self.lambda - &other.lambda).iter())
            .fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }
}

/// `σ(x) = (1/N) Σ_i x_i`.
pub fn aggregate(x: &DVector<f64>, spec: &GameSpec) -> Result<DVector<f64>> {
    check_len("stacked strategy", spec.primal_dim(), x.len())?;
    let n = spec.decision_dim;
    let mut sum = DVector::zeros(n);
    for i in 0..spec.num_agents {
        sum += x.rows(i * n, n);
    }
    Ok(sum / spec.num_agents as f64)
}

/// Stacked gradients `col(∂_{x_i} J_i(x))` of every agent's cost in its own
/// decision, including the term through the aggregate.
pub fn pseudo_gradient(x: &DVector<f64>, spec: &GameSpec) -> Result<DVector<f64>> {
    let sigma = aggregate(x, spec)?;
    let n = spec.decision_dim;
    let mut out = DVector::zeros(spec.primal_dim());
    match &spec.cost {
        CostModel::Quadratic(qc) => {
            let c_sigma = &qc.c * &sigma;
            let inv_n = 1.0 / spec.num_agents as f64;
            for i in 0..spec.num_agents {
                let xi = x.rows(i * n, n);
                let g = xi * qc.q[i] + &c_sigma + qc.c.tr_mul(&xi) * inv_n + &qc.d[i];
                out.rows_mut(i * n, n).copy_from(&g);
            }
        }
        CostModel::Oracle(oc) => {
            for i in 0..spec.num_agents {
                let xi = x.rows(i * n, n).into_owned();
                let g = (oc.total_gradient)(i, &xi, &sigma);
                check_len(&format!("oracle gradient of agent {i}"), n, g.len())?;
                out.rows_mut(i * n, n).copy_from(&g);
            }
        }
    }
    check_finite("pseudo-gradient", out.as_slice())?;
    Ok(out)
}

/// Pseudo-gradient on the augmented space of decisions and per-agent
/// aggregate estimates `z = col(z_1, …, z_N)`.
pub fn extended_pseudo_gradient(
    x: &DVector<f64>,
    z: &DVector<f64>,
    spec: &GameSpec,
    convention: EstimateConvention,
) -> Result<DVector<f64>> {
    check_len("stacked strategy", spec.primal_dim(), x.len())?;
    check_len("stacked estimates", spec.primal_dim(), z.len())?;
    let n = spec.decision_dim;
    let mut out = DVector::zeros(spec.primal_dim());
    match &spec.cost {
        CostModel::Quadratic(qc) => {
            let inv_n = 1.0 / spec.num_agents as f64;
            for i in 0..spec.num_agents {
                let xi = x.rows(i * n, n);
                let zi = z.rows(i * n, n);
                let mut g = xi * qc.q[i] + &qc.c * zi + &qc.d[i];
                if convention == EstimateConvention::TotalAtEstimate {
                    g += qc.c.tr_mul(&xi) * inv_n;
                }
                out.rows_mut(i * n, n).copy_from(&g);
            }
        }
        CostModel::Oracle(oc) => {
            let grad = match convention {
                EstimateConvention::TotalAtEstimate => &oc.total_gradient,
                EstimateConvention::Partial => oc.partial_gradient.as_ref().ok_or_else(|| {
                    Error::Unsupported(
                        "partial estimate convention needs an oracle partial gradient".into(),
                    )
                })?,
            };
            for i in 0..spec.num_agents {
                let xi = x.rows(i * n, n).into_owned();
                let zi = z.rows(i * n, n).into_owned();
                let g = grad(i, &xi, &zi);
                check_len(&format!("oracle gradient of agent {i}"), n, g.len())?;
                out.rows_mut(i * n, n).copy_from(&g);
            }
        }
    }
    check_finite("extended pseudo-gradient", out.as_slice())?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeasibilityReport {
    /// `(stacked coordinate, distance outside the box)` for every coordinate
    /// violating its bounds by more than the tolerance.
    pub box_violations: Vec<(usize, f64)>,
    /// `max_r (A x − b)_r`; `-∞` without coupling rows.
    pub max_coupling_value: f64,
    /// `(row, λ_r)` for every multiplier below `-tol`.
    pub negative_multipliers: Vec<(usize, f64)>,
    pub tol: f64,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.box_violations.is_empty()
            && self.max_coupling_value <= self.tol
            && self.negative_multipliers.is_empty()
    }

    /// Slack of the tightest coupling row, `-max(Ax − b)`.
    pub fn margin(&self) -> f64 {
        -self.max_coupling_value
    }

    /// Largest violation across boxes, coupling rows and multiplier signs.
    pub fn max_violation(&self) -> f64 {
        let boxes = self.box_violations.iter().map(|(_, v)| *v);
        let duals = self.negative_multipliers.iter().map(|(_, v)| -v);
        boxes
            .chain(duals)
            .fold(self.max_coupling_value.max(0.0), f64::max)
    }
}

pub fn feasibility_check(point: &PrimalDualPoint, spec: &GameSpec, tol: f64) -> FeasibilityReport {
    let (lo, hi) = spec.stacked_bounds();
    let box_violations = point
        .x
        .iter()
        .enumerate()
        .filter_map(|(j, v)| {
            let excess = (lo[j] - v).max(v - hi[j]);
            (excess > tol).then_some((j, excess))
        })
        .collect();
    let max_coupling_value = if spec.num_constraints() == 0 || point.x.len() != spec.primal_dim() {
        f64::NEG_INFINITY
    } else {
        (spec.coupling.matrix() * &point.x - spec.coupling.b()).max()
    };
    let negative_multipliers = point
        .lambda
        .iter()
        .enumerate()
        .filter_map(|(r, v)| (*v < -tol).then_some((r, *v)))
        .collect();
    FeasibilityReport {
        box_violations,
        max_coupling_value,
        negative_multipliers,
        tol,
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn quadratic_spec(
        q: &[f64],
        c: DMatrix<f64>,
        d: Vec<Vec<f64>>,
        boxes: Vec<BoxSet>,
        coupling: CouplingConstraint,
    ) -> GameSpec {
        let n = c.nrows();
        GameSpec::new(
            q.len(),
            n,
            boxes,
            CostModel::Quadratic(QuadraticCost {
                q: q.to_vec(),
                c,
                d: d.into_iter().map(DVector::from_vec).collect(),
            }),
            coupling,
            None,
        )
        .unwrap()
    }

    fn scalar_spec(q: &[f64], c: f64, d: &[f64]) -> GameSpec {
        let big_n = q.len();
        quadratic_spec(
            q,
            DMatrix::from_element(1, 1, c),
            d.iter().map(|v| vec![*v]).collect(),
            vec![BoxSet::uniform(1, -10.0, 10.0).unwrap(); big_n],
            CouplingConstraint::none(big_n, 1),
        )
    }

    fn vec_spec(big_n: usize, n: usize) -> GameSpec {
        quadratic_spec(
            &vec![1.0; big_n],
            DMatrix::zeros(n, n),
            vec![vec![0.0; n]; big_n],
            vec![BoxSet::uniform(n, -1.0, 1.0).unwrap(); big_n],
            CouplingConstraint::none(big_n, n),
        )
    }

    #[test]
    fn aggregate_examples() {
        let s = vec_spec(2, 1);
        assert_eq!(aggregate(&DVector::from_vec(vec![1.0, 3.0]), &s).unwrap(), DVector::from_vec(vec![2.0]));
        let s = vec_spec(3, 2);
        assert_eq!(aggregate(&DVector::zeros(6), &s).unwrap(), DVector::zeros(2));
        let s = vec_spec(2, 2);
        assert_eq!(
            aggregate(&DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]), &s).unwrap(),
            DVector::from_vec(vec![2.0, 3.0])
        );
    }

    #[test]
    fn aggregate_rejects_wrong_length() {
        let s = vec_spec(2, 2);
        let err = aggregate(&DVector::zeros(3), &s).unwrap_err();
        match err {
            Error::DimensionMismatch { expected, got, .. } => assert_eq!((expected, got), (4, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn decoupled_pseudo_gradient() {
        let s = scalar_spec(&[1.0, 1.0], 0.0, &[0.0, 0.0]);
        let g = pseudo_gradient(&DVector::from_vec(vec![5.0, -5.0]), &s).unwrap();
        assert_eq!(g, DVector::from_vec(vec![5.0, -5.0]));
    }

    #[test]
    fn single_agent_pseudo_gradient_matches_finite_difference() {
        // J(x) = ½·2x² + (x·x + 3)x, so J'(x) = 2x + 2x + 3.
        let cost = |x: f64| 0.5 * 2.0 * x * x + (x * x + 3.0 * x);
        let h = 1e-6;
        let fd = (cost(1.0 + h) - cost(1.0 - h)) / (2.0 * h);
        assert!((fd - 7.0).abs() < 1e-6);
        let s = scalar_spec(&[2.0], 1.0, &[3.0]);
        let g = pseudo_gradient(&DVector::from_vec(vec![1.0]), &s).unwrap();
        assert!((g[0] - fd).abs() < 1e-6);
        assert_eq!(g[0], 7.0);
    }

    #[test]
    fn extended_pseudo_gradient_examples() {
        let s = scalar_spec(&[1.0, 1.0], 1.0, &[0.0, 0.0]);
        let x = DVector::from_vec(vec![1.0, 1.0]);
        let z = DVector::from_vec(vec![2.0, 4.0]);
        let g = extended_pseudo_gradient(&x, &z, &s, EstimateConvention::Partial).unwrap();
        assert_eq!(g, DVector::from_vec(vec![3.0, 5.0]));
    }

    #[test]
    fn total_at_estimate_reproduces_pseudo_gradient() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        let s = quadratic_spec(
            &[1.0, 2.0, 1.5],
            c.clone(),
            vec![vec![0.1, -0.2], vec![0.3, 0.0], vec![-1.0, 1.0]],
            vec![BoxSet::uniform(2, -1.0, 1.0).unwrap(); 3],
            CouplingConstraint::none(3, 2),
        );
        let x = DVector::from_vec(vec![0.2, -0.4, 0.9, 0.1, -0.3, 0.5]);
        let sigma = aggregate(&x, &s).unwrap();
        let z = DVector::from_iterator(6, (0..3).flat_map(|_| sigma.iter().copied()));
        let f = pseudo_gradient(&x, &s).unwrap();
        let total = extended_pseudo_gradient(&x, &z, &s, EstimateConvention::TotalAtEstimate).unwrap();
        assert!((&f - &total).amax() < 1e-14);
        // The partial convention drops exactly the (1/N) cᵀ x_i blocks.
        let partial = extended_pseudo_gradient(&x, &z, &s, EstimateConvention::Partial).unwrap();
        for i in 0..3 {
            let xi = x.rows(2 * i, 2);
            let expected = c.tr_mul(&xi) / 3.0;
            let diff = f.rows(2 * i, 2) - partial.rows(2 * i, 2);
            assert!((diff - expected).amax() < 1e-14);
        }
    }

    #[test]
    fn affine_map_matches_blockwise_evaluation() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, -0.5, 0.25, 2.0]);
        let s = quadratic_spec(
            &[1.0, 2.0],
            c,
            vec![vec![0.1, -0.2], vec![0.3, 0.0]],
            vec![BoxSet::uniform(2, -1.0, 1.0).unwrap(); 2],
            CouplingConstraint::none(2, 2),
        );
        let (h, off) = s.affine_map().unwrap();
        let x = DVector::from_vec(vec![0.3, -0.7, 0.2, 0.8]);
        let direct = pseudo_gradient(&x, &s).unwrap();
        assert!((h * &x + off - direct).amax() < 1e-14);
    }

    #[test]
    fn oracle_dimension_and_finiteness_errors() {
        let bad_dim: GradientFn = Arc::new(|_, _, _| DVector::zeros(2));
        let spec = GameSpec::new(
            1,
            1,
            vec![BoxSet::uniform(1, 0.0, 1.0).unwrap()],
            CostModel::Oracle(OracleCost { total_gradient: bad_dim, partial_gradient: None, cost: None }),
            CouplingConstraint::none(1, 1),
            None,
        )
        .unwrap();
        assert!(matches!(
            pseudo_gradient(&DVector::zeros(1), &spec),
            Err(Error::DimensionMismatch { .. })
        ));
        let nan: GradientFn = Arc::new(|_, _, _| DVector::from_element(1, f64::NAN));
        let spec = GameSpec::new(
            1,
            1,
            vec![BoxSet::uniform(1, 0.0, 1.0).unwrap()],
            CostModel::Oracle(OracleCost { total_gradient: nan, partial_gradient: None, cost: None }),
            CouplingConstraint::none(1, 1),
            None,
        )
        .unwrap();
        assert!(matches!(pseudo_gradient(&DVector::zeros(1), &spec), Err(Error::NonFinite { .. })));
        assert!(matches!(
            extended_pseudo_gradient(&DVector::zeros(1), &DVector::zeros(1), &spec, EstimateConvention::Partial),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn spec_invariants_are_enforced() {
        assert!(BoxSet::new(DVector::from_vec(vec![1.0]), DVector::from_vec(vec![0.0])).is_err());
        assert!(Monotonicity::new(2.0, 1.0).is_err());
        let bad_q = GameSpec::new(
            1,
            1,
            vec![BoxSet::uniform(1, 0.0, 1.0).unwrap()],
            CostModel::Quadratic(QuadraticCost {
                q: vec![0.0],
                c: DMatrix::zeros(1, 1),
                d: vec![DVector::zeros(1)],
            }),
            CouplingConstraint::none(1, 1),
            None,
        );
        assert!(bad_q.is_err());
        let ragged = CouplingConstraint::new(
            vec![DMatrix::zeros(1, 1), DMatrix::zeros(2, 1)],
            DVector::zeros(1),
        );
        assert!(matches!(ragged, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn feasibility_examples() {
        let coupling = CouplingConstraint::new(
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)],
            DVector::from_vec(vec![1.0]),
        )
        .unwrap();
        let s = quadratic_spec(
            &[1.0, 1.0],
            DMatrix::zeros(1, 1),
            vec![vec![0.0], vec![0.0]],
            vec![BoxSet::uniform(1, -1.0, 1.0).unwrap(); 2],
            coupling,
        );
        let p = PrimalDualPoint::new(DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![0.0]));
        let rep = feasibility_check(&p, &s, 1e-9);
        assert!(rep.is_feasible());
        assert_eq!(rep.margin(), 1.0);

        let p = PrimalDualPoint::new(DVector::from_vec(vec![1.5, -1.0]), DVector::from_vec(vec![0.0]));
        let rep = feasibility_check(&p, &s, 1e-9);
        assert!(!rep.is_feasible());
        assert_eq!(rep.box_violations, vec![(0, 0.5)]);

        let p = PrimalDualPoint::new(DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![-0.25]));
        let rep = feasibility_check(&p, &s, 1e-9);
        assert_eq!(rep.negative_multipliers, vec![(0, -0.25)]);
        assert_eq!(rep.max_violation(), 0.25);
    }
}

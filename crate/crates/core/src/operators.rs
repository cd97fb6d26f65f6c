//! The KKT operator of the game and its forward/backward splitting.
//!
//! With `ω = col(x, λ)` the KKT operator is
//!
//! ```text
//! T(ω) = [ N_Ω(x) + F(x) + Aᵀλ ;  N_{ℝᵐ≥0}(λ) − (Ax − b) ]
//! ```
//!
//! and splits into the single-valued forward part `𝒜(ω) = col(F(x), b)` and
//! the backward part `ℬ = N_{Ω×ℝᵐ≥0} + S`, where `S = [[0, Aᵀ], [−A, 0]]` is
//! skew-symmetric.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game::{pseudo_gradient, BoxSet, GameSpec, PrimalDualPoint};

/// Componentwise clamp of `y` into `set`.
///
/// # Panics
/// If `y` and `set` have different dimensions.
pub fn project_box(y: &DVector<f64>, set: &BoxSet) -> DVector<f64> {
    assert_eq!(y.len(), set.dim(), "project_box: dimension mismatch");
    let mut out = y.clone();
    set.clamp_in_place(out.as_mut_slice());
    out
}

pub fn project_nonneg(y: &DVector<f64>) -> DVector<f64> {
    y.map(|v| v.max(0.0))
}

/// Whether `v ∈ N_set(x)` up to `tol`.
///
/// A coordinate is treated as active at a bound when `x_j` lies within `tol`
/// of it; interior coordinates need `|v_j| ≤ tol`, coordinates at the upper
/// bound need `v_j ≥ −tol`, coordinates at the lower bound need `v_j ≤ tol`.
/// The normal cone is empty outside the set, which is reported as an error.
pub fn normal_cone_membership(v: &[f64], x: &[f64], set: &BoxSet, tol: f64) -> Result<bool> {
    if v.len() != set.dim() || x.len() != set.dim() {
        return Err(Error::DimensionMismatch {
            what: "normal cone arguments".into(),
            expected: set.dim(),
            got: if v.len() != set.dim() { v.len() } else { x.len() },
        });
    }
    if !set.contains(x, tol) {
        return Err(Error::OutsideSet(format!(
            "normal cone is empty at a point outside the box (tol {tol:e})"
        )));
    }
    let ok = v
        .iter()
        .zip(x)
        .zip(set.lower().iter().zip(set.upper().iter()))
        .all(|((&vj, &xj), (&lo, &hi))| {
            let at_lower = xj <= lo + tol;
            let at_upper = xj >= hi - tol;
            match (at_lower, at_upper) {
                (true, true) => true,
                (true, false) => vj <= tol,
                (false, true) => vj >= -tol,
                (false, false) => vj.abs() <= tol,
            }
        });
    Ok(ok)
}

/// `𝒜(ω) = col(F(x), b)`; independent of `λ`.
pub fn eval_forward(omega: &PrimalDualPoint, spec: &GameSpec) -> Result<DVector<f64>> {
    omega.check_dims(spec)?;
    let f = pseudo_gradient(&omega.x, spec)?;
    let mut out = DVector::zeros(f.len() + spec.num_constraints());
    out.rows_mut(0, f.len()).copy_from(&f);
    out.rows_mut(f.len(), spec.num_constraints()).copy_from(spec.coupling().b());
    Ok(out)
}

/// Natural-map residual vector
/// `col(x − proj_Ω(x − F(x) − Aᵀλ), λ − proj_{≥0}(λ + Ax − b))`.
pub fn natural_residual_vector(omega: &PrimalDualPoint, spec: &GameSpec) -> Result<DVector<f64>> {
    omega.check_dims(spec)?;
    let a = spec.coupling().matrix();
    let grad = pseudo_gradient(&omega.x, spec)? + a.tr_mul(&omega.lambda);
    let x_res = &omega.x - spec.project_omega(&(&omega.x - grad));
    let slack = a * &omega.x - spec.coupling().b();
    let l_res = &omega.lambda - project_nonneg(&(&omega.lambda + slack));
    Ok(PrimalDualPoint::new(x_res, l_res).stacked())
}

/// Euclidean norm of the natural residual; zero exactly on `zer(T)`.
pub fn eval_t_residual(omega: &PrimalDualPoint, spec: &GameSpec) -> Result<f64> {
    Ok(natural_residual_vector(omega, spec)?.norm())
}

/// The splitting `T = 𝒜 + ℬ` of a game, with the linear part of `ℬ`
/// materialized as a dense matrix.
#[derive(Clone, Debug)]
pub struct SplitOperatorPair<'a> {
    spec: &'a GameSpec,
    backward_skew: DMatrix<f64>,
    backward_cone: Vec<BoxSet>,
}

impl<'a> SplitOperatorPair<'a> {
    pub fn new(spec: &'a GameSpec) -> Self {
        let (nx, m) = (spec.primal_dim(), spec.num_constraints());
        let a = spec.coupling().matrix();
        let mut skew = DMatrix::zeros(nx + m, nx + m);
        skew.view_mut((0, nx), (nx, m)).copy_from(&a.transpose());
        skew.view_mut((nx, 0), (m, nx)).copy_from(&(-a));
        debug_assert_eq!(skew.transpose(), -&skew);
        let mut backward_cone = spec.local_sets().to_vec();
        if m > 0 {
            backward_cone.push(nonneg_orthant(m));
        }
        Self {
            spec,
            backward_skew: skew,
            backward_cone,
        }
    }

    pub fn forward(&self, omega: &DVector<f64>) -> Result<DVector<f64>> {
        eval_forward(&PrimalDualPoint::from_stacked(omega, self.spec.primal_dim()), self.spec)
    }

    /// `S = [[0, Aᵀ], [−A, 0]]`.
    pub fn backward_skew(&self) -> &DMatrix<f64> {
        &self.backward_skew
    }

    /// Blocks of the product cone `Ω_1 × … × Ω_N × ℝᵐ≥0`.
    pub fn backward_cone(&self) -> &[BoxSet] {
        &self.backward_cone
    }
}

/// `[0, ∞)ᵐ` as a box.
pub fn nonneg_orthant(m: usize) -> BoxSet {
    BoxSet::new(DVector::zeros(m), DVector::from_element(m, f64::INFINITY))
        .expect("orthant bounds are ordered")
}

/// `ℝᵏ` as a box; its normal cone is `{0}` everywhere.
pub fn whole_space(k: usize) -> BoxSet {
    BoxSet::new(
        DVector::from_element(k, f64::NEG_INFINITY),
        DVector::from_element(k, f64::INFINITY),
    )
    .expect("infinite bounds are ordered")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::tests::quadratic_spec;
    use crate::game::CouplingConstraint;
    use proptest::prelude::*;

    fn scalar_game(lo: f64, hi: f64) -> GameSpec {
        quadratic_spec(
            &[1.0],
            DMatrix::zeros(1, 1),
            vec![vec![-3.0]],
            vec![BoxSet::uniform(1, lo, hi).unwrap()],
            CouplingConstraint::none(1, 1),
        )
    }

    fn one_row(b: f64) -> CouplingConstraint {
        CouplingConstraint::new(
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)],
            DVector::from_vec(vec![b]),
        )
        .unwrap()
    }

    #[test]
    fn forward_examples() {
        let s = scalar_game(-10.0, 10.0);
        let p = PrimalDualPoint::new(DVector::from_vec(vec![1.0]), DVector::zeros(0));
        assert_eq!(eval_forward(&p, &s).unwrap(), DVector::from_vec(vec![-2.0]));

        let s = quadratic_spec(
            &[1.0, 1.0],
            DMatrix::zeros(1, 1),
            vec![vec![0.0], vec![0.0]],
            vec![BoxSet::uniform(1, -10.0, 10.0).unwrap(); 2],
            one_row(4.0),
        );
        let p1 = PrimalDualPoint::new(DVector::from_vec(vec![2.0, -1.0]), DVector::from_vec(vec![0.0]));
        let p2 = PrimalDualPoint::new(p1.x.clone(), DVector::from_vec(vec![7.5]));
        let f1 = eval_forward(&p1, &s).unwrap();
        assert_eq!(f1, DVector::from_vec(vec![2.0, -1.0, 4.0]));
        assert_eq!(f1, eval_forward(&p2, &s).unwrap());
    }

    #[test]
    fn residual_examples() {
        let s = scalar_game(-10.0, 10.0);
        let at = |x: f64| eval_t_residual(&PrimalDualPoint::new(DVector::from_vec(vec![x]), DVector::zeros(0)), &s).unwrap();
        assert_eq!(at(3.0), 0.0);
        assert_eq!(at(0.0), 3.0);

        let s = quadratic_spec(
            &[1.0, 1.0],
            DMatrix::zeros(1, 1),
            vec![vec![0.0], vec![0.0]],
            vec![BoxSet::uniform(1, -10.0, 10.0).unwrap(); 2],
            one_row(4.0),
        );
        let p = PrimalDualPoint::new(DVector::from_vec(vec![0.0, 0.0]), DVector::from_vec(vec![-2.5]));
        let r = natural_residual_vector(&p, &s).unwrap();
        assert!(r[2].abs() >= 2.5);
    }

    #[test]
    fn projection_examples() {
        let unit = BoxSet::uniform(1, 0.0, 1.0).unwrap();
        assert_eq!(project_box(&DVector::from_vec(vec![0.3]), &unit), DVector::from_vec(vec![0.3]));
        assert_eq!(project_box(&DVector::from_vec(vec![5.0]), &unit), DVector::from_vec(vec![1.0]));
        let cube = BoxSet::uniform(3, 0.0, 1.0).unwrap();
        assert_eq!(
            project_box(&DVector::from_vec(vec![-2.0, 0.5, 3.0]), &cube),
            DVector::from_vec(vec![0.0, 0.5, 1.0])
        );
        assert_eq!(
            project_nonneg(&DVector::from_vec(vec![1.0, -1.0, 0.0])),
            DVector::from_vec(vec![1.0, 0.0, 0.0])
        );
        let pos = DVector::from_vec(vec![0.0, 2.0, 3.5]);
        assert_eq!(project_nonneg(&pos), pos);
        assert_eq!(project_nonneg(&DVector::from_vec(vec![-1.0, -2.0])), DVector::zeros(2));
    }

    #[test]
    fn normal_cone_examples() {
        let unit = BoxSet::uniform(1, 0.0, 1.0).unwrap();
        assert!(normal_cone_membership(&[0.0], &[0.5], &unit, 1e-9).unwrap());
        assert!(normal_cone_membership(&[1.0], &[1.0], &unit, 1e-9).unwrap());
        assert!(!normal_cone_membership(&[-1.0], &[1.0], &unit, 1e-9).unwrap());
        let sq = BoxSet::uniform(2, 0.0, 1.0).unwrap();
        assert!(!normal_cone_membership(&[-1.0, 0.1], &[0.0, 0.5], &sq, 1e-3).unwrap());
        assert!(normal_cone_membership(&[-1.0, 0.0], &[0.0, 0.5], &sq, 1e-3).unwrap());
        let point = BoxSet::uniform(1, 2.0, 2.0).unwrap();
        assert!(normal_cone_membership(&[-7.0], &[2.0], &point, 0.0).unwrap());
        assert!(matches!(
            normal_cone_membership(&[0.0], &[1.5], &unit, 1e-9),
            Err(Error::OutsideSet(_))
        ));
    }

    #[test]
    fn skew_block_is_antisymmetric() {
        let s = quadratic_spec(
            &[1.0, 1.0],
            DMatrix::zeros(1, 1),
            vec![vec![0.0], vec![0.0]],
            vec![BoxSet::uniform(1, -10.0, 10.0).unwrap(); 2],
            one_row(4.0),
        );
        let pair = SplitOperatorPair::new(&s);
        assert_eq!(pair.backward_skew().transpose(), -pair.backward_skew());
        assert_eq!(pair.backward_cone().len(), 3);
    }

    proptest! {
        #[test]
        fn project_box_is_nonexpansive(
            y1 in prop::collection::vec(-5.0f64..5.0, 4),
            y2 in prop::collection::vec(-5.0f64..5.0, 4),
        ) {
            let set = BoxSet::new(
                DVector::from_vec(vec![-1.0, 0.0, f64::NEG_INFINITY, 2.0]),
                DVector::from_vec(vec![1.0, 0.5, 0.0, 2.0]),
            ).unwrap();
            let (y1, y2) = (DVector::from_vec(y1), DVector::from_vec(y2));
            let d = (project_box(&y1, &set) - project_box(&y2, &set)).norm();
            prop_assert!(d <= (y1 - y2).norm() + 1e-15);
        }
    }
}

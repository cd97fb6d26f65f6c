//! Seeded random quadratic aggregative games.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{BoxSet, CostModel, CouplingConstraint, GameSpec, QuadraticCost};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenParams {
    pub agents: usize,
    pub dim: usize,
    pub constraints: usize,
    pub seed: u64,
}

/// Draw a game with box local sets, a strongly monotone affine
/// pseudo-gradient and coupling constraints that hold strictly at the box
/// centers.
///
/// Boxes are `[U(−3,−1), U(1,3)]` per coordinate, `q_i ~ U(1,3)`,
/// `c = ¼MMᵀ + skew` with small entries, `d_i ~ U(−2,2)`, coupling entries
/// `U(−1,1)` and `b = A x_c + U(0.5, 1.5)` for the stacked centers `x_c`.
/// The returned spec carries its exact monotonicity constants.
pub fn random_game(params: &GenParams) -> Result<GameSpec> {
    let GenParams { agents, dim, constraints, seed } = *params;
    if agents == 0 || dim == 0 {
        return Err(Error::InvalidParameter("agents and dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let local_sets = (0..agents)
        .map(|_| {
            let lo = DVector::from_fn(dim, |_, _| rng.random_range(-3.0..-1.0));
            let hi = DVector::from_fn(dim, |_, _| rng.random_range(1.0..3.0));
            BoxSet::new(lo, hi)
        })
        .collect::<Result<Vec<_>>>()?;
    let q = (0..agents).map(|_| rng.random_range(1.0..3.0)).collect();
    let m = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.5..0.5));
    let s = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-0.5..0.5));
    let c = &m * m.transpose() * 0.25 + (&s - s.transpose()) * 0.5;
    let d = (0..agents)
        .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0)))
        .collect();
    let coupling = if constraints == 0 {
        CouplingConstraint::none(agents, dim)
    } else {
        let blocks: Vec<DMatrix<f64>> = (0..agents)
            .map(|_| DMatrix::from_fn(constraints, dim, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let mut b = DVector::from_fn(constraints, |_, _| rng.random_range(0.5..1.5));
        for (block, set) in blocks.iter().zip(&local_sets) {
            b += block * set.center();
        }
        CouplingConstraint::new(blocks, b)?
    };
    let spec = GameSpec::new(
        agents,
        dim,
        local_sets,
        CostModel::Quadratic(QuadraticCost { q, c, d }),
        coupling,
        None,
    )?;
    let mono = spec.exact_monotonicity();
    spec.with_monotonicity(mono)
}

//! Variational generalized Nash equilibria of aggregative games with box
//! local sets and shared affine constraints.
//!
//! The guide in `book/` covers the concepts; its code snippets run as
//! doctests of this crate.

pub mod error;
pub mod game;
pub mod generate;
pub mod io;
pub mod network;
pub mod operators;
pub mod preconditioner;
pub mod report;
pub mod solvers;
pub mod verification;

pub use nalgebra;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/games.md")]
    mod games {}
    #[doc = include_str!("../../../book/src/steps.md")]
    mod steps {}
    #[doc = include_str!("../../../book/src/solvers.md")]
    mod solvers {}
    #[doc = include_str!("../../../book/src/distributed.md")]
    mod distributed {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/files.md")]
    mod files {}
}

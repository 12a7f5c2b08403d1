//! Proximal-gradient solvers for stochastic composite objectives
//! `phi(x) = f(x) + h(x)`, where `f` is a mean (or large finite sum) of
//! component functions accessed through sampled gradients and `h` is a
//! cheap-prox term (l1, indicator of a simple set, or zero).
//!
//! The solver grows its gradient batch size adaptively: each iteration takes a
//! trial proximal step, asks a [`controllers::BatchController`] how many
//! samples the step actually needed, and augments the batch before committing
//! when the trial was underpowered. Shipped controllers cover a
//! variance-vs-step norm test, a directional inner-product test, a geometric
//! growth schedule, and an exact-variance oracle used for rate verification.

pub mod controllers;
pub mod data;
pub mod error;
pub mod problems;
pub mod prox;
pub mod sampling;
pub mod solver;
pub mod vector;
pub mod verify;

pub use error::Error;
pub use vector::DenseVector;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

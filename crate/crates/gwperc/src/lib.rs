//! Bernoulli percolation on Galton-Watson trees.
//!
//! The crate computes annealed expansion coefficients at criticality,
//! subset statistics of sampled trees with their Doob decompositions,
//! the expansion martingales built from them, exact and Monte Carlo
//! quenched survival, and collapsed-tree monomial expectations together
//! with their symbolic derivative expansion. See `examples/` for runnable
//! entry points.

pub mod annealed;
pub mod cli;
pub mod collapsed;
pub mod error;
pub mod expansion;
pub mod gwtree;
pub mod offspring;
pub mod quenched;
pub mod subsetstats;
mod sum;

pub use error::{Error, Result};
pub use offspring::OffspringDistribution;

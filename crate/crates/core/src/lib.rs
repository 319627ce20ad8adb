//! Conditional density models of asset prices.
//!
//! The market's law of a terminal value `A_T` is carried as a density on a
//! state grid and updated along an information path. The crate covers
//! simulation of the density process, the master equation, the
//! Brownian-bridge and Bachelier special cases, and option pricing from
//! densities.
//!
//! Path batches run on rayon when the `parallel` feature is on (default);
//! [`Execution::Sequential`] gives the same numbers on one thread.

pub mod bridge;
pub mod error;
pub mod exec;
pub mod filter;
pub mod grid;
pub mod mesh;
pub mod numeric;
pub mod pricing;
pub mod vol;

pub use error::{Error, Result};
pub use exec::{Execution, PathRng};
pub use grid::{breeden_litzenberger, make_grid, mean_vol, DensityGrid, MarketSnapshot, StateGrid};
pub use mesh::TimeMesh;
pub use vol::{integrate_v, VolStructure};

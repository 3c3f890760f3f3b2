//! Transportation-network models at three scales.
//!
//! * [`graph`]: Kirchhoff networks with the conductivity adaptation ODE.
//! * [`poisson`]: the permeability-weighted Poisson problem on structured grids.
//! * [`particles`]: empirical measures over position and conductivity tensor.
//! * [`flows`]: Wasserstein-type gradient flows (full, reduced, monokinetic, scalar).
//! * [`fisher_rao`]: reaction-type flow on weights and its stationary branches.
//! * [`stationary`]: variational solvers for the stationary pressure problems.
//! * [`semidiscrete`]: nonlinear pressure equation on metric graphs.

pub mod error;
pub mod fisher_rao;
pub mod flows;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod mesh;
pub mod particles;
pub mod poisson;
pub mod semidiscrete;
pub mod stationary;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{ModelParams, SymTensor};

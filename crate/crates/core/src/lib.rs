//! Steady periodic gravity waves on finite depth via the modified Babenko
//! equation: cosine collocation, Newton iteration, continuation with
//! bifurcation detection and branch switching, and surface reconstruction.

pub mod spectral;
pub mod solver;

pub use spectral::{CosineGrid, DepthParams, SpectralField};
pub use solver::{ConstraintSpec, NewtonConfig, SolutionPoint, SolveError};
pub mod continuation;
pub mod geometry;
pub mod io;

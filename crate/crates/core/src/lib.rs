//! Numerical scattering theory for discrete Laplacians on lattice models of
//! manifolds with a codimension-2 corner.

pub mod assembly;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod jet;
pub mod linalg;
pub mod oracle;
pub mod propagation;
pub mod scattering;
pub mod sparse;
pub mod spectral;
pub mod yafaev;

pub use error::{Error, Result};

//! Kinetic transport and collision toolkit for the Boltzmann equation in
//! bounded convex domains.

pub mod conservation;
pub mod error;
pub mod field;
pub mod geometry;
pub mod harness;
pub mod kernels;
pub mod quadrature;
pub mod solver;
pub mod transport;
pub mod vec3;
pub mod velocity;
pub mod weights;

pub use error::{KineticError, Result};
pub use vec3::Vec3;

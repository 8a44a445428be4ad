//! Multiscale finite elements for advection-diffusion problems whose
//! diffusion oscillates on a scale much finer than the coarse mesh.

pub mod analysis;
pub mod basis;
pub mod error;
pub mod fem;
pub mod linalg;
pub mod mesh;
pub mod solvers;
pub mod timing;

pub use error::{Error, Result};

//! Finite element discretization of the stochastic total variation flow on
//! the unit square, with Monte Carlo tooling for its discrete estimates and
//! the image denoising experiments.

pub mod error;
pub mod experiments;
pub mod fespace;
pub mod linalg;
pub mod mc;
pub mod functionals;
pub mod mesh;
pub mod noise;
pub mod scheme;
pub mod svi;

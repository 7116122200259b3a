//! Variable-step BDF2 time stepping for linear reaction-diffusion problems.
//!
//! The crate is organised around the discrete orthogonal convolution (DOC)
//! view of BDF2 on nonuniform meshes:
//!
//! * [`mesh`]: nonuniform time meshes, step ratios, and ratio conditions.
//! * [`kernels`]: BDF2 convolution kernels, DOC kernels, and their identities.
//! * [`spatial`]: scalar, Fourier pseudo-spectral, and finite-difference operators.
//! * [`integrator`]: the BDF2 marcher with energy and norm monitors.
//! * [`experiments`]: convergence studies, stability suites, and report output.

pub mod error;
pub mod experiments;
pub mod integrator;
pub mod kernels;
pub mod mesh;
pub mod spatial;

pub use error::{Error, Result};

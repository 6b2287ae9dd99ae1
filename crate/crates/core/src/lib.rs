//! Quasi-periodic Helmholtz scattering by lossless periodic slabs.
//!
//! The crate solves `∇·τ∇u + ω²εu = 0` in one period cell `[0, 2π) × (z₋, z₊)`
//! with `κ`-pseudoperiodic boundary conditions in `x₁` and exact Fourier
//! Dirichlet-to-Neumann conditions on the artificial boundaries. On top of the
//! forward solver it provides adjoint gradients of transmitted energy and of
//! individual diffraction amplitudes, the real eigenvalue sequence `ω_j` of the
//! Hermitian part of the problem (guided modes and non-resonance certificates),
//! and a projected-gradient design loop.

pub mod assembly;
pub mod error;
pub mod harmonics;
pub mod io;
pub mod linalg;
pub mod modes;
pub mod optimize;
pub mod scatter;
pub mod sensitivity;
pub mod structure;

pub use error::{Error, Result};

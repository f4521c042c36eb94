//! Desk-scale simulation and verification lab for the truncated,
//! Wick-renormalized Hartree nonlinear Schrödinger equation on the 3-torus.
//!
//! The crate samples the finite-dimensional Gibbs measure, evolves it under
//! the truncated Hamiltonian flow, builds the random-averaging-operator
//! decomposition of the solution, and brute-force-verifies the combinatorial
//! and tensor-norm machinery that the construction rests on.
//!
//! Module map:
//! - [`lattice`]: frequency lattice Z^3, brackets, dyadic projections, resonance factor
//! - [`potential`]: convolution potential, smooth cutoffs, multilinear forms
//! - [`renorm`]: counterterms, Hamiltonians, Wick-ordered nonlinearity, Gaussian oracle
//! - [`sampling`]: Gaussian free field draws and pCN sampling of the Gibbs measure
//! - [`dynamics`]: time integration, profile transform, dyadic differences
//! - [`rao`]: random averaging operator matrices and the solution ansatz
//! - [`analysis`]: Sobolev and space-time norms, scaling-exponent fits
//! - [`tensorlab`]: labeled tensors, partition norms, merging-estimate checks
//! - [`counting`]: lattice resonance counting and divisor-box enumeration

pub mod analysis;
pub mod counting;
pub mod dynamics;
pub mod error;
pub mod fft;
pub mod lattice;
pub mod linalg;
pub mod params;
pub mod potential;
pub mod rao;
pub mod renorm;
pub mod report;
pub mod sampling;
pub mod seeds;
pub mod tensorlab;

pub use error::{Error, Result};
pub use lattice::{FourierState, ModeSet};
pub use params::ParamSet;
pub use potential::{CutoffProfile, Potential};
pub use renorm::RenormConstants;

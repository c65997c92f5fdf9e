//! Desk-scale toolkit for metastability of the Blume-Capel model with zero
//! chemical potential and zero external field.
//!
//! Three-spin configurations on a K x L box evolve under Metropolis dynamics
//! for the Hamiltonian H(sigma) = sum over neighbor bonds of
//! (sigma(x) - sigma(y))^2. The crate builds the low-energy landscape
//! explicitly: canonical interface configurations, the level-Gamma saddle
//! plateau and its projection onto a truncated ladder graph, variational test
//! functions and flows for capacity bounds, and a rejection-free kinetic
//! Monte Carlo simulator, all cross-checked against exact linear algebra on
//! small instances.

pub mod canonical;
pub mod edge;
pub mod explore;
pub mod kmc;
pub mod ladder;
pub mod lattice;
pub mod potential;
pub mod testfn;

pub use lattice::{Boundary, Energy, Lattice, SpinConfig};

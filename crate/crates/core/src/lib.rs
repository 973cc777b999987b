//! Multitype branching processes in which each individual reproduces
//! according to a type picked at random from its ancestral line.
//!
//! The crate computes the memoryless growth rate and enclosures of the growth
//! rate with memory, simulates the biased spine chain and its coupling, and
//! runs genealogy-tree population simulations.

pub mod chain;
pub mod cli;
pub mod lifted;
pub mod model;
mod power;
pub mod population;
pub mod spectral;
pub mod stream;

pub use power::Bracket;

//! Checks shared by this crate's integration tests and the workspace
//! acceptance suite. Every check panics on failure.

pub mod normalization;
pub mod oracles;
pub mod projections;
pub mod proxy;

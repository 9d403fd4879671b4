//! Simulator for decentralized stochastic optimization over networks.
//!
//! Agents cooperate over a graph to minimise an aggregate risk using
//! diffusion, exact diffusion or gradient tracking, compared against a
//! centralised SGD baseline. The crate provides the combination-matrix
//! construction, stochastic problem families, the algorithms, closed-form
//! steady-state theory and Monte-Carlo MSD measurement.

pub mod algorithms;
pub mod linalg;
pub mod metrics;
pub mod problems;
pub mod runner;
pub mod stream;
pub mod theory;
pub mod topology;

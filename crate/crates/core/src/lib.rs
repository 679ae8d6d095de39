//! Desk-scale eco-driving stack for a P0 48V mild-hybrid vehicle on signalized corridors.
//!
//! The crate is organized around a model-based control loop: a quasi-static
//! powertrain simulator ([`powertrain`]), a synthetic traffic environment
//! ([`traffic`]), a spatial-domain dynamic-programming trajectory optimizer
//! ([`dp`]), a small hand-rolled neural-network substrate ([`nn`]), generative
//! models for features, actions, and the state safe set ([`genmodels`]), the
//! batch-constrained Q-learning trainer that ties them together ([`agent`]),
//! and a benchmarking harness with reference controllers ([`bench`]).

pub mod agent;
pub mod bench;
pub mod config;
pub mod dp;
pub mod genmodels;
pub mod nn;
pub mod powertrain;
pub mod traffic;

//! Personalized federated learning with attentive message passing.
//!
//! The crate simulates a cloud server coordinating `m` clients, each holding a
//! private dataset and a personalized model. Every round the server aggregates
//! the clients' flattened parameter vectors into per-client "personalized cloud
//! models" using attention-derived collaboration weights, and each client then
//! trains locally against a proximal pull toward its cloud model. Classic
//! baselines (FedAvg, FedProx, fine-tuned variants, separate training) run in
//! the same harness, together with non-IID data settings, fault injection, and
//! convergence diagnostics.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the default `std`
//! feature just switches float intrinsics and enables `std::error::Error`
//! integration for dependencies.
//!
//! Module map:
//! - [`params`]: flat parameter vectors and the d-by-m parameter matrix.
//! - [`models`]: per-client differentiable losses with exact gradients.
//! - [`attention`]: attention-inducing functions and collaboration weights.
//! - [`optim`]: proximal local training and step-size schedules.
//! - [`federation`]: round orchestration, baselines, the dense reference
//!   method, and fault injection.
//! - [`data`]: synthetic grouped data, the three partition settings, and the
//!   IDX binary format.
//! - [`metrics`]: objective/gradient diagnostics, accuracy metrics,
//!   convergence reports, and the Wilcoxon signed-rank test.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod data;
mod error;
pub mod federation;
mod fmath;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod params;
pub mod rng;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

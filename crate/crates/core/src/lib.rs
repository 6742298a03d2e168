//! Fisher information structure of random deep networks and an
//! inversion-free unit-wise natural gradient.
//!
//! * [`nets`]: random plain and residual nets, forward pass, layer Jacobians.
//! * [`meanfield`]: activity / enlargement-factor recursions and their
//!   Monte-Carlo counterparts.
//! * [`unit_fisher`]: closed-form Fisher block of a single unit under
//!   Gaussian input, its explicit inverse and a fast `G⁻¹ v`.
//! * [`fisher_probe`]: Monte-Carlo Fisher matrices and experiments on their
//!   block structure.
//! * [`trainer`]: SGD and unit-wise natural-gradient training.

pub mod activation;
pub mod config;
pub mod error;
pub mod fisher_probe;
pub mod io;
pub mod linalg;
pub mod meanfield;
pub mod nets;
pub mod quadrature;
pub mod rng;
pub mod stats;
pub mod trainer;
pub mod unit_fisher;

/// Library version recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub use activation::ActivationKind;
pub use error::{Error, Result};
pub use nets::{ForwardTrace, Model, NetConfig, NetworkParams, ResNet, ResNetConfig};

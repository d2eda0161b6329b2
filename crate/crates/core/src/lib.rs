//! A deterministic laboratory for FedProx-style federated optimization.
//!
//! The crate provides:
//!
//! * [`numerics`]: parameter vectors and path-keyed random streams,
//! * [`problems`]: loss families with certified Lipschitz, smoothness and
//!   weak-convexity constants,
//! * [`datagen`]: synthetic heterogeneous federated instances,
//! * [`prox`]: exact and certified-inexact solvers for the local proximal
//!   subproblem,
//! * [`engine`]: the federated driver (FedProx, FedMSPP, FedAvg and a
//!   centralized proximal point baseline),
//! * [`diagnostics`]: stationarity, Moreau-envelope and gradient-dissimilarity
//!   measurements,
//! * [`stability`]: Monte Carlo probes of uniform argument stability and the
//!   gradient generalization bounds that follow from it.

pub mod datagen;
pub mod diagnostics;
pub mod engine;
pub mod numerics;
pub mod problems;
pub mod prox;
pub mod stability;

mod linalg;

pub use datagen::{DeviceDataset, FederatedInstance, HeterogeneityConfig, PopulationSpec};
pub use engine::{Algorithm, EpsPolicy, RoundRecord, RunConfig, SamplingMode, Schedule, TraceLog};
pub use numerics::{derive_stream, ParamVector, RngStream};
pub use problems::{Example, LossConstants, LossKind, LossModel};
pub use prox::{OracleReport, ProxMethod, ProxSubproblem};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("index {index} out of range for device {device} with {len} examples")]
    IndexOutOfRange { device: usize, index: usize, len: usize },
    #[error("population gradient unavailable: {0}")]
    PopulationGradientUnavailable(String),
    #[error("gradient undefined for nonsmooth loss {0:?}; use moreau_grad")]
    UseMoreauGrad(LossKind),
    #[error("inner solver exceeded {iterations} iterations (best certificate {best_certificate:e})")]
    SolverCap { iterations: usize, best_certificate: f64 },
    #[error("round {round}: iterate left the certified domain ball (norm {norm:.4} > radius {radius})")]
    LeftDomain { round: usize, norm: f64, radius: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

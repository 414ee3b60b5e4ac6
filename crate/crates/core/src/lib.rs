//! Split neural-network training over a chain of nodes, with every layer
//! computation and weight update recorded as a signed transaction on an
//! auditable blockchain.
//!
//! The crate is organized along the protocol's moving parts:
//!
//! - [`nn`]: the dense-layer engine every node runs on its slice
//! - [`partition`]: compute benchmarking and layer distribution
//! - [`wire`] / [`identity`]: canonical serialization, framing, signatures
//! - [`ledger`]: transactions, blocks, workers, audit and incentives
//! - [`data`]: IDX ingestion, synthetic datasets, batch plans
//! - [`runtime`]: the bootstrap and chain-node state machines
//! - [`sim`]: deterministic in-process topology used by tests and the CLI
//! - [`net`]: the socket deployment of the same state machines
//!
//! Numeric code is generic over [`Scalar`]; the deployed protocol runs at
//! [`Real`] (`f32`, the wire precision) while oracle-grade tests instantiate
//! `f64`.

pub mod data;
pub mod identity;
pub mod ledger;
pub mod matrix;
pub mod net;
pub mod nn;
pub mod partition;
pub mod runtime;
pub mod sim;
pub mod scalar;
pub mod wire;

pub use scalar::Scalar;

/// Scalar type used on the wire, in storage and by the deployed protocol.
pub type Real = f32;

/// Matrix at wire precision.
pub type RealMatrix = matrix::Matrix<Real>;

/// Network slice at wire precision.
pub type RealNetwork = nn::SplitNetwork<Real>;

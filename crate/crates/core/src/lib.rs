//! Privacy-preserving federated learning toolkit.
//!
//! The crate is organised around the life of one federated round:
//!
//! - [`model`]: flat-parameter MLP encoder, local SGD and evaluation
//! - [`data`]: synthetic task generation, federated partitioning, IDX loading
//! - [`privacy`]: Gaussian mechanism, budget allocation, privacy/utility search
//! - [`secure_agg`]: fixed-point additive secret sharing over `Z/2^64`
//! - [`aggregation`]: FedAvg, weighted aggregation, anomaly scoring, Krum
//! - [`comms`]: top-k sparsification, delta coding, quantization, Huffman, links
//! - [`simulation`]: client -> edge -> cloud orchestration, sync and async
//!
//! Everything is deterministic given a seed.

pub mod aggregation;
pub mod comms;
pub mod data;
pub mod error;
pub mod model;
pub mod privacy;
pub mod rng;
pub mod secure_agg;
pub mod simulation;

pub use error::{Error, Result};
pub use model::{ClientId, ClientUpdate, Dataset, EncoderConfig, ParamVector};

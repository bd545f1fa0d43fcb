//! Synchronous federated learning simulator for studying label-flipping data
//! poisoning.
//!
//! The crate provides a linear-softmax classifier trained by mini-batch SGD on
//! each client, IID and label-skewed (Non-IID) client partitions, five
//! aggregation rules (FedAvg, Krum, coordinate-wise median, trimmed mean and
//! FLTrust) and honest-score client selection (HSCS), which ranks clients by
//! their per-class accuracy weighted with the global model's per-class risk.

pub mod aggregation;
pub mod dataset;
pub mod error;
pub mod hscs;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};

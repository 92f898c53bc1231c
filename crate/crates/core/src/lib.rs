// SPDX-License-Identifier: Apache-2.0

//! Text-based EHR federated learning on a desk.
//!
//! Synthetic multi-site EHR data is linearized into event strings, encoded by
//! a compact two-stage patient encoder, and trained under FedAvg, FedProx,
//! FedBN and FedPxN with host-centric checkpointing. Candidate sites are
//! ranked against the host by similarity of differentially private averaged
//! patient embeddings, and the cost model quantifies what excluding them saves.

pub mod costmodel;
pub mod dpselect;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod fedcore;
pub mod linearizer;
pub mod metrics;
pub mod seeds;
pub mod synthdata;

pub use error::{Error, Result};
pub use exec::Execution;

//! Multimodal ncRNA classification: expression, structure and sequence encoders fused
//! through a bidirectional state-space scan and a virtual-node hypergraph.

pub mod checkpoint;
pub mod config;
pub mod cpkan;
pub mod data;
pub mod error;
pub mod fusion;
pub mod head;
pub mod metrics;
pub mod mkcl;
pub mod model;
pub mod msgraph;
pub mod numerics;
pub mod optim;
pub mod train;
pub mod verify;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;

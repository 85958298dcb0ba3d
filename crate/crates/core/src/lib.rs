//! Epidemic spreading on contact networks and federated node-state prediction.
//!
//! The crate is organised bottom-up:
//!
//! * [`netgraph`]: undirected contact graphs, edge-list I/O, synthetic generators
//!   and the adjacency spectral radius.
//! * [`epidemics`]: event-driven simulation of seven compartmental processes and
//!   an exact master-equation solver for small SIS instances.
//! * [`partition`]: splitting a graph into client subnetworks.
//! * [`nncore`]: dense tensors, hand-written forward/backward layers, Adam.
//! * [`models`]: the per-node LSTM classifier and the spatio-temporal GAT.
//! * [`dataset`]: sliding windows, chronological splits, missing-report corruption.
//! * [`fedlearn`]: FedAvg / FedProx orchestration plus solo and centralized baselines.
//! * [`metrics`]: classification and prevalence metrics, efficacy energy.

pub mod dataset;
pub mod epidemics;
mod error;
pub mod fedlearn;
pub mod metrics;
pub mod models;
pub mod netgraph;
pub mod nncore;
pub mod partition;
pub mod seeds;

pub use error::{Error, Result};

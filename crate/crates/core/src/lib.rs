//! Automated attribute completion for heterogeneous graph neural networks.
//!
//! Nodes whose type carries no raw attributes get completed features from
//! one of four operators (neighbor mean, degree-normalized aggregation,
//! personalized-PageRank propagation, or a learned one-hot embedding). The
//! operator is chosen per cluster of such nodes by a proximal bi-level
//! search that alternates discrete operator updates on validation loss with
//! GNN weight updates on training loss plus a modularity clustering loss.

pub mod cluster;
pub mod completion;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod search;
pub mod split;
pub mod synth;
pub mod tape;
pub mod task;

pub use error::{Error, Result};

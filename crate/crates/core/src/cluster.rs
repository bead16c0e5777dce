//! Soft clustering head and the relaxed modularity objective.
//!
//! `C = row_softmax(H θ)` assigns every node a distribution over `M`
//! clusters. The loss is the negated spectral modularity relaxation plus a
//! collapse regularizer:
//!
//! ```text
//! L = -Tr(Cᵀ B C) / 2|E| + √M / |V| · ‖Σ_i C_i‖
//! ```
//!
//! with `B = A - d dᵀ / 2|E|`. Only the argmax of each V⁻ row is used
//! downstream, as the cluster whose completion operator the node shares.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AdjacencyView;
use crate::linalg::{argmax, Csr, Matrix};
use crate::tape::{Tape, Var};

/// Which nodes the assignment matrix covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterDomain {
    #[default]
    AllNodes,
    MissingOnly,
}

/// Graph quantities the modularity loss needs, precomputed once.
#[derive(Clone, Debug)]
pub struct ModularityInputs {
    adjacency: Arc<Csr>,
    degrees: Arc<[f64]>,
    num_edges: usize,
}

impl ModularityInputs {
    pub fn new(adj: &AdjacencyView) -> Result<Self> {
        if adj.num_edges == 0 {
            return Err(Error::NoEdges);
        }
        Ok(Self {
            adjacency: Arc::new(adj.to_csr()),
            degrees: adj.degrees.iter().map(|&d| d as f64).collect(),
            num_edges: adj.num_edges,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.degrees.len()
    }

    pub fn num_edges(&self) -> usize {
        self.num_edges
    }
}

pub fn assign_clusters(tape: &mut Tape, hidden: Var, theta: Var) -> Var {
    let logits = tape.matmul(hidden, theta);
    tape.row_softmax(logits)
}

/// The two parts of the clustering loss and their sum.
#[derive(Clone, Copy, Debug)]
pub struct ModularityTerms {
    pub loss: Var,
    /// `-Tr(Cᵀ B C) / 2|E|`.
    pub modularity: Var,
    /// `√M / |V| · ‖Σ_i C_i‖`.
    pub collapse: Var,
}

pub fn modularity_loss(tape: &mut Tape, c: Var, inputs: &ModularityInputs) -> ModularityTerms {
    let (n, m) = tape.value(c).shape();
    assert_eq!(n, inputs.num_nodes(), "assignment rows do not match the graph");
    let two_edges = 2.0 * inputs.num_edges as f64;
    let trace = tape.trace_quadratic_form(c, inputs.adjacency.clone(), inputs.degrees.clone(), two_edges);
    let modularity = tape.scale(trace, -1.0 / two_edges);
    let colsum = tape.sum_rows(c);
    let norm = tape.frobenius_norm(colsum);
    let collapse = tape.scale(norm, (m as f64).sqrt() / n as f64);
    let loss = tape.add(modularity, collapse);
    ModularityTerms { loss, modularity, collapse }
}

/// Hard cluster id per V⁻ node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMap {
    ids: Vec<usize>,
    clusters: usize,
}

impl ClusterMap {
    pub fn new(ids: Vec<usize>, clusters: usize) -> Result<Self> {
        if let Some(&id) = ids.iter().find(|&&id| id >= clusters) {
            return Err(Error::ClusterOutOfRange { id, clusters });
        }
        Ok(Self { ids, clusters })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn clusters(&self) -> usize {
        self.clusters
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.clusters];
        for &id in &self.ids {
            h[id] += 1;
        }
        h
    }

    /// Rows of each cluster, in V⁻ order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.clusters];
        for (row, &id) in self.ids.iter().enumerate() {
            out[id].push(row);
        }
        out
    }

    /// Every node landed in a single cluster.
    pub fn is_collapsed(&self) -> bool {
        self.histogram().iter().filter(|&&c| c > 0).count() < 2 && self.ids.len() > 1
    }
}

/// Argmax (lowest index on ties) of the C rows listed in `rows`.
pub fn hard_assignment(c: &Matrix, rows: &[usize]) -> ClusterMap {
    let ids = rows.iter().map(|&r| argmax(c.row(r))).collect();
    ClusterMap { ids, clusters: c.cols() }
}

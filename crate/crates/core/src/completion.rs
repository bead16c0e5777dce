//! The completion search space: four ways to synthesize features for nodes
//! without attributes.
//!
//! Topology-dependent operators read the zero-filled, projected attribute
//! matrix of the whole graph; only rows of attributed nodes are non-zero.
//!
//! * [`CompletionOpKind::Mean`]: `W · mean{x_u : u ∈ N⁺(v)}`
//! * [`CompletionOpKind::GcnAgg`]: `Σ_{u ∈ N⁺(v)} (deg v · deg u)^(-1/2) x_u W`,
//!   with full-graph degrees.
//! * [`CompletionOpKind::Ppnp`]: personalized PageRank propagation of `X W`
//!   over the self-loop normalized adjacency, by power iteration.
//! * [`CompletionOpKind::OneHot`]: a trainable per-type embedding table,
//!   i.e. a one-hot identity vector followed by a linear map.
//!
//! Empty attributed neighborhoods give zero rows under `Mean` and `GcnAgg`.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sym_norm_coefficients, AdjacencyView, HeteroGraph, NodePartition};
use crate::linalg::{Csr, Matrix};
use crate::tape::{Tape, Var};

pub const NUM_OPS: usize = 4;

/// Completion operators in canonical column order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CompletionOpKind {
    Mean = 0,
    GcnAgg = 1,
    Ppnp = 2,
    OneHot = 3,
}

impl CompletionOpKind {
    pub const ALL: [CompletionOpKind; NUM_OPS] = [Self::Mean, Self::GcnAgg, Self::Ppnp, Self::OneHot];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Mean => "Mean",
            Self::GcnAgg => "GcnAgg",
            Self::Ppnp => "Ppnp",
            Self::OneHot => "OneHot",
        }
    }
}

impl fmt::Display for CompletionOpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CompletionOpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown completion operator `{s}`")))
    }
}

/// PPNP propagation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    /// Restart (teleport) probability in `(0, 1]`.
    pub restart: f64,
    /// Number of power-iteration steps.
    pub iterations: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        Self {
            restart: 0.1,
            iterations: 50,
        }
    }
}

impl PropagationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.restart > 0.0 && self.restart <= 1.0) {
            return Err(Error::Config(format!("restart must lie in (0, 1], got {}", self.restart)));
        }
        if self.iterations < 1 {
            return Err(Error::Config("PPNP iterations must be at least 1".into()));
        }
        Ok(())
    }
}

/// Contiguous V⁻ rows belonging to one node type, for one-hot lookup.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotBlock {
    pub node_type: usize,
    pub first_row: usize,
    pub count: usize,
}

/// Graph-side operators of the search space, precomputed once per graph.
#[derive(Clone, Debug)]
pub struct CompletionGraph {
    num_nodes: usize,
    missing: Arc<[usize]>,
    mean: Csr,
    gcn: Csr,
    propagation: Arc<Csr>,
    blocks: Vec<OneHotBlock>,
}

impl CompletionGraph {
    /// `adj` is the homogenized adjacency without self-loops.
    pub fn new(g: &HeteroGraph, partition: &NodePartition, adj: &AdjacencyView) -> Self {
        let n = adj.num_nodes();
        let plain = sym_norm_coefficients(adj, false);
        let mut mean_rows = Vec::with_capacity(partition.num_missing());
        let mut gcn_rows = Vec::with_capacity(partition.num_missing());
        for &v in &partition.missing {
            let attributed: Vec<usize> =
                adj.neighbors(v).iter().copied().filter(|&u| partition.is_attributed(u)).collect();
            let w = 1.0 / attributed.len().max(1) as f64;
            mean_rows.push(attributed.iter().map(|&u| (u, w)).collect());
            gcn_rows.push(
                plain
                    .table
                    .row(v)
                    .filter(|&(u, _)| partition.is_attributed(u))
                    .collect(),
            );
        }

        let looped = AdjacencyView::from_neighbor_lists((0..n).map(|v| adj.neighbors(v).to_vec()).collect(), true);
        let propagation = sym_norm_coefficients(&looped, true).table;

        let mut blocks = Vec::new();
        for (t, nt) in g.node_types().iter().enumerate() {
            if g.attributes(t).is_none() && nt.count > 0 {
                blocks.push(OneHotBlock {
                    node_type: t,
                    first_row: partition.missing_row(nt.offset).expect("missing type rows"),
                    count: nt.count,
                });
            }
        }

        Self {
            num_nodes: n,
            missing: partition.missing.clone().into(),
            mean: Csr::from_row_lists(n, mean_rows),
            gcn: Csr::from_row_lists(n, gcn_rows),
            propagation: Arc::new(propagation),
            blocks,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_missing(&self) -> usize {
        self.missing.len()
    }

    pub fn missing(&self) -> &Arc<[usize]> {
        &self.missing
    }

    pub fn blocks(&self) -> &[OneHotBlock] {
        &self.blocks
    }

    /// `0..|V⁻|`.
    pub fn all_rows(&self) -> Vec<usize> {
        (0..self.missing.len()).collect()
    }

    /// Self-loop normalized adjacency `Â` used by PPNP.
    pub fn propagation_matrix(&self) -> &Csr {
        &self.propagation
    }
}

/// Tape handles for one forward pass over the search space.
pub struct CompletionContext {
    /// `|V| x d` projected attributes, zero on V⁻ rows.
    pub base: Var,
    /// `d x k` transforms for `Mean`, `GcnAgg` and `Ppnp`.
    pub transforms: [Var; 3],
    /// One `count x k` table per [`OneHotBlock`].
    pub onehot_tables: Vec<Var>,
    pub propagation: PropagationConfig,
    propagated: Option<Var>,
    evaluations: Cell<usize>,
}

impl CompletionContext {
    pub fn new(base: Var, transforms: [Var; 3], onehot_tables: Vec<Var>, propagation: PropagationConfig) -> Self {
        Self {
            base,
            transforms,
            onehot_tables,
            propagation,
            propagated: None,
            evaluations: Cell::new(0),
        }
    }

    /// Operator evaluations on non-empty row sets so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.get()
    }

    fn output_dim(&self, tape: &Tape) -> usize {
        tape.value(self.transforms[0]).cols()
    }
}

/// Evaluates one operator on a subset of V⁻ rows, returning `rows.len() x k`.
pub fn evaluate(
    tape: &mut Tape,
    ctx: &mut CompletionContext,
    graph: &CompletionGraph,
    kind: CompletionOpKind,
    rows: &[usize],
) -> Var {
    if rows.is_empty() {
        let k = ctx.output_dim(tape);
        return tape.constant(Matrix::zeros(0, k));
    }
    ctx.evaluations.set(ctx.evaluations.get() + 1);
    match kind {
        CompletionOpKind::Mean => aggregate(tape, ctx.base, ctx.transforms[0], &graph.mean, rows),
        CompletionOpKind::GcnAgg => aggregate(tape, ctx.base, ctx.transforms[1], &graph.gcn, rows),
        CompletionOpKind::Ppnp => {
            let z = match ctx.propagated {
                Some(z) => z,
                None => {
                    let z = propagate(tape, ctx, graph);
                    ctx.propagated = Some(z);
                    z
                }
            };
            let idx: Arc<[usize]> = rows.iter().map(|&r| graph.missing[r]).collect();
            tape.gather_rows(z, idx)
        }
        CompletionOpKind::OneHot => onehot(tape, ctx, graph, rows),
    }
}

fn aggregate(tape: &mut Tape, base: Var, w: Var, op: &Csr, rows: &[usize]) -> Var {
    let sub = if rows.len() == op.rows() && rows.iter().enumerate().all(|(i, &r)| i == r) {
        op.clone()
    } else {
        op.select_rows(rows)
    };
    let agg = tape.sparse_matmul(Arc::new(sub), base);
    tape.matmul(agg, w)
}

/// `Z ← (1 - restart) Â Z + restart X'` from `Z = X' = X W`, full graph.
fn propagate(tape: &mut Tape, ctx: &CompletionContext, graph: &CompletionGraph) -> Var {
    let r = ctx.propagation.restart;
    let x_prime = tape.matmul(ctx.base, ctx.transforms[2]);
    let teleport = tape.scale(x_prime, r);
    let mut z = x_prime;
    if r < 1.0 {
        for _ in 0..ctx.propagation.iterations {
            let spread = tape.sparse_matmul(graph.propagation.clone(), z);
            let damped = tape.scale(spread, 1.0 - r);
            z = tape.add(damped, teleport);
        }
    }
    z
}

fn onehot(tape: &mut Tape, ctx: &CompletionContext, graph: &CompletionGraph, rows: &[usize]) -> Var {
    let mut total: Option<Var> = None;
    for (b, block) in graph.blocks.iter().enumerate() {
        let (positions, locals): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .enumerate()
            .filter(|&(_, &r)| r >= block.first_row && r < block.first_row + block.count)
            .map(|(pos, &r)| (pos, r - block.first_row))
            .unzip();
        if positions.is_empty() {
            continue;
        }
        let picked = tape.gather_rows(ctx.onehot_tables[b], locals.into());
        let placed = tape.scatter_add_rows(picked, positions.into(), rows.len());
        total = Some(match total {
            Some(t) => tape.add(t, placed),
            None => placed,
        });
    }
    total.expect("every V⁻ row lies in a one-hot block")
}

pub fn mean_completion(tape: &mut Tape, ctx: &mut CompletionContext, graph: &CompletionGraph) -> Var {
    evaluate(tape, ctx, graph, CompletionOpKind::Mean, &graph.all_rows())
}

pub fn gcn_completion(tape: &mut Tape, ctx: &mut CompletionContext, graph: &CompletionGraph) -> Var {
    evaluate(tape, ctx, graph, CompletionOpKind::GcnAgg, &graph.all_rows())
}

pub fn ppnp_completion(tape: &mut Tape, ctx: &mut CompletionContext, graph: &CompletionGraph) -> Var {
    evaluate(tape, ctx, graph, CompletionOpKind::Ppnp, &graph.all_rows())
}

pub fn onehot_completion(tape: &mut Tape, ctx: &mut CompletionContext, graph: &CompletionGraph) -> Var {
    evaluate(tape, ctx, graph, CompletionOpKind::OneHot, &graph.all_rows())
}

/// All four candidate matrices over every V⁻ row, in canonical order.
pub fn all_candidates(tape: &mut Tape, ctx: &mut CompletionContext, graph: &CompletionGraph) -> [Var; NUM_OPS] {
    let rows = graph.all_rows();
    CompletionOpKind::ALL.map(|k| evaluate(tape, ctx, graph, k, &rows))
}

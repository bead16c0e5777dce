//! Heterogeneous graph data model.
//!
//! Nodes get global ids by concatenating node types in declaration order;
//! every per-node matrix in the crate is indexed by that order. Edges are
//! stored per edge type and treated as undirected: each stored pair implies
//! its reverse, self-pairs are dropped and multi-edges collapse to a single
//! neighbor entry.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{Csr, Matrix};

/// On-disk graph description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphDescription {
    pub node_types: Vec<NodeTypeDesc>,
    #[serde(default)]
    pub attributes: BTreeMap<String, AttributeDesc>,
    #[serde(default)]
    pub edges: Vec<EdgeDesc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<LabelDesc>,
    pub target: TargetDesc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeTypeDesc {
    pub name: String,
    pub count: usize,
}

/// Row-major attribute matrix; `data.len()` must equal `count * dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeDesc {
    pub dim: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDesc {
    pub etype: String,
    pub src_type: String,
    pub dst_type: String,
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDesc {
    #[serde(rename = "type")]
    pub node_type: String,
    pub num_classes: usize,
    pub entries: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TargetDesc {
    NodeClassification {
        #[serde(rename = "type")]
        node_type: String,
    },
    LinkPrediction {
        edge_type: String,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeType {
    pub name: String,
    pub count: usize,
    /// Global id of the first node of this type.
    pub offset: usize,
}

/// One edge type with its symmetrized neighbor lists over global ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Relation {
    pub name: String,
    pub src_type: usize,
    pub dst_type: usize,
    /// Deduplicated local `(src, dst)` pairs in first-seen order.
    pub pairs: Vec<(usize, usize)>,
    indptr: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Relation {
    /// Sorted neighbors of global node `v` through this edge type.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.indptr[v]..self.indptr[v + 1]]
    }

    /// Row-normalized neighbor operator: row `v` averages its neighbors.
    pub fn mean_operator(&self) -> Csr {
        let n = self.indptr.len() - 1;
        Csr::from_row_lists(
            n,
            (0..n)
                .map(|v| {
                    let nb = self.neighbors(v);
                    let w = 1.0 / nb.len().max(1) as f64;
                    nb.iter().map(|&u| (u, w)).collect()
                })
                .collect(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Labels {
    pub node_type: usize,
    pub num_classes: usize,
    /// `(local id, class)` pairs, sorted by local id.
    pub entries: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Task {
    NodeClassification { node_type: usize },
    LinkPrediction { edge_type: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    node_types: Vec<NodeType>,
    relations: Vec<Relation>,
    attributes: Vec<Option<Matrix>>,
    labels: Option<Labels>,
    task: Task,
    fingerprint: String,
}

fn build_relation(
    name: String,
    src_type: usize,
    dst_type: usize,
    raw_pairs: &[(usize, usize)],
    types: &[NodeType],
    total: usize,
) -> Relation {
    let mut seen = HashSet::new();
    let mut pairs = Vec::new();
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); total];
    for &(s, d) in raw_pairs {
        let key = if src_type == dst_type { (s.min(d), s.max(d)) } else { (s, d) };
        if !seen.insert(key) {
            continue;
        }
        pairs.push((s, d));
        let gs = types[src_type].offset + s;
        let gd = types[dst_type].offset + d;
        if gs == gd {
            continue;
        }
        adj[gs].insert(gd);
        adj[gd].insert(gs);
    }
    let mut indptr = Vec::with_capacity(total + 1);
    let mut neighbors = Vec::new();
    indptr.push(0);
    for set in adj {
        neighbors.extend(set);
        indptr.push(neighbors.len());
    }
    Relation {
        name,
        src_type,
        dst_type,
        pairs,
        indptr,
        neighbors,
    }
}

/// Validates a description and materializes reverse edges.
pub fn build_graph(desc: &GraphDescription) -> Result<HeteroGraph> {
    let mut type_index = BTreeMap::new();
    let mut node_types = Vec::with_capacity(desc.node_types.len());
    let mut offset = 0;
    for (i, nt) in desc.node_types.iter().enumerate() {
        if nt.name.is_empty() {
            return Err(Error::validation(format!("node_types[{i}]"), "empty type name"));
        }
        if type_index.insert(nt.name.clone(), i).is_some() {
            return Err(Error::validation(
                format!("node_types[{i}]"),
                format!("duplicate node type name `{}`", nt.name),
            ));
        }
        node_types.push(NodeType {
            name: nt.name.clone(),
            count: nt.count,
            offset,
        });
        offset += nt.count;
    }
    let total = offset;
    if total == 0 {
        return Err(Error::validation("node_types", "graph has no nodes"));
    }
    let lookup = |record: &str, name: &str| -> Result<usize> {
        type_index.get(name).copied().ok_or_else(|| {
            Error::validation(record.to_string(), format!("unknown node type `{name}`"))
        })
    };

    let mut attributes = vec![None; node_types.len()];
    for (name, attr) in &desc.attributes {
        let record = format!("attributes.{name}");
        let t = lookup(&record, name)?;
        let count = node_types[t].count;
        if attr.dim == 0 {
            return Err(Error::validation(record, "attribute dimension must be positive"));
        }
        if attr.data.len() != count * attr.dim {
            return Err(Error::validation(
                record,
                format!(
                    "attribute matrix has {} values, expected {} rows x {} dims = {}",
                    attr.data.len(),
                    count,
                    attr.dim,
                    count * attr.dim
                ),
            ));
        }
        if let Some(i) = attr.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(record, format!("non-finite value at index {i}")));
        }
        attributes[t] = Some(Matrix::from_vec(count, attr.dim, attr.data.clone()));
    }
    if attributes.iter().all(Option::is_none) {
        return Err(Error::validation("attributes", "no node type carries attributes"));
    }

    let mut relations = Vec::with_capacity(desc.edges.len());
    let mut edge_index = BTreeMap::new();
    for (i, e) in desc.edges.iter().enumerate() {
        let record = format!("edges[{i}] ({})", e.etype);
        if edge_index.insert(e.etype.clone(), i).is_some() {
            return Err(Error::validation(record, "duplicate edge type name"));
        }
        let s = lookup(&record, &e.src_type)?;
        let d = lookup(&record, &e.dst_type)?;
        let (ns, nd) = (node_types[s].count, node_types[d].count);
        for (j, &(a, b)) in e.pairs.iter().enumerate() {
            if a >= ns || b >= nd {
                return Err(Error::validation(
                    format!("{record}.pairs[{j}]"),
                    format!(
                        "pair ({a}, {b}) out of range for {} ({ns} nodes) -> {} ({nd} nodes)",
                        e.src_type, e.dst_type
                    ),
                ));
            }
        }
        relations.push(build_relation(e.etype.clone(), s, d, &e.pairs, &node_types, total));
    }

    let labels = match &desc.labels {
        None => None,
        Some(l) => {
            let t = lookup("labels", &l.node_type)?;
            if l.num_classes < 2 {
                return Err(Error::validation("labels", "num_classes must be at least 2"));
            }
            let mut seen = BTreeSet::new();
            for (j, &(local, class)) in l.entries.iter().enumerate() {
                let record = format!("labels.entries[{j}]");
                if local >= node_types[t].count {
                    return Err(Error::validation(record, format!("node {local} out of range")));
                }
                if class >= l.num_classes {
                    return Err(Error::validation(record, format!("class {class} out of range")));
                }
                if !seen.insert(local) {
                    return Err(Error::validation(record, format!("node {local} labeled twice")));
                }
            }
            let mut entries = l.entries.clone();
            entries.sort_unstable();
            Some(Labels {
                node_type: t,
                num_classes: l.num_classes,
                entries,
            })
        }
    };

    let task = match &desc.target {
        TargetDesc::NodeClassification { node_type } => {
            let t = lookup("target", node_type)?;
            match &labels {
                Some(l) if l.node_type == t => {}
                _ => {
                    return Err(Error::validation(
                        "target",
                        format!("node classification on `{node_type}` needs labels for that type"),
                    ))
                }
            }
            Task::NodeClassification { node_type: t }
        }
        TargetDesc::LinkPrediction { edge_type } => {
            let e = *edge_index.get(edge_type).ok_or_else(|| {
                Error::validation("target", format!("unknown edge type `{edge_type}`"))
            })?;
            Task::LinkPrediction { edge_type: e }
        }
    };

    let bytes = serde_json::to_vec(desc).expect("graph description serializes");
    let fingerprint = hex::encode(Sha256::digest(&bytes));

    Ok(HeteroGraph {
        node_types,
        relations,
        attributes,
        labels,
        task,
        fingerprint,
    })
}

impl HeteroGraph {
    pub fn node_types(&self) -> &[NodeType] {
        &self.node_types
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn attributes(&self, node_type: usize) -> Option<&Matrix> {
        self.attributes[node_type].as_ref()
    }

    pub fn labels(&self) -> Option<&Labels> {
        self.labels.as_ref()
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    /// SHA-256 of the description this graph was built from.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn num_nodes(&self) -> usize {
        self.node_types.iter().map(|t| t.count).sum()
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.node_types.iter().position(|t| t.name == name)
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.name == name)
    }

    pub fn global_id(&self, node_type: usize, local: usize) -> usize {
        debug_assert!(local < self.node_types[node_type].count);
        self.node_types[node_type].offset + local
    }

    /// `(type, local id)` of a global node id.
    pub fn locate(&self, global: usize) -> (usize, usize) {
        let t = self
            .node_types
            .iter()
            .rposition(|nt| nt.offset <= global && nt.count > 0)
            .expect("global id in range");
        let local = global - self.node_types[t].offset;
        assert!(local < self.node_types[t].count, "global id {global} out of range");
        (t, local)
    }

    /// Copy of the graph with some pairs of one edge type removed (both
    /// directions). Used to hide held-out links from message passing.
    pub fn without_pairs(&self, edge_type: usize, removed: &[(usize, usize)]) -> HeteroGraph {
        let rel = &self.relations[edge_type];
        let same = rel.src_type == rel.dst_type;
        let key = |(a, b): (usize, usize)| if same { (a.min(b), a.max(b)) } else { (a, b) };
        let drop: HashSet<(usize, usize)> = removed.iter().map(|&p| key(p)).collect();
        let kept: Vec<(usize, usize)> = rel.pairs.iter().copied().filter(|&p| !drop.contains(&key(p))).collect();
        let mut out = self.clone();
        out.relations[edge_type] = build_relation(
            rel.name.clone(),
            rel.src_type,
            rel.dst_type,
            &kept,
            &self.node_types,
            self.num_nodes(),
        );
        out
    }
}

/// Split of all nodes into attributed (V⁺) and no-attribute (V⁻) sets.
#[derive(Clone, Debug, PartialEq)]
pub struct NodePartition {
    /// Sorted global ids of attributed nodes.
    pub attributed: Vec<usize>,
    /// Global ids of nodes without attributes in canonical row order.
    pub missing: Vec<usize>,
    missing_row: Vec<Option<usize>>,
}

impl NodePartition {
    pub fn is_attributed(&self, global: usize) -> bool {
        self.missing_row[global].is_none()
    }

    /// Row of a V⁻ node in every per-V⁻ matrix.
    pub fn missing_row(&self, global: usize) -> Option<usize> {
        self.missing_row[global]
    }

    pub fn num_missing(&self) -> usize {
        self.missing.len()
    }
}

/// V⁻ holds every node whose type has no attribute matrix, ordered by type
/// declaration order then local id.
pub fn partition_nodes(g: &HeteroGraph) -> NodePartition {
    let n = g.num_nodes();
    let mut attributed = Vec::new();
    let mut missing = Vec::new();
    let mut missing_row = vec![None; n];
    for (t, nt) in g.node_types.iter().enumerate() {
        let range = nt.offset..nt.offset + nt.count;
        if g.attributes[t].is_some() {
            attributed.extend(range);
        } else {
            for v in range {
                missing_row[v] = Some(missing.len());
                missing.push(v);
            }
        }
    }
    NodePartition {
        attributed,
        missing,
        missing_row,
    }
}

/// Homogenized undirected view of all edge types.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencyView {
    indptr: Vec<usize>,
    neighbors: Vec<usize>,
    /// Degrees without self-loops.
    pub degrees: Vec<usize>,
    /// `d + 1`, present when built with self-loops.
    pub tilde_degrees: Option<Vec<usize>>,
    /// Number of undirected edges.
    pub num_edges: usize,
}

impl AdjacencyView {
    pub fn num_nodes(&self) -> usize {
        self.degrees.len()
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.indptr[v]..self.indptr[v + 1]]
    }

    /// Unit-weight adjacency matrix `A`.
    pub fn to_csr(&self) -> Csr {
        let n = self.num_nodes();
        Csr::from_row_lists(
            n,
            (0..n).map(|v| self.neighbors(v).iter().map(|&u| (u, 1.0)).collect()).collect(),
        )
    }

    /// Adjacency restricted to a node subset, reindexed by position in `nodes`.
    pub fn induced(&self, nodes: &[usize]) -> AdjacencyView {
        let mut pos = vec![usize::MAX; self.num_nodes()];
        for (i, &v) in nodes.iter().enumerate() {
            pos[v] = i;
        }
        let lists: Vec<Vec<usize>> = nodes
            .iter()
            .map(|&v| {
                self.neighbors(v)
                    .iter()
                    .filter(|&&u| pos[u] != usize::MAX)
                    .map(|&u| pos[u])
                    .collect()
            })
            .collect();
        from_lists(lists, self.tilde_degrees.is_some())
    }

    /// Builds a view from symmetric neighbor lists (used by tests and oracles).
    pub fn from_neighbor_lists(lists: Vec<Vec<usize>>, self_loops: bool) -> AdjacencyView {
        let n = lists.len();
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (v, list) in lists.iter().enumerate() {
            for &u in list {
                if u != v {
                    sets[v].insert(u);
                    sets[u].insert(v);
                }
            }
        }
        from_lists(sets.into_iter().map(|s| s.into_iter().collect()).collect(), self_loops)
    }
}

fn from_lists(lists: Vec<Vec<usize>>, self_loops: bool) -> AdjacencyView {
    let mut indptr = Vec::with_capacity(lists.len() + 1);
    let mut neighbors = Vec::new();
    let mut degrees = Vec::with_capacity(lists.len());
    indptr.push(0);
    for list in lists {
        degrees.push(list.len());
        neighbors.extend(list);
        indptr.push(neighbors.len());
    }
    let num_edges = degrees.iter().sum::<usize>() / 2;
    let tilde_degrees = self_loops.then(|| degrees.iter().map(|d| d + 1).collect());
    AdjacencyView {
        indptr,
        neighbors,
        degrees,
        tilde_degrees,
        num_edges,
    }
}

pub fn build_adjacency(g: &HeteroGraph, self_loops: bool) -> AdjacencyView {
    let n = g.num_nodes();
    let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for rel in &g.relations {
        for v in 0..n {
            sets[v].extend(rel.neighbors(v).iter().copied());
        }
    }
    from_lists(sets.into_iter().map(|s| s.into_iter().collect()).collect(), self_loops)
}

/// Symmetric normalization `(deg(v) deg(u))^(-1/2)` for every edge.
#[derive(Clone, Debug)]
pub struct NormCoefficients {
    /// `|V| x |V|` coefficient table; with self-loops it includes the diagonal.
    pub table: Csr,
    /// Nodes left with an empty row (isolated, self-loops off).
    pub isolated: Vec<usize>,
}

/// Uses `d` without self-loops and `d + 1` (plus a diagonal entry) with them.
pub fn sym_norm_coefficients(adj: &AdjacencyView, self_loops: bool) -> NormCoefficients {
    let n = adj.num_nodes();
    let deg = |v: usize| -> f64 {
        if self_loops {
            (adj.degrees[v] + 1) as f64
        } else {
            adj.degrees[v] as f64
        }
    };
    let mut isolated = Vec::new();
    let mut lists = Vec::with_capacity(n);
    for v in 0..n {
        let mut row: Vec<(usize, f64)> = adj
            .neighbors(v)
            .iter()
            .map(|&u| (u, 1.0 / (deg(v) * deg(u)).sqrt()))
            .collect();
        if self_loops {
            row.push((v, 1.0 / deg(v)));
        } else if row.is_empty() {
            isolated.push(v);
        }
        lists.push(row);
    }
    NormCoefficients {
        table: Csr::from_row_lists(n, lists),
        isolated,
    }
}

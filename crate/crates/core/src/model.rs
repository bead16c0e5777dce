//! Lite heterogeneous GNN backbone.
//!
//! Each layer computes
//! `h'_v = ELU(U h_v + b + Σ_t mean_{u ∈ N_t(v)} V_t h_u)`
//! with one `V_t` per edge type and a shared self transform `U`. Raw
//! attributes of every attributed type are linearly projected to the hidden
//! size first; rows of nodes without attributes are filled by completion.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::completion::{CompletionContext, CompletionGraph, PropagationConfig};
use crate::error::{Error, Result};
use crate::graph::{build_adjacency, partition_nodes, AdjacencyView, HeteroGraph, NodePartition};
use crate::linalg::{Csr, Matrix};
use crate::tape::{Gradients, Tape, Var};

/// Static, shareable view of a graph with every operator the model needs.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub graph: HeteroGraph,
    pub partition: NodePartition,
    pub adjacency: AdjacencyView,
    pub completion: CompletionGraph,
    relation_ops: Vec<Arc<Csr>>,
    attributed: Vec<(usize, Arc<[usize]>)>,
    adjacency_csr: Arc<Csr>,
    degrees: Arc<[f64]>,
}

impl GraphContext {
    pub fn new(graph: HeteroGraph) -> Self {
        let partition = partition_nodes(&graph);
        let adjacency = build_adjacency(&graph, true);
        let completion = CompletionGraph::new(&graph, &partition, &adjacency);
        let relation_ops = graph.relations().iter().map(|r| Arc::new(r.mean_operator())).collect();
        let attributed = graph
            .node_types()
            .iter()
            .enumerate()
            .filter(|(t, _)| graph.attributes(*t).is_some())
            .map(|(t, nt)| (t, (nt.offset..nt.offset + nt.count).collect::<Vec<_>>().into()))
            .collect();
        let adjacency_csr = Arc::new(adjacency.to_csr());
        let degrees = adjacency.degrees.iter().map(|&d| d as f64).collect();
        Self {
            graph,
            partition,
            adjacency,
            completion,
            relation_ops,
            attributed,
            adjacency_csr,
            degrees,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn adjacency_csr(&self) -> &Arc<Csr> {
        &self.adjacency_csr
    }

    pub fn degrees(&self) -> &Arc<[f64]> {
        &self.degrees
    }
}

/// Backbone sizes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub hidden: usize,
    pub layers: usize,
    /// Output width of the classification head; 0 for link prediction.
    pub num_classes: usize,
    pub clusters: usize,
}

/// A trainable matrix with its Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Matrix,
    m: Matrix,
    v: Matrix,
    step: u64,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// All GNN weights (ω) by stable name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect())
}

pub mod names {
    pub fn input(t: &str) -> String {
        format!("input.{t}")
    }
    pub const TRANSFORMS: [&str; 3] = ["completion.mean", "completion.gcn", "completion.ppnp"];
    pub fn onehot(t: &str) -> String {
        format!("completion.onehot.{t}")
    }
    pub fn self_weight(l: usize) -> String {
        format!("layer{l}.self")
    }
    pub fn bias(l: usize) -> String {
        format!("layer{l}.bias")
    }
    pub fn relation(l: usize, r: &str) -> String {
        format!("layer{l}.rel.{r}")
    }
    pub const CLS_W: &str = "head.cls.w";
    pub const CLS_B: &str = "head.cls.b";
    pub const CLUSTER: &str = "head.cluster";
}

impl ParamStore {
    /// Seeded initialization. Completion transforms start at the identity so
    /// every candidate operator starts in the shared projected space.
    pub fn init(ctx: &GraphContext, shape: &ModelShape, rng: &mut ChaCha8Rng) -> Self {
        let k = shape.hidden;
        let g = &ctx.graph;
        let mut store = ParamStore::default();
        for (t, nt) in g.node_types().iter().enumerate() {
            if let Some(a) = g.attributes(t) {
                store.insert(names::input(&nt.name), glorot(rng, a.cols(), k));
            }
        }
        for name in names::TRANSFORMS {
            store.insert(name.to_string(), Matrix::identity(k));
        }
        for block in ctx.completion.blocks() {
            let name = &g.node_types()[block.node_type].name;
            store.insert(names::onehot(name), glorot(rng, block.count, k));
        }
        for l in 0..shape.layers {
            store.insert(names::self_weight(l), glorot(rng, k, k));
            store.insert(names::bias(l), Matrix::zeros(1, k));
            for rel in g.relations() {
                store.insert(names::relation(l, &rel.name), glorot(rng, k, k));
            }
        }
        if shape.num_classes > 0 {
            store.insert(names::CLS_W.to_string(), glorot(rng, k, shape.num_classes));
            store.insert(names::CLS_B.to_string(), Matrix::zeros(1, shape.num_classes));
        }
        store.insert(names::CLUSTER.to_string(), glorot(rng, k, shape.clusters));
        store
    }

    pub fn insert(&mut self, name: String, value: Matrix) {
        self.params.insert(name, Param::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> &Matrix {
        &self.params.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`")).value
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Registers every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(n, p)| (n.clone(), tape.leaf(p.value.clone(), requires_grad)))
                .collect(),
        }
    }

    /// Applies one Adam step to every parameter that received a gradient.
    pub fn adam_step(&mut self, bound: &BoundParams, grads: &Gradients, cfg: &AdamConfig) {
        for (name, var) in &bound.vars {
            if let Some(g) = grads.get(*var) {
                let p = self.params.get_mut(name).expect("bound parameter exists");
                adam_update(&mut p.value, &mut p.m, &mut p.v, &mut p.step, g, cfg);
            }
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.iter().map(|(n, p)| (n.clone(), p.value.clone())).collect(),
        }
    }

    /// Fresh optimizer state around checkpointed values.
    pub fn from_checkpoint(c: &Checkpoint) -> Self {
        Self {
            params: c.params.iter().map(|(n, v)| (n.clone(), Param::new(v.clone()))).collect(),
        }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds named handles created elsewhere, e.g. by a gradient checker.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Flat name → matrix map with shape headers; JSON round-trips bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Matrix>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay: `p ← p (1 - lr·wd)` first, then the
/// bias-corrected moment step.
pub fn adam_update(value: &mut Matrix, m: &mut Matrix, v: &mut Matrix, step: &mut u64, grad: &Matrix, cfg: &AdamConfig) {
    assert_eq!(value.shape(), grad.shape(), "adam: gradient shape mismatch");
    *step += 1;
    let t = *step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (((p, mi), vi), g) in value
        .as_mut_slice()
        .iter_mut()
        .zip(m.as_mut_slice())
        .zip(v.as_mut_slice())
        .zip(grad.as_slice())
    {
        *p *= decay;
        *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
        *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
        let mhat = *mi / bc1;
        let vhat = *vi / bc2;
        *p -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// Standalone Adam state for a single matrix (used for α).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    m: Matrix,
    v: Matrix,
    step: u64,
}

impl AdamState {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
        }
    }

    pub fn update(&mut self, value: &mut Matrix, grad: &Matrix, cfg: &AdamConfig) {
        adam_update(value, &mut self.m, &mut self.v, &mut self.step, grad, cfg);
    }
}

/// `|V| x k` projected attributes with zero V⁻ rows.
pub fn projected_attributes(tape: &mut Tape, ctx: &GraphContext, params: &BoundParams) -> Var {
    let n = ctx.num_nodes();
    let mut base: Option<Var> = None;
    for (t, rows) in &ctx.attributed {
        let raw = tape.constant(ctx.graph.attributes(*t).expect("attributed type").clone());
        let w = params.var(&names::input(&ctx.graph.node_types()[*t].name));
        let projected = tape.matmul(raw, w);
        let placed = tape.scatter_add_rows(projected, rows.clone(), n);
        base = Some(match base {
            Some(b) => tape.add(b, placed),
            None => placed,
        });
    }
    base.expect("graph has an attributed type")
}

/// Completion context bound to the current parameters.
pub fn completion_context(
    ctx: &GraphContext,
    params: &BoundParams,
    base: Var,
    propagation: PropagationConfig,
) -> CompletionContext {
    let transforms = names::TRANSFORMS.map(|n| params.var(n));
    let tables = ctx
        .completion
        .blocks()
        .iter()
        .map(|b| params.var(&names::onehot(&ctx.graph.node_types()[b.node_type].name)))
        .collect();
    CompletionContext::new(base, transforms, tables, propagation)
}

/// Hidden representations for every node given completed V⁻ rows.
pub fn forward(tape: &mut Tape, ctx: &GraphContext, params: &BoundParams, base: Var, completed: Var, layers: usize) -> Var {
    let n = ctx.num_nodes();
    assert_eq!(
        tape.value(completed).cols(),
        tape.value(base).cols(),
        "completed attributes and projected attributes differ in width"
    );
    let filled = tape.scatter_add_rows(completed, ctx.completion.missing().clone(), n);
    let mut h = tape.add(base, filled);
    for l in 0..layers {
        let u = params.var(&names::self_weight(l));
        let mut pre = tape.matmul(h, u);
        pre = tape.add_row(pre, params.var(&names::bias(l)));
        for (rel, op) in ctx.graph.relations().iter().zip(&ctx.relation_ops) {
            if op.nnz() == 0 {
                continue;
            }
            let agg = tape.sparse_matmul(op.clone(), h);
            let msg = tape.matmul(agg, params.var(&names::relation(l, &rel.name)));
            pre = tape.add(pre, msg);
        }
        h = tape.elu(pre);
    }
    h
}

/// Classification logits for the given global node ids.
pub fn classify(tape: &mut Tape, params: &BoundParams, hidden: Var, nodes: Arc<[usize]>) -> Var {
    let rows = tape.gather_rows(hidden, nodes);
    let z = tape.matmul(rows, params.var(names::CLS_W));
    tape.add_row(z, params.var(names::CLS_B))
}

/// Edge logits `⟨h_src, h_dst⟩` for global id pairs; probabilities are `sigmoid`.
pub fn edge_scores(tape: &mut Tape, hidden: Var, pairs: &[(usize, usize)]) -> Var {
    let src: Arc<[usize]> = pairs.iter().map(|p| p.0).collect();
    let dst: Arc<[usize]> = pairs.iter().map(|p| p.1).collect();
    let hs = tape.gather_rows(hidden, src);
    let hd = tape.gather_rows(hidden, dst);
    tape.row_dot(hs, hd)
}

/// Mean cross-entropy of `logits` rows against `labels`.
pub fn loss_node_classification(tape: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    let (rows, classes) = tape.value(logits).shape();
    assert!(rows > 0, "classification loss over an empty split");
    assert_eq!(rows, labels.len(), "one label per logits row");
    let mut mask = Matrix::zeros(rows, classes);
    for (r, &c) in labels.iter().enumerate() {
        assert!(c < classes, "label {c} out of range for {classes} classes");
        mask.set(r, c, 1.0);
    }
    let logp = tape.log_softmax(logits);
    let m = tape.constant(mask);
    let picked = tape.mul(logp, m);
    let total = tape.sum(picked);
    tape.scale(total, -1.0 / rows as f64)
}

/// Mean binary cross-entropy from edge logits: positives labeled 1, negatives 0.
pub fn loss_link_prediction(tape: &mut Tape, pos_logits: Var, neg_logits: Var) -> Var {
    let (np, nn) = (tape.value(pos_logits).rows(), tape.value(neg_logits).rows());
    assert!(np > 0 && nn > 0, "link loss needs at least one positive and one negative");
    let flipped = tape.scale(pos_logits, -1.0);
    let lp = tape.softplus(flipped);
    let ln = tape.softplus(neg_logits);
    let sp = tape.sum(lp);
    let sn = tape.sum(ln);
    let total = tape.add(sp, sn);
    tape.scale(total, 1.0 / (np + nn) as f64)
}

/// Checks a model shape against a graph.
pub fn validate_shape(ctx: &GraphContext, shape: &ModelShape) -> Result<()> {
    if shape.hidden == 0 || shape.layers == 0 {
        return Err(Error::Config("hidden size and layer count must be positive".into()));
    }
    if shape.clusters < 2 {
        return Err(Error::Config("at least two clusters are required".into()));
    }
    if let Some(l) = ctx.graph.labels() {
        if shape.num_classes != 0 && shape.num_classes != l.num_classes {
            return Err(Error::Config("class count does not match labels".into()));
        }
    }
    Ok(())
}

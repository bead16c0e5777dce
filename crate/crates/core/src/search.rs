//! Proximal bi-level search over per-cluster completion operators.
//!
//! Each epoch alternates:
//!
//! 1. an α-step: `ᾱ = prox_c1(α)`, a forward pass whose completed rows are
//!    the `ᾱ`-weighted mixture of all four candidates, the gradient of the
//!    validation loss with respect to `ᾱ`, then
//!    `α ← prox_c2(adam(α, ∇ᾱ))`;
//! 2. an ω-step on `L_train + λ·L_cluster` that evaluates only the single
//!    operator `prox_c1(α)` activates for each cluster.
//!
//! Because the discrete projection is applied before the gradient is
//! taken, no one-step unrolled (second-order) approximation is formed.
//! After the search the operator choice and cluster map are frozen, ω is
//! reinitialized and the model is retrained on the training split.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{assign_clusters, hard_assignment, modularity_loss, ClusterDomain, ClusterMap, ModularityInputs};
use crate::completion::{all_candidates, evaluate, CompletionContext, CompletionOpKind, PropagationConfig, NUM_OPS};
use crate::error::{Error, Result};
use crate::linalg::{argmax, Matrix};
use crate::model::{
    completion_context, forward, names, projected_attributes, AdamConfig, AdamState, BoundParams, Checkpoint,
    ModelShape, ParamStore,
};
use crate::tape::{Tape, Var};
use crate::task::{Part, Problem, TaskMetrics};

/// How completed rows combine the candidate operators during the ω-step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixtureMode {
    /// One activated operator per cluster.
    #[default]
    Discrete,
    /// Softmax-weighted mixture of all operators (ablation).
    Relaxed,
}

/// Every knob of a search run; echoed into the result file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub seed: u64,
    pub clusters: usize,
    pub lambda: f64,
    pub omega_lr: f64,
    pub omega_wd: f64,
    pub alpha_lr: f64,
    pub alpha_wd: f64,
    pub epochs: usize,
    /// Run an α-step every this many epochs.
    pub alpha_period: usize,
    /// Stop after this many epochs without validation improvement; 0 disables.
    pub patience: usize,
    pub min_delta: f64,
    pub retrain_epochs: usize,
    /// Retrain from the searched weights instead of a fresh initialization.
    pub warm_start: bool,
    pub hidden: usize,
    pub layers: usize,
    pub ppnp_restart: f64,
    pub ppnp_iterations: usize,
    pub cluster_domain: ClusterDomain,
    pub mode: MixtureMode,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub link_test_ratio: f64,
    pub link_val_ratio: f64,
    pub split_seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            clusters: 8,
            lambda: 0.4,
            omega_lr: 5e-4,
            omega_wd: 1e-4,
            alpha_lr: 5e-3,
            alpha_wd: 1e-5,
            epochs: 200,
            alpha_period: 1,
            patience: 10,
            min_delta: 1e-4,
            retrain_epochs: 200,
            warm_start: false,
            hidden: 16,
            layers: 2,
            ppnp_restart: 0.1,
            ppnp_iterations: 50,
            cluster_domain: ClusterDomain::AllNodes,
            mode: MixtureMode::Discrete,
            train_ratio: 0.24,
            val_ratio: 0.06,
            link_test_ratio: 0.1,
            link_val_ratio: 0.05,
            split_seed: 0,
        }
    }
}

impl SearchConfig {
    /// The MAGNN-style preset: a heavier clustering weight over fewer clusters.
    pub fn magnn_style() -> Self {
        Self {
            lambda: 0.5,
            clusters: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("omega_lr", self.omega_lr),
            ("alpha_lr", self.alpha_lr),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("omega_wd", self.omega_wd), ("alpha_wd", self.alpha_wd), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.clusters < 2 {
            return Err(Error::Config(format!("clusters must be at least 2, got {}", self.clusters)));
        }
        if self.epochs < 1 || self.retrain_epochs < 1 || self.alpha_period < 1 {
            return Err(Error::Config("epochs, retrain_epochs and alpha_period must be at least 1".into()));
        }
        if self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("hidden and layers must be positive".into()));
        }
        self.propagation().validate()
    }

    pub fn propagation(&self) -> PropagationConfig {
        PropagationConfig {
            restart: self.ppnp_restart,
            iterations: self.ppnp_iterations,
        }
    }

    pub fn split(&self) -> crate::task::SplitConfig {
        crate::task::SplitConfig {
            train: self.train_ratio,
            val: self.val_ratio,
            link_test: self.link_test_ratio,
            link_val: self.link_val_ratio,
            seed: self.split_seed,
        }
    }

    pub fn omega(&self) -> AdamConfig {
        AdamConfig::new(self.omega_lr, self.omega_wd)
    }

    pub fn alpha(&self) -> AdamConfig {
        AdamConfig::new(self.alpha_lr, self.alpha_wd)
    }

    pub fn training(&self) -> TrainSpec {
        TrainSpec {
            seed: self.seed,
            hidden: self.hidden,
            layers: self.layers,
            clusters: self.clusters,
            epochs: self.retrain_epochs,
            omega: self.omega(),
            propagation: self.propagation(),
        }
    }
}

/// Row-wise one-hot at the argmax, lowest index on ties.
pub fn prox_c1(alpha: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(alpha.rows(), alpha.cols());
    for r in 0..alpha.rows() {
        out.set(r, argmax(alpha.row(r)), 1.0);
    }
    out
}

/// Entrywise clamp to `[0, 1]`.
pub fn prox_c2(alpha: &Matrix) -> Matrix {
    alpha.map(|x| x.clamp(0.0, 1.0))
}

/// Operator activated by each row of `α`.
pub fn activated_operators(alpha: &Matrix) -> Vec<CompletionOpKind> {
    (0..alpha.rows()).map(|r| CompletionOpKind::from_index(argmax(alpha.row(r)))).collect()
}

/// Continuous operator weights `α` (M x 4) with their optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct CompletionParams {
    pub alpha: Matrix,
    adam: AdamState,
}

impl CompletionParams {
    /// Every entry starts at 0.5, so the initial choice is `Mean` everywhere.
    pub fn new(clusters: usize) -> Self {
        Self {
            alpha: Matrix::filled(clusters, NUM_OPS, 0.5),
            adam: AdamState::new(clusters, NUM_OPS),
        }
    }

    pub fn discrete(&self) -> Matrix {
        prox_c1(&self.alpha)
    }

    /// `α ← prox_c2(adam(α, grad))`.
    pub fn proximal_update(&mut self, grad: &Matrix, cfg: &AdamConfig) {
        self.adam.update(&mut self.alpha, grad, cfg);
        self.alpha = prox_c2(&self.alpha);
    }

    /// Unconstrained update used by the relaxed ablation.
    pub fn plain_update(&mut self, grad: &Matrix, cfg: &AdamConfig) {
        self.adam.update(&mut self.alpha, grad, cfg);
    }
}

/// Per-cluster weighting of the candidate operators.
#[derive(Clone, Copy, Debug)]
pub enum Mixture<'a> {
    /// One operator per cluster; only that operator is evaluated.
    Discrete(&'a [CompletionOpKind]),
    /// `M x 4` weights on the tape applied to all four candidates.
    Weighted(Var),
    /// `M x 4` logits, softmax-normalized per row.
    Relaxed(Var),
}

/// Completed V⁻ rows: row `v` is `Σ_o weight(cluster(v), o) · o(v)`.
pub fn complete_attributes(
    tape: &mut Tape,
    ctx: &mut CompletionContext,
    graph: &crate::completion::CompletionGraph,
    map: &ClusterMap,
    mixture: Mixture<'_>,
) -> Result<Var> {
    let n = graph.num_missing();
    if map.len() != n {
        return Err(Error::LengthMismatch { left: map.len(), right: n });
    }
    match mixture {
        Mixture::Discrete(ops) => {
            if ops.len() != map.clusters() {
                return Err(Error::LengthMismatch { left: ops.len(), right: map.clusters() });
            }
            let mut total: Option<Var> = None;
            for (m, rows) in map.members().into_iter().enumerate() {
                if rows.is_empty() {
                    continue;
                }
                let x = evaluate(tape, ctx, graph, ops[m], &rows);
                let placed = tape.scatter_add_rows(x, rows.into(), n);
                total = Some(match total {
                    Some(t) => tape.add(t, placed),
                    None => placed,
                });
            }
            let k = tape.value(ctx.transforms[0]).cols();
            Ok(total.unwrap_or_else(|| tape.constant(Matrix::zeros(n, k))))
        }
        Mixture::Weighted(w) | Mixture::Relaxed(w) => {
            let shape = tape.value(w).shape();
            if shape != (map.clusters(), NUM_OPS) {
                return Err(Error::LengthMismatch { left: shape.0, right: map.clusters() });
            }
            let weights = match mixture {
                Mixture::Relaxed(_) => tape.row_softmax(w),
                _ => w,
            };
            let candidates = all_candidates(tape, ctx, graph);
            let per_node = tape.gather_rows(weights, map.ids().into());
            let mut total: Option<Var> = None;
            for (o, cand) in candidates.into_iter().enumerate() {
                let col = tape.column(per_node, o);
                let term = tape.scale_rows(cand, col);
                total = Some(match total {
                    Some(t) => tape.add(t, term),
                    None => term,
                });
            }
            Ok(total.expect("four candidates"))
        }
    }
}

/// Where the assignment matrix lives and how V⁻ rows map into it.
#[derive(Clone, Debug)]
struct ClusterInputs {
    modularity: ModularityInputs,
    /// Hidden rows fed to the head; `None` means all nodes in order.
    hidden_rows: Option<Arc<[usize]>>,
    /// Row of each V⁻ node within `C`.
    missing_rows: Vec<usize>,
}

impl ClusterInputs {
    fn new(problem: &Problem, domain: ClusterDomain) -> Result<Self> {
        let ctx = &problem.context;
        let missing = ctx.completion.missing().clone();
        match domain {
            ClusterDomain::AllNodes => Ok(Self {
                modularity: ModularityInputs::new(&ctx.adjacency)?,
                hidden_rows: None,
                missing_rows: missing.to_vec(),
            }),
            ClusterDomain::MissingOnly => Ok(Self {
                modularity: ModularityInputs::new(&ctx.adjacency.induced(&missing))?,
                missing_rows: (0..missing.len()).collect(),
                hidden_rows: Some(missing),
            }),
        }
    }

    fn assignment(&self, tape: &mut Tape, params: &BoundParams, hidden: Var) -> Var {
        let h = match &self.hidden_rows {
            Some(rows) => tape.gather_rows(hidden, rows.clone()),
            None => hidden,
        };
        assign_clusters(tape, h, params.var(names::CLUSTER))
    }
}

/// One epoch of the search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha_step: bool,
    pub train_loss: f64,
    pub val_loss: f64,
    pub cluster_loss: f64,
    /// Completion operator evaluations during the ω-step.
    pub omega_evaluations: usize,
    pub cluster_histogram: Vec<usize>,
    pub operators: Vec<CompletionOpKind>,
}

/// Completion choice for one V⁻ node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeOperator {
    pub node_type: String,
    pub local: usize,
    pub cluster: usize,
    pub operator: CompletionOpKind,
}

/// Outcome of training with a frozen completion choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub val_loss: f64,
    pub val_metrics: TaskMetrics,
    pub test_metrics: TaskMetrics,
    #[serde(skip)]
    pub params: ParamStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub config: SearchConfig,
    pub graph_fingerprint: String,
    pub epochs_run: usize,
    pub converged: bool,
    pub history: Vec<EpochRecord>,
    pub alpha: Matrix,
    pub cluster_operators: Vec<CompletionOpKind>,
    pub cluster_map: ClusterMap,
    pub cluster_sizes: Vec<usize>,
    pub node_operators: Vec<NodeOperator>,
    pub retrain: TrainOutcome,
    pub checkpoint: Checkpoint,
}

/// Fixed-choice training settings shared by retraining and the oracle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainSpec {
    pub seed: u64,
    pub hidden: usize,
    pub layers: usize,
    pub clusters: usize,
    pub epochs: usize,
    pub omega: AdamConfig,
    pub propagation: PropagationConfig,
}

impl TrainSpec {
    fn shape(&self, problem: &Problem) -> ModelShape {
        ModelShape {
            hidden: self.hidden,
            layers: self.layers,
            num_classes: problem.num_classes(),
            clusters: self.clusters,
        }
    }
}

fn negative_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_ba5e)
}

/// Hidden representations under a discrete completion choice.
fn discrete_forward(
    tape: &mut Tape,
    problem: &Problem,
    bound: &BoundParams,
    map: &ClusterMap,
    ops: &[CompletionOpKind],
    spec_layers: usize,
    propagation: PropagationConfig,
) -> Result<(Var, usize)> {
    let ctx = &problem.context;
    let base = projected_attributes(tape, ctx, bound);
    let mut cc = completion_context(ctx, bound, base, propagation);
    let x = complete_attributes(tape, &mut cc, &ctx.completion, map, Mixture::Discrete(ops))?;
    let h = forward(tape, ctx, bound, base, x, spec_layers);
    Ok((h, cc.evaluations()))
}

/// Trains from scratch (or from `init`) with a frozen per-cluster operator
/// choice, keeping the weights of the best validation epoch.
pub fn train_fixed(
    problem: &Problem,
    spec: &TrainSpec,
    map: &ClusterMap,
    ops: &[CompletionOpKind],
    init: Option<&ParamStore>,
) -> Result<TrainOutcome> {
    let shape = spec.shape(problem);
    let mut params = match init {
        Some(p) => ParamStore::from_checkpoint(&p.to_checkpoint()),
        None => ParamStore::init(&problem.context, &shape, &mut ChaCha8Rng::seed_from_u64(spec.seed)),
    };
    let mut neg_rng = negative_rng(spec.seed);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    for epoch in 0..spec.epochs {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let (h, _) = discrete_forward(&mut tape, problem, &bound, map, ops, spec.layers, spec.propagation)?;
        let loss = problem.loss(&mut tape, &bound, h, Part::Train, &mut neg_rng);
        let grads = tape.backward(loss);
        params.adam_step(&bound, &grads, &spec.omega);

        let val = evaluate_loss(problem, &params, map, ops, spec, Part::Val)?;
        if best.as_ref().is_none_or(|b| val < b.1) {
            best = Some((epoch, val, params.clone()));
        }
    }
    let (best_epoch, val_loss, params) = best.expect("at least one epoch");
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let (h, _) = discrete_forward(&mut tape, problem, &bound, map, ops, spec.layers, spec.propagation)?;
    let val_metrics = problem.metrics(&mut tape, &bound, h, Part::Val)?;
    let test_metrics = problem.metrics(&mut tape, &bound, h, Part::Test)?;
    Ok(TrainOutcome {
        best_epoch,
        val_loss,
        val_metrics,
        test_metrics,
        params,
    })
}

fn evaluate_loss(
    problem: &Problem,
    params: &ParamStore,
    map: &ClusterMap,
    ops: &[CompletionOpKind],
    spec: &TrainSpec,
    part: Part,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let (h, _) = discrete_forward(&mut tape, problem, &bound, map, ops, spec.layers, spec.propagation)?;
    // held-out losses use fixed negatives, so this generator is never drawn from
    let mut unused = negative_rng(0);
    let loss = problem.loss(&mut tape, &bound, h, part, &mut unused);
    Ok(tape.value(loss).item())
}

/// State of a running search.
pub struct Search<'p> {
    problem: &'p Problem,
    cfg: SearchConfig,
    params: ParamStore,
    completion: CompletionParams,
    clusters: ClusterInputs,
    map: ClusterMap,
    pending: ClusterMap,
    fixed_map: bool,
    neg_rng: ChaCha8Rng,
}

/// Statistics of one ω-step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OmegaStats {
    pub train_loss: f64,
    pub cluster_loss: f64,
    pub evaluations: usize,
}

impl<'p> Search<'p> {
    pub fn new(problem: &'p Problem, cfg: SearchConfig) -> Result<Self> {
        cfg.validate()?;
        if problem.context.completion.num_missing() == 0 {
            return Err(Error::NothingToComplete);
        }
        let clusters = ClusterInputs::new(problem, cfg.cluster_domain)?;
        let shape = ModelShape {
            hidden: cfg.hidden,
            layers: cfg.layers,
            num_classes: problem.num_classes(),
            clusters: cfg.clusters,
        };
        let params = ParamStore::init(&problem.context, &shape, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
        let n = problem.context.completion.num_missing();
        let map = ClusterMap::new(vec![0; n], cfg.clusters)?;
        let mut search = Self {
            problem,
            params,
            completion: CompletionParams::new(cfg.clusters),
            clusters,
            pending: map.clone(),
            map,
            fixed_map: false,
            neg_rng: negative_rng(cfg.seed),
            cfg,
        };
        search.pending = search.snapshot_clusters()?;
        search.map = search.pending.clone();
        Ok(search)
    }

    /// Freezes the cluster map instead of learning it.
    pub fn with_cluster_map(mut self, map: ClusterMap) -> Result<Self> {
        if map.len() != self.problem.context.completion.num_missing() {
            return Err(Error::LengthMismatch {
                left: map.len(),
                right: self.problem.context.completion.num_missing(),
            });
        }
        if map.clusters() != self.cfg.clusters {
            return Err(Error::Config(format!(
                "cluster map has {} clusters, config expects {}",
                map.clusters(),
                self.cfg.clusters
            )));
        }
        self.pending = map.clone();
        self.map = map;
        self.fixed_map = true;
        Ok(self)
    }

    pub fn alpha(&self) -> &Matrix {
        &self.completion.alpha
    }

    pub fn set_alpha(&mut self, alpha: Matrix) {
        assert_eq!(alpha.shape(), self.completion.alpha.shape(), "α shape");
        self.completion.alpha = alpha;
    }

    pub fn cluster_map(&self) -> &ClusterMap {
        &self.map
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn operators(&self) -> Vec<CompletionOpKind> {
        activated_operators(&self.completion.alpha)
    }

    fn snapshot_clusters(&self) -> Result<ClusterMap> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let ops = self.operators();
        let (h, _) = discrete_forward(&mut tape, self.problem, &bound, &self.map, &ops, self.cfg.layers, self.cfg.propagation())?;
        let c = self.clusters.assignment(&mut tape, &bound, h);
        Ok(hard_assignment(tape.value(c), &self.clusters.missing_rows))
    }

    /// Builds the α-step forward pass and returns `(val loss, ∇ w.r.t. the weights leaf)`.
    pub fn alpha_gradient(&self) -> Result<(f64, Matrix)> {
        let weights = match self.cfg.mode {
            MixtureMode::Discrete => self.completion.discrete(),
            MixtureMode::Relaxed => self.completion.alpha.clone(),
        };
        self.mixture_loss(&weights)
    }

    /// Validation loss and its gradient with the mixture weights set to
    /// `weights` (per-cluster weights in discrete mode, softmax logits in
    /// relaxed mode).
    pub fn mixture_loss(&self, weights: &Matrix) -> Result<(f64, Matrix)> {
        assert_eq!(weights.shape(), (self.cfg.clusters, NUM_OPS), "mixture weight shape");
        let ctx = &self.problem.context;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let w = tape.param(weights.clone());
        let mixture = match self.cfg.mode {
            MixtureMode::Discrete => Mixture::Weighted(w),
            MixtureMode::Relaxed => Mixture::Relaxed(w),
        };
        let base = projected_attributes(&mut tape, ctx, &bound);
        let mut cc = completion_context(ctx, &bound, base, self.cfg.propagation());
        let x = complete_attributes(&mut tape, &mut cc, &ctx.completion, &self.map, mixture)?;
        let h = forward(&mut tape, ctx, &bound, base, x, self.cfg.layers);
        let mut unused = negative_rng(0);
        let loss = self.problem.loss(&mut tape, &bound, h, Part::Val, &mut unused);
        let value = tape.value(loss).item();
        let mut grads = tape.backward(loss);
        let g = grads.take(w).unwrap_or_else(|| Matrix::zeros(self.cfg.clusters, NUM_OPS));
        Ok((value, g))
    }

    /// Refreshes the cluster map, then takes one proximal step on α.
    /// Returns the validation loss before the update.
    pub fn alpha_step(&mut self) -> Result<f64> {
        if !self.fixed_map {
            self.map = self.pending.clone();
        }
        let (loss, grad) = self.alpha_gradient()?;
        match self.cfg.mode {
            MixtureMode::Discrete => self.completion.proximal_update(&grad, &self.cfg.alpha()),
            MixtureMode::Relaxed => self.completion.plain_update(&grad, &self.cfg.alpha()),
        }
        Ok(loss)
    }

    /// One Adam step on ω under the refined discrete choice.
    pub fn omega_step(&mut self) -> Result<OmegaStats> {
        let ctx = &self.problem.context;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let base = projected_attributes(&mut tape, ctx, &bound);
        let mut cc = completion_context(ctx, &bound, base, self.cfg.propagation());
        let ops = self.operators();
        let x = match self.cfg.mode {
            MixtureMode::Discrete => complete_attributes(&mut tape, &mut cc, &ctx.completion, &self.map, Mixture::Discrete(&ops))?,
            MixtureMode::Relaxed => {
                let a = tape.constant(self.completion.alpha.clone());
                complete_attributes(&mut tape, &mut cc, &ctx.completion, &self.map, Mixture::Relaxed(a))?
            }
        };
        let evaluations = cc.evaluations();
        let h = forward(&mut tape, ctx, &bound, base, x, self.cfg.layers);
        let sup = self.problem.loss(&mut tape, &bound, h, Part::Train, &mut self.neg_rng);
        let c = self.clusters.assignment(&mut tape, &bound, h);
        let terms = modularity_loss(&mut tape, c, &self.clusters.modularity);
        let train_loss = tape.value(sup).item();
        let cluster_loss = tape.value(terms.loss).item();
        if !self.fixed_map {
            self.pending = hard_assignment(tape.value(c), &self.clusters.missing_rows);
        }
        let total = if self.cfg.lambda > 0.0 {
            let weighted = tape.scale(terms.loss, self.cfg.lambda);
            tape.add(sup, weighted)
        } else {
            sup
        };
        let grads = tape.backward(total);
        self.params.adam_step(&bound, &grads, &self.cfg.omega());
        Ok(OmegaStats {
            train_loss,
            cluster_loss,
            evaluations,
        })
    }

    fn validation_loss(&self) -> Result<f64> {
        let ops = self.operators();
        evaluate_loss(self.problem, &self.params, &self.map, &ops, &self.cfg.training(), Part::Val)
    }

    /// Runs the search loop, then retrains under the final choice.
    pub fn run(mut self) -> Result<SearchResult> {
        let mut history = Vec::new();
        let mut best = f64::INFINITY;
        let mut stale = 0;
        let mut converged = false;
        for epoch in 0..self.cfg.epochs {
            let alpha_step = epoch % self.cfg.alpha_period == 0;
            let val_loss = if alpha_step {
                self.alpha_step()?
            } else {
                self.validation_loss()?
            };
            let stats = self.omega_step()?;
            history.push(EpochRecord {
                epoch,
                alpha_step,
                train_loss: stats.train_loss,
                val_loss,
                cluster_loss: stats.cluster_loss,
                omega_evaluations: stats.evaluations,
                cluster_histogram: self.map.histogram(),
                operators: self.operators(),
            });
            if val_loss < best - self.cfg.min_delta {
                best = val_loss;
                stale = 0;
            } else {
                stale += 1;
                if self.cfg.patience > 0 && stale >= self.cfg.patience {
                    converged = true;
                    break;
                }
            }
        }
        self.finish(history, converged)
    }

    fn finish(self, history: Vec<EpochRecord>, converged: bool) -> Result<SearchResult> {
        let ops = self.operators();
        let init = self.cfg.warm_start.then_some(&self.params);
        let retrain = train_fixed(self.problem, &self.cfg.training(), &self.map, &ops, init)?;
        let g = &self.problem.context.graph;
        let node_operators = self
            .problem
            .context
            .completion
            .missing()
            .iter()
            .zip(self.map.ids())
            .map(|(&v, &c)| {
                let (t, local) = g.locate(v);
                NodeOperator {
                    node_type: g.node_types()[t].name.clone(),
                    local,
                    cluster: c,
                    operator: ops[c],
                }
            })
            .collect();
        Ok(SearchResult {
            graph_fingerprint: g.fingerprint().to_string(),
            epochs_run: history.len(),
            converged,
            history,
            alpha: self.completion.alpha.clone(),
            cluster_operators: ops,
            cluster_sizes: self.map.histogram(),
            cluster_map: self.map.clone(),
            node_operators,
            checkpoint: retrain.params.to_checkpoint(),
            retrain,
            config: self.cfg,
        })
    }
}

/// Builds the problem from a graph and runs one search.
pub fn run_search(graph: crate::graph::HeteroGraph, cfg: &SearchConfig) -> Result<SearchResult> {
    cfg.validate()?;
    let problem = Problem::new(graph, &cfg.split())?;
    Search::new(&problem, cfg.clone())?.run()
}

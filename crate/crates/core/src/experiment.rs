//! Multi-seed runs, baselines and the reports built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterMap;
use crate::completion::{CompletionOpKind, NUM_OPS};
use crate::error::{Error, Result};
use crate::graph::{partition_nodes, HeteroGraph};
use crate::metrics::Summary;
use crate::search::{train_fixed, Search, SearchConfig, SearchResult, TrainOutcome, TrainSpec};
use crate::synth::{brute_force_search, compare, CompareReport, OracleResult, PlantedTruth, DEFAULT_BUDGET};
use crate::task::Problem;

/// Seeds `cfg.seed, cfg.seed + 1, …`.
pub fn repeat_seeds(first: u64, repeats: usize) -> Vec<u64> {
    (0..repeats as u64).map(|i| first + i).collect()
}

/// Search results over several seeds with summaries of the retrained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub runs: Vec<SearchResult>,
    pub val_loss: Summary,
    pub test_metrics: BTreeMap<String, Summary>,
}

impl SearchReport {
    pub fn from_runs(runs: Vec<SearchResult>) -> Result<Self> {
        let val: Vec<f64> = runs.iter().map(|r| r.retrain.val_loss).collect();
        let val_loss = Summary::of(&val).ok_or_else(|| Error::Config("at least one repeat is required".into()))?;
        let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &runs {
            for (k, v) in r.retrain.test_metrics.named() {
                per_metric.entry(k.to_string()).or_default().push(v);
            }
        }
        let test_metrics = per_metric
            .into_iter()
            .filter_map(|(k, v)| Summary::of(&v).map(|s| (k, s)))
            .collect();
        Ok(Self { runs, val_loss, test_metrics })
    }
}

/// Runs the search once per seed. With `fixed` the cluster map is frozen to
/// the planted groups instead of being learned.
pub fn run_repeats(
    graph: &HeteroGraph,
    cfg: &SearchConfig,
    repeats: usize,
    fixed: Option<&PlantedTruth>,
) -> Result<SearchReport> {
    cfg.validate()?;
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    if partition_nodes(graph).num_missing() == 0 {
        return Err(Error::NothingToComplete);
    }
    let problem = Problem::new(graph.clone(), &cfg.split())?;
    let map = fixed.map(|t| t.cluster_map(&problem.context.graph)).transpose()?;
    let runs = repeat_seeds(cfg.seed, repeats)
        .into_par_iter()
        .map(|seed| {
            let run_cfg = SearchConfig { seed, ..cfg.clone() };
            let search = Search::new(&problem, run_cfg)?;
            let search = match &map {
                Some(m) => search.with_cluster_map(m.clone())?,
                None => search,
            };
            search.run()
        })
        .collect::<Result<Vec<_>>>()?;
    SearchReport::from_runs(runs)
}

/// Oracle enumerations, one per seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub results: Vec<OracleResult>,
}

/// Enumerates every assignment over the planted groups once per seed, with
/// the retraining settings of `cfg`.
pub fn run_oracle(graph: &HeteroGraph, truth: &PlantedTruth, cfg: &SearchConfig, repeats: usize) -> Result<OracleReport> {
    cfg.validate()?;
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let problem = Problem::new(graph.clone(), &cfg.split())?;
    let map = truth.cluster_map(&problem.context.graph)?;
    let results = repeat_seeds(cfg.seed, repeats)
        .into_iter()
        .map(|seed| {
            let spec = TrainSpec { seed, clusters: map.clusters(), ..cfg.training() };
            brute_force_search(&problem, &map, &spec, DEFAULT_BUDGET)
        })
        .collect::<Result<_>>()?;
    Ok(OracleReport { results })
}

/// Per-seed comparison plus pooled figures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSummary {
    pub per_seed: Vec<(u64, CompareReport)>,
    /// Matched clusters over all compared seeds.
    pub recovery: f64,
    pub mean_relative_loss_gap: f64,
}

/// Pairs search runs and oracle results by seed.
pub fn compare_reports(search: &SearchReport, oracle: &OracleReport) -> Result<ComparisonSummary> {
    let mut per_seed = Vec::new();
    for o in &oracle.results {
        if let Some(run) = search.runs.iter().find(|r| r.config.seed == o.seed) {
            per_seed.push((o.seed, compare(run, o)?));
        }
    }
    if per_seed.is_empty() {
        return Err(Error::Config("no search run shares a seed with the oracle".into()));
    }
    let clusters: usize = per_seed.iter().map(|(_, c)| c.oracle_assignment.len()).sum();
    let matched: f64 = per_seed.iter().map(|(_, c)| c.match_rate * c.oracle_assignment.len() as f64).sum();
    let gap = per_seed.iter().map(|(_, c)| c.relative_loss_gap).sum::<f64>() / per_seed.len() as f64;
    Ok(ComparisonSummary {
        recovery: matched / clusters as f64,
        mean_relative_loss_gap: gap,
        per_seed,
    })
}

/// Trains with one operator for every node without attributes (a single
/// cluster), for each of the four operators.
pub fn single_operator_baselines(problem: &Problem, spec: &TrainSpec) -> Result<Vec<(CompletionOpKind, TrainOutcome)>> {
    let n = problem.context.completion.num_missing();
    if n == 0 {
        return Err(Error::NothingToComplete);
    }
    let map = ClusterMap::new(vec![0; n], 1)?;
    let spec = TrainSpec { clusters: 1, ..*spec };
    CompletionOpKind::ALL
        .into_par_iter()
        .map(|op| Ok((op, train_fixed(problem, &spec, &map, &[op], None)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    pub node_type: String,
    pub counts: [usize; NUM_OPS],
    pub percent: [f64; NUM_OPS],
}

/// Share of nodes without attributes assigned to each operator, per node
/// type and overall, pooled over runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorDistribution {
    pub rows: Vec<DistributionRow>,
    pub total: DistributionRow,
}

fn row(node_type: String, counts: [usize; NUM_OPS]) -> DistributionRow {
    let n: usize = counts.iter().sum();
    let percent = counts.map(|c| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 });
    DistributionRow { node_type, counts, percent }
}

impl OperatorDistribution {
    pub fn from_runs(runs: &[SearchResult]) -> Self {
        let mut by_type: BTreeMap<String, [usize; NUM_OPS]> = BTreeMap::new();
        let mut total = [0; NUM_OPS];
        for r in runs {
            for node in &r.node_operators {
                by_type.entry(node.node_type.clone()).or_default()[node.operator.index()] += 1;
                total[node.operator.index()] += 1;
            }
        }
        Self {
            rows: by_type.into_iter().map(|(t, c)| row(t, c)).collect(),
            total: row("all".into(), total),
        }
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<12}", "node type");
        for op in CompletionOpKind::ALL {
            let _ = write!(out, "{:>10}", op.name());
        }
        out.push_str(&format!("{:>8}\n", "nodes"));
        for r in self.rows.iter().chain(std::iter::once(&self.total)) {
            let _ = write!(out, "{:<12}", r.node_type);
            for p in r.percent {
                let _ = write!(out, "{:>9.1}%", p);
            }
            let _ = writeln!(out, "{:>8}", r.counts.iter().sum::<usize>());
        }
        out
    }
}

//! Planted-signal synthetic graphs and the exhaustive assignment oracle.
//!
//! The generator builds four node types:
//!
//! * `item`: labeled target nodes with all-zero attributes;
//! * `tag`: nodes without attributes, partitioned into planted groups;
//! * `signal`: attributed nodes whose features are class prototypes;
//! * `relay`: attributed noise nodes.
//!
//! Every item inherits the class of the tags it links to, and each group is
//! wired so that its class signal reaches the tag through exactly one
//! completion channel:
//!
//! * `Mean`: a tag links to several signal nodes, most of its own class.
//!   Signal nodes have skewed popularity, so degree-normalized aggregation
//!   reweights the vote and blurs the majority.
//! * `Ppnp`: a tag links to one item and one private relay; the relay links
//!   to prototypes of the class. The signal is two hops out.
//! * `OneHot`: tags only touch items, and every tag is shared by several
//!   items, so a per-tag embedding learned on training items transfers.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterMap;
use crate::completion::{CompletionOpKind, NUM_OPS};
use crate::error::{Error, Result};
use crate::graph::{AttributeDesc, EdgeDesc, GraphDescription, HeteroGraph, LabelDesc, NodeTypeDesc, TargetDesc};
use crate::search::{train_fixed, SearchResult, TrainSpec};
use crate::task::{Problem, TaskMetrics};

pub const ITEM: &str = "item";
pub const TAG: &str = "tag";
pub const SIGNAL: &str = "signal";
pub const RELAY: &str = "relay";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedGroup {
    pub operator: CompletionOpKind,
    /// Number of tags in the group; split evenly across classes.
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedSpec {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    /// Standard deviation of relay attributes.
    pub noise: f64,
    /// Standard deviation around each class prototype.
    pub signal_noise: f64,
    /// Signal nodes per class for `Mean` groups.
    pub mean_pool: usize,
    /// Prototype nodes per class for `Ppnp` groups.
    pub ppnp_pool: usize,
    /// Tags of its class each `OneHot` item links to.
    pub onehot_tags_per_item: usize,
    /// Items attached to each `OneHot` tag, on average.
    pub onehot_fanout: usize,
    pub groups: Vec<PlantedGroup>,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 2,
            dim: 4,
            noise: 0.3,
            signal_noise: 0.1,
            mean_pool: 8,
            ppnp_pool: 2,
            onehot_tags_per_item: 2,
            onehot_fanout: 8,
            groups: vec![
                PlantedGroup { operator: CompletionOpKind::Mean, size: 24 },
                PlantedGroup { operator: CompletionOpKind::Ppnp, size: 24 },
                PlantedGroup { operator: CompletionOpKind::OneHot, size: 12 },
            ],
        }
    }
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::validation("planted spec", m));
        if self.classes < 2 || self.dim < self.classes {
            return bad(format!("need at least 2 classes and dim ≥ classes, got {} / {}", self.classes, self.dim));
        }
        if self.groups.is_empty() {
            return bad("at least one group is required".into());
        }
        let total: usize = self.groups.iter().map(|g| g.size).sum();
        if total > 500 {
            return bad(format!("{total} tags exceed the limit of 500"));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.size < self.classes || g.size % self.classes != 0 {
                return bad(format!("groups[{i}].size {} must be a positive multiple of {}", g.size, self.classes));
            }
            if g.operator == CompletionOpKind::GcnAgg {
                return bad(format!("groups[{i}]: GcnAgg has no dedicated wiring"));
            }
            if g.operator == CompletionOpKind::OneHot && g.size / self.classes < self.onehot_tags_per_item {
                return bad(format!("groups[{i}]: OneHot needs at least onehot_tags_per_item tags per class"));
            }
        }
        if !(self.noise >= 0.0 && self.signal_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        if self.mean_pool < 4 || self.ppnp_pool < 2 || self.onehot_fanout < 2 || self.onehot_tags_per_item < 2 {
            return bad("mean_pool ≥ 4, ppnp_pool ≥ 2, onehot_fanout ≥ 2 and onehot_tags_per_item ≥ 2 are required".into());
        }
        Ok(())
    }
}

/// Planted assignment of tags to groups; written next to the graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedTruth {
    pub graph_fingerprint: String,
    pub operators: Vec<CompletionOpKind>,
    /// Group of each tag by local id.
    pub tag_groups: Vec<usize>,
}

impl PlantedTruth {
    /// Cluster map over V⁻ rows of `graph`.
    pub fn cluster_map(&self, graph: &HeteroGraph) -> Result<ClusterMap> {
        if graph.fingerprint() != self.graph_fingerprint {
            return Err(Error::GraphMismatch {
                left: graph.fingerprint().to_string(),
                right: self.graph_fingerprint.clone(),
            });
        }
        let tag = graph
            .type_index(TAG)
            .ok_or_else(|| Error::validation("planted truth", "graph has no `tag` type"))?;
        let mut ids = Vec::new();
        for (t, nt) in graph.node_types().iter().enumerate() {
            if graph.attributes(t).is_some() {
                continue;
            }
            if t != tag {
                return Err(Error::validation("planted truth", format!("unexpected type without attributes `{}`", nt.name)));
            }
            ids.extend_from_slice(&self.tag_groups);
        }
        ClusterMap::new(ids, self.operators.len())
    }
}

struct Builder {
    rng: ChaCha8Rng,
    dim: usize,
    counts: BTreeMap<&'static str, usize>,
    attrs: BTreeMap<&'static str, Vec<f64>>,
    edges: BTreeMap<&'static str, Vec<(usize, usize)>>,
    labels: Vec<(usize, usize)>,
}

impl Builder {
    fn add(&mut self, t: &'static str, features: Option<Vec<f64>>) -> usize {
        let c = self.counts.entry(t).or_insert(0);
        let id = *c;
        *c += 1;
        if let Some(f) = features {
            debug_assert_eq!(f.len(), self.dim);
            self.attrs.entry(t).or_default().extend(f);
        }
        id
    }

    fn noise(&mut self, sd: f64) -> Vec<f64> {
        let n = Normal::new(0.0, sd.max(f64::MIN_POSITIVE)).expect("valid sd");
        (0..self.dim).map(|_| if sd == 0.0 { 0.0 } else { n.sample(&mut self.rng) }).collect()
    }

    fn prototype(&mut self, class: usize, sd: f64) -> Vec<f64> {
        let mut v = self.noise(sd);
        v[class] += 1.0;
        v
    }

    fn link(&mut self, etype: &'static str, a: usize, b: usize) {
        self.edges.entry(etype).or_default().push((a, b));
    }
}

/// Deterministic planted graph and its truth sidecar.
pub fn gen_synthetic(spec: &PlantedSpec) -> Result<(GraphDescription, PlantedTruth)> {
    spec.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        dim: spec.dim,
        counts: BTreeMap::new(),
        attrs: BTreeMap::new(),
        edges: BTreeMap::new(),
        labels: Vec::new(),
    };
    let classes = spec.classes;
    let mut tag_groups = Vec::new();
    for (gi, group) in spec.groups.iter().enumerate() {
        let per_class = group.size / classes;
        match group.operator {
            CompletionOpKind::Mean => {
                let pools: Vec<Vec<usize>> = (0..classes)
                    .map(|c| (0..spec.mean_pool).map(|_| { let f = b.prototype(c, spec.signal_noise); b.add(SIGNAL, Some(f)) }).collect())
                    .collect();
                // popularity ∝ 1 / (rank + 1): a few hubs and many near-leaves
                let weights: Vec<f64> = (0..spec.mean_pool).map(|r| 1.0 / (r as f64 + 1.0)).collect();
                for c in 0..classes {
                    for _ in 0..per_class {
                        let tag = b.add(TAG, None);
                        tag_groups.push(gi);
                        let item = b.add(ITEM, Some(vec![0.0; spec.dim]));
                        b.labels.push((item, c));
                        b.link("item-tag", item, tag);
                        let major = b.rng.random_range(2..=4usize);
                        let mut picks: Vec<usize> = Vec::new();
                        let draw = |b: &mut Builder, pool: &[usize], k: usize, picks: &mut Vec<usize>| {
                            let mut chosen = BTreeSet::new();
                            while chosen.len() < k {
                                let idx = weighted_index(&mut b.rng, &weights);
                                chosen.insert(pool[idx]);
                            }
                            picks.extend(chosen);
                        };
                        draw(&mut b, &pools[c], major, &mut picks);
                        let minor = major - 1;
                        let others: Vec<usize> = (0..classes).filter(|&o| o != c).collect();
                        let mut remaining = minor;
                        while remaining > 0 {
                            let o = *others.choose(&mut b.rng).expect("other class");
                            let before = picks.len();
                            draw(&mut b, &pools[o], 1, &mut picks);
                            if picks[before..].iter().all(|p| !picks[..before].contains(p)) {
                                remaining -= 1;
                            } else {
                                picks.truncate(before);
                            }
                        }
                        for s in picks {
                            b.link("tag-signal", tag, s);
                        }
                    }
                }
            }
            CompletionOpKind::Ppnp => {
                let pools: Vec<Vec<usize>> = (0..classes)
                    .map(|c| (0..spec.ppnp_pool).map(|_| { let f = b.prototype(c, spec.signal_noise); b.add(SIGNAL, Some(f)) }).collect())
                    .collect();
                for (c, pool) in pools.iter().enumerate() {
                    for _ in 0..per_class {
                        let tag = b.add(TAG, None);
                        tag_groups.push(gi);
                        let item = b.add(ITEM, Some(vec![0.0; spec.dim]));
                        b.labels.push((item, c));
                        b.link("item-tag", item, tag);
                        let f = b.noise(spec.noise);
                        let relay = b.add(RELAY, Some(f));
                        b.link("tag-relay", tag, relay);
                        let mut picks = pool.clone();
                        picks.shuffle(&mut b.rng);
                        for &s in &picks[..2] {
                            b.link("relay-signal", relay, s);
                        }
                    }
                }
            }
            CompletionOpKind::OneHot => {
                let tags: Vec<Vec<usize>> = (0..classes)
                    .map(|_| {
                        (0..per_class)
                            .map(|_| {
                                tag_groups.push(gi);
                                b.add(TAG, None)
                            })
                            .collect()
                    })
                    .collect();
                // each item touches `k` distinct tags of its class; every tag
                // gets `fanout` items on average
                let k = spec.onehot_tags_per_item;
                let items = per_class * spec.onehot_fanout / k;
                for c in 0..classes {
                    // shuffled rounds over the class's tags keep usage balanced
                    let mut slots: Vec<usize> = Vec::new();
                    while slots.len() < k * items {
                        let mut round = tags[c].clone();
                        round.shuffle(&mut b.rng);
                        slots.extend(round);
                    }
                    for chunk in slots.chunks(k).take(items) {
                        let item = b.add(ITEM, Some(vec![0.0; spec.dim]));
                        b.labels.push((item, c));
                        let mut picked: Vec<usize> = Vec::with_capacity(k);
                        for &t in chunk {
                            let t = if picked.contains(&t) {
                                *tags[c].iter().find(|u| !picked.contains(u)).expect("enough tags")
                            } else {
                                t
                            };
                            picked.push(t);
                        }
                        for t in picked {
                            b.link("item-tag", item, t);
                        }
                    }
                }
            }
            CompletionOpKind::GcnAgg => unreachable!("rejected by validation"),
        }
    }
    let types = [ITEM, TAG, SIGNAL, RELAY];
    let node_types = types
        .iter()
        .filter(|t| b.counts.get(*t).copied().unwrap_or(0) > 0)
        .map(|t| NodeTypeDesc { name: t.to_string(), count: b.counts[t] })
        .collect();
    let attributes = b
        .attrs
        .iter()
        .map(|(t, data)| (t.to_string(), AttributeDesc { dim: spec.dim, data: data.clone() }))
        .collect();
    let endpoints = |e: &str| -> (&str, &str) {
        match e {
            "item-tag" => (ITEM, TAG),
            "tag-signal" => (TAG, SIGNAL),
            "tag-relay" => (TAG, RELAY),
            _ => (RELAY, SIGNAL),
        }
    };
    let edges = b
        .edges
        .iter()
        .map(|(e, pairs)| {
            let (s, d) = endpoints(e);
            EdgeDesc { etype: e.to_string(), src_type: s.into(), dst_type: d.into(), pairs: pairs.clone() }
        })
        .collect();
    let mut labels = b.labels.clone();
    labels.sort_unstable();
    let desc = GraphDescription {
        node_types,
        attributes,
        edges,
        labels: Some(LabelDesc { node_type: ITEM.into(), num_classes: classes, entries: labels }),
        target: TargetDesc::NodeClassification { node_type: ITEM.into() },
    };
    let graph = crate::graph::build_graph(&desc)?;
    let truth = PlantedTruth {
        graph_fingerprint: graph.fingerprint().to_string(),
        operators: spec.groups.iter().map(|g| g.operator).collect(),
        tag_groups,
    };
    Ok((desc, truth))
}

fn weighted_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

/// Decodes assignment `index` with cluster 0 as the most significant digit.
pub fn decode_assignment(mut index: usize, clusters: usize) -> Vec<CompletionOpKind> {
    let mut ops = vec![CompletionOpKind::Mean; clusters];
    for slot in ops.iter_mut().rev() {
        *slot = CompletionOpKind::from_index(index % NUM_OPS);
        index /= NUM_OPS;
    }
    ops
}

pub fn assignment_label(ops: &[CompletionOpKind]) -> String {
    ops.iter().map(|o| o.name()).collect::<Vec<_>>().join("/")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub assignment: Vec<CompletionOpKind>,
    pub label: String,
    pub val_loss: f64,
    pub best_epoch: usize,
    pub val_metrics: TaskMetrics,
    pub test_metrics: TaskMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub graph_fingerprint: String,
    pub clusters: usize,
    pub cluster_ids: Vec<usize>,
    pub seed: u64,
    pub epochs: usize,
    /// Fewer than `4^M` assignments were trained.
    pub partial: bool,
    pub rows: Vec<OracleRow>,
    pub best: usize,
}

impl OracleResult {
    pub fn best_row(&self) -> &OracleRow {
        &self.rows[self.best]
    }

    /// Rows sorted by validation loss, best first.
    pub fn ranking(&self) -> Vec<&OracleRow> {
        let mut rows: Vec<&OracleRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| a.val_loss.total_cmp(&b.val_loss));
        rows
    }

    pub fn row(&self, ops: &[CompletionOpKind]) -> Option<&OracleRow> {
        self.rows.iter().find(|r| r.assignment == ops)
    }
}

/// Largest enumeration trained without an explicit budget.
pub const DEFAULT_BUDGET: usize = 4096;

/// Trains every per-cluster assignment under a fixed cluster map. At most
/// `budget` assignments are trained, in lexicographic order.
pub fn brute_force_search(problem: &Problem, map: &ClusterMap, spec: &TrainSpec, budget: usize) -> Result<OracleResult> {
    let m = map.clusters();
    let total = NUM_OPS.checked_pow(m as u32).unwrap_or(usize::MAX);
    let count = total.min(budget);
    if count == 0 {
        return Err(Error::Config("oracle budget must be positive".into()));
    }
    let rows: Vec<OracleRow> = (0..count)
        .into_par_iter()
        .map(|i| {
            let ops = decode_assignment(i, m);
            let out = train_fixed(problem, spec, map, &ops, None)?;
            Ok(OracleRow {
                label: assignment_label(&ops),
                assignment: ops,
                val_loss: out.val_loss,
                best_epoch: out.best_epoch,
                val_metrics: out.val_metrics,
                test_metrics: out.test_metrics,
            })
        })
        .collect::<Result<_>>()?;
    let best = (0..rows.len())
        .min_by(|&a, &b| rows[a].val_loss.total_cmp(&rows[b].val_loss))
        .expect("non-empty");
    Ok(OracleResult {
        graph_fingerprint: problem.context.graph.fingerprint().to_string(),
        clusters: m,
        cluster_ids: map.ids().to_vec(),
        seed: spec.seed,
        epochs: spec.epochs,
        partial: count < total,
        rows,
        best,
    })
}

/// How a search result relates to the oracle's enumeration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    /// Majority searched operator within each oracle cluster.
    pub search_assignment: Vec<CompletionOpKind>,
    pub oracle_assignment: Vec<CompletionOpKind>,
    pub match_rate: f64,
    /// Searched validation loss minus the oracle minimum.
    pub loss_gap: f64,
    pub relative_loss_gap: f64,
    /// Position of the searched assignment in the oracle ranking (0 = best).
    pub oracle_rank: Option<usize>,
    pub metric_gaps: BTreeMap<String, f64>,
}

pub fn compare(search: &SearchResult, oracle: &OracleResult) -> Result<CompareReport> {
    if search.graph_fingerprint != oracle.graph_fingerprint {
        return Err(Error::GraphMismatch {
            left: search.graph_fingerprint.clone(),
            right: oracle.graph_fingerprint.clone(),
        });
    }
    if search.node_operators.len() != oracle.cluster_ids.len() {
        return Err(Error::LengthMismatch {
            left: search.node_operators.len(),
            right: oracle.cluster_ids.len(),
        });
    }
    let mut votes = vec![[0usize; NUM_OPS]; oracle.clusters];
    for (node, &c) in search.node_operators.iter().zip(&oracle.cluster_ids) {
        votes[c][node.operator.index()] += 1;
    }
    let search_assignment: Vec<CompletionOpKind> = votes
        .iter()
        .map(|v| {
            let best = (0..NUM_OPS).fold(0, |b, o| if v[o] > v[b] { o } else { b });
            CompletionOpKind::from_index(best)
        })
        .collect();
    let best = oracle.best_row();
    let matches = search_assignment.iter().zip(&best.assignment).filter(|(a, b)| a == b).count();
    let loss_gap = search.retrain.val_loss - best.val_loss;
    let oracle_rank = oracle.ranking().iter().position(|r| r.assignment == search_assignment);
    let searched = search.retrain.test_metrics.named();
    let metric_gaps = best
        .test_metrics
        .named()
        .into_iter()
        .filter_map(|(k, v)| searched.get(k).map(|s| (k.to_string(), s - v)))
        .collect();
    Ok(CompareReport {
        match_rate: matches as f64 / oracle.clusters as f64,
        relative_loss_gap: loss_gap / best.val_loss.abs().max(f64::MIN_POSITIVE),
        search_assignment,
        oracle_assignment: best.assignment.clone(),
        loss_gap,
        oracle_rank,
        metric_gaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_graph;

    #[test]
    fn default_spec_shape() {
        let (desc, truth) = gen_synthetic(&PlantedSpec::default()).unwrap();
        let g = build_graph(&desc).unwrap();
        let tag = g.type_index(TAG).unwrap();
        assert_eq!(g.node_types()[tag].count, 60);
        assert!(g.num_nodes() <= 200, "{}", g.num_nodes());
        assert_eq!(truth.tag_groups.len(), 60);
        assert_eq!(truth.operators, vec![CompletionOpKind::Mean, CompletionOpKind::Ppnp, CompletionOpKind::OneHot]);
        let map = truth.cluster_map(&g).unwrap();
        assert_eq!(map.histogram(), vec![24, 24, 12]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = serde_json::to_string(&gen_synthetic(&PlantedSpec::default()).unwrap()).unwrap();
        let b = serde_json::to_string(&gen_synthetic(&PlantedSpec::default()).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = PlantedSpec { seed: 1, ..Default::default() };
        assert_ne!(a, serde_json::to_string(&gen_synthetic(&other).unwrap()).unwrap());
    }

    #[test]
    fn groups_are_not_connected_to_each_other() {
        let (desc, truth) = gen_synthetic(&PlantedSpec::default()).unwrap();
        let g = build_graph(&desc).unwrap();
        let adj = crate::graph::build_adjacency(&g, false);
        let tag_off = g.node_types()[g.type_index(TAG).unwrap()].offset;
        // flood-fill from each tag and check that only same-group tags are reached
        for (start, &grp) in truth.tag_groups.iter().enumerate() {
            let mut seen = vec![false; g.num_nodes()];
            let mut stack = vec![tag_off + start];
            seen[tag_off + start] = true;
            while let Some(v) = stack.pop() {
                for &u in adj.neighbors(v) {
                    if !seen[u] {
                        seen[u] = true;
                        stack.push(u);
                    }
                }
            }
            for (t, &other) in truth.tag_groups.iter().enumerate() {
                if seen[tag_off + t] {
                    assert_eq!(other, grp);
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let gcn = PlantedSpec {
            groups: vec![PlantedGroup { operator: CompletionOpKind::GcnAgg, size: 4 }],
            ..Default::default()
        };
        assert!(gen_synthetic(&gcn).unwrap_err().is_validation());
        let odd = PlantedSpec {
            groups: vec![PlantedGroup { operator: CompletionOpKind::Mean, size: 5 }],
            ..Default::default()
        };
        assert!(gen_synthetic(&odd).is_err());
        let big = PlantedSpec {
            groups: vec![PlantedGroup { operator: CompletionOpKind::Mean, size: 502 }],
            ..Default::default()
        };
        assert!(gen_synthetic(&big).is_err());
    }

    #[test]
    fn assignment_decoding_is_exhaustive() {
        let all: BTreeSet<Vec<CompletionOpKind>> = (0..64).map(|i| decode_assignment(i, 3)).collect();
        assert_eq!(all.len(), 64);
        assert_eq!(decode_assignment(1, 2), vec![CompletionOpKind::Mean, CompletionOpKind::GcnAgg]);
        assert_eq!(assignment_label(&decode_assignment(63, 3)), "OneHot/OneHot/OneHot");
    }
}

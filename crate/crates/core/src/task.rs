//! Supervised task wiring: split items, per-split losses and metrics.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, Task};
use crate::linalg::argmax;
use crate::metrics::{macro_f1, micro_f1, mrr, roc_auc};
use crate::model::{classify, edge_scores, loss_link_prediction, loss_node_classification, BoundParams, GraphContext};
use crate::split::make_splits;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    /// Share of target edges held out as the link-prediction test set.
    pub link_test: f64,
    /// Share of target edges held out for link-prediction validation.
    pub link_val: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.24,
            val: 0.06,
            link_test: 0.1,
            link_val: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug)]
pub struct LabeledNodes {
    pub nodes: Arc<[usize]>,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct EdgeSet {
    pub pos: Vec<(usize, usize)>,
    pub neg: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub enum TaskData {
    Classification {
        num_classes: usize,
        train: LabeledNodes,
        val: LabeledNodes,
        test: LabeledNodes,
    },
    Link {
        src: std::ops::Range<usize>,
        dst: std::ops::Range<usize>,
        /// Every target edge in both orientations, global ids.
        edges: HashSet<(usize, usize)>,
        train: Vec<(usize, usize)>,
        val: EdgeSet,
        test: EdgeSet,
    },
}

/// Metrics for one evaluated split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskMetrics {
    Classification { macro_f1: f64, micro_f1: f64 },
    Link { roc_auc: f64, mrr: f64 },
}

impl TaskMetrics {
    pub fn named(&self) -> BTreeMap<&'static str, f64> {
        match *self {
            TaskMetrics::Classification { macro_f1, micro_f1 } => {
                BTreeMap::from([("macro_f1", macro_f1), ("micro_f1", micro_f1)])
            }
            TaskMetrics::Link { roc_auc, mrr } => BTreeMap::from([("roc_auc", roc_auc), ("mrr", mrr)]),
        }
    }
}

/// A graph prepared for training: the message-passing context plus split
/// supervision.
#[derive(Clone, Debug)]
pub struct Problem {
    pub context: Arc<GraphContext>,
    pub data: TaskData,
}

fn sample_non_edge(
    rng: &mut ChaCha8Rng,
    src: &std::ops::Range<usize>,
    dst: &std::ops::Range<usize>,
    edges: &HashSet<(usize, usize)>,
    fixed_src: Option<usize>,
) -> Option<(usize, usize)> {
    for _ in 0..1000 {
        let s = fixed_src.unwrap_or_else(|| rng.random_range(src.clone()));
        let d = rng.random_range(dst.clone());
        if s != d && !edges.contains(&(s, d)) {
            return Some((s, d));
        }
    }
    None
}

impl Problem {
    pub fn new(graph: HeteroGraph, cfg: &SplitConfig) -> Result<Self> {
        match *graph.task() {
            Task::NodeClassification { node_type } => {
                let labels = graph
                    .labels()
                    .filter(|l| l.node_type == node_type)
                    .ok_or_else(|| Error::Config("classification target has no labels".into()))?;
                let offset = graph.node_types()[node_type].offset;
                let items = &labels.entries;
                let split = make_splits(items.len(), cfg.train, cfg.val, cfg.seed)?;
                let take = |idx: &[usize]| LabeledNodes {
                    nodes: idx.iter().map(|&i| offset + items[i].0).collect(),
                    labels: idx.iter().map(|&i| items[i].1).collect(),
                };
                let data = TaskData::Classification {
                    num_classes: labels.num_classes,
                    train: take(&split.train),
                    val: take(&split.val),
                    test: take(&split.test),
                };
                Ok(Self {
                    context: Arc::new(GraphContext::new(graph)),
                    data,
                })
            }
            Task::LinkPrediction { edge_type } => {
                let rel = &graph.relations()[edge_type];
                let (so, doff) = (graph.node_types()[rel.src_type].offset, graph.node_types()[rel.dst_type].offset);
                let src = so..so + graph.node_types()[rel.src_type].count;
                let dst = doff..doff + graph.node_types()[rel.dst_type].count;
                let global: Vec<(usize, usize)> = rel
                    .pairs
                    .iter()
                    .map(|&(s, d)| (so + s, doff + d))
                    .filter(|(s, d)| s != d)
                    .collect();
                let mut edges = HashSet::new();
                for &(s, d) in &global {
                    edges.insert((s, d));
                    if rel.src_type == rel.dst_type {
                        edges.insert((d, s));
                    }
                }
                let train_share = 1.0 - cfg.link_test - cfg.link_val;
                let split = make_splits(global.len(), train_share, cfg.link_val, cfg.seed)?;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6e65_6761_7469_7665);
                let mut corrupt = |idx: &[usize]| -> Result<EdgeSet> {
                    let pos: Vec<_> = idx.iter().map(|&i| global[i]).collect();
                    let neg = pos
                        .iter()
                        .map(|&(s, _)| {
                            sample_non_edge(&mut rng, &src, &dst, &edges, Some(s))
                                .ok_or_else(|| Error::Config("target edge type is too dense to sample negatives".into()))
                        })
                        .collect::<Result<_>>()?;
                    Ok(EdgeSet { pos, neg })
                };
                let val = corrupt(&split.val)?;
                let test = corrupt(&split.test)?;
                let hidden: Vec<(usize, usize)> = split
                    .val
                    .iter()
                    .chain(&split.test)
                    .map(|&i| (global[i].0 - so, global[i].1 - doff))
                    .collect();
                let mp_graph = graph.without_pairs(edge_type, &hidden);
                let data = TaskData::Link {
                    train: split.train.iter().map(|&i| global[i]).collect(),
                    src,
                    dst,
                    edges,
                    val,
                    test,
                };
                Ok(Self {
                    context: Arc::new(GraphContext::new(mp_graph)),
                    data,
                })
            }
        }
    }

    /// Width of the classification head, 0 for link prediction.
    pub fn num_classes(&self) -> usize {
        match &self.data {
            TaskData::Classification { num_classes, .. } => *num_classes,
            TaskData::Link { .. } => 0,
        }
    }

    /// Supervised loss on one split. Training negatives for link prediction
    /// are resampled from `rng` on every call.
    pub fn loss(&self, tape: &mut Tape, params: &BoundParams, hidden: Var, part: Part, rng: &mut ChaCha8Rng) -> Var {
        match &self.data {
            TaskData::Classification { train, val, test, .. } => {
                let set = match part {
                    Part::Train => train,
                    Part::Val => val,
                    Part::Test => test,
                };
                let logits = classify(tape, params, hidden, set.nodes.clone());
                loss_node_classification(tape, logits, &set.labels)
            }
            TaskData::Link { src, dst, edges, train, val, test } => {
                let (pos, neg) = match part {
                    Part::Train => {
                        let neg: Vec<_> = (0..train.len())
                            .filter_map(|_| sample_non_edge(rng, src, dst, edges, None))
                            .collect();
                        (train.clone(), neg)
                    }
                    Part::Val => (val.pos.clone(), val.neg.clone()),
                    Part::Test => (test.pos.clone(), test.neg.clone()),
                };
                let p = edge_scores(tape, hidden, &pos);
                let n = edge_scores(tape, hidden, &neg);
                loss_link_prediction(tape, p, n)
            }
        }
    }

    pub fn metrics(&self, tape: &mut Tape, params: &BoundParams, hidden: Var, part: Part) -> Result<TaskMetrics> {
        match &self.data {
            TaskData::Classification { num_classes, train, val, test } => {
                let set = match part {
                    Part::Train => train,
                    Part::Val => val,
                    Part::Test => test,
                };
                let logits = classify(tape, params, hidden, set.nodes.clone());
                let z = tape.value(logits);
                let pred: Vec<usize> = (0..z.rows()).map(|r| argmax(z.row(r))).collect();
                Ok(TaskMetrics::Classification {
                    macro_f1: macro_f1(&pred, &set.labels, *num_classes)?,
                    micro_f1: micro_f1(&pred, &set.labels)?,
                })
            }
            TaskData::Link { val, test, .. } => {
                let set = match part {
                    Part::Val => val,
                    Part::Test => test,
                    Part::Train => return Err(Error::UndefinedMetric("link metrics use held-out edges".into())),
                };
                let p = edge_scores(tape, hidden, &set.pos);
                let n = edge_scores(tape, hidden, &set.neg);
                let ps = tape.value(p).as_slice().to_vec();
                let ns = tape.value(n).as_slice().to_vec();
                let mut labels = vec![true; ps.len()];
                labels.extend(std::iter::repeat_n(false, ns.len()));
                let scores: Vec<f64> = ps.iter().chain(&ns).copied().collect();
                let mut by_source: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                for (&(s, _), &score) in set.neg.iter().zip(&ns) {
                    by_source.entry(s).or_default().push(score);
                }
                let queries: Vec<(f64, Vec<f64>)> = set
                    .pos
                    .iter()
                    .zip(&ps)
                    .map(|(&(s, _), &score)| (score, by_source.get(&s).cloned().unwrap_or_default()))
                    .collect();
                Ok(TaskMetrics::Link {
                    roc_auc: roc_auc(&scores, &labels)?,
                    mrr: mrr(&queries)?,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::graph::{build_graph, AttributeDesc, EdgeDesc, GraphDescription, NodeTypeDesc, TargetDesc};

    fn link_graph() -> HeteroGraph {
        let n = 20;
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| [(i, i), (i, (i + 1) % n)]).collect();
        build_graph(&GraphDescription {
            node_types: vec![NodeTypeDesc { name: "u".into(), count: n }, NodeTypeDesc { name: "i".into(), count: n }],
            attributes: BTreeMap::from([("u".into(), AttributeDesc { dim: 1, data: vec![1.0; n] })]),
            edges: vec![EdgeDesc { etype: "ui".into(), src_type: "u".into(), dst_type: "i".into(), pairs }],
            labels: None,
            target: TargetDesc::LinkPrediction { edge_type: "ui".into() },
        })
        .unwrap()
    }

    #[test]
    fn held_out_links_are_hidden_from_message_passing() {
        let p = Problem::new(link_graph(), &SplitConfig::default()).unwrap();
        let TaskData::Link { train, val, test, edges, .. } = &p.data else { panic!() };
        assert_eq!(train.len() + val.pos.len() + test.pos.len(), 40);
        assert_eq!(test.pos.len(), 4);
        let rel = &p.context.graph.relations()[0];
        for &(s, d) in val.pos.iter().chain(&test.pos) {
            assert!(!rel.neighbors(s).contains(&d));
        }
        for &(s, d) in train {
            assert!(rel.neighbors(s).contains(&d));
        }
        for &(s, d) in val.neg.iter().chain(&test.neg) {
            assert!(!edges.contains(&(s, d)));
        }
    }
}

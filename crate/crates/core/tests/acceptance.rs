//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test --release --test acceptance`. A failing criterion is
//! reported but only turns the exit status non-zero when `AUTOAC_STRICT=1`.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use autoac::cluster::{assign_clusters, modularity_loss, ClusterMap, ModularityInputs};
use autoac::completion::{ppnp_completion, CompletionContext, CompletionGraph, CompletionOpKind, PropagationConfig, NUM_OPS};
use autoac::experiment::{run_oracle, run_repeats, single_operator_baselines};
use autoac::graph::{
    build_adjacency, build_graph, partition_nodes, AdjacencyView, AttributeDesc, EdgeDesc, GraphDescription,
    NodeTypeDesc, TargetDesc,
};
use autoac::linalg::{Csr, Matrix};
use autoac::model::{
    classify, completion_context, forward, loss_node_classification, names, projected_attributes, BoundParams,
    ModelShape, ParamStore,
};
use autoac::search::{complete_attributes, prox_c1, prox_c2, Mixture, MixtureMode, Search, SearchConfig};
use autoac::tape::{finite_diff_check, Tape, Var};
use autoac::task::{Problem, SplitConfig, TaskData};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || format!("took {:.1}s, limit {limit_s}s", elapsed.as_secs_f64()))
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect())
}

// ---------------------------------------------------------------- criterion 1

fn primitive_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (5, 3);
    let a = random_matrix(&mut rng, n, k);
    let b = random_matrix(&mut rng, n, k);
    let w = random_matrix(&mut rng, k, k);
    let bias = random_matrix(&mut rng, 1, k);
    let col = random_matrix(&mut rng, n, 1);
    let proj = random_matrix(&mut rng, n, k);
    let pos = a.map(|v| v.abs() + 0.5);
    let sparse = Arc::new(Csr::from_row_lists(n, (0..n).map(|i| vec![(i, 0.5), ((i + 2) % n, -1.25)]).collect()));
    let lists: Vec<Vec<usize>> = (0..n).map(|i| vec![(i + 1) % n, (i + n - 1) % n]).collect();
    let ring = AdjacencyView::from_neighbor_lists(lists, false);
    let adj = Arc::new(ring.to_csr());
    let degrees: Arc<[f64]> = ring.degrees.iter().map(|&d| d as f64).collect();
    let two_e: f64 = degrees.iter().sum();
    let gather: Arc<[usize]> = Arc::from(vec![3, 0, 3, 1]);
    let scatter: Arc<[usize]> = Arc::from(vec![2, 2, 0, 4, 1]);

    let project = move |t: &mut Tape, v: Var| -> Var {
        let (r, c) = t.value(v).shape();
        let pm = if (r, c) == proj.shape() {
            proj.clone()
        } else {
            Matrix::from_vec(r, c, (0..r * c).map(|i| 0.3 + (i as f64 * 0.37).sin()).collect())
        };
        let pc = t.constant(pm);
        let m = t.mul(v, pc);
        t.sum(m)
    };
    type Build<'a> = Box<dyn Fn(&mut Tape, &[Var]) -> Var + 'a>;
    let cases: Vec<(&'static str, Vec<Matrix>, Build)> = vec![
        ("matmul", vec![a.clone(), w.clone()], Box::new(|t, p| { let y = t.matmul(p[0], p[1]); project(t, y) })),
        ("sparse_matmul", vec![a.clone()], Box::new(|t, p| { let y = t.sparse_matmul(sparse.clone(), p[0]); project(t, y) })),
        ("add", vec![a.clone(), b.clone()], Box::new(|t, p| { let y = t.add(p[0], p[1]); project(t, y) })),
        ("add_row", vec![a.clone(), bias.clone()], Box::new(|t, p| { let y = t.add_row(p[0], p[1]); project(t, y) })),
        ("sub", vec![a.clone(), b.clone()], Box::new(|t, p| { let y = t.sub(p[0], p[1]); project(t, y) })),
        ("scale", vec![a.clone()], Box::new(|t, p| { let y = t.scale(p[0], -2.5); project(t, y) })),
        ("mul", vec![a.clone(), b.clone()], Box::new(|t, p| { let y = t.mul(p[0], p[1]); project(t, y) })),
        ("scale_rows", vec![a.clone(), col.clone()], Box::new(|t, p| { let y = t.scale_rows(p[0], p[1]); project(t, y) })),
        ("column", vec![a.clone()], Box::new(|t, p| { let y = t.column(p[0], 1); project(t, y) })),
        ("row_softmax", vec![a.clone()], Box::new(|t, p| { let y = t.row_softmax(p[0]); project(t, y) })),
        ("log_softmax", vec![a.clone()], Box::new(|t, p| { let y = t.log_softmax(p[0]); project(t, y) })),
        ("elu", vec![a.clone()], Box::new(|t, p| { let y = t.elu(p[0]); project(t, y) })),
        ("log", vec![pos.clone()], Box::new(|t, p| { let y = t.log(p[0]); project(t, y) })),
        ("sigmoid", vec![a.clone()], Box::new(|t, p| { let y = t.sigmoid(p[0]); project(t, y) })),
        ("softplus", vec![a.clone()], Box::new(|t, p| { let y = t.softplus(p[0]); project(t, y) })),
        ("gather_rows", vec![a.clone()], Box::new(|t, p| { let y = t.gather_rows(p[0], gather.clone()); project(t, y) })),
        ("scatter_add_rows", vec![a.clone()], Box::new(|t, p| { let y = t.scatter_add_rows(p[0], scatter.clone(), 6); project(t, y) })),
        ("sum_rows", vec![a.clone()], Box::new(|t, p| { let y = t.sum_rows(p[0]); project(t, y) })),
        ("row_dot", vec![a.clone(), b.clone()], Box::new(|t, p| { let y = t.row_dot(p[0], p[1]); project(t, y) })),
        ("sum", vec![a.clone()], Box::new(|t, p| { let y = t.mul(p[0], p[0]); t.sum(y) })),
        ("mean", vec![a.clone()], Box::new(|t, p| { let y = t.mul(p[0], p[0]); t.mean(y) })),
        ("frobenius_norm", vec![a.clone()], Box::new(|t, p| t.frobenius_norm(p[0]))),
        ("trace_quadratic_form", vec![a.clone()], Box::new(|t, p| {
            let c = t.row_softmax(p[0]);
            t.trace_quadratic_form(c, adj.clone(), degrees.clone(), two_e)
        })),
    ];
    cases
        .into_iter()
        .map(|(name, params, f)| (name, finite_diff_check(|t, p| f(t, p), &params, 1e-5)))
        .collect()
}

/// Gradient error of the full model loss, optionally with the clustering term.
fn model_error(lambda: f64) -> f64 {
    let (graph, truth) = common::tiny_planted();
    let problem = Problem::new(graph, &SplitConfig { train: 0.4, val: 0.3, ..Default::default() }).unwrap();
    let ctx = problem.context.clone();
    let TaskData::Classification { train, num_classes, .. } = &problem.data else { unreachable!() };
    let shape = ModelShape { hidden: 4, layers: 2, num_classes: *num_classes, clusters: 3 };
    let store = ParamStore::init(&ctx, &shape, &mut ChaCha8Rng::seed_from_u64(5));
    let param_names: Vec<String> = store.names().map(String::from).collect();
    let values: Vec<Matrix> = param_names.iter().map(|n| store.value(n).clone()).collect();
    // every operator is active for some rows
    let n = ctx.completion.num_missing();
    let map = ClusterMap::new((0..n).map(|i| i % NUM_OPS).collect(), NUM_OPS).unwrap();
    let modularity = ModularityInputs::new(&ctx.adjacency).unwrap();
    let _ = truth;
    finite_diff_check(
        |tape, vars| {
            let bound = BoundParams::from_vars(param_names.iter().cloned().zip(vars.iter().copied()));
            let base = projected_attributes(tape, &ctx, &bound);
            let mut cc = completion_context(&ctx, &bound, base, PropagationConfig::default());
            let x = complete_attributes(tape, &mut cc, &ctx.completion, &map, Mixture::Discrete(&CompletionOpKind::ALL)).unwrap();
            let h = forward(tape, &ctx, &bound, base, x, 2);
            let logits = classify(tape, &bound, h, train.nodes.clone());
            let sup = loss_node_classification(tape, logits, &train.labels);
            if lambda == 0.0 {
                return sup;
            }
            let c = assign_clusters(tape, h, bound.var(names::CLUSTER));
            let terms = modularity_loss(tape, c, &modularity);
            let weighted = tape.scale(terms.loss, lambda);
            tape.add(sup, weighted)
        },
        &values,
        1e-5,
    )
}

/// ∇ᾱ from the α-step against central differences of the validation loss.
fn alpha_error() -> f64 {
    let (graph, _) = common::tiny_planted();
    let cfg = SearchConfig {
        clusters: 3,
        hidden: 4,
        layers: 2,
        omega_lr: 1e-2,
        train_ratio: 0.4,
        val_ratio: 0.3,
        ..Default::default()
    };
    let problem = Problem::new(graph, &cfg.split()).unwrap();
    let mut search = Search::new(&problem, cfg).unwrap();
    for _ in 0..5 {
        search.alpha_step().unwrap();
        search.omega_step().unwrap();
    }
    let weights = prox_c1(search.alpha());
    let (_, grad) = search.mixture_loss(&weights).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..weights.len() {
        let mut up = weights.clone();
        up.as_mut_slice()[k] += h;
        let mut down = weights.clone();
        down.as_mut_slice()[k] -= h;
        let numeric = (search.mixture_loss(&up).unwrap().0 - search.mixture_loss(&down).unwrap().0) / (2.0 * h);
        let a = grad.as_slice()[k];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    worst
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let nodes = common::tiny_planted().0.num_nodes();
    ensure(nodes <= 30, || format!("fixture has {nodes} nodes"))?;
    let mut worst_primitive = ("", 0.0f64);
    for seed in 0..3 {
        for (name, err) in primitive_errors(seed) {
            if err > worst_primitive.1 {
                worst_primitive = (name, err);
            }
        }
    }
    let backbone = model_error(0.0);
    let combined = model_error(0.4);
    let alpha = alpha_error();
    let detail = format!(
        "primitives {:.1e} ({}), backbone {backbone:.1e}, with clustering {combined:.1e}, alpha {alpha:.1e}, {nodes} nodes",
        worst_primitive.1, worst_primitive.0
    );
    for (what, err) in [("primitive", worst_primitive.1), ("backbone", backbone), ("combined", combined), ("alpha", alpha)] {
        ensure(err < 1e-4, || format!("{what} gradient error {err:.2e}; {detail}"))?;
    }
    within(start.elapsed(), 60.0)?;
    Ok(format!("{detail}, {:.1}s", start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 2

/// Nearest one-hot row by exhaustive enumeration, lowest index on ties.
fn nearest_one_hot(row: &[f64]) -> Vec<f64> {
    let mut best = (f64::INFINITY, 0);
    for i in 0..row.len() {
        let d: f64 = row
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                let t = if j == i { 1.0 } else { 0.0 };
                (x - t) * (x - t)
            })
            .sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    (0..row.len()).map(|j| if j == best.1 { 1.0 } else { 0.0 }).collect()
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < 1000 {
        let mut r: Vec<f64> = (0..NUM_OPS).map(|_| rng.random_range(-1.0..2.0)).collect();
        if rows.len() % 10 == 0 {
            // exact ties exercise the tie-break; dyadic entries keep the
            // enumerated distances exact
            r = (0..NUM_OPS).map(|_| rng.random_range(-8..16) as f64 / 8.0).collect();
            let j = rng.random_range(1..NUM_OPS);
            r[j] = r.iter().cloned().fold(f64::MIN, f64::max);
            r[0] = r[j];
        }
        if r.iter().cloned().fold(f64::MIN, f64::max) >= 0.0 {
            rows.push(r);
        }
    }
    let z = Matrix::from_rows(&rows);
    let p1 = prox_c1(&z);
    ensure(prox_c1(&p1) == p1, || "prox_c1 is not idempotent".into())?;
    for r in 0..p1.rows() {
        let row = p1.row(r);
        ensure(row.iter().filter(|&&x| x == 1.0).count() == 1 && row.iter().all(|&x| x == 0.0 || x == 1.0), || {
            format!("row {r} is not one-hot: {row:?}")
        })?;
    }
    ensure(prox_c1(&z) == p1, || "prox_c1 is not deterministic".into())?;
    let tie = Matrix::from_rows(&[vec![0.4, 0.4, 0.1, 0.1]]);
    ensure(prox_c1(&tie).row(0) == [1.0, 0.0, 0.0, 0.0], || "tie not broken to the lowest index".into())?;
    let boxed = prox_c2(&z);
    for (x, y) in z.as_slice().iter().zip(boxed.as_slice()) {
        ensure(*y == x.clamp(0.0, 1.0), || format!("prox_c2({x}) = {y}"))?;
    }
    let composed = prox_c2(&prox_c1(&z));
    for r in 0..z.rows() {
        let direct = nearest_one_hot(z.row(r));
        ensure(composed.row(r) == direct.as_slice(), || format!("row {r}: composition {:?} vs enumeration {direct:?}", composed.row(r)))?;
    }
    within(start.elapsed(), 5.0)?;
    Ok(format!("1000 rows exact, {:.3}s", start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------- criterion 3

fn pairwise_modularity(lists: &[Vec<usize>], labels: &[usize]) -> f64 {
    let deg: Vec<f64> = lists.iter().map(|l| l.len() as f64).collect();
    let two_m: f64 = deg.iter().sum();
    let mut q = 0.0;
    for i in 0..lists.len() {
        for j in 0..lists.len() {
            if labels[i] != labels[j] {
                continue;
            }
            let a = lists[i].iter().filter(|&&u| u == j).count() as f64;
            q += a - deg[i] * deg[j] / two_m;
        }
    }
    q / two_m
}

fn one_hot(labels: &[usize], m: usize) -> Matrix {
    let mut c = Matrix::zeros(labels.len(), m);
    for (i, &l) in labels.iter().enumerate() {
        c.set(i, l, 1.0);
    }
    c
}

fn modularity_terms(lists: Vec<Vec<usize>>, c: Matrix) -> (f64, f64) {
    let adj = AdjacencyView::from_neighbor_lists(lists, false);
    let inputs = ModularityInputs::new(&adj).unwrap();
    let mut tape = Tape::new();
    let cv = tape.constant(c);
    let t = modularity_loss(&mut tape, cv, &inputs);
    (tape.value(t.modularity).item(), tape.value(t.collapse).item())
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst: f64 = 0.0;
    let mut graphs = 0;
    while graphs < 20 {
        let n = rng.random_range(5..=50);
        let mut sets = vec![BTreeSet::new(); n];
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.15) {
                    sets[i].insert(j);
                    sets[j].insert(i);
                }
            }
        }
        let lists: Vec<Vec<usize>> = sets.into_iter().map(|s| s.into_iter().collect()).collect();
        if lists.iter().all(|l| l.is_empty()) {
            continue;
        }
        let m = rng.random_range(2..=5);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let q = pairwise_modularity(&lists, &labels);
        let (relaxed, _) = modularity_terms(lists, one_hot(&labels, m));
        worst = worst.max((relaxed + q).abs());
        graphs += 1;
    }
    ensure(worst < 1e-9, || format!("relaxed vs pairwise differ by {worst:.2e}"))?;

    // M = 4 keeps every quantity dyadic, so equality is exact; M = 3 is
    // checked to rounding
    let ring = |n: usize| -> Vec<Vec<usize>> { (0..n).map(|i| vec![(i + 1) % n, (i + n - 1) % n]).collect() };
    let (_, uniform) = modularity_terms(ring(8), Matrix::filled(8, 4, 0.25));
    let (_, collapsed) = modularity_terms(ring(8), one_hot(&[0; 8], 4));
    ensure(uniform == 1.0 && collapsed == 2.0, || format!("M = 4: uniform {uniform}, collapsed {collapsed}"))?;
    let (_, uniform3) = modularity_terms(ring(6), Matrix::filled(6, 3, 1.0 / 3.0));
    let (_, collapsed3) = modularity_terms(ring(6), one_hot(&[0; 6], 3));
    ensure((uniform3 - 1.0).abs() < 1e-12 && (collapsed3 - 3f64.sqrt()).abs() < 1e-12, || {
        format!("M = 3: uniform {uniform3}, collapsed {collapsed3}")
    })?;

    let triangles = vec![vec![1, 2], vec![0, 2], vec![0, 1], vec![4, 5], vec![3, 5], vec![3, 4]];
    let (part, _) = modularity_terms(triangles, one_hot(&[0, 0, 0, 1, 1, 1], 2));
    ensure((part + 0.5).abs() < 1e-9, || format!("two triangles give {part}"))?;
    Ok(format!(
        "20 graphs, max error {worst:.1e}; collapse {uniform} / {collapsed} exact at M = 4, {uniform3} / {collapsed3:.15} at M = 3; triangles {part}"
    ))
}

// ---------------------------------------------------------------- criterion 4

fn dense_solve(mut a: Matrix, mut b: Matrix) -> Matrix {
    let n = a.rows();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a.get(i, col).abs().total_cmp(&a.get(j, col).abs())).unwrap();
        for c in 0..n {
            let t = a.get(col, c);
            a.set(col, c, a.get(piv, c));
            a.set(piv, c, t);
        }
        for c in 0..b.cols() {
            let t = b.get(col, c);
            b.set(col, c, b.get(piv, c));
            b.set(piv, c, t);
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a.get(r, col) / a.get(col, col);
            for c in 0..n {
                a.set(r, c, a.get(r, c) - f * a.get(col, c));
            }
            for c in 0..b.cols() {
                b.set(r, c, b.get(r, c) - f * b.get(col, c));
            }
        }
    }
    for r in 0..n {
        let d = a.get(r, r);
        for c in 0..b.cols() {
            b.set(r, c, b.get(r, c) / d);
        }
    }
    b
}

struct PpnpCase {
    desc: GraphDescription,
    /// Undirected simple edges over global ids.
    edges: BTreeSet<(usize, usize)>,
}

fn ppnp_case(rng: &mut ChaCha8Rng) -> PpnpCase {
    let na = rng.random_range(3..=20);
    let nm = rng.random_range(2..=30);
    let dim = 3;
    let data: Vec<f64> = (0..na * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut am = BTreeSet::new();
    let mut mm = BTreeSet::new();
    for m in 0..nm {
        for _ in 0..2 {
            am.insert((rng.random_range(0..na), m));
        }
        let other = rng.random_range(0..nm);
        if other != m {
            mm.insert((m.min(other), m.max(other)));
        }
    }
    let mut edges = BTreeSet::new();
    for &(a, m) in &am {
        edges.insert((a, na + m));
    }
    for &(x, y) in &mm {
        edges.insert((na + x, na + y));
    }
    let desc = GraphDescription {
        node_types: vec![NodeTypeDesc { name: "a".into(), count: na }, NodeTypeDesc { name: "m".into(), count: nm }],
        attributes: BTreeMap::from([("a".to_string(), AttributeDesc { dim, data })]),
        edges: vec![
            EdgeDesc { etype: "am".into(), src_type: "a".into(), dst_type: "m".into(), pairs: am.into_iter().collect() },
            EdgeDesc { etype: "mm".into(), src_type: "m".into(), dst_type: "m".into(), pairs: mm.into_iter().collect() },
        ],
        labels: None,
        target: TargetDesc::LinkPrediction { edge_type: "am".into() },
    };
    PpnpCase { desc, edges }
}

/// `(ppnp rows for V⁻, projected input X W on all nodes, global ids of V⁻)`.
fn run_ppnp(case: &PpnpCase, w: &Matrix, restart: f64, iterations: usize) -> (Matrix, Matrix, Vec<usize>) {
    let g = build_graph(&case.desc).unwrap();
    let partition = partition_nodes(&g);
    let cg = CompletionGraph::new(&g, &partition, &build_adjacency(&g, false));
    let attrs = g.attributes(0).unwrap();
    let mut x = Matrix::zeros(g.num_nodes(), attrs.cols());
    for r in 0..attrs.rows() {
        x.row_mut(r).copy_from_slice(attrs.row(r));
    }
    let mut tape = Tape::new();
    let base = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let tables = cg.blocks().iter().map(|b| tape.constant(Matrix::zeros(b.count, w.cols()))).collect();
    let mut ctx = CompletionContext::new(base, [wv, wv, wv], tables, PropagationConfig { restart, iterations });
    let out = ppnp_completion(&mut tape, &mut ctx, &cg);
    (tape.value(out).clone(), x.matmul(w), cg.missing().to_vec())
}

fn relative_error(got: &Matrix, exact: &Matrix, missing: &[usize]) -> f64 {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (row, &v) in missing.iter().enumerate() {
        for c in 0..got.cols() {
            diff += (got.get(row, c) - exact.get(v, c)).powi(2);
            norm += exact.get(v, c).powi(2);
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-300)
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let graphs = 20;
    let mut worst: (f64, usize, usize) = (0.0, 0, 0);
    let mut converged: f64 = 0.0;
    let mut within_tolerance = 0;
    let mut worst_restart: f64 = 0.0;
    for _ in 0..graphs {
        let case = ppnp_case(&mut rng);
        let w = random_matrix(&mut rng, 3, 2);
        let (got, xw, missing) = run_ppnp(&case, &w, 0.1, 50);
        let n = xw.rows();
        // Â = D̃^{-1/2} (A + I) D̃^{-1/2}, built from the edge list
        let mut deg = vec![1.0f64; n];
        for &(u, v) in &case.edges {
            deg[u] += 1.0;
            deg[v] += 1.0;
        }
        let mut system = Matrix::identity(n);
        let mut touch = |i: usize, j: usize| {
            let v = system.get(i, j) - 0.9 / (deg[i] * deg[j]).sqrt();
            system.set(i, j, v);
        };
        for i in 0..n {
            touch(i, i);
        }
        for &(u, v) in &case.edges {
            touch(u, v);
            touch(v, u);
        }
        let exact = dense_solve(system, xw.scaled(0.1));
        let err = relative_error(&got, &exact, &missing);
        if err < 1e-6 {
            within_tolerance += 1;
        }
        if err > worst.0 {
            worst = (err, n, case.edges.len());
        }
        let (long, _, _) = run_ppnp(&case, &w, 0.1, 2000);
        converged = converged.max(relative_error(&long, &exact, &missing));

        let (full, xw, missing) = run_ppnp(&case, &w, 1.0, 50);
        for (row, &v) in missing.iter().enumerate() {
            for c in 0..w.cols() {
                worst_restart = worst_restart.max((full.get(row, c) - xw.get(v, c)).abs());
            }
        }
    }
    let detail = format!(
        "K=50 within 1e-6 on {within_tolerance}/{graphs} graphs, worst {:.1e} ({} nodes, {} edges); \
         K=2000 error {converged:.1e}; restart-1 error {worst_restart:.1e}",
        worst.0, worst.1, worst.2
    );
    ensure(worst.0 < 1e-6 && converged < 1e-10 && worst_restart <= 1e-12, || detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------ criteria 5 and 6

struct PlantedRuns {
    report: autoac::experiment::SearchReport,
    truth: autoac::synth::PlantedTruth,
    graph: autoac::graph::HeteroGraph,
    cfg: SearchConfig,
    search_time: Duration,
}

fn planted_runs() -> Result<PlantedRuns, String> {
    let (graph, truth) = common::planted_graph();
    let cfg = common::planted_config();
    let start = Instant::now();
    let report = run_repeats(&graph, &cfg, 5, Some(&truth)).map_err(|e| e.to_string())?;
    Ok(PlantedRuns { report, truth, graph, cfg, search_time: start.elapsed() })
}

fn criterion_5(runs: &PlantedRuns) -> Outcome {
    let nodes = runs.graph.num_nodes();
    ensure(nodes <= 200, || format!("planted graph has {nodes} nodes"))?;
    let start = Instant::now();
    let oracle = run_oracle(&runs.graph, &runs.truth, &runs.cfg, 5).map_err(|e| e.to_string())?;
    let oracle_time = start.elapsed();
    let planted = &runs.truth.operators;
    let mut matched = 0;
    let mut total = 0;
    let mut close = 0;
    let mut lines = Vec::new();
    for (run, o) in runs.report.runs.iter().zip(&oracle.results) {
        assert_eq!(run.config.seed, o.seed);
        matched += run.cluster_operators.iter().zip(planted).filter(|(a, b)| a == b).count();
        total += planted.len();
        let best = o.best_row().val_loss;
        let gap = (run.retrain.val_loss - best) / best;
        if gap <= 0.02 {
            close += 1;
        }
        lines.push(format!("seed {} {:?} gap {:+.3}", o.seed, run.cluster_operators, gap));
    }
    let recovery = matched as f64 / total as f64;
    let per_seed = (runs.search_time + oracle_time).as_secs_f64() / 5.0;
    let detail = format!(
        "recovery {matched}/{total} = {recovery:.2}, within 2% of oracle on {close}/5 seeds, {per_seed:.1}s per seed [{}]",
        lines.join("; ")
    );
    ensure(recovery >= 0.8, || detail.clone())?;
    ensure(close as f64 / 5.0 >= 0.8, || detail.clone())?;
    ensure(per_seed < 600.0, || detail.clone())?;
    Ok(detail)
}

fn criterion_6(runs: &PlantedRuns) -> Outcome {
    let problem = Problem::new(runs.graph.clone(), &runs.cfg.split()).map_err(|e| e.to_string())?;
    let mut wins = 0;
    let mut lines = Vec::new();
    for run in &runs.report.runs {
        let spec = run.config.training();
        let baselines = single_operator_baselines(&problem, &spec).map_err(|e| e.to_string())?;
        let (best_op, best) = baselines
            .iter()
            .map(|(op, out)| (*op, out.val_loss))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("four baselines");
        if run.retrain.val_loss <= best {
            wins += 1;
        }
        lines.push(format!("seed {} searched {:.4} vs {best_op} {best:.4}", run.config.seed, run.retrain.val_loss));
    }
    let detail = format!("{wins}/5 seeds at or below the best single operator [{}]", lines.join("; "));
    ensure(wins >= 3, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let (graph, truth) = common::planted_graph();
    let base = SearchConfig { retrain_epochs: 1, ..common::planted_config() };
    let problem = Problem::new(graph, &base.split()).map_err(|e| e.to_string())?;
    let map = truth.cluster_map(&problem.context.graph).map_err(|e| e.to_string())?;
    let run = |mode: MixtureMode, epochs: usize| -> Result<(Duration, Vec<usize>), String> {
        let cfg = SearchConfig { mode, epochs, ..base.clone() };
        let start = Instant::now();
        let s = Search::new(&problem, cfg).and_then(|s| s.with_cluster_map(map.clone())).map_err(|e| e.to_string())?;
        let result = s.run().map_err(|e| e.to_string())?;
        Ok((start.elapsed(), result.history.iter().map(|h| h.omega_evaluations).collect()))
    };
    let (_, counts) = run(MixtureMode::Discrete, base.epochs)?;
    let (_, relaxed_counts) = run(MixtureMode::Relaxed, base.epochs)?;
    let m = base.clusters;
    ensure(counts.iter().all(|&c| c == m), || format!("ω-step evaluations {:?} differ from M = {m}", counts.iter().collect::<BTreeSet<_>>()))?;

    // short interleaved runs; the minimum filters out scheduler noise
    let (rounds, epochs) = (12, 100);
    let mut discrete = Duration::MAX;
    let mut relaxed = Duration::MAX;
    for _ in 0..rounds {
        discrete = discrete.min(run(MixtureMode::Discrete, epochs)?.0);
        relaxed = relaxed.min(run(MixtureMode::Relaxed, epochs)?.0);
    }
    let detail = format!(
        "{} epochs at {m} evaluations each (relaxed: {}); best of {rounds} {epochs}-epoch runs: discrete {:.3}s vs relaxed {:.3}s",
        counts.len(),
        relaxed_counts.first().copied().unwrap_or(0),
        discrete.as_secs_f64(),
        relaxed.as_secs_f64()
    );
    ensure(discrete <= relaxed, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let (graph, _) = common::planted_graph();
    let cfg = SearchConfig { seed: 7, epochs: 60, retrain_epochs: 30, ..common::planted_config() };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut bytes = Vec::new();
    for i in 0..2 {
        let result = autoac::search::run_search(graph.clone(), &cfg).map_err(|e| e.to_string())?;
        let path = dir.path().join(format!("run{i}.json"));
        autoac::io::write_json(&path, &result).map_err(|e| e.to_string())?;
        bytes.push(std::fs::read(&path).map_err(|e| e.to_string())?);
    }
    ensure(bytes[0] == bytes[1], || "result files differ between runs".into())?;
    Ok(format!("two runs, {} identical bytes", bytes[0].len()))
}

/// Criteria named in `AUTOAC_ONLY` (comma separated), or all of them.
fn selected() -> BTreeSet<usize> {
    match std::env::var("AUTOAC_ONLY") {
        Ok(v) => v.split(',').filter_map(|t| t.trim().parse().ok()).collect(),
        Err(_) => (1..=8).collect(),
    }
}

fn main() {
    let only = selected();
    let mut outcomes: Vec<(usize, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &str, run: &mut dyn FnMut() -> Outcome| {
        if !only.contains(&n) {
            return;
        }
        let outcome = run();
        match &outcome {
            Ok(d) => println!("PASS criterion {n} ({name}): {d}"),
            Err(d) => println!("FAIL criterion {n} ({name}): {d}"),
        }
        outcomes.push((n, outcome));
    };
    report(1, "gradient fidelity", &mut criterion_1);
    report(2, "proximal properties", &mut criterion_2);
    report(3, "modularity oracle", &mut criterion_3);
    report(4, "PPNP correctness", &mut criterion_4);
    let runs = if only.contains(&5) || only.contains(&6) { Some(planted_runs()) } else { None };
    if let Some(runs) = &runs {
        report(5, "planted recovery", &mut || runs.as_ref().map_err(Clone::clone).and_then(criterion_5));
        report(6, "single-operator ablation", &mut || runs.as_ref().map_err(Clone::clone).and_then(criterion_6));
    }
    report(7, "discrete-constraint efficiency", &mut criterion_7);
    report(8, "determinism", &mut criterion_8);
    let failed = outcomes.iter().filter(|o| o.1.is_err()).count();
    println!("acceptance: {}/{} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 && std::env::var("AUTOAC_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

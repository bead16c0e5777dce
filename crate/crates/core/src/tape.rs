//! Reverse-mode gradient tape over dense matrices.
//!
//! A [`Tape`] records every primitive in execution order; [`Tape::backward`]
//! walks it once in reverse and returns the gradient of a scalar loss with
//! respect to every node that requires one. Reductions run in a fixed order,
//! so forward and backward passes are bitwise reproducible.

use std::sync::Arc;

use crate::linalg::{dot, Csr, Matrix};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    SparseMatMul(Arc<Csr>, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    ScaleRows(Var, Var),
    Column(Var, usize),
    RowSoftmax(Var),
    LogSoftmax(Var),
    Elu(Var),
    Log(Var),
    Sigmoid(Var),
    Softplus(Var),
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    SumRows(Var),
    RowDot(Var, Var),
    Sum(Var),
    FrobeniusNorm(Var),
    TraceQuadraticForm {
        c: Var,
        adjacency: Arc<Csr>,
        degrees: Arc<[f64]>,
        two_edges: f64,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the variable does not influence the loss or does not
    /// require a gradient.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_same(op: &str, a: &Matrix, b: &Matrix) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn row_log_softmax(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// Constant sparse coefficients times a dense matrix.
    pub fn sparse_matmul(&mut self, s: Arc<Csr>, x: Var) -> Var {
        let value = s.spmm(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::SparseMatMul(s, x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        check_same("add", self.value(a), self.value(b));
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert!(
            bv.rows() == 1 && bv.cols() == av.cols(),
            "add_row: bias shape {:?} incompatible with {:?}",
            bv.shape(),
            av.shape()
        );
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(bv.row(0)) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, bias]);
        self.push(value, Op::AddRow(a, bias), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        check_same("sub", self.value(a), self.value(b));
        let mut value = self.value(a).clone();
        value.add_scaled_assign(self.value(b), -1.0);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scaled(s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        check_same("mul", self.value(a), self.value(b));
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.as_slice().iter().zip(bv.as_slice()).map(|(x, y)| x * y).collect();
        let value = Matrix::from_vec(av.rows(), av.cols(), data);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Multiplies row `i` of `x` by `col[i]`, where `col` is `rows x 1`.
    pub fn scale_rows(&mut self, x: Var, col: Var) -> Var {
        let (xv, cv) = (self.value(x), self.value(col));
        assert!(
            cv.cols() == 1 && cv.rows() == xv.rows(),
            "scale_rows: column shape {:?} incompatible with {:?}",
            cv.shape(),
            xv.shape()
        );
        let mut value = xv.clone();
        for r in 0..value.rows() {
            let s = cv.get(r, 0);
            for v in value.row_mut(r) {
                *v *= s;
            }
        }
        let rg = self.rg(&[x, col]);
        self.push(value, Op::ScaleRows(x, col), rg)
    }

    /// Column `j` as a `rows x 1` matrix.
    pub fn column(&mut self, a: Var, j: usize) -> Var {
        let av = self.value(a);
        assert!(j < av.cols(), "column: index {j} out of range for {:?}", av.shape());
        let value = Matrix::from_vec(av.rows(), 1, (0..av.rows()).map(|r| av.get(r, j)).collect());
        let rg = self.rg(&[a]);
        self.push(value, Op::Column(a, j), rg)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let value = row_log_softmax(self.value(a)).map(f64::exp);
        let rg = self.rg(&[a]);
        self.push(value, Op::RowSoftmax(a), rg)
    }

    /// Numerically stable `log(row_softmax(a))`.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let value = row_log_softmax(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, Op::LogSoftmax(a), rg)
    }

    /// ELU with slope 1: `x` for `x > 0`, `exp(x) - 1` otherwise.
    pub fn elu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        let rg = self.rg(&[a]);
        self.push(value, Op::Elu(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        self.push(value, Op::Log(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// `ln(1 + exp(x))`, stable for large `|x|`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(value, Op::Softplus(a), rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Var {
        let av = self.value(a);
        let mut value = Matrix::zeros(idx.len(), av.cols());
        for (o, &i) in idx.iter().enumerate() {
            assert!(i < av.rows(), "gather_rows: row {i} out of range for {:?}", av.shape());
            value.row_mut(o).copy_from_slice(av.row(i));
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, idx), rg)
    }

    /// Adds row `k` of `a` into row `idx[k]` of an `out_rows x cols` zero matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: Arc<[usize]>, out_rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(
            idx.len(),
            av.rows(),
            "scatter_add_rows: {} indices for {} rows",
            idx.len(),
            av.rows()
        );
        let mut value = Matrix::zeros(out_rows, av.cols());
        for (k, &i) in idx.iter().enumerate() {
            assert!(i < out_rows, "scatter_add_rows: target row {i} out of range ({out_rows})");
            for (o, s) in value.row_mut(i).iter_mut().zip(av.row(k)) {
                *o += s;
            }
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::ScatterAddRows(a, idx), rg)
    }

    /// Column sums as a `1 x cols` matrix.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = Matrix::zeros(1, av.cols());
        for r in 0..av.rows() {
            for (o, s) in value.row_mut(0).iter_mut().zip(av.row(r)) {
                *o += s;
            }
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SumRows(a), rg)
    }

    /// Row-wise inner products as a `rows x 1` matrix.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        check_same("row_dot", self.value(a), self.value(b));
        let (av, bv) = (self.value(a), self.value(b));
        let value = Matrix::from_vec(av.rows(), 1, (0..av.rows()).map(|r| dot(av.row(r), bv.row(r))).collect());
        let rg = self.rg(&[a, b]);
        self.push(value, Op::RowDot(a, b), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        assert!(n > 0, "mean of an empty matrix");
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn frobenius_norm(&mut self, a: Var) -> Var {
        let value = Matrix::scalar(self.value(a).frobenius_norm());
        let rg = self.rg(&[a]);
        self.push(value, Op::FrobeniusNorm(a), rg)
    }

    /// `Tr(Cᵀ B C)` for the modularity matrix `B = A - d dᵀ / 2|E|`,
    /// evaluated as an edge sum plus a rank-one correction so `B` is never
    /// formed. `adjacency` must be symmetric; `two_edges` is `2|E|`.
    pub fn trace_quadratic_form(
        &mut self,
        c: Var,
        adjacency: Arc<Csr>,
        degrees: Arc<[f64]>,
        two_edges: f64,
    ) -> Var {
        let cv = self.value(c);
        assert!(
            adjacency.rows() == cv.rows() && adjacency.cols() == cv.rows() && degrees.len() == cv.rows(),
            "trace_quadratic_form: adjacency {}x{} / degrees {} incompatible with C {:?}",
            adjacency.rows(),
            adjacency.cols(),
            degrees.len(),
            cv.shape()
        );
        assert!(two_edges > 0.0, "trace_quadratic_form: 2|E| must be positive");
        let mut edge_term = 0.0;
        for i in 0..cv.rows() {
            for (j, w) in adjacency.row(i) {
                edge_term += w * dot(cv.row(i), cv.row(j));
            }
        }
        let dc = degree_projection(cv, &degrees);
        let value = Matrix::scalar(edge_term - dot(&dc, &dc) / two_edges);
        let rg = self.rg(&[c]);
        self.push(
            value,
            Op::TraceQuadraticForm {
                c,
                adjacency,
                degrees,
                two_edges,
            },
            rg,
        )
    }

    /// Reverse sweep from a `1 x 1` loss. Consumes the tape.
    pub fn backward(self, loss: Var) -> Gradients {
        let shape = self.value(loss).shape();
        assert_eq!(shape, (1, 1), "backward: loss must be scalar, got {shape:?}");
        let nodes = self.nodes;
        let mut grads: Vec<Option<Matrix>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, d: Matrix| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if nodes[a.0].requires_grad {
                        acc(*a, g.matmul_t(val(*b)));
                    }
                    if nodes[b.0].requires_grad {
                        acc(*b, val(*a).t_matmul(&g));
                    }
                }
                Op::SparseMatMul(s, x) => acc(*x, s.spmm_t(&g)),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, bias) => {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, s) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += s;
                        }
                    }
                    acc(*bias, db);
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scaled(-1.0));
                    acc(*a, g);
                }
                Op::Scale(a, s) => acc(*a, g.scaled(*s)),
                Op::Mul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let ga = g.as_slice().iter().zip(bv.as_slice()).map(|(x, y)| x * y).collect();
                    let gb = g.as_slice().iter().zip(av.as_slice()).map(|(x, y)| x * y).collect();
                    acc(*a, Matrix::from_vec(g.rows(), g.cols(), ga));
                    acc(*b, Matrix::from_vec(g.rows(), g.cols(), gb));
                }
                Op::ScaleRows(x, col) => {
                    let (xv, cv) = (val(*x), val(*col));
                    let mut gx = g.clone();
                    let mut gc = Matrix::zeros(cv.rows(), 1);
                    for r in 0..g.rows() {
                        let s = cv.get(r, 0);
                        gc.set(r, 0, dot(g.row(r), xv.row(r)));
                        for v in gx.row_mut(r) {
                            *v *= s;
                        }
                    }
                    acc(*x, gx);
                    acc(*col, gc);
                }
                Op::Column(a, j) => {
                    let av = val(*a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        ga.set(r, *j, g.get(r, 0));
                    }
                    acc(*a, ga);
                }
                Op::RowSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let inner = dot(g.row(r), y.row(r));
                        for ((o, gy), yv) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = yv * (gy - inner);
                        }
                    }
                    acc(*a, ga);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut ga = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        for ((o, gy), ly) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = gy - ly.exp() * total;
                        }
                    }
                    acc(*a, ga);
                }
                Op::Elu(a) => {
                    let xv = val(*a);
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(xv.as_slice())
                        .map(|(gv, &x)| if x > 0.0 { *gv } else { gv * x.exp() })
                        .collect();
                    acc(*a, Matrix::from_vec(g.rows(), g.cols(), data));
                }
                Op::Log(a) => {
                    let xv = val(*a);
                    let data = g.as_slice().iter().zip(xv.as_slice()).map(|(gv, x)| gv / x).collect();
                    acc(*a, Matrix::from_vec(g.rows(), g.cols(), data));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let data = g.as_slice().iter().zip(y.as_slice()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                    acc(*a, Matrix::from_vec(g.rows(), g.cols(), data));
                }
                Op::Softplus(a) => {
                    let xv = val(*a);
                    let data = g.as_slice().iter().zip(xv.as_slice()).map(|(gv, &x)| gv * sigmoid(x)).collect();
                    acc(*a, Matrix::from_vec(g.rows(), g.cols(), data));
                }
                Op::GatherRows(a, idx) => {
                    let av = val(*a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for (k, &i) in idx.iter().enumerate() {
                        for (o, s) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o += s;
                        }
                    }
                    acc(*a, ga);
                }
                Op::ScatterAddRows(a, idx) => {
                    let mut ga = Matrix::zeros(idx.len(), g.cols());
                    for (k, &i) in idx.iter().enumerate() {
                        ga.row_mut(k).copy_from_slice(g.row(i));
                    }
                    acc(*a, ga);
                }
                Op::SumRows(a) => {
                    let av = val(*a);
                    let mut ga = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..av.rows() {
                        ga.row_mut(r).copy_from_slice(g.row(0));
                    }
                    acc(*a, ga);
                }
                Op::RowDot(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let mut ga = av.clone();
                    let mut gb = bv.clone();
                    for r in 0..av.rows() {
                        let s = g.get(r, 0);
                        for (o, y) in ga.row_mut(r).iter_mut().zip(bv.row(r)) {
                            *o = s * y;
                        }
                        for (o, x) in gb.row_mut(r).iter_mut().zip(av.row(r)) {
                            *o = s * x;
                        }
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::Sum(a) => {
                    let av = val(*a);
                    acc(*a, Matrix::filled(av.rows(), av.cols(), g.item()));
                }
                Op::FrobeniusNorm(a) => {
                    let norm = node.value.item();
                    let av = val(*a);
                    let ga = if norm > 0.0 {
                        av.scaled(g.item() / norm)
                    } else {
                        Matrix::zeros(av.rows(), av.cols())
                    };
                    acc(*a, ga);
                }
                Op::TraceQuadraticForm {
                    c,
                    adjacency,
                    degrees,
                    two_edges,
                } => {
                    let cv = val(*c);
                    let dc = degree_projection(cv, degrees);
                    let mut gc = adjacency.spmm(cv).scaled(2.0);
                    for r in 0..cv.rows() {
                        let s = 2.0 * degrees[r] / two_edges;
                        for (o, d) in gc.row_mut(r).iter_mut().zip(&dc) {
                            *o -= s * d;
                        }
                    }
                    acc(*c, gc.scaled(g.item()));
                }
            }
        }
        Gradients { grads }
    }
}

/// `dᵀ C` as a plain vector of length `cols`.
fn degree_projection(c: &Matrix, degrees: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; c.cols()];
    for (r, &d) in degrees.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(c.row(r)) {
            *o += d * v;
        }
    }
    out
}

/// Largest relative error between the tape gradient and central differences.
///
/// `f` builds a scalar loss from the supplied parameter handles; it is run
/// once for the analytic gradient and twice per parameter entry. The error
/// per entry is `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_diff_check<F>(f: F, params: &[Matrix], h: f64) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    assert!(h > 0.0, "finite_diff_check: step must be positive");
    let eval = |ps: &[Matrix]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss);

    let mut worst: f64 = 0.0;
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(params[pi].rows(), params[pi].cols()));
        for k in 0..params[pi].len() {
            let orig = params[pi].as_slice()[k];
            work[pi].as_mut_slice()[k] = orig + h;
            let up = eval(&work);
            work[pi].as_mut_slice()[k] = orig - h;
            let down = eval(&work);
            work[pi].as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.as_slice()[k];
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    worst
}

//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is a tape of nodes in construction order, which is always a
//! topological order. Building a node only infers its shape (and reports
//! shape errors); [`Graph::forward`] evaluates every node and
//! [`Graph::backward`] accumulates adjoints into every node's gradient.
//!
//! Leaves can be rebound with [`Graph::set_value`] and the graph re-run,
//! which is what [`grad_check`] uses for central differences.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// Arguments below this are lifted by the same amount before the square root.
pub const SQRT_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

impl Tensor {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    AddBias(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    Relu(Tensor),
    Exp(Tensor),
    Log(Tensor),
    Sqrt(Tensor),
    SqDist(Tensor, Tensor),
    Sum(Tensor),
    SumCols(Tensor),
    SumRows(Tensor),
    MaxCols(Tensor),
    LogSumExpCols(Tensor),
}

impl Op {
    fn parents(&self) -> [Option<Tensor>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            MatMul(a, b) | AddBias(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | SqDist(a, b) => [Some(a), Some(b)],
            Scale(a, _)
            | Relu(a)
            | Exp(a)
            | Log(a)
            | Sqrt(a)
            | Sum(a)
            | SumCols(a)
            | SumRows(a)
            | MaxCols(a)
            | LogSumExpCols(a) => [Some(a), None],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Matrix,
    grad: Matrix,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    evaluated: bool,
}

fn shape(m: &Matrix) -> (usize, usize) {
    m.dim()
}

pub(crate) fn eps_sqrt(x: f64) -> f64 {
    if x < SQRT_EPS {
        (x.max(0.0) + SQRT_EPS).sqrt()
    } else {
        x.sqrt()
    }
}

/// Squared Euclidean distances between the columns of `a` (m×p) and `b` (m×q).
pub(crate) fn sq_dist_values(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, p) = a.dim();
    let q = b.ncols();
    let mut out = Matrix::zeros((p, q));
    for i in 0..p {
        for j in 0..q {
            let mut acc = 0.0;
            for k in 0..m {
                let diff = a[(k, i)] - b[(k, j)];
                acc += diff * diff;
            }
            out[(i, j)] = acc;
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, t: Tensor) -> (usize, usize) {
        shape(&self.nodes[t.0].value)
    }

    pub fn value(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.0].value
    }

    pub fn grad(&self, t: Tensor) -> &Matrix {
        &self.nodes[t.0].grad
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, t: Tensor) -> f64 {
        self.nodes[t.0].value[(0, 0)]
    }

    /// Inputs of `t`; always earlier nodes.
    pub fn parents(&self, t: Tensor) -> Vec<Tensor> {
        self.nodes[t.0].op.parents().into_iter().flatten().collect()
    }

    pub fn is_evaluated(&self) -> bool {
        self.evaluated
    }

    fn push(&mut self, op: Op, dims: (usize, usize)) -> Tensor {
        self.evaluated = false;
        self.nodes.push(Node { op, value: Matrix::zeros(dims), grad: Matrix::zeros(dims) });
        Tensor(self.nodes.len() - 1)
    }

    /// Adds an input node bound to `value`.
    pub fn leaf(&mut self, value: Matrix) -> Tensor {
        let t = self.push(Op::Leaf, value.dim());
        self.nodes[t.0].value = value;
        t
    }

    /// Rebinds a leaf. The graph must be re-run with [`Graph::forward`].
    pub fn set_value(&mut self, leaf: Tensor, value: Matrix) -> Result<()> {
        let node = &mut self.nodes[leaf.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::NotALeaf(leaf.0));
        }
        if node.value.dim() != value.dim() {
            return Err(Error::ShapeMismatch { op: "set_value", left: node.value.dim(), right: value.dim() });
        }
        node.value = value;
        self.evaluated = false;
        Ok(())
    }

    fn binary_same(&mut self, name: &'static str, a: Tensor, b: Tensor, op: Op) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op: name, left: sa, right: sb });
        }
        Ok(self.push(op, sa))
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::ShapeMismatch { op: "matmul", left: sa, right: sb });
        }
        Ok(self.push(Op::MatMul(a, b), (sa.0, sb.1)))
    }

    /// Adds the column vector `bias` (rows×1) to every column of `a`.
    pub fn add_bias(&mut self, a: Tensor, bias: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(bias));
        if sb != (sa.0, 1) {
            return Err(Error::ShapeMismatch { op: "add_bias", left: sa, right: sb });
        }
        Ok(self.push(Op::AddBias(a, bias), sa))
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_same("add", a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_same("sub", a, b, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.binary_same("mul", a, b, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Tensor, factor: f64) -> Tensor {
        let s = self.shape(a);
        self.push(Op::Scale(a, factor), s)
    }

    pub fn relu(&mut self, a: Tensor) -> Tensor {
        let s = self.shape(a);
        self.push(Op::Relu(a), s)
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let s = self.shape(a);
        self.push(Op::Exp(a), s)
    }

    pub fn log(&mut self, a: Tensor) -> Tensor {
        let s = self.shape(a);
        self.push(Op::Log(a), s)
    }

    /// Elementwise square root; arguments below [`SQRT_EPS`] use `sqrt(max(x, 0) + SQRT_EPS)`.
    pub fn sqrt(&mut self, a: Tensor) -> Tensor {
        let s = self.shape(a);
        self.push(Op::Sqrt(a), s)
    }

    /// Squared Euclidean distances between columns: `a` is m×p, `b` is m×q, result p×q.
    pub fn sq_dist(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(Error::ShapeMismatch { op: "sq_dist", left: sa, right: sb });
        }
        Ok(self.push(Op::SqDist(a, b), (sa.1, sb.1)))
    }

    /// Sum of all entries, 1×1.
    pub fn sum(&mut self, a: Tensor) -> Tensor {
        self.push(Op::Sum(a), (1, 1))
    }

    /// Sums each column, giving 1×cols.
    pub fn sum_cols(&mut self, a: Tensor) -> Tensor {
        let (_, c) = self.shape(a);
        self.push(Op::SumCols(a), (1, c))
    }

    /// Sums each row, giving rows×1.
    pub fn sum_rows(&mut self, a: Tensor) -> Tensor {
        let (r, _) = self.shape(a);
        self.push(Op::SumRows(a), (r, 1))
    }

    /// Column maxima, 1×cols. The gradient goes to the first maximal entry.
    pub fn max_cols(&mut self, a: Tensor) -> Tensor {
        let (_, c) = self.shape(a);
        self.push(Op::MaxCols(a), (1, c))
    }

    /// Column-wise log-sum-exp, 1×cols, max-shifted.
    pub fn logsumexp_cols(&mut self, a: Tensor) -> Tensor {
        let (_, c) = self.shape(a);
        self.push(Op::LogSumExpCols(a), (1, c))
    }

    pub fn mean(&mut self, a: Tensor) -> Tensor {
        let (r, c) = self.shape(a);
        let s = self.sum(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    /// Evaluates every node in order.
    pub fn forward(&mut self) {
        for i in 0..self.nodes.len() {
            let value = self.eval_node(i);
            if let Some(v) = value {
                self.nodes[i].value = v;
            }
        }
        self.evaluated = true;
    }

    fn eval_node(&self, i: usize) -> Option<Matrix> {
        use Op::*;
        let v = |t: Tensor| &self.nodes[t.0].value;
        let out = match self.nodes[i].op {
            Leaf => return None,
            MatMul(a, b) => v(a).dot(v(b)),
            AddBias(a, b) => {
                let bias = v(b).column(0).to_owned();
                let mut out = v(a).clone();
                for mut col in out.columns_mut() {
                    col += &bias;
                }
                out
            }
            Add(a, b) => v(a) + v(b),
            Sub(a, b) => v(a) - v(b),
            Mul(a, b) => v(a) * v(b),
            Scale(a, f) => v(a) * f,
            Relu(a) => v(a).mapv(|x| if x > 0.0 { x } else { 0.0 }),
            Exp(a) => v(a).mapv(f64::exp),
            Log(a) => v(a).mapv(f64::ln),
            Sqrt(a) => v(a).mapv(eps_sqrt),
            SqDist(a, b) => sq_dist_values(v(a), v(b)),
            Sum(a) => Matrix::from_elem((1, 1), v(a).sum()),
            SumCols(a) => v(a).sum_axis(Axis(0)).insert_axis(Axis(0)),
            SumRows(a) => v(a).sum_axis(Axis(1)).insert_axis(Axis(1)),
            MaxCols(a) => {
                let x = v(a);
                let mut out = Matrix::zeros((1, x.ncols()));
                for (j, col) in x.columns().into_iter().enumerate() {
                    out[(0, j)] = col[argmax_first(col.iter().copied())];
                }
                out
            }
            LogSumExpCols(a) => {
                let x = v(a);
                let mut out = Matrix::zeros((1, x.ncols()));
                for (j, col) in x.columns().into_iter().enumerate() {
                    out[(0, j)] = logsumexp(col.iter().copied());
                }
                out
            }
        };
        Some(out)
    }

    /// Resets every gradient to zero.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
    }

    /// Accumulates `d sink / d node` into every node's gradient.
    pub fn backward(&mut self, sink: Tensor) -> Result<()> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let s = self.shape(sink);
        if s != (1, 1) {
            return Err(Error::NonScalarSink(s));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; sink.0 + 1];
        adj[sink.0] = Some(Matrix::from_elem((1, 1), 1.0));

        for i in (0..=sink.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let contributions = self.local_grads(i, &g);
            for (parent, contrib) in contributions {
                match &mut adj[parent.0] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
            self.nodes[i].grad += &g;
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Matrix) -> Vec<(Tensor, Matrix)> {
        use Op::*;
        let v = |t: Tensor| &self.nodes[t.0].value;
        let out = &self.nodes[i].value;
        match self.nodes[i].op {
            Leaf => vec![],
            MatMul(a, b) => vec![(a, g.dot(&v(b).t())), (b, v(a).t().dot(g))],
            AddBias(a, b) => vec![(a, g.clone()), (b, g.sum_axis(Axis(1)).insert_axis(Axis(1)))],
            Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Sub(a, b) => vec![(a, g.clone()), (b, -g)],
            Mul(a, b) => vec![(a, g * v(b)), (b, g * v(a))],
            Scale(a, f) => vec![(a, g * f)],
            Relu(a) => {
                let mask = v(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                vec![(a, g * &mask)]
            }
            Exp(a) => vec![(a, g * out)],
            Log(a) => vec![(a, g / v(a))],
            Sqrt(a) => vec![(a, g / &(out * 2.0))],
            SqDist(a, b) => {
                let (va, vb) = (v(a), v(b));
                let (m, p) = va.dim();
                let q = vb.ncols();
                let mut ga = Matrix::zeros((m, p));
                let mut gb = Matrix::zeros((m, q));
                for i in 0..p {
                    for j in 0..q {
                        let gij = g[(i, j)];
                        if gij == 0.0 {
                            continue;
                        }
                        for k in 0..m {
                            let diff = 2.0 * gij * (va[(k, i)] - vb[(k, j)]);
                            ga[(k, i)] += diff;
                            gb[(k, j)] -= diff;
                        }
                    }
                }
                vec![(a, ga), (b, gb)]
            }
            Sum(a) => vec![(a, Matrix::from_elem(v(a).dim(), g[(0, 0)]))],
            SumCols(a) => {
                let (r, _) = v(a).dim();
                let row = g.row(0);
                let mut ga = Matrix::zeros(v(a).dim());
                for k in 0..r {
                    ga.row_mut(k).assign(&row);
                }
                vec![(a, ga)]
            }
            SumRows(a) => {
                let (_, c) = v(a).dim();
                let col = g.column(0);
                let mut ga = Matrix::zeros(v(a).dim());
                for k in 0..c {
                    ga.column_mut(k).assign(&col);
                }
                vec![(a, ga)]
            }
            MaxCols(a) => {
                let x = v(a);
                let mut ga = Matrix::zeros(x.dim());
                for (j, col) in x.columns().into_iter().enumerate() {
                    ga[(argmax_first(col.iter().copied()), j)] = g[(0, j)];
                }
                vec![(a, ga)]
            }
            LogSumExpCols(a) => {
                let x = v(a);
                let mut ga = Matrix::zeros(x.dim());
                for j in 0..x.ncols() {
                    for r in 0..x.nrows() {
                        ga[(r, j)] = g[(0, j)] * (x[(r, j)] - out[(0, j)]).exp();
                    }
                }
                vec![(a, ga)]
            }
        }
    }

    fn relu_inputs(&self) -> Vec<(usize, Matrix)> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some((a.0, self.nodes[a.0].value.clone())),
                _ => None,
            })
            .collect()
    }

    fn max_positions(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::MaxCols(a) => {
                    Some(self.nodes[a.0].value.columns().into_iter().map(|c| argmax_first(c.iter().copied())).collect())
                }
                _ => None,
            })
            .collect()
    }
}

/// Index of the first maximal element.
pub(crate) fn argmax_first(it: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, x) in it.enumerate() {
        if i == 0 || x > best_v {
            best = i;
            best_v = x;
        }
    }
    best
}

pub(crate) fn logsumexp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + it.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Relu inputs closer than this to zero count as kinks.
pub const KINK_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked entries of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries skipped because a perturbation touched a relu kink or flipped a column max.
    pub excluded: usize,
}

/// Compares the analytic gradient of `sink` w.r.t. `leaf` against central differences.
///
/// The graph is left evaluated at the original leaf value, with gradients
/// holding a single fresh backward pass.
pub fn grad_check(graph: &mut Graph, leaf: Tensor, sink: Tensor, step: f64) -> Result<GradCheckReport> {
    if !(step > 0.0) {
        return Err(Error::config("grad_check step must be positive"));
    }
    let base = graph.value(leaf).clone();
    graph.forward();
    graph.zero_grad();
    graph.backward(sink)?;
    let analytic = graph.grad(leaf).clone();
    let base_relu = graph.relu_inputs();
    let base_max = graph.max_positions();

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, excluded: 0 };
    for idx in 0..base.len() {
        let mut kink = false;
        let mut eval_at = |graph: &mut Graph, delta: f64| -> Result<f64> {
            let mut shifted = base.clone();
            shifted.as_slice_mut().expect("standard layout")[idx] += delta;
            graph.set_value(leaf, shifted)?;
            graph.forward();
            for ((_, before), (_, after)) in base_relu.iter().zip(graph.relu_inputs()) {
                for (x0, x1) in before.iter().zip(after.iter()) {
                    let moved = x0 != x1;
                    if moved && (x0.abs() < KINK_TOLERANCE || (*x0 > 0.0) != (*x1 > 0.0)) {
                        kink = true;
                    }
                }
            }
            if graph.max_positions() != base_max {
                kink = true;
            }
            Ok(graph.scalar(sink))
        };
        let plus = eval_at(graph, step)?;
        let minus = eval_at(graph, -step)?;
        if kink {
            report.excluded += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.as_slice().expect("standard layout")[idx];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    graph.set_value(leaf, base)?;
    graph.forward();
    graph.zero_grad();
    graph.backward(sink)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_shape_fn((r, c), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.leaf(array![[-1.0, 0.0, 2.0]]);
        let y = g.relu(x);
        g.forward();
        assert_eq!(g.value(y), &array![[0.0, 0.0, 2.0]]);
    }

    #[test]
    fn identity_affine() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.5], [-2.0], [3.0]]);
        let w = g.leaf(Matrix::eye(3));
        let b = g.leaf(Matrix::zeros((3, 1)));
        let wx = g.matmul(w, x).unwrap();
        let y = g.add_bias(wx, b).unwrap();
        g.forward();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn logsumexp_of_zeros() {
        let mut g = Graph::new();
        let x = g.leaf(array![[0.0], [0.0]]);
        let y = g.logsumexp_cols(x);
        g.forward();
        assert!((g.scalar(y) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(array![[3.0]]);
        let y = g.mul(x, x).unwrap();
        g.forward();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x)[(0, 0)], 6.0);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(array![[-1.0, 2.0]]);
        let r = g.relu(x);
        let s = g.sum(r);
        g.forward();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &array![[0.0, 1.0]]);
    }

    #[test]
    fn relu_kink_gradient_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(array![[0.0]]);
        let r = g.relu(x);
        let s = g.sum(r);
        g.forward();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x)[(0, 0)], 0.0);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut g = Graph::new();
        let x = g.leaf(array![[3.0]]);
        let y = g.mul(x, x).unwrap();
        g.forward();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x)[(0, 0)], 12.0);
        g.zero_grad();
        assert_eq!(g.grad(x)[(0, 0)], 0.0);
        assert_eq!(g.grad(y)[(0, 0)], 0.0);
    }

    #[test]
    fn errors() {
        let mut g = Graph::new();
        let a = g.leaf(Matrix::zeros((2, 3)));
        let b = g.leaf(Matrix::zeros((2, 3)));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { op, left, right }) => {
                assert_eq!(op, "matmul");
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
        let s = g.add(a, b).unwrap();
        assert!(matches!(g.backward(s), Err(Error::NotEvaluated)));
        g.forward();
        assert!(matches!(g.backward(s), Err(Error::NonScalarSink((2, 3)))));
        let c = g.leaf(Matrix::zeros((3, 1)));
        assert!(g.add_bias(a, c).is_err());
        assert!(g.set_value(s, Matrix::zeros((2, 3))).is_err());
    }

    #[test]
    fn sqrt_near_zero_is_finite() {
        let mut g = Graph::new();
        let x = g.leaf(array![[0.0, 4.0]]);
        let y = g.sqrt(x);
        let s = g.sum(y);
        g.forward();
        g.backward(s).unwrap();
        assert!((g.value(y)[(0, 0)] - 1e-6).abs() < 1e-18);
        assert_eq!(g.value(y)[(0, 1)], 2.0);
        assert!(g.grad(x).iter().all(|v| v.is_finite()));
        assert_eq!(g.grad(x)[(0, 1)], 0.25);
    }

    #[test]
    fn quadratic_grad_check() {
        let mut g = Graph::new();
        let x = g.leaf(array![[0.3, -1.2], [1.7, 0.4]]);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.forward();
        let report = grad_check(&mut g, x, s, 1e-5).unwrap();
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn grad_check_reports_relu_kink() {
        let mut g = Graph::new();
        let x = g.leaf(array![[0.0, 1.0, -1.0]]);
        let r = g.relu(x);
        let s = g.sum(r);
        g.forward();
        let report = grad_check(&mut g, x, s, 1e-5).unwrap();
        assert_eq!(report.excluded, 1);
        assert_eq!(report.checked, 2);
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn grad_check_rejects_bad_step() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0]]);
        let s = g.sum(x);
        assert!(grad_check(&mut g, x, s, 0.0).is_err());
    }

    /// Builds a scalar out of every primitive on random inputs and checks each leaf.
    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let mut g = Graph::new();
            let a = g.leaf(random(&mut rng, 3, 4));
            let b = g.leaf(random(&mut rng, 4, 2));
            let bias = g.leaf(random(&mut rng, 3, 1));
            let c = g.leaf(random(&mut rng, 3, 2));
            let pos = g.leaf(random(&mut rng, 3, 2).mapv(|x| x.abs() + 0.5));

            let ab = g.matmul(a, b).unwrap();
            let h = g.add_bias(ab, bias).unwrap();
            let h = g.relu(h);
            let h2 = g.sub(h, c).unwrap();
            let h3 = g.mul(h2, c).unwrap();
            let e = g.exp(c);
            let l = g.log(pos);
            let rt = g.sqrt(pos);
            let t = g.add(h3, e).unwrap();
            let t = g.add(t, l).unwrap();
            let t = g.add(t, rt).unwrap();
            let d = g.sq_dist(a, c).unwrap();
            let dmax = g.max_cols(d);
            let dsum = g.sum_rows(d);
            let lse = g.logsumexp_cols(t);
            let sc = g.sum_cols(t);
            let s1 = g.sum(lse);
            let s2 = g.sum(sc);
            let s3 = g.sum(dmax);
            let s4 = g.mean(dsum);
            let s12 = g.add(s1, s2).unwrap();
            let s34 = g.add(s3, s4).unwrap();
            let s34 = g.scale(s34, 0.1);
            let sink = g.add(s12, s34).unwrap();
            g.forward();
            for leaf in [a, b, bias, c, pos] {
                let report = grad_check(&mut g, leaf, sink, 1e-5).unwrap();
                assert!(report.max_rel_error < 1e-4, "{report:?}");
            }
        }
    }

    #[test]
    fn two_layer_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.leaf(random(&mut rng, 4, 5));
        let w1 = g.leaf(random(&mut rng, 6, 4));
        let b1 = g.leaf(random(&mut rng, 6, 1));
        let w2 = g.leaf(random(&mut rng, 2, 6));
        let b2 = g.leaf(random(&mut rng, 2, 1));
        let h = g.matmul(w1, x).unwrap();
        let h = g.add_bias(h, b1).unwrap();
        let h = g.relu(h);
        let o = g.matmul(w2, h).unwrap();
        let o = g.add_bias(o, b2).unwrap();
        let sq = g.mul(o, o).unwrap();
        let sink = g.sum(sq);
        g.forward();
        for leaf in [x, w1, b1, w2, b2] {
            let report = grad_check(&mut g, leaf, sink, 1e-5).unwrap();
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv = random(&mut rng, 3, 3);
        let (alpha, beta) = (0.7, -1.3);
        let build = |g: &mut Graph| {
            let x = g.leaf(xv.clone());
            let e = g.exp(x);
            let f = g.sum(e);
            let sq = g.mul(x, x).unwrap();
            let m = g.max_cols(sq);
            let h = g.sum(m);
            (x, f, h)
        };
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let (x, f, h) = build(&mut g);
            let sink = match which {
                0 => f,
                1 => h,
                _ => {
                    let af = g.scale(f, alpha);
                    let bh = g.scale(h, beta);
                    g.add(af, bh).unwrap()
                }
            };
            g.forward();
            g.backward(sink).unwrap();
            g.grad(x).clone()
        };
        let combined = grad_of(2);
        let expected = grad_of(0) * alpha + grad_of(1) * beta;
        for (a, b) in combined.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn nodes_are_topologically_ordered() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::ones((2, 2)));
        let y = g.exp(x);
        let z = g.mul(x, y).unwrap();
        let s = g.sum(z);
        assert!(g.parents(x).is_empty());
        assert_eq!(g.parents(z), vec![x, y]);
        for t in [y, z, s] {
            assert!(g.parents(t).iter().all(|p| p.id() < t.id()));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let av = random(&mut rng, 5, 7);
        let run = || {
            let mut g = Graph::new();
            let a = g.leaf(av.clone());
            let d = g.sq_dist(a, a).unwrap();
            let l = g.logsumexp_cols(d);
            g.forward();
            g.value(l).clone()
        };
        let (x, y) = (run(), run());
        assert!(x.iter().zip(y.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

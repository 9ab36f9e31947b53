//! Partial-label disambiguation over a fixed embedding.
//!
//! Matrices follow one layout throughout: embeddings are m×n (one column
//! per sample), candidate and confidence matrices are l×n (one column per
//! support sample), prototypes are l×m (one row per class).
//!
//! [`rectify`] alternates three steps for a fixed number of rounds:
//! confidence-weighted prototypes, a softmax over negative distances
//! restricted to each sample's candidate labels, and smoothing each
//! sample's confidence with the mean confidence of its k nearest support
//! neighbors (followed by renormalization over candidates).

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax_first, sq_dist_values, Graph, Matrix, Tensor};
use crate::error::{Error, Result};

/// Binary l×n candidate-label matrix; every column has at least one candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateMatrix(Array2<bool>);

impl CandidateMatrix {
    pub fn new(mask: Array2<bool>) -> Result<Self> {
        for (i, col) in mask.columns().into_iter().enumerate() {
            if !col.iter().any(|&b| b) {
                return Err(Error::NoCandidate { sample: i });
            }
        }
        Ok(Self(mask))
    }

    /// One-hot candidate sets from ground-truth labels.
    pub fn one_hot(labels: &[usize], n_labels: usize) -> Result<Self> {
        let mut mask = Array2::from_elem((n_labels, labels.len()), false);
        for (i, &c) in labels.iter().enumerate() {
            if c >= n_labels {
                return Err(Error::config(format!("label {c} out of range for {n_labels} labels")));
            }
            mask[(c, i)] = true;
        }
        Self::new(mask)
    }

    pub fn n_labels(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_samples(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_candidate(&self, label: usize, sample: usize) -> bool {
        self.0[(label, sample)]
    }

    pub fn set(&mut self, label: usize, sample: usize) {
        self.0[(label, sample)] = true;
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.0
    }

    pub fn candidate_count(&self, sample: usize) -> usize {
        self.0.column(sample).iter().filter(|&&b| b).count()
    }

    /// Row c has at least one candidate for every class c.
    pub fn check_rows(&self) -> Result<()> {
        for (c, row) in self.0.rows().into_iter().enumerate() {
            if !row.iter().any(|&b| b) {
                return Err(Error::NoConfidentSupport { class: c });
            }
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Matrix {
        self.0.mapv(|b| if b { 1.0 } else { 0.0 })
    }
}

/// Nonnegative l×n matrix, zero off-candidate, columns summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceMatrix(Matrix);

impl ConfidenceMatrix {
    /// Uniform confidence over each sample's candidate set.
    pub fn uniform(y: &CandidateMatrix) -> Self {
        let mut q = y.to_f64();
        for mut col in q.columns_mut() {
            let s = col.sum();
            col /= s;
        }
        Self(q)
    }

    pub fn from_matrix(q: Matrix) -> Self {
        Self(q)
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn into_inner(self) -> Matrix {
        self.0
    }
}

/// l×m prototypes, one row per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet(Matrix);

impl PrototypeSet {
    pub fn from_rows(p: Matrix) -> Self {
        Self(p)
    }

    pub fn rows(&self) -> &Matrix {
        &self.0
    }

    /// m×l, prototypes as columns.
    pub fn as_columns(&self) -> Matrix {
        self.0.t().to_owned()
    }

    pub fn n_labels(&self) -> usize {
        self.0.nrows()
    }

    pub fn prototype(&self, c: usize) -> ArrayView1<'_, f64> {
        self.0.row(c)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RectifyConfig {
    pub iterations: usize,
    pub lambda: f64,
    /// Neighbor count; `None` means shots − 1, resolved by [`RectifyConfig::with_shots`].
    pub k: Option<usize>,
    pub distance: DistanceKind,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        Self { iterations: 10, lambda: 0.5, k: None, distance: DistanceKind::Euclidean }
    }
}

impl RectifyConfig {
    /// Fills an unset `k` with `shots - 1` (at least 1).
    pub fn with_shots(mut self, shots: usize) -> Self {
        if self.k.is_none() {
            self.k = Some(shots.saturating_sub(1).max(1));
        }
        self
    }

    pub fn validate(&self, n_samples: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda must be a finite nonnegative number, got {}", self.lambda)));
        }
        if self.lambda > 0.0 && self.iterations > 0 {
            let k = self.k.ok_or_else(|| Error::config("neighbor count k is unresolved"))?;
            if k == 0 || k >= n_samples {
                return Err(Error::NeighborCount { k, n: n_samples });
            }
        }
        Ok(())
    }
}

/// Rows of `q` normalized to sum to one: the weights that turn embeddings into prototypes.
pub fn prototype_weights(q: &Matrix) -> Result<Matrix> {
    let mut w = q.clone();
    for (c, mut row) in w.rows_mut().into_iter().enumerate() {
        let s = row.sum();
        if !(s > 0.0) {
            return Err(Error::NoConfidentSupport { class: c });
        }
        row /= s;
    }
    Ok(w)
}

/// Confidence-weighted mean of the support embeddings `z` (m×n) per class.
pub fn compute_prototypes(z: &Matrix, q: &ConfidenceMatrix) -> Result<PrototypeSet> {
    prototypes_from_weights(z, q.values())
}

fn prototypes_from_weights(z: &Matrix, q: &Matrix) -> Result<PrototypeSet> {
    if q.ncols() != z.ncols() {
        return Err(Error::ShapeMismatch { op: "compute_prototypes", left: z.dim(), right: q.dim() });
    }
    let w = prototype_weights(q)?;
    Ok(PrototypeSet(w.dot(&z.t())))
}

/// Distances between the columns of `a` (m×p) and `b` (m×q), p×q.
pub fn pairwise_distance(a: &Matrix, b: &Matrix, kind: DistanceKind) -> Result<Matrix> {
    if a.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch { op: "pairwise_distance", left: a.dim(), right: b.dim() });
    }
    let sq = sq_dist_values(a, b);
    Ok(match kind {
        DistanceKind::SquaredEuclidean => sq,
        DistanceKind::Euclidean => sq.mapv(|x| x.max(0.0).sqrt()),
    })
}

/// Softmax of `-d` over each sample's candidate labels; zero elsewhere.
pub fn update_confidence(d: &Matrix, y: &CandidateMatrix) -> Result<ConfidenceMatrix> {
    if d.dim() != y.mask().dim() {
        return Err(Error::ShapeMismatch { op: "update_confidence", left: d.dim(), right: y.mask().dim() });
    }
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("distance matrix".into()));
    }
    let (l, n) = d.dim();
    let mut q = Matrix::zeros((l, n));
    for i in 0..n {
        let min = (0..l).filter(|&c| y.is_candidate(c, i)).map(|c| d[(c, i)]).fold(f64::INFINITY, f64::min);
        if min == f64::INFINITY {
            return Err(Error::NoCandidate { sample: i });
        }
        let mut total = 0.0;
        for c in 0..l {
            if y.is_candidate(c, i) {
                let e = (min - d[(c, i)]).exp();
                q[(c, i)] = e;
                total += e;
            }
        }
        for c in 0..l {
            q[(c, i)] /= total;
        }
    }
    Ok(ConfidenceMatrix(q))
}

/// k nearest other columns of `z` per column, ascending distance, ties by index.
pub fn knn_indices(z: &Matrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = z.ncols();
    if k == 0 || k >= n {
        return Err(Error::NeighborCount { k, n });
    }
    let d = sq_dist_values(z, z);
    Ok((0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| d[(i, a)].total_cmp(&d[(i, b)]).then(a.cmp(&b)));
            others.truncate(k);
            others
        })
        .collect())
}

/// Adds `lambda` times the mean neighbor confidence to each candidate entry,
/// then renormalizes every column over its candidates.
pub fn smooth_confidence(
    q: &ConfidenceMatrix,
    y: &CandidateMatrix,
    neighbors: &[Vec<usize>],
    lambda: f64,
) -> Result<ConfidenceMatrix> {
    let q = q.values();
    let (l, n) = q.dim();
    if neighbors.len() != n || y.mask().dim() != (l, n) {
        return Err(Error::ShapeMismatch { op: "smooth_confidence", left: q.dim(), right: (neighbors.len(), y.n_samples()) });
    }
    if let Some(i) = neighbors.iter().position(|nb| nb.is_empty()) {
        return Err(Error::EmptyNeighbors { sample: i });
    }
    if lambda == 0.0 {
        return Ok(ConfidenceMatrix(q.clone()));
    }
    let mut out = Matrix::zeros((l, n));
    for i in 0..n {
        let nb = &neighbors[i];
        let coef = lambda / nb.len() as f64;
        let mut total = 0.0;
        for c in 0..l {
            if y.is_candidate(c, i) {
                let spread: f64 = nb.iter().map(|&j| q[(c, j)]).sum();
                let v = q[(c, i)] + coef * spread;
                out[(c, i)] = v;
                total += v;
            }
        }
        if !(total > 0.0) {
            return Err(Error::NonFinite(format!("confidence column {i} vanished after smoothing")));
        }
        for c in 0..l {
            out[(c, i)] /= total;
        }
    }
    Ok(ConfidenceMatrix(out))
}

/// Output of [`rectify`].
#[derive(Debug, Clone, PartialEq)]
pub struct Rectification {
    pub prototypes: PrototypeSet,
    pub confidence: ConfidenceMatrix,
    /// Row-normalized l×n weights that produced `prototypes` from the support embeddings.
    pub weights: Matrix,
}

/// Iteratively rectifies prototypes and confidences over fixed embeddings `z` (m×n).
///
/// The first prototypes weight every candidate equally (the plain
/// candidate-set mean), so zero iterations yields the uncorrected
/// prototypes and the uniform confidence.
pub fn rectify(z: &Matrix, y: &CandidateMatrix, cfg: &RectifyConfig) -> Result<Rectification> {
    let n = y.n_samples();
    if z.ncols() != n {
        return Err(Error::ShapeMismatch { op: "rectify", left: z.dim(), right: y.mask().dim() });
    }
    cfg.validate(n)?;
    y.check_rows()?;

    let mut q = ConfidenceMatrix::uniform(y);
    let mut weights = prototype_weights(&y.to_f64())?;
    if cfg.iterations == 0 {
        let prototypes = PrototypeSet(weights.dot(&z.t()));
        return Ok(Rectification { prototypes, confidence: q, weights });
    }
    let neighbors = if cfg.lambda > 0.0 { Some(knn_indices(z, cfg.k.expect("validated"))?) } else { None };
    for _ in 0..cfg.iterations {
        let p = PrototypeSet(weights.dot(&z.t()));
        let d = pairwise_distance(&p.as_columns(), z, cfg.distance)?;
        q = update_confidence(&d, y)?;
        if let Some(nb) = &neighbors {
            q = smooth_confidence(&q, y, nb, cfg.lambda)?;
        }
        weights = prototype_weights(q.values())?;
    }
    let prototypes = PrototypeSet(weights.dot(&z.t()));
    Ok(Rectification { prototypes, confidence: q, weights })
}

/// l×n_q posterior: softmax over classes of the negative query-to-prototype distance.
pub fn classify_proba(zq: &Matrix, p: &PrototypeSet, kind: DistanceKind) -> Result<Matrix> {
    if zq.nrows() != p.0.ncols() {
        return Err(Error::ShapeMismatch { op: "classify_proba", left: p.0.dim(), right: zq.dim() });
    }
    let mut d = pairwise_distance(&p.as_columns(), zq, kind)?;
    for mut col in d.columns_mut() {
        let min = col.iter().copied().fold(f64::INFINITY, f64::min);
        col.mapv_inplace(|x| (min - x).exp());
        let s = col.sum();
        col /= s;
    }
    Ok(d)
}

/// Mean over queries of `-log(max_c p_c)`.
pub fn query_loss(probs: &Matrix) -> Result<f64> {
    if probs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("posterior matrix".into()));
    }
    let n = probs.ncols();
    let total: f64 = probs.columns().into_iter().map(|col| -col.iter().copied().fold(f64::NEG_INFINITY, f64::max).ln()).sum();
    Ok(total / n as f64)
}

/// Argmax per column, lowest label index on ties (0-based).
pub fn predict(probs: &Matrix) -> Vec<usize> {
    probs.columns().into_iter().map(|c| argmax_first(c.iter().copied())).collect()
}

/// Argmin of query-to-prototype distance per column, lowest label index on ties.
pub fn nearest_prototype(zq: &Matrix, p: &PrototypeSet, kind: DistanceKind) -> Result<Vec<usize>> {
    let d = pairwise_distance(&p.as_columns(), zq, kind)?;
    Ok(d.columns().into_iter().map(|c| argmax_first(c.iter().map(|x| -x))).collect())
}

/// Which query objective the differentiable episode loss uses.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryObjective {
    /// `-log` of the most likely label's posterior; uses no query labels.
    #[default]
    MaxPosterior,
    /// `-log` of the ground-truth posterior.
    Supervised,
}

/// Differentiable query loss for one episode.
///
/// `z_support` is m×n_s, `z_query` m×n_q; `weights` (l×n_s, row-normalized)
/// is a constant, so gradients reach the embeddings only through the
/// prototype means and the query embeddings.
pub fn episode_loss(
    graph: &mut Graph,
    z_support: Tensor,
    z_query: Tensor,
    weights: &Matrix,
    kind: DistanceKind,
    objective: QueryObjective,
    query_labels: Option<&[usize]>,
) -> Result<Tensor> {
    let w = graph.leaf(weights.t().to_owned());
    let protos = graph.matmul(z_support, w)?;
    let sq = graph.sq_dist(protos, z_query)?;
    let d = match kind {
        DistanceKind::Euclidean => graph.sqrt(sq),
        DistanceKind::SquaredEuclidean => sq,
    };
    let neg = graph.scale(d, -1.0);
    let lse = graph.logsumexp_cols(neg);
    let picked = match objective {
        QueryObjective::MaxPosterior => graph.max_cols(neg),
        QueryObjective::Supervised => {
            let labels = query_labels.ok_or_else(|| Error::config("supervised objective needs query labels"))?;
            let (l, n_q) = graph.shape(neg);
            if labels.len() != n_q {
                return Err(Error::ShapeMismatch { op: "episode_loss", left: (l, n_q), right: (labels.len(), 1) });
            }
            let mut onehot = Matrix::zeros((l, n_q));
            for (j, &c) in labels.iter().enumerate() {
                onehot[(c, j)] = 1.0;
            }
            let mask = graph.leaf(onehot);
            let masked = graph.mul(neg, mask)?;
            graph.sum_cols(masked)
        }
    };
    let per_query = graph.sub(lse, picked)?;
    Ok(graph.mean(per_query))
}

/// The same loss as [`episode_loss`] computed on plain values; the graph applies the
/// square-root epsilon, so the two agree to about `1e-6` per coincident pair.
pub fn episode_loss_value(z_support: &Matrix, z_query: &Matrix, weights: &Matrix, kind: DistanceKind) -> Result<f64> {
    let p = PrototypeSet(weights.dot(&z_support.t()));
    let probs = classify_proba(z_query, &p, kind)?;
    query_loss(&probs)
}

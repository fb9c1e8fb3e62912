//! Spatial-dependency graph learning.
//!
//! The graph is read off a sparse Gaussian Markov random field: the precision
//! matrix is fitted by an ℓ₁-penalized maximum-likelihood estimator, turned
//! into partial correlations, and thresholded. The resulting graph fixes the
//! connectivity of every sparse linear layer through [`SparsityMask`].

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Mask, Tensor};
use crate::data::GraphSignalSeries;

pub const DEFAULT_THRESHOLD: f64 = 0.1;
/// Default penalty as a fraction of the largest off-diagonal covariance.
pub const DEFAULT_LAMBDA_FRACTION: f64 = 0.01;
/// Diagonal loading relative to the mean variance.
pub const COVARIANCE_RIDGE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Mean vector and precision matrix of a fitted GMRF.
#[derive(Clone, Debug)]
pub struct GmrfModel {
    pub mean: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub lambda: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct GlassoOptions {
    /// Stop when no precision entry moves more than this within a sweep.
    pub tol: f64,
    pub max_sweeps: usize,
    pub inner_tol: f64,
    pub max_inner: usize,
}

impl Default for GlassoOptions {
    fn default() -> Self {
        GlassoOptions { tol: 1e-4, max_sweeps: 1000, inner_tol: 1e-12, max_inner: 10_000 }
    }
}

#[derive(Clone, Debug)]
pub struct GlassoFit {
    pub precision: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub sweeps: usize,
    /// Penalized log-likelihood after initialization and after every sweep.
    pub objective_trace: Vec<f64>,
}

/// Sample mean and maximum-likelihood covariance of the rows of `values`.
pub fn sample_moments(values: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>), GraphError> {
    let (t, n) = values.shape();
    if t < 2 {
        return Err(GraphError::Data(format!("need at least 2 observations, got {t}")));
    }
    if !values.is_finite() {
        return Err(GraphError::Data("non-finite value in training data".into()));
    }
    let mut mean = DVector::zeros(n);
    for r in 0..t {
        for c in 0..n {
            mean[c] += values.get(r, c);
        }
    }
    mean /= t as f64;
    let mut cov = DMatrix::zeros(n, n);
    for r in 0..t {
        for i in 0..n {
            let di = values.get(r, i) - mean[i];
            for j in i..n {
                cov[(i, j)] += di * (values.get(r, j) - mean[j]);
            }
        }
    }
    for i in 0..n {
        for j in i..n {
            let v = cov[(i, j)] / t as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mean, cov))
}

pub fn max_abs_off_diagonal(s: &DMatrix<f64>) -> f64 {
    let n = s.nrows();
    let mut best: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                best = best.max(s[(i, j)].abs());
            }
        }
    }
    best
}

pub fn default_lambda(s: &DMatrix<f64>) -> f64 {
    DEFAULT_LAMBDA_FRACTION * max_abs_off_diagonal(s)
}

/// `log det Q − tr(SQ) − λ Σ_{i≠j} |Q_ij|`, or `None` when `Q` is not positive-definite.
pub fn penalized_log_likelihood(q: &DMatrix<f64>, s: &DMatrix<f64>, lambda: f64) -> Option<f64> {
    let chol = Cholesky::new(q.clone())?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let trace = (s * q).trace();
    let n = q.nrows();
    let mut l1 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                l1 += q[(i, j)].abs();
            }
        }
    }
    Some(log_det - trace - lambda * l1)
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

fn invert_spd(q: &DMatrix<f64>) -> Result<DMatrix<f64>, GraphError> {
    Cholesky::new(q.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| GraphError::Numerical("precision matrix lost positive-definiteness".into()))
}

/// Graphical lasso by primal block coordinate descent.
///
/// Each column of the precision matrix is updated by exactly minimizing the
/// penalized negative log-likelihood over that column (an inner lasso solved
/// by coordinate descent) with every other column fixed, so the objective is
/// non-decreasing from sweep to sweep and every iterate stays positive-definite.
/// Diagonal entries are not penalized.
pub fn graphical_lasso(s: &DMatrix<f64>, lambda: f64, opts: &GlassoOptions) -> Result<GlassoFit, GraphError> {
    let n = s.nrows();
    if n == 0 || s.ncols() != n {
        return Err(GraphError::InvalidArgument(format!("covariance must be square and non-empty, got {}x{}", n, s.ncols())));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(GraphError::InvalidArgument(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(GraphError::Data("non-finite covariance entry".into()));
    }
    for i in 0..n {
        if s[(i, i)] <= 0.0 {
            return Err(GraphError::Numerical(format!("variance of node {i} is not positive")));
        }
    }
    if Cholesky::new(s.clone()).is_none() {
        return Err(GraphError::Numerical("covariance is not factorizable".into()));
    }

    let mut q = DMatrix::from_diagonal(&s.diagonal().map(|v| 1.0 / v));
    let mut w = DMatrix::from_diagonal(&s.diagonal());
    let mut trace = vec![penalized_log_likelihood(&q, s, lambda).expect("diagonal start is positive-definite")];
    let mut sweeps = 0;
    if n == 1 {
        return Ok(GlassoFit { precision: q, covariance: w, sweeps, objective_trace: trace });
    }

    let m = n - 1;
    let mut a = DMatrix::zeros(m, m);
    let mut gamma = DVector::zeros(m);
    let mut s12 = DVector::zeros(m);
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let previous = q.clone();
        for j in 0..n {
            let others: Vec<usize> = (0..n).filter(|&k| k != j).collect();
            let w22 = w[(j, j)];
            // A = Q11⁻¹ = W11 − w12 w12ᵀ / w22
            for (r, &i) in others.iter().enumerate() {
                s12[r] = s[(i, j)];
                gamma[r] = q[(i, j)];
                for (c, &k) in others.iter().enumerate() {
                    a[(r, c)] = w[(i, k)] - w[(i, j)] * w[(k, j)] / w22;
                }
            }
            let s22 = s[(j, j)];
            solve_column_lasso(&a, &s12, s22, lambda, &mut gamma, opts);

            let u = &a * &gamma;
            let q22 = 1.0 / s22 + gamma.dot(&u);
            for (r, &i) in others.iter().enumerate() {
                q[(i, j)] = gamma[r];
                q[(j, i)] = gamma[r];
                w[(i, j)] = -s22 * u[r];
                w[(j, i)] = -s22 * u[r];
                for (c, &k) in others.iter().enumerate() {
                    w[(i, k)] = a[(r, c)] + s22 * u[r] * u[c];
                }
            }
            q[(j, j)] = q22;
            w[(j, j)] = s22;
        }
        // Refresh the inverse from scratch; this doubles as the positive-definiteness check.
        w = invert_spd(&q)?;
        let objective = penalized_log_likelihood(&q, s, lambda)
            .ok_or_else(|| GraphError::Numerical("precision matrix lost positive-definiteness".into()))?;
        trace.push(objective);
        let change = (&q - &previous).amax();
        if change < opts.tol {
            break;
        }
    }
    Ok(GlassoFit { precision: q, covariance: w, sweeps, objective_trace: trace })
}

/// Minimizes `½ s22 γᵀAγ + s12ᵀγ + λ‖γ‖₁` in place, warm-started from `gamma`.
fn solve_column_lasso(a: &DMatrix<f64>, s12: &DVector<f64>, s22: f64, lambda: f64, gamma: &mut DVector<f64>, opts: &GlassoOptions) {
    let m = gamma.len();
    for _ in 0..opts.max_inner {
        let mut delta: f64 = 0.0;
        for k in 0..m {
            let mut r = s12[k];
            for l in 0..m {
                if l != k {
                    r += s22 * a[(k, l)] * gamma[l];
                }
            }
            let updated = -soft_threshold(r, lambda) / (s22 * a[(k, k)]);
            delta = delta.max((updated - gamma[k]).abs());
            gamma[k] = updated;
        }
        if delta < opts.inner_tol {
            break;
        }
    }
}

/// Fits the GMRF of a series: sample mean plus graphical-lasso precision of
/// the diagonally loaded sample covariance.
pub fn fit_gmrf(train: &GraphSignalSeries, lambda: f64) -> Result<GmrfModel, GraphError> {
    fit_gmrf_values(&train.values, lambda, &GlassoOptions::default())
}

pub fn fit_gmrf_values(values: &Tensor, lambda: f64, opts: &GlassoOptions) -> Result<GmrfModel, GraphError> {
    if !(lambda >= 0.0) {
        return Err(GraphError::InvalidArgument(format!("lambda must be non-negative, got {lambda}")));
    }
    let (mean, s) = regularized_covariance(values)?;
    let fit = graphical_lasso(&s, lambda, opts)?;
    Ok(GmrfModel { mean, precision: fit.precision, lambda })
}

/// Sample covariance with `COVARIANCE_RIDGE · mean(diag S)` added to the diagonal.
pub fn regularized_covariance(values: &Tensor) -> Result<(DVector<f64>, DMatrix<f64>), GraphError> {
    let (mean, mut s) = sample_moments(values)?;
    let n = s.nrows();
    let ridge = COVARIANCE_RIDGE * s.diagonal().mean();
    for i in 0..n {
        s[(i, i)] += ridge;
    }
    Ok((mean, s))
}

/// `ρ_ij = −Q_ij / sqrt(Q_ii Q_jj)` with a unit diagonal.
pub fn partial_correlations(model: &GmrfModel) -> Result<DMatrix<f64>, GraphError> {
    partial_correlations_of(&model.precision)
}

pub fn partial_correlations_of(q: &DMatrix<f64>) -> Result<DMatrix<f64>, GraphError> {
    let n = q.nrows();
    for i in 0..n {
        if !(q[(i, i)] > 0.0) {
            return Err(GraphError::Numerical(format!("precision diagonal entry {i} is not positive")));
        }
    }
    Ok(DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { -q[(i, j)] / (q[(i, i)] * q[(j, j)]).sqrt() }))
}

/// Evaluates the GMRF density with the normalization `|Q| / (2π)^{N/2}`.
pub fn gmrf_density(model: &GmrfModel, x: &[f64]) -> Result<f64, GraphError> {
    let n = model.mean.len();
    if x.len() != n {
        return Err(GraphError::InvalidArgument(format!("point has {} entries, model has {n} nodes", x.len())));
    }
    let d = DVector::from_column_slice(x) - &model.mean;
    let quad = (d.transpose() * &model.precision * &d)[(0, 0)];
    let det = model.precision.determinant();
    Ok(det / (2.0 * PI).powf(n as f64 / 2.0) * (-0.5 * quad).exp())
}

/// Undirected dependency graph over `n_nodes` nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DependencyGraph {
    pub n_nodes: usize,
    /// `(i, j, rho)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize, f64)>,
    pub threshold: f64,
    pub lambda: Option<f64>,
}

impl DependencyGraph {
    pub fn empty(n_nodes: usize) -> Self {
        DependencyGraph { n_nodes, edges: Vec::new(), threshold: 0.0, lambda: None }
    }

    pub fn complete(n_nodes: usize) -> Self {
        let pairs: Vec<(usize, usize)> = (0..n_nodes).flat_map(|i| (i + 1..n_nodes).map(move |j| (i, j))).collect();
        DependencyGraph::from_pairs(n_nodes, &pairs).expect("complete graph pairs are valid")
    }

    /// Unweighted graph (`rho = 1`) from node pairs.
    pub fn from_pairs(n_nodes: usize, pairs: &[(usize, usize)]) -> Result<Self, GraphError> {
        let mut edges = Vec::new();
        for &(a, b) in pairs {
            if a == b || a >= n_nodes || b >= n_nodes {
                return Err(GraphError::InvalidArgument(format!("invalid edge ({a}, {b}) for {n_nodes} nodes")));
            }
            edges.push((a.min(b), a.max(b), 1.0));
        }
        edges.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        edges.dedup_by(|x, y| x.0 == y.0 && x.1 == y.1);
        Ok(DependencyGraph { n_nodes, edges, threshold: 0.0, lambda: None })
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let (i, j) = (a.min(b), a.max(b));
        self.edges.binary_search_by(|e| (e.0, e.1).cmp(&(i, j))).is_ok()
    }

    /// Boolean adjacency including self-loops on the diagonal.
    pub fn connectivity(&self) -> Vec<Vec<bool>> {
        let mut adj = vec![vec![false; self.n_nodes]; self.n_nodes];
        for (i, row) in adj.iter_mut().enumerate() {
            row[i] = true;
        }
        for &(i, j, _) in &self.edges {
            adj[i][j] = true;
            adj[j][i] = true;
        }
        adj
    }

    /// Relabels node `v` as `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pairs: Vec<(usize, usize, f64)> = self.edges.iter().map(|&(i, j, r)| (perm[i], perm[j], r)).collect();
        let mut edges: Vec<(usize, usize, f64)> = pairs.into_iter().map(|(a, b, r)| (a.min(b), a.max(b), r)).collect();
        edges.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        DependencyGraph { n_nodes: self.n_nodes, edges, threshold: self.threshold, lambda: self.lambda }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let g: DependencyGraph = serde_json::from_str(text).map_err(|e| GraphError::Data(format!("graph json: {e}")))?;
        for &(i, j, rho) in &g.edges {
            if i == j || i >= g.n_nodes || j >= g.n_nodes {
                return Err(GraphError::Data(format!("graph json: invalid edge ({i}, {j})")));
            }
            if rho.abs() > 1.0 + 1e-9 {
                return Err(GraphError::Data(format!("graph json: |rho| > 1 on edge ({i}, {j})")));
            }
        }
        let mut g = g;
        g.edges = g.edges.into_iter().map(|(a, b, r)| (a.min(b), a.max(b), r)).collect();
        g.edges.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
        Ok(g)
    }
}

/// Keeps the pairs whose partial correlation reaches `threshold` in magnitude.
pub fn build_graph(rho: &DMatrix<f64>, threshold: f64) -> DependencyGraph {
    let n = rho.nrows();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rho[(i, j)].abs() >= threshold {
                edges.push((i, j, rho[(i, j)]));
            }
        }
    }
    DependencyGraph { n_nodes: n, edges, threshold, lambda: None }
}

/// Fits a GMRF to the series and thresholds its partial correlations.
pub fn learn_graph(train: &GraphSignalSeries, lambda: Option<f64>, threshold: f64) -> Result<DependencyGraph, GraphError> {
    let (_, s) = regularized_covariance(&train.values)?;
    let lambda = lambda.unwrap_or_else(|| default_lambda(&s));
    let model = fit_gmrf(train, lambda)?;
    let rho = partial_correlations(&model)?;
    let mut graph = build_graph(&rho, threshold);
    graph.lambda = Some(lambda);
    Ok(graph)
}

/// Node owning neuron `r` of a layer with `dim` neurons over `n_nodes` nodes.
pub fn neuron_owner(r: usize, dim: usize, n_nodes: usize) -> usize {
    r * n_nodes / dim
}

/// Graph-structured connectivity of one linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SparsityMask {
    pub mask: Mask,
    pub out_owner: Vec<usize>,
    pub in_owner: Vec<usize>,
}

impl SparsityMask {
    pub fn out_dim(&self) -> usize {
        self.out_owner.len()
    }

    pub fn in_dim(&self) -> usize {
        self.in_owner.len()
    }
}

/// Mask for a layer with `out_per_node` output and `in_per_node` input neurons per node.
pub fn make_mask(graph: &DependencyGraph, out_per_node: usize, in_per_node: usize) -> Result<SparsityMask, GraphError> {
    if out_per_node == 0 || in_per_node == 0 {
        return Err(GraphError::InvalidArgument("every node needs at least one neuron per side".into()));
    }
    make_mask_for_dims(graph, graph.n_nodes * out_per_node, graph.n_nodes * in_per_node)
}

/// Mask for arbitrary layer sizes; neurons are assigned to nodes in contiguous runs.
pub fn make_mask_for_dims(graph: &DependencyGraph, out_dim: usize, in_dim: usize) -> Result<SparsityMask, GraphError> {
    let n = graph.n_nodes;
    if n == 0 || out_dim < n || in_dim < n {
        return Err(GraphError::InvalidArgument(format!(
            "layer {out_dim}x{in_dim} cannot give each of {n} nodes a neuron on both sides"
        )));
    }
    let out_owner: Vec<usize> = (0..out_dim).map(|r| neuron_owner(r, out_dim, n)).collect();
    let in_owner: Vec<usize> = (0..in_dim).map(|c| neuron_owner(c, in_dim, n)).collect();
    mask_from_owners(graph, out_owner, in_owner)
}

/// Mask for explicit neuron-to-node assignments on both sides.
pub fn mask_from_owners(graph: &DependencyGraph, out_owner: Vec<usize>, in_owner: Vec<usize>) -> Result<SparsityMask, GraphError> {
    let n = graph.n_nodes;
    for side in [&out_owner, &in_owner] {
        if let Some(bad) = side.iter().find(|&&o| o >= n) {
            return Err(GraphError::InvalidArgument(format!("neuron assigned to node {bad} of {n}")));
        }
        let mut seen = vec![false; n];
        side.iter().for_each(|&o| seen[o] = true);
        if let Some(node) = seen.iter().position(|s| !s) {
            return Err(GraphError::InvalidArgument(format!("node {node} owns no neuron")));
        }
    }
    let adj = graph.connectivity();
    let mask = Mask::from_fn(out_owner.len(), in_owner.len(), |r, c| adj[out_owner[r]][in_owner[c]]);
    Ok(SparsityMask { mask, out_owner, in_owner })
}

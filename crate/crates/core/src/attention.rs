//! Standard attention and the two graph sequence attention variants.
//!
//! Sequences are `d x n` matrices whose columns are time steps in order. All
//! score computations for one head are done as a single Gram matrix between
//! normalized key and query projections; temporal neighborhoods are then
//! averages along its diagonals.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Mask, Tensor, Var, WindowEntry, WindowSpec};
use crate::graph::{make_mask_for_dims, mask_from_owners, neuron_owner, DependencyGraph, GraphError};
use crate::layers::{bind_positive, positive_scalar, GruCell, Linear, ParamId, ParamStore, Session};

/// How query and key projections are compared in the neighborhood term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    #[default]
    Cosine,
    Dot,
}

/// Sparsity of the four graph-signal projections.
#[derive(Clone, Debug)]
pub struct ProjectionMasks {
    pub qkv: Arc<Mask>,
    pub out: Arc<Mask>,
}

/// Masks for `H` heads of `d_model / H` rows each. Every head spreads its rows
/// over all nodes, so it needs at least one row per node.
pub fn projection_masks(graph: &DependencyGraph, d_model: usize, heads: usize) -> Result<ProjectionMasks, GraphError> {
    if heads == 0 || d_model % heads != 0 {
        return Err(GraphError::InvalidArgument(format!("d_model {d_model} not divisible by {heads} heads")));
    }
    let dh = d_model / heads;
    let n = graph.n_nodes;
    let head = make_mask_for_dims(graph, dh, d_model)?;
    let parts = vec![head.mask; heads];
    let qkv = Mask::vstack(&parts).map_err(|e| GraphError::InvalidArgument(e.to_string()))?;
    let out_owner = (0..d_model).map(|r| neuron_owner(r, d_model, n)).collect();
    let in_owner = (0..d_model).map(|c| neuron_owner(c % dh, dh, n)).collect();
    let out = mask_from_owners(graph, out_owner, in_owner)?.mask;
    Ok(ProjectionMasks { qkv: Arc::new(qkv), out: Arc::new(out) })
}

/// Query/key projections and weight of the auxiliary or positional term.
#[derive(Clone, Debug)]
pub struct TermProjection {
    pub w_q: Linear,
    pub w_k: Linear,
    pub weight: ParamId,
    pub dim: usize,
}

impl TermProjection {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, dim: usize) -> Self {
        TermProjection {
            w_q: Linear::dense(store, rng, &format!("{name}.w_q"), dim, dim, false),
            w_k: Linear::dense(store, rng, &format!("{name}.w_k"), dim, dim, false),
            weight: positive_scalar(store, &format!("{name}.weight"), 1.0),
            dim,
        }
    }
}

/// Multi-head projections shared by all three mechanisms.
#[derive(Clone, Debug)]
pub struct AttentionHeads {
    pub heads: usize,
    pub d_model: usize,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub w: ParamId,
    pub aux: Option<TermProjection>,
    pub pos: Option<TermProjection>,
    pub similarity: Similarity,
}

#[derive(Clone, Debug)]
pub struct HeadsSpec {
    pub d_model: usize,
    pub heads: usize,
    /// `None` gives dense projections.
    pub masks: Option<ProjectionMasks>,
    pub d_aux: Option<usize>,
    pub d_pos: Option<usize>,
    pub similarity: Similarity,
}

impl AttentionHeads {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, spec: &HeadsSpec) -> Result<Self, AutodiffError> {
        let (d, h) = (spec.d_model, spec.heads);
        if h == 0 || d % h != 0 {
            return Err(AutodiffError::Contract(format!("d_model {d} not divisible by {h} heads")));
        }
        for (label, dim) in [("d_aux", spec.d_aux), ("d_pos", spec.d_pos)] {
            if let Some(dim) = dim {
                if dim == 0 || dim % h != 0 {
                    return Err(AutodiffError::Contract(format!("{label} {dim} not divisible by {h} heads")));
                }
            }
        }
        let proj = |store: &mut ParamStore, rng: &mut _, part: &str, out: bool| -> Linear {
            let full = format!("{name}.{part}");
            match &spec.masks {
                Some(m) => Linear::sparse(store, rng, &full, Arc::clone(if out { &m.out } else { &m.qkv }), false),
                None => Linear::dense(store, rng, &full, d, d, false),
            }
        };
        let w_q = proj(store, rng, "w_q", false);
        let w_k = proj(store, rng, "w_k", false);
        let w_v = proj(store, rng, "w_v", false);
        let w_o = proj(store, rng, "w_o", true);
        let w = positive_scalar(store, &format!("{name}.w"), 1.0);
        let aux = spec.d_aux.map(|dim| TermProjection::new(store, rng, &format!("{name}.aux"), dim));
        let pos = spec.d_pos.map(|dim| TermProjection::new(store, rng, &format!("{name}.pos"), dim));
        Ok(AttentionHeads { heads: h, d_model: d, w_q, w_k, w_v, w_o, w, aux, pos, similarity: spec.similarity })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    fn split_heads(&self, s: &mut Session, y: Var, dim: usize, normalize: bool) -> Result<Vec<Var>, AutodiffError> {
        let dh = dim / self.heads;
        (0..self.heads)
            .map(|h| {
                let part = s.slice_rows(y, h * dh, (h + 1) * dh)?;
                if normalize {
                    s.l2_normalize(part)
                } else {
                    Ok(part)
                }
            })
            .collect()
    }

    fn project(&self, s: &mut Session, lin: &Linear, x: Var) -> Result<Vec<Var>, AutodiffError> {
        let y = lin.forward(s, x)?;
        self.split_heads(s, y, self.d_model, self.similarity == Similarity::Cosine)
    }

    /// `W_O [Δ⁽¹⁾ ‖ … ‖ Δ⁽ᴴ⁾]` added to `base`.
    fn combine(&self, s: &mut Session, base: Var, deltas: &[Var]) -> Result<Var, AutodiffError> {
        let joined = s.concat_rows(deltas)?;
        let update = self.w_o.forward(s, joined)?;
        s.add(base, update)
    }
}

fn term_products(
    s: &mut Session,
    heads: usize,
    term: &TermProjection,
    queries: Var,
    keys: Var,
) -> Result<(Var, Vec<Var>), AutodiffError> {
    let dh = term.dim / heads;
    let q = term.w_q.forward(s, queries)?;
    let k = term.w_k.forward(s, keys)?;
    let weight = bind_positive(s, term.weight)?;
    let mut grams = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = s.slice_rows(q, h * dh, (h + 1) * dh)?;
        let qh = s.l2_normalize(qh)?;
        let kh = s.slice_rows(k, h * dh, (h + 1) * dh)?;
        let kh = s.l2_normalize(kh)?;
        let kt = s.transpose(kh)?;
        grams.push(s.matmul(kt, qh)?);
    }
    Ok((weight, grams))
}

fn check_term(name: &str, enabled: bool, given: Option<Var>) -> Result<(), AutodiffError> {
    match (enabled, given.is_some()) {
        (true, false) => Err(AutodiffError::Contract(format!("{name} encodings required by this layer are missing"))),
        (false, true) => Err(AutodiffError::Contract(format!("{name} encodings passed to a layer without a {name} term"))),
        _ => Ok(()),
    }
}

/// One row of attention weights: a target position against its candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub layer: usize,
    pub head: usize,
    pub target_offset: isize,
    pub sources: Vec<isize>,
    pub scores: Vec<f64>,
    pub alphas: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub rows: Vec<TraceRow>,
}

/// Shannon entropy (nats) of a weight vector.
pub fn entropy(alpha: &[f64]) -> f64 {
    -alpha.iter().filter(|a| **a > 0.0).map(|a| a * a.ln()).sum::<f64>()
}

pub fn attention_entropy(trace: &AttentionTrace) -> Vec<f64> {
    trace.rows.iter().map(|r| entropy(&r.alphas)).collect()
}

/// Neighborhood averaging pattern for filtering over `t` positions.
///
/// Entry `(j, i)` averages `G[j+m, i+m]` for `m = l1..=l2` with
/// `l1 = -min(m1, min(p_i, p_j))` and `l2 = min(m2, t-1-max(p_i, p_j))`.
pub fn filter_window_spec(t: usize, m1: usize, m2: usize) -> WindowSpec {
    let mut entries = Vec::with_capacity(t * t);
    for j in 0..t {
        for i in 0..t {
            let lo = -(m1.min(i.min(j)) as isize);
            let hi = m2.min(t - 1 - i.max(j)) as isize;
            entries.push(WindowEntry { row: j, col: i, lo, hi });
        }
    }
    WindowSpec { out_rows: t, out_cols: t, entries }
}

/// Neighborhood averaging for predicting: `n_cand` candidates against the
/// last `m` query columns of a Gram matrix with one row per position.
fn predict_window_spec(n_cand: usize, m: usize) -> WindowSpec {
    let entries = (0..n_cand).map(|c| WindowEntry { row: c, col: 0, lo: 0, hi: m as isize - 1 }).collect();
    WindowSpec { out_rows: n_cand, out_cols: 1, entries }
}

/// Graph sequence attention for filtering `e` (`d_model x T`).
///
/// `aux` and `pos` hold one column per history step and must be present
/// exactly when the layer has the matching term.
#[allow(clippy::too_many_arguments)]
pub fn gsa_filter(
    s: &mut Session,
    heads: &AttentionHeads,
    e: Var,
    aux: Option<Var>,
    pos: Option<Var>,
    m1: usize,
    m2: usize,
    mut trace: Option<(&mut AttentionTrace, usize)>,
) -> Result<Var, AutodiffError> {
    check_term("aux", heads.aux.is_some(), aux)?;
    check_term("pos", heads.pos.is_some(), pos)?;
    let t = s.shape(e).1;
    if t == 0 {
        return Err(AutodiffError::Contract("filtering needs at least one history step".into()));
    }
    let q = heads.project(s, &heads.w_q, e)?;
    let k = heads.project(s, &heads.w_k, e)?;
    let v = heads.w_v.forward(s, e)?;
    let v = heads.split_heads(s, v, heads.d_model, false)?;
    let w = bind_positive(s, heads.w)?;
    let spec = Arc::new(filter_window_spec(t, m1, m2));
    let aux_terms = match (&heads.aux, aux) {
        (Some(term), Some(a)) => Some(term_products(s, heads.heads, term, a, a)?),
        _ => None,
    };
    let pos_terms = match (&heads.pos, pos) {
        (Some(term), Some(p)) => Some(term_products(s, heads.heads, term, p, p)?),
        _ => None,
    };
    let mut deltas = Vec::with_capacity(heads.heads);
    for h in 0..heads.heads {
        let kt = s.transpose(k[h])?;
        let gram = s.matmul(kt, q[h])?;
        let avg = s.window_mean(gram, &spec)?;
        let mut scores = s.mul_scalar(avg, w)?;
        for (weight, grams) in aux_terms.iter().chain(pos_terms.iter()) {
            let term = s.mul_scalar(grams[h], *weight)?;
            scores = s.add(scores, term)?;
        }
        let alpha = s.softmax(scores)?;
        deltas.push(s.matmul(v[h], alpha)?);
        if let Some((tr, layer)) = trace.as_mut() {
            let (sv, av) = (s.value(scores), s.value(alpha));
            let offsets: Vec<isize> = (0..t).map(|j| j as isize - (t as isize - 1)).collect();
            for i in 0..t {
                tr.rows.push(TraceRow {
                    layer: *layer,
                    head: h,
                    target_offset: offsets[i],
                    sources: offsets.clone(),
                    scores: sv.column_values(i),
                    alphas: av.column_values(i),
                });
            }
        }
    }
    heads.combine(s, e, &deltas)
}

/// Similarity scores of the estimate (last column of `f`) against every
/// candidate position `M-1 ..= n-1`, the estimate itself included last.
///
/// `f` is `d_model x n` with `n = T + k`; `aux` and `pos` carry one column per
/// position of `f`. Returns one `n_cand x 1` score vector per head.
pub fn gsa_predict_scores(
    s: &mut Session,
    heads: &AttentionHeads,
    f: Var,
    aux: Option<Var>,
    pos: Option<Var>,
    m: usize,
) -> Result<Vec<Var>, AutodiffError> {
    check_term("aux", heads.aux.is_some(), aux)?;
    check_term("pos", heads.pos.is_some(), pos)?;
    let n = s.shape(f).1;
    if m == 0 || m > n {
        return Err(AutodiffError::Contract(format!("neighborhood size {m} does not fit {n} positions")));
    }
    let n_cand = n - m + 1;
    let recent = s.slice_cols(f, n - m, n)?;
    let q = heads.project(s, &heads.w_q, recent)?;
    let k = heads.project(s, &heads.w_k, f)?;
    let w = bind_positive(s, heads.w)?;
    let spec = Arc::new(predict_window_spec(n_cand, m));
    let mut extra = Vec::new();
    for (term, enc) in [(&heads.aux, aux), (&heads.pos, pos)] {
        if let (Some(term), Some(x)) = (term, enc) {
            let query = s.slice_cols(x, n - 1, n)?;
            let keys = s.slice_cols(x, m - 1, n)?;
            extra.push(term_products(s, heads.heads, term, query, keys)?);
        }
    }
    let mut out = Vec::with_capacity(heads.heads);
    for h in 0..heads.heads {
        let kt = s.transpose(k[h])?;
        let gram = s.matmul(kt, q[h])?;
        let avg = s.window_mean(gram, &spec)?;
        let mut scores = s.mul_scalar(avg, w)?;
        for (weight, grams) in &extra {
            let term = s.mul_scalar(grams[h], *weight)?;
            scores = s.add(scores, term)?;
        }
        out.push(scores);
    }
    Ok(out)
}

/// Softmax over the history candidates only, and over all candidates with
/// the self-score last. Plain numeric helper used for inspection.
pub fn gsa_predict_attention(scores: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let softmax = |v: &[f64]| {
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = e.iter().sum();
        e.into_iter().map(|x| x / total).collect::<Vec<f64>>()
    };
    let hist = &scores[..scores.len().saturating_sub(1)];
    let alpha = if hist.is_empty() { Vec::new() } else { softmax(hist) };
    (alpha, softmax(scores))
}

/// Refined estimate from per-head scores.
///
/// With a GRU the extended weights (self-score included) mix the history
/// values with the GRU chunk of that head; without one the weights are
/// normalized over the history candidates alone.
#[allow(clippy::too_many_arguments)]
pub fn gsa_predict_update(
    s: &mut Session,
    heads: &AttentionHeads,
    f: Var,
    scores: &[Var],
    m: usize,
    gru: Option<&GruCell>,
    t_hist: usize,
    mut trace: Option<(&mut AttentionTrace, usize)>,
) -> Result<Var, AutodiffError> {
    let n = s.shape(f).1;
    let n_cand = n + 1 - m;
    if n_cand < 2 && gru.is_none() {
        return Err(AutodiffError::Contract("no history candidates to attend to".into()));
    }
    let estimate = s.slice_cols(f, n - 1, n)?;
    let hist = s.slice_cols(f, m - 1, n - 1)?;
    let v = heads.w_v.forward(s, hist)?;
    let v = heads.split_heads(s, v, heads.d_model, false)?;
    let trend = match gru {
        Some(cell) => {
            if m < 2 {
                return Err(AutodiffError::Contract("the GRU path needs a neighborhood of at least 2".into()));
            }
            let recent = s.slice_cols(f, n - m, n - 1)?;
            let out = cell.run(s, recent)?;
            Some(heads.split_heads(s, out, heads.d_model, false)?)
        }
        None => None,
    };
    let mut deltas = Vec::with_capacity(heads.heads);
    for h in 0..heads.heads {
        let (alpha, delta, used) = match &trend {
            Some(chunks) => {
                let alpha = s.softmax(scores[h])?;
                let a_hist = s.slice_rows(alpha, 0, n_cand - 1)?;
                let a_self = s.slice_rows(alpha, n_cand - 1, n_cand)?;
                let from_hist = s.matmul(v[h], a_hist)?;
                let from_trend = s.mul_scalar(chunks[h], a_self)?;
                (alpha, s.add(from_hist, from_trend)?, n_cand)
            }
            None => {
                let hist_scores = s.slice_rows(scores[h], 0, n_cand - 1)?;
                let alpha = s.softmax(hist_scores)?;
                (alpha, s.matmul(v[h], alpha)?, n_cand - 1)
            }
        };
        deltas.push(delta);
        if let Some((tr, layer)) = trace.as_mut() {
            let base = m as isize - 1 - (t_hist as isize - 1);
            tr.rows.push(TraceRow {
                layer: *layer,
                head: h,
                target_offset: n as isize - t_hist as isize,
                sources: (0..used).map(|c| base + c as isize).collect(),
                scores: s.value(scores[h]).data()[..used].to_vec(),
                alphas: s.value(alpha).data().to_vec(),
            });
        }
    }
    heads.combine(s, estimate, &deltas)
}

/// Scores followed by the update.
#[allow(clippy::too_many_arguments)]
pub fn gsa_predict(
    s: &mut Session,
    heads: &AttentionHeads,
    f: Var,
    aux: Option<Var>,
    pos: Option<Var>,
    m: usize,
    gru: Option<&GruCell>,
    t_hist: usize,
    trace: Option<(&mut AttentionTrace, usize)>,
) -> Result<Var, AutodiffError> {
    let scores = gsa_predict_scores(s, heads, f, aux, pos, m)?;
    gsa_predict_update(s, heads, f, &scores, m, gru, t_hist, trace)
}

/// Standard multi-head attention with the last column of `seq` as query.
///
/// Each score is the raw inner product of one query and one key projection,
/// computed position by position.
pub fn standard_attention(
    s: &mut Session,
    heads: &AttentionHeads,
    seq: Var,
    mut trace: Option<&mut AttentionTrace>,
) -> Result<Var, AutodiffError> {
    let t = s.shape(seq).1;
    if t == 0 {
        return Err(AutodiffError::Contract("standard attention needs a nonempty history".into()));
    }
    let dh = heads.head_dim();
    let estimate = s.slice_cols(seq, t - 1, t)?;
    let columns: Vec<Var> = (0..t).map(|i| s.slice_cols(seq, i, i + 1)).collect::<Result<_, _>>()?;
    let mut deltas = Vec::with_capacity(heads.heads);
    for h in 0..heads.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let q = heads.w_q.forward_rows(s, estimate, lo, hi)?;
        let mut scores = Vec::with_capacity(t);
        let mut values = Vec::with_capacity(t);
        for &col in &columns {
            let key = heads.w_k.forward_rows(s, col, lo, hi)?;
            scores.push(s.inner_product(q, key)?);
            values.push(heads.w_v.forward_rows(s, col, lo, hi)?);
        }
        let stacked = s.concat_rows(&scores)?;
        let alpha = s.softmax(stacked)?;
        let mut delta = s.constant(Tensor::zeros(dh, 1))?;
        for (i, &value) in values.iter().enumerate() {
            let a = s.slice_rows(alpha, i, i + 1)?;
            let part = s.mul_scalar(value, a)?;
            delta = s.add(delta, part)?;
        }
        deltas.push(delta);
        if let Some(tr) = trace.as_mut() {
            tr.rows.push(TraceRow {
                layer: 0,
                head: h,
                target_offset: 1,
                sources: (0..t).map(|i| i as isize - (t as isize - 1)).collect(),
                scores: s.value(stacked).data().to_vec(),
                alphas: s.value(alpha).data().to_vec(),
            });
        }
    }
    heads.combine(s, estimate, &deltas)
}

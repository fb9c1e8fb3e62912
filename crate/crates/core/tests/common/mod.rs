#![allow(dead_code)]

use std::sync::Arc;

use gsaf_core::attention::{
    gsa_filter, gsa_predict, gsa_predict_attention, gsa_predict_scores, projection_masks, standard_attention,
    AttentionHeads, AttentionTrace, HeadsSpec, Similarity,
};
use gsaf_core::autodiff::gradcheck::{check_inputs, GradCheck, FD_TOLERANCE};
use gsaf_core::autodiff::{softplus_inverse, AutodiffError, Mask, Tape, Tensor, Var};
use gsaf_core::data::{
    encode_bits, split, synth_planted_graph, synth_toy_pattern, PlantedSpec, SplitSpec, WindowTemplate,
};
use gsaf_core::graph::{
    graphical_lasso, learn_graph, make_mask_for_dims, DependencyGraph, GlassoOptions, DEFAULT_THRESHOLD,
};
use gsaf_core::layers::{check_param_gradients, FeedForward, GruCell, Linear, ParamStore, PositionalTable, Session, TwoLayer};
use gsaf_core::model::{ModelConfig, ModelState, NodeLevelConfig, TraceRequest};
use gsaf_core::training::{
    avg_normalized_error, configure_ablation, evaluate, loss, mape, metrics_bundle, prepare_state, rmse, train,
    AblationId, Metrics, TrainConfig,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for v in t.data_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    t
}

pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> DependencyGraph {
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                pairs.push((i, j));
            }
        }
    }
    DependencyGraph::from_pairs(n, &pairs).unwrap()
}

/// `Σ out ⊙ R` for a fixed random `R`, so no gradient cancels by symmetry.
pub fn readout(t: &mut Tape, out: Var, seed: u64) -> Result<Var, AutodiffError> {
    let (r, c) = t.shape(out);
    let w = t.constant(random_tensor(&mut rng(seed), r, c))?;
    let prod = t.hadamard(out, w)?;
    t.sum(prod)
}

fn worst(results: &[(String, GradCheck)]) -> (usize, &str, &GradCheck) {
    let total = results.iter().map(|r| r.1.checked).sum();
    let (name, w) = results
        .iter()
        .map(|(n, g)| (n.as_str(), g))
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .expect("at least one check");
    (total, name, w)
}

// ---------------------------------------------------------------- gradients

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "masked_matmul",
    "add",
    "add_col",
    "sub",
    "hadamard",
    "scalar_mul",
    "mul_scalar",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "transpose",
    "relu",
    "sigmoid",
    "tanh",
    "softplus",
    "abs",
    "sum",
    "mean",
    "inner_product",
    "softmax",
    "l2_normalize",
    "window_mean",
];

pub fn primitive_gradient(name: &str, seed: u64) -> Result<GradCheck, AutodiffError> {
    let mut g = rng(seed);
    let (r, k, c) = (g.random_range(1..=4), g.random_range(1..=4), g.random_range(1..=4));
    let a = random_tensor(&mut g, r, c);
    let b = random_tensor(&mut g, r, c);
    let rs = seed ^ 0x5eed;
    match name {
        "matmul" => {
            let x = random_tensor(&mut g, k, c);
            let w = random_tensor(&mut g, r, k);
            check_inputs(&[w, x], |t, v| {
                let o = t.matmul(v[0], v[1])?;
                readout(t, o, rs)
            })
        }
        "masked_matmul" => {
            let bits: Vec<bool> = (0..r * k).map(|_| g.random_bool(0.6)).collect();
            let mask = Arc::new(Mask::from_fn(r, k, |i, j| bits[i * k + j]));
            let w = random_tensor(&mut g, r, k);
            let x = random_tensor(&mut g, k, c);
            check_inputs(&[w, x], |t, v| {
                let o = t.masked_matmul(v[0], v[1], &mask)?;
                readout(t, o, rs)
            })
        }
        "add" | "sub" | "hadamard" => check_inputs(&[a, b], |t, v| {
            let o = match name {
                "add" => t.add(v[0], v[1])?,
                "sub" => t.sub(v[0], v[1])?,
                _ => t.hadamard(v[0], v[1])?,
            };
            readout(t, o, rs)
        }),
        "add_col" => {
            let col = random_tensor(&mut g, r, 1);
            check_inputs(&[a, col], |t, v| {
                let o = t.add_col(v[0], v[1])?;
                readout(t, o, rs)
            })
        }
        "scalar_mul" => {
            let factor = g.random_range(-2.0..2.0);
            check_inputs(&[a], |t, v| {
                let o = t.scalar_mul(v[0], factor)?;
                readout(t, o, rs)
            })
        }
        "mul_scalar" => {
            let sc = random_tensor(&mut g, 1, 1);
            check_inputs(&[a, sc], |t, v| {
                let o = t.mul_scalar(v[0], v[1])?;
                readout(t, o, rs)
            })
        }
        "concat_rows" => {
            let other = random_tensor(&mut g, k, c);
            check_inputs(&[a, other], |t, v| {
                let o = t.concat_rows(&[v[0], v[1]])?;
                readout(t, o, rs)
            })
        }
        "concat_cols" => {
            let other = random_tensor(&mut g, r, k);
            check_inputs(&[a, other], |t, v| {
                let o = t.concat_cols(&[v[0], v[1]])?;
                readout(t, o, rs)
            })
        }
        "slice_rows" | "slice_cols" => {
            let len = if name == "slice_rows" { r } else { c };
            let lo = g.random_range(0..len);
            let hi = g.random_range(lo + 1..=len);
            check_inputs(&[a], |t, v| {
                let o = if name == "slice_rows" { t.slice_rows(v[0], lo, hi)? } else { t.slice_cols(v[0], lo, hi)? };
                readout(t, o, rs)
            })
        }
        "transpose" | "relu" | "sigmoid" | "tanh" | "softplus" | "abs" | "softmax" | "l2_normalize" => {
            check_inputs(&[a], |t, v| {
                let o = match name {
                    "transpose" => t.transpose(v[0])?,
                    "relu" => t.relu(v[0])?,
                    "sigmoid" => t.sigmoid(v[0])?,
                    "tanh" => t.tanh(v[0])?,
                    "softplus" => t.softplus(v[0])?,
                    "abs" => t.abs(v[0])?,
                    "softmax" => t.softmax(v[0])?,
                    _ => t.l2_normalize(v[0])?,
                };
                readout(t, o, rs)
            })
        }
        "sum" | "mean" => check_inputs(&[a], |t, v| {
            let o = if name == "sum" { t.sum(v[0])? } else { t.mean(v[0])? };
            let w = t.constant(Tensor::scalar(1.7))?;
            t.mul_scalar(o, w)
        }),
        "inner_product" => check_inputs(&[a, b], |t, v| t.inner_product(v[0], v[1])),
        "window_mean" => {
            let n = g.random_range(1..=5);
            let spec = Arc::new(gsaf_core::attention::filter_window_spec(n, g.random_range(0..3), g.random_range(0..3)));
            let gram = random_tensor(&mut g, n, n);
            check_inputs(&[gram], |t, v| {
                let o = t.window_mean(v[0], &spec)?;
                readout(t, o, rs)
            })
        }
        other => panic!("unknown primitive {other}"),
    }
}

/// Shapes of one random tiny layer configuration.
#[derive(Clone, Debug)]
pub struct TinyCase {
    pub seed: u64,
    pub n: usize,
    pub heads: usize,
    pub npn: usize,
    pub d: usize,
    pub t: usize,
    pub graph: DependencyGraph,
    pub aux: Option<usize>,
    pub pos: Option<usize>,
    pub similarity: Similarity,
    pub m: usize,
    pub m1: usize,
    pub m2: usize,
    pub gru: bool,
}

impl TinyCase {
    pub fn random(seed: u64) -> Self {
        let mut g = rng(seed);
        let n = g.random_range(2..=3);
        let heads = g.random_range(1..=2);
        let npn = heads * g.random_range(1..=2);
        let t = g.random_range(3..=5);
        let graph = random_graph(&mut g, n, 0.5);
        let aux = g.random_bool(0.5).then_some(2 * heads);
        let pos = g.random_bool(0.5).then_some(2 * heads);
        let similarity = if g.random_bool(0.5) { Similarity::Cosine } else { Similarity::Dot };
        let m = g.random_range(1..=t);
        let m1 = g.random_range(0..=2);
        let m2 = g.random_range(0..=2);
        let gru = m >= 2 && g.random_bool(0.5);
        TinyCase { seed, n, heads, npn, d: n * npn, t, graph, aux, pos, similarity, m, m1, m2, gru }
    }

    fn heads(&self, store: &mut ParamStore, g: &mut ChaCha8Rng, masked: bool) -> AttentionHeads {
        let spec = HeadsSpec {
            d_model: self.d,
            heads: self.heads,
            masks: masked.then(|| projection_masks(&self.graph, self.d, self.heads).unwrap()),
            d_aux: self.aux,
            d_pos: self.pos,
            similarity: self.similarity,
        };
        AttentionHeads::new(store, g, "attn", &spec).unwrap()
    }
}

/// Finite-difference checks of every layer and attention mechanism for one case.
/// Inputs are stored as trainable parameters so their gradients are checked too.
pub fn layer_gradients(case: &TinyCase) -> Result<Vec<(String, GradCheck)>, AutodiffError> {
    let mut out = Vec::new();
    let (d, n, t) = (case.d, case.n, case.t);
    let rs = case.seed ^ 0xfeed;
    let mut g = rng(case.seed ^ 0xabc);

    let mut store = ParamStore::new();
    let mask = Arc::new(make_mask_for_dims(&case.graph, d, n).unwrap().mask);
    let sparse = Linear::sparse(&mut store, &mut g, "sparse", mask, true);
    let dense = Linear::dense(&mut store, &mut g, "dense", d, n, true);
    let x = store.add("x", random_tensor(&mut g, n, t), None);
    out.push((
        "linear".into(),
        check_param_gradients(&store, |s| {
            let xv = s.p(x)?;
            let a = sparse.forward(s, xv)?;
            let b = dense.forward(s, xv)?;
            let o = s.concat_rows(&[a, b])?;
            readout(s, o, rs)
        })?,
    ));

    let mut store = ParamStore::new();
    let dd = Arc::new(make_mask_for_dims(&case.graph, d, d).unwrap().mask);
    let ff = FeedForward {
        inner: TwoLayer {
            first: Linear::sparse(&mut store, &mut g, "ff.l1", Arc::clone(&dd), true),
            second: Linear::sparse(&mut store, &mut g, "ff.l2", dd, true),
        },
    };
    let e = store.add("e", random_tensor(&mut g, d, t), None);
    out.push((
        "feedforward".into(),
        check_param_gradients(&store, |s| {
            let ev = s.p(e)?;
            let o = ff.forward(s, ev)?;
            readout(s, o, rs)
        })?,
    ));

    let mut store = ParamStore::new();
    let gru = GruCell::new(&mut store, &mut g, "gru", d);
    for (id, p) in store.clone().iter() {
        if p.name.contains(".b_") {
            store.set_value(id, random_tensor(&mut g, p.value.rows(), 1)).unwrap();
        }
    }
    let e = store.add("e", random_tensor(&mut g, d, t), None);
    out.push((
        "gru".into(),
        check_param_gradients(&store, |s| {
            let ev = s.p(e)?;
            let o = gru.run(s, ev)?;
            readout(s, o, rs)
        })?,
    ));

    let mut store = ParamStore::new();
    let table = PositionalTable::new(&mut store, &mut g, "pos", 2 * case.heads, 1 - t as isize, 2);
    out.push((
        "positional".into(),
        check_param_gradients(&store, |s| {
            let o = table.lookup_range(s, 1 - t as isize, 2)?;
            readout(s, o, rs)
        })?,
    ));

    let mut store = ParamStore::new();
    let heads = case.heads(&mut store, &mut g, true);
    let e = store.add("e", random_tensor(&mut g, d, t), None);
    let a = case.aux.map(|da| store.add("a", random_tensor(&mut g, da, t), None));
    let p = case.pos.map(|dp| store.add("p", random_tensor(&mut g, dp, t), None));
    out.push((
        "gsa_filter".into(),
        check_param_gradients(&store, |s| {
            let ev = s.p(e)?;
            let av = a.map(|id| s.p(id)).transpose()?;
            let pv = p.map(|id| s.p(id)).transpose()?;
            let o = gsa_filter(s, &heads, ev, av, pv, case.m1, case.m2, None)?;
            readout(s, o, rs)
        })?,
    ));

    let mut store = ParamStore::new();
    let heads = case.heads(&mut store, &mut g, true);
    let cell = case.gru.then(|| GruCell::new(&mut store, &mut g, "gru", d));
    let f = store.add("f", random_tensor(&mut g, d, t + 1), None);
    let a = case.aux.map(|da| store.add("a", random_tensor(&mut g, da, t + 1), None));
    let p = case.pos.map(|dp| store.add("p", random_tensor(&mut g, dp, t + 1), None));
    out.push((
        "gsa_predict".into(),
        check_param_gradients(&store, |s| {
            let fv = s.p(f)?;
            let av = a.map(|id| s.p(id)).transpose()?;
            let pv = p.map(|id| s.p(id)).transpose()?;
            let o = gsa_predict(s, &heads, fv, av, pv, case.m, cell.as_ref(), t, None)?;
            readout(s, o, rs)
        })?,
    ));

    let mut store = ParamStore::new();
    let plain = TinyCase { aux: None, pos: None, ..case.clone() };
    let heads = plain.heads(&mut store, &mut g, false);
    let seq = store.add("seq", random_tensor(&mut g, d, t), None);
    out.push((
        "standard_attention".into(),
        check_param_gradients(&store, |s| {
            let sv = s.p(seq)?;
            let o = standard_attention(s, &heads, sv, None)?;
            readout(s, o, rs)
        })?,
    ));
    Ok(out)
}

pub fn end_to_end_config() -> ModelConfig {
    ModelConfig {
        n_nodes: 4,
        history: 8,
        horizon: 2,
        aux_dim: 2,
        d_model: 8,
        d_aux: 4,
        d_pos: 4,
        heads: 2,
        m: 3,
        m1: 2,
        m2: 2,
        n_encoder: 1,
        n_decoder: 2,
        neurons_per_node: 2,
        use_aux: true,
        use_pos: true,
        use_gru: true,
        node_level: Some(NodeLevelConfig { d_model_node: 2, gamma: 0.6 }),
        similarity: Similarity::Cosine,
    }
}

/// Training objective of the end-to-end configuration against finite differences,
/// with and without teacher forcing.
pub fn end_to_end_gradients(seed: u64) -> Result<Vec<(String, GradCheck)>, String> {
    let cfg = end_to_end_config();
    let mut g = rng(seed);
    let graph = random_graph(&mut g, cfg.n_nodes, 0.5);
    let template = WindowTemplate::contiguous(cfg.history, cfg.horizon).map_err(|e| e.to_string())?;
    let mut state = ModelState::new(cfg.clone(), graph, template, seed).map_err(|e| e.to_string())?;
    let fit = random_tensor(&mut g, 50, cfg.n_nodes).map(|v| 5.0 + 2.0 * v);
    let fit_aux = random_tensor(&mut g, 50, cfg.aux_dim);
    state.fit_normalizer(&fit, &fit_aux).map_err(|e| e.to_string())?;
    // zero biases behind a dead ReLU give an all-zero embedding, a kink of the cosine score
    let biases: Vec<_> = state.store.iter().filter(|(_, p)| p.trainable && p.name.ends_with("bias")).map(|(id, p)| (id, p.value.shape())).collect();
    for (id, (r, c)) in biases {
        let b = random_tensor(&mut g, r, c).map(|v| 0.1 * v);
        state.store.set_value(id, b).map_err(|e| e.to_string())?;
    }
    let history = random_tensor(&mut g, cfg.n_nodes, cfg.history).map(|v| 5.0 + 2.0 * v);
    let aux = random_tensor(&mut g, cfg.aux_dim, cfg.history + cfg.horizon);
    let target = random_tensor(&mut g, cfg.n_nodes, cfg.horizon).map(|v| 5.0 + 2.0 * v);
    let mut out = Vec::new();
    for teacher in [false, true] {
        let report = check_param_gradients(&state.store, |s| {
            let tf = teacher.then_some(&target);
            let o = state.forward(s, &history, Some(&aux), cfg.horizon, tf, None).map_err(|e| AutodiffError::Contract(e.to_string()))?;
            let l1 = loss(s, o.graph, &target, 0.3, 4.0)?;
            let l2 = loss(s, o.node.expect("node level on"), &target, 0.3, 4.0)?;
            s.add(l1, l2)
        })
        .map_err(|e| e.to_string())?;
        out.push((format!("end_to_end(teacher={teacher})"), report));
    }
    Ok(out)
}

pub fn gradient_suite() -> Check {
    let mut results = Vec::new();
    for (i, name) in PRIMITIVES.iter().enumerate() {
        let mut acc = GradCheck::default();
        for trial in 0..20 {
            acc.merge(primitive_gradient(name, 1000 * i as u64 + trial).map_err(|e| format!("{name}: {e}"))?);
        }
        results.push((format!("primitive {name}"), acc));
    }
    for seed in 0..20 {
        let case = TinyCase::random(seed);
        for (name, r) in layer_gradients(&case).map_err(|e| format!("case {seed}: {e}"))? {
            results.push((format!("{name} (case {seed})"), r));
        }
    }
    results.extend(end_to_end_gradients(7)?);
    let (total, name, w) = worst(&results);
    let detail = format!(
        "{total} entries over {} checks; worst rel err {:.2e} at {name} {} (analytic {:.6e}, numeric {:.6e})",
        results.len(),
        w.max_rel_error,
        w.worst,
        w.analytic,
        w.numeric
    );
    if w.passes(FD_TOLERANCE) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------ normalization

pub fn random_model_config(g: &mut ChaCha8Rng) -> ModelConfig {
    let n = g.random_range(2..=4);
    let heads = g.random_range(1..=2);
    let npn = heads * g.random_range(1..=2);
    let history = g.random_range(3..=8);
    let aux_dim = g.random_range(0..=2);
    ModelConfig {
        n_nodes: n,
        history,
        horizon: g.random_range(1..=3),
        aux_dim,
        d_model: n * npn,
        d_aux: 2 * heads,
        d_pos: 2 * heads,
        heads,
        m: g.random_range(1..=history),
        m1: g.random_range(0..=3),
        m2: g.random_range(0..=3),
        n_encoder: g.random_range(1..=2),
        n_decoder: g.random_range(1..=2),
        neurons_per_node: npn,
        use_aux: aux_dim > 0 && g.random_bool(0.7),
        use_pos: g.random_bool(0.7),
        use_gru: g.random_bool(0.7),
        node_level: g.random_bool(0.3).then_some(NodeLevelConfig { d_model_node: heads, gamma: 0.5 }),
        similarity: if g.random_bool(0.5) { Similarity::Cosine } else { Similarity::Dot },
    }
}

/// Largest deviations seen over `passes` random forward passes:
/// `(row sum − 1, α vs renormalized α', rows checked, extended rows)`.
pub fn normalization_stats(passes: u64) -> Result<(f64, f64, usize, usize), String> {
    let mut max_sum_dev: f64 = 0.0;
    let mut max_restrict_dev: f64 = 0.0;
    let mut rows = 0;
    let mut extended = 0;
    for pass in 0..passes {
        let mut g = rng(10_000 + pass);
        let cfg = random_model_config(&mut g);
        let graph = random_graph(&mut g, cfg.n_nodes, 0.5);
        let template = WindowTemplate::contiguous(cfg.history, cfg.horizon).map_err(|e| e.to_string())?;
        let state = ModelState::new(cfg.clone(), graph, template, pass).map_err(|e| format!("pass {pass}: {e}"))?;
        let history = random_tensor(&mut g, cfg.n_nodes, cfg.history);
        let aux = random_tensor(&mut g, cfg.aux_dim, cfg.history + cfg.horizon);
        let mut enc = AttentionTrace::default();
        {
            let mut s = Session::new(&state.store);
            let x = s.constant(history.clone()).map_err(|e| e.to_string())?;
            let aux_enc = match &state.net.aux_embed {
                Some(net) => {
                    let a = s.constant(aux.clone()).map_err(|e| e.to_string())?;
                    Some(net.forward(&mut s, a).map_err(|e| e.to_string())?)
                }
                None => None,
            };
            state.net.encode_history(&mut s, x, aux_enc, Some(&mut enc)).map_err(|e| e.to_string())?;
        }
        let mut dec = AttentionTrace::default();
        let step = g.random_range(1..=cfg.horizon);
        let mut s = Session::new(&state.store);
        let request = Some((&mut dec, TraceRequest { step }));
        state.forward(&mut s, &history, Some(&aux), cfg.horizon, None, request).map_err(|e| e.to_string())?;

        let mut std_trace = AttentionTrace::default();
        let mut store = ParamStore::new();
        let spec = HeadsSpec { d_model: cfg.d_model, heads: cfg.heads, masks: None, d_aux: None, d_pos: None, similarity: Similarity::Dot };
        let heads = AttentionHeads::new(&mut store, &mut g, "std", &spec).map_err(|e| e.to_string())?;
        let mut s = Session::new(&store);
        let seq = s.constant(random_tensor(&mut g, cfg.d_model, cfg.history)).map_err(|e| e.to_string())?;
        standard_attention(&mut s, &heads, seq, Some(&mut std_trace)).map_err(|e| e.to_string())?;

        if dec.rows.is_empty() || enc.rows.is_empty() || std_trace.rows.is_empty() {
            return Err(format!("pass {pass}: a trace came back empty"));
        }
        for row in enc.rows.iter().chain(&dec.rows).chain(&std_trace.rows) {
            rows += 1;
            let total: f64 = row.alphas.iter().sum();
            max_sum_dev = max_sum_dev.max((total - 1.0).abs());
        }
        if cfg.gru_active() {
            // Extended rows: the self-score is the last candidate.
            for row in &dec.rows {
                extended += 1;
                let (alpha, ext) = gsa_predict_attention(&row.scores);
                let hist: f64 = ext[..ext.len() - 1].iter().sum();
                for (a, e) in alpha.iter().zip(&ext) {
                    max_restrict_dev = max_restrict_dev.max((a - e / hist).abs());
                }
                for (e, t) in ext.iter().zip(&row.alphas) {
                    max_restrict_dev = max_restrict_dev.max((e - t).abs());
                }
            }
        }
    }
    Ok((max_sum_dev, max_restrict_dev, rows, extended))
}

/// Allowed gap between α and the renormalized restriction of α': a few
/// rounding steps of values in `[0, 1]`.
pub const RESTRICTION_TOL: f64 = 8.0 * f64::EPSILON;

pub fn normalization_suite() -> Check {
    let (sum_dev, restrict_dev, rows, extended) = normalization_stats(100)?;
    let detail = format!(
        "{rows} attention rows over 100 passes: max |Σα − 1| = {sum_dev:.2e}; {extended} extended rows, max |α − α'|restricted| = {restrict_dev:.2e}"
    );
    if sum_dev <= 1e-9 && restrict_dev <= RESTRICTION_TOL && extended > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// --------------------------------------------------------------------- toy

pub const TOY_M: usize = 10;

/// Rows of the two largest weights.
pub fn top2(alphas: &[f64]) -> [usize; 2] {
    let mut idx: Vec<usize> = (0..alphas.len()).collect();
    idx.sort_by(|a, b| alphas[*b].total_cmp(&alphas[*a]).then(a.cmp(b)));
    [idx[0], idx[1]]
}

fn identity_heads(store: &mut ParamStore, g: &mut ChaCha8Rng, similarity: Similarity, w: f64) -> AttentionHeads {
    let spec = HeadsSpec { d_model: 8, heads: 1, masks: None, d_aux: None, d_pos: None, similarity };
    let heads = AttentionHeads::new(store, g, "toy", &spec).unwrap();
    store.set_value(heads.w_q.weight, Tensor::identity(8)).unwrap();
    store.set_value(heads.w_k.weight, Tensor::identity(8)).unwrap();
    store.set_value(heads.w, Tensor::scalar(softplus_inverse(w))).unwrap();
    heads
}

/// Top-2 history rows of graph sequence attention and of standard attention
/// on the toy series, plus the ground truth.
#[derive(Debug)]
pub struct ToyOutcome {
    pub gsa_top: [usize; 2],
    pub std_top: [usize; 2],
    pub matches: Vec<usize>,
    pub value_similar: Vec<usize>,
}

impl ToyOutcome {
    pub fn gsa_hits_matches(&self) -> bool {
        let mut top = self.gsa_top.to_vec();
        top.sort();
        top == self.matches
    }

    pub fn std_on_value_similar(&self) -> bool {
        self.std_top.iter().all(|r| self.value_similar.contains(r) && !self.matches.contains(r))
    }
}

pub fn toy_outcome(seed: u64, noise: f64) -> Result<ToyOutcome, String> {
    let toy = synth_toy_pattern(3, noise, seed).map_err(|e| e.to_string())?;
    let values = &toy.series.values;
    let len = values.rows();
    let enc = |r: usize| encode_bits(values.get(r, 0));
    let mut f = Tensor::zeros(8, len + 1);
    for r in 0..len {
        for (b, v) in enc(r).iter().enumerate() {
            f.set(b, r, *v);
        }
    }
    for (b, v) in enc(toy.current).iter().enumerate() {
        f.set(b, len, *v);
    }
    let mut g = rng(seed);

    let mut store = ParamStore::new();
    let heads = identity_heads(&mut store, &mut g, Similarity::Cosine, 10.0);
    let mut s = Session::new(&store);
    let fv = s.constant(f.clone()).map_err(|e| e.to_string())?;
    let scores = gsa_predict_scores(&mut s, &heads, fv, None, None, TOY_M).map_err(|e| e.to_string())?;
    let (alpha, _) = gsa_predict_attention(s.value(scores[0]).data());
    let gsa_top = top2(&alpha).map(|c| c + TOY_M - 1);

    let mut store = ParamStore::new();
    let heads = identity_heads(&mut store, &mut g, Similarity::Dot, 1.0);
    let mut s = Session::new(&store);
    let seq = s.constant(gsaf_core::autodiff::Tensor::from_vec(8, len, {
        let mut d = Vec::with_capacity(8 * len);
        for b in 0..8 {
            d.extend((0..len).map(|c| f.get(b, c)));
        }
        d
    }).unwrap()).map_err(|e| e.to_string())?;
    let mut trace = AttentionTrace::default();
    standard_attention(&mut s, &heads, seq, Some(&mut trace)).map_err(|e| e.to_string())?;
    let std_top = top2(&trace.rows[0].alphas);

    let current = values.get(toy.current, 0);
    let value_similar = (0..len).filter(|&r| (values.get(r, 0) - current).abs() <= 1.0 / 32.0).collect();
    Ok(ToyOutcome { gsa_top, std_top, matches: toy.match_positions.clone(), value_similar })
}

pub fn toy_reproduction() -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for (noise, required) in [(0.0, 5), (0.01, 4)] {
        let mut passed = 0;
        for seed in 0..5 {
            let o = toy_outcome(seed, noise)?;
            if o.gsa_hits_matches() && o.std_on_value_similar() {
                passed += 1;
            }
        }
        ok &= passed >= required;
        lines.push(format!("noise {noise}: {passed}/5 seeds (need {required})"));
    }
    let detail = lines.join("; ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------------------------ glasso

/// Graphical lasso through its dual: maximize `log det W` subject to
/// `W_ii = S_ii` and `|W_ij − S_ij| ≤ λ`, by projected gradient ascent.
pub fn projected_gradient_glasso(s: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let n = s.nrows();
    let project = |w: &DMatrix<f64>| {
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                s[(i, i)]
            } else {
                let sym = 0.5 * (w[(i, j)] + w[(j, i)]);
                sym.clamp(s[(i, j)] - lambda, s[(i, j)] + lambda)
            }
        })
    };
    let log_det = |w: &DMatrix<f64>| w.clone().cholesky().map(|c| 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>());
    let mut w = project(&DMatrix::from_diagonal(&s.diagonal()));
    let mut step = 1.0;
    for _ in 0..200_000 {
        let grad = w.clone().try_inverse().expect("iterate stays positive-definite");
        let current = log_det(&w).expect("iterate stays positive-definite");
        let next = loop {
            let cand = project(&(&w + &grad * step));
            match log_det(&cand) {
                Some(v) if v >= current - 1e-15 => break cand,
                _ => step *= 0.5,
            }
            if step < 1e-20 {
                break w.clone();
            }
        };
        let moved = (&next - &w).amax();
        w = next;
        step *= 2.0;
        if moved < 1e-14 {
            break;
        }
    }
    w.try_inverse().expect("solution is positive-definite")
}

pub fn random_covariance(g: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| g.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.2
}

pub fn glasso_oracle() -> Check {
    let opts = GlassoOptions { tol: 1e-12, ..Default::default() };
    let mut worst_pg: f64 = 0.0;
    let mut worst_inv: f64 = 0.0;
    let mut zeros = 0;
    let mut g = rng(31);
    for _ in 0..10 {
        let s = random_covariance(&mut g, 3);
        let off = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| s[(i, j)].abs()).fold(0.0, f64::max);
        let lambda = g.random_range(0.05..0.6) * off;
        let fit = graphical_lasso(&s, lambda, &opts).map_err(|e| e.to_string())?;
        let oracle = projected_gradient_glasso(&s, lambda);
        worst_pg = worst_pg.max((&fit.precision - &oracle).amax());
        zeros += fit.precision.iter().filter(|v| **v == 0.0).count();

        let exact = graphical_lasso(&s, 0.0, &opts).map_err(|e| e.to_string())?;
        let inv = s.clone().try_inverse().ok_or("singular covariance")?;
        worst_inv = worst_inv.max((&exact.precision - &inv).amax());

        let big = graphical_lasso(&s, 2.0 * off, &opts).map_err(|e| e.to_string())?;
        for i in 0..3 {
            for j in 0..3 {
                if i != j && big.precision[(i, j)] != 0.0 {
                    return Err(format!("large lambda left Q[{i},{j}] = {:e}", big.precision[(i, j)]));
                }
            }
        }
    }
    let detail = format!(
        "10 covariances: max |Q_bcd − Q_pg| = {worst_pg:.2e} ({zeros} exact zeros), max |Q(λ=0) − S⁻¹| = {worst_inv:.2e}, large λ diagonal"
    );
    if worst_pg <= 1e-3 && worst_inv <= 1e-3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// --------------------------------------------------------- graph recovery

/// Recovery data: innovations dominate the shared seasonal and aux drivers.
pub fn recovery_spec(n: usize, seed: u64) -> PlantedSpec {
    PlantedSpec { seasonal_amplitude: 0.25, aux_strength: 0.1, ..PlantedSpec::new(n, 5000, 0.3, vec![24], 1.0, seed) }
}

/// `(recall, false-edge rate)` where the false-edge rate is the share of
/// learned edges that are not planted.
pub fn recovery(spec: &PlantedSpec) -> Result<(f64, f64, usize, usize), String> {
    let (series, truth) = synth_planted_graph(spec).map_err(|e| e.to_string())?;
    let learned = learn_graph(&series, None, DEFAULT_THRESHOLD).map_err(|e| e.to_string())?;
    let hits = truth.edges.iter().filter(|e| learned.has_edge(e.0, e.1)).count();
    let recall = if truth.edges.is_empty() { 1.0 } else { hits as f64 / truth.edges.len() as f64 };
    let false_rate = if learned.edges.is_empty() { 0.0 } else { (learned.edges.len() - hits) as f64 / learned.edges.len() as f64 };
    Ok((recall, false_rate, truth.edges.len(), learned.edges.len()))
}

pub fn graph_recovery() -> Check {
    let mut good = 0;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let (recall, false_rate, planted, learned) = recovery(&recovery_spec(8, seed))?;
        if recall >= 0.8 && false_rate <= 0.2 {
            good += 1;
        }
        lines.push(format!("seed {seed}: recall {recall:.2}, false {false_rate:.2} ({learned} learned / {planted} planted)"));
    }
    let detail = format!("{good}/3 seeds pass; {}", lines.join("; "));
    if good >= 2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// --------------------------------------------------------- ablation ladder

pub fn benchmark_base_config() -> ModelConfig {
    ModelConfig {
        n_nodes: 6,
        history: 26,
        horizon: 3,
        aux_dim: 2,
        d_model: 12,
        d_aux: 4,
        d_pos: 4,
        heads: 2,
        m: 4,
        m1: 2,
        m2: 2,
        n_encoder: 1,
        n_decoder: 1,
        neurons_per_node: 2,
        use_aux: true,
        use_pos: true,
        use_gru: true,
        node_level: None,
        similarity: Similarity::Cosine,
    }
}

pub fn benchmark_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        epochs: 30,
        batch: 16,
        seed,
        steps_per_epoch: Some(40),
        val_windows: Some(100),
        mape_threshold: 0.0,
        ..Default::default()
    }
}

pub const BENCHMARK_SPLIT: SplitSpec = SplitSpec::Fractions { train: 0.7, val: 0.15, test: 0.15 };

/// Validation RMSE of Model1, Model2 and Full after the 30-epoch budget.
pub fn ablation_rmse(seed: u64) -> Result<[f64; 3], String> {
    let (series, _) = synth_planted_graph(&PlantedSpec::benchmark(seed)).map_err(|e| e.to_string())?;
    let splits = split(&series, &BENCHMARK_SPLIT).map_err(|e| e.to_string())?;
    let train_rows = gsaf_core::data::Splits::sub_series(&series, &splits.train);
    let graph = learn_graph(&train_rows[0], None, DEFAULT_THRESHOLD).map_err(|e| e.to_string())?;
    let base = benchmark_base_config();
    let template = WindowTemplate::contiguous(base.history, base.horizon).map_err(|e| e.to_string())?;
    let tc = benchmark_train_config(seed);
    let mut out = [0.0; 3];
    for (slot, id) in [AblationId::Model1, AblationId::Model2, AblationId::Full].into_iter().enumerate() {
        let cfg = configure_ablation(id, &base);
        let state = prepare_state(cfg, graph.clone(), template.clone(), &series, &splits, seed).map_err(|e| e.to_string())?;
        let (state, _) = train(state, &series, &splits, &tc).map_err(|e| e.to_string())?;
        out[slot] = evaluate(&state, &series, &splits.val, 0.0, None).map_err(|e| e.to_string())?.overall.rmse_all;
    }
    Ok(out)
}

pub fn ablation_ladder() -> Check {
    let mut good = 0;
    let mut lines = Vec::new();
    for seed in 0..3 {
        let [m1, m2, full] = ablation_rmse(seed)?;
        let gain = (m1 - full) / m1;
        if m1 >= m2 && m2 >= full && gain >= 0.02 {
            good += 1;
        }
        lines.push(format!("seed {seed}: M1 {m1:.4} M2 {m2:.4} Full {full:.4} ({:.1}%)", 100.0 * gain));
    }
    let detail = format!("{good}/3 seeds ordered; {}", lines.join("; "));
    if good >= 2 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ------------------------------------------------ standard-attention match

/// Direct loops over raw inner products, softmax and the `W_O` combination.
pub fn reference_attention(wq: &Tensor, wk: &Tensor, wv: &Tensor, wo: &Tensor, heads: usize, seq: &Tensor, est: &[f64]) -> Vec<f64> {
    let d = wq.rows();
    let dh = d / heads;
    let t = seq.cols();
    let proj = |w: &Tensor, x: &dyn Fn(usize) -> f64, row: usize| (0..d).map(|c| w.get(row, c) * x(c)).sum::<f64>();
    let mut concat = vec![0.0; d];
    for h in 0..heads {
        let q: Vec<f64> = (h * dh..(h + 1) * dh).map(|r| proj(wq, &|c| est[c], r)).collect();
        let scores: Vec<f64> = (0..t)
            .map(|i| (h * dh..(h + 1) * dh).zip(&q).map(|(r, qv)| qv * proj(wk, &|c| seq.get(c, i), r)).sum())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (i, e) in exps.iter().enumerate() {
            for r in h * dh..(h + 1) * dh {
                concat[r] += e / z * proj(wv, &|c| seq.get(c, i), r);
            }
        }
    }
    (0..d).map(|r| est[r] + (0..d).map(|c| wo.get(r, c) * concat[c]).sum::<f64>()).collect()
}

/// Largest gaps `(GSA Model 1 vs reference, standard_attention vs reference)` on one input.
pub fn model1_gap(seed: u64) -> Result<(f64, f64), String> {
    let mut g = rng(500 + seed);
    let heads_n = g.random_range(1..=2);
    let d = heads_n * g.random_range(1..=3);
    let t = g.random_range(2..=8);
    let mut store = ParamStore::new();
    let spec = HeadsSpec { d_model: d, heads: heads_n, masks: None, d_aux: None, d_pos: None, similarity: Similarity::Dot };
    let heads = AttentionHeads::new(&mut store, &mut g, "m1", &spec).map_err(|e| e.to_string())?;
    store.set_value(heads.w, Tensor::scalar(softplus_inverse(1.0))).unwrap();
    let seq = random_tensor(&mut g, d, t);
    let est: Vec<f64> = seq.column_values(t - 1);
    let mut f = Tensor::zeros(d, t + 1);
    for r in 0..d {
        for c in 0..t {
            f.set(r, c, seq.get(r, c));
        }
        f.set(r, t, est[r]);
    }
    let reference = reference_attention(
        store.value(heads.w_q.weight),
        store.value(heads.w_k.weight),
        store.value(heads.w_v.weight),
        store.value(heads.w_o.weight),
        heads_n,
        &seq,
        &est,
    );
    let mut s = Session::new(&store);
    let fv = s.constant(f).map_err(|e| e.to_string())?;
    let gsa = gsa_predict(&mut s, &heads, fv, None, None, 1, None, t, None).map_err(|e| e.to_string())?;
    let sv = s.constant(seq).map_err(|e| e.to_string())?;
    let std = standard_attention(&mut s, &heads, sv, None).map_err(|e| e.to_string())?;
    let gap = |v: Var| s.value(v).data().iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok((gap(gsa), gap(std)))
}

pub fn standard_attention_equivalence() -> Check {
    let mut worst_gsa: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for seed in 0..50 {
        let (a, b) = model1_gap(seed)?;
        worst_gsa = worst_gsa.max(a);
        worst_std = worst_std.max(b);
    }
    let detail = format!("50 inputs: max |GSA(M=1) − reference| = {worst_gsa:.2e}, max |standard − reference| = {worst_std:.2e}");
    if worst_gsa <= 1e-9 && worst_std <= 1e-9 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ----------------------------------------------------------------- metrics

fn metrics(rmse_all: f64, rmse_nonzero: Option<f64>, mape: Option<f64>) -> Metrics {
    Metrics { rmse_all, rmse_nonzero, mape, count: 1, nonzero_count: 1, mape_count: 1 }
}

pub fn metrics_conformance() -> Check {
    let mut fails = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };
    let pred = Tensor::from_rows(&[vec![5.0, 44.0]]).unwrap();
    let actual = Tensor::from_rows(&[vec![10.0, 40.0]]).unwrap();
    check("rmse example", (rmse(&pred, &actual).unwrap() - (41.0f64 / 2.0).sqrt()).abs() < 1e-12);
    check("rmse exact", rmse(&actual, &actual).unwrap() == 0.0);
    check("rmse offset", (rmse(&actual.map(|v| v + 3.5), &actual).unwrap() - 3.5).abs() < 1e-12);
    check("rmse empty", rmse(&Tensor::zeros(0, 0), &Tensor::zeros(0, 0)).is_err());
    check("mape threshold", (mape(&pred, &actual, 20.0).unwrap().unwrap() - 0.1).abs() < 1e-12);
    check("mape exact", mape(&actual, &actual, 20.0).unwrap() == Some(0.0));
    check("mape absent", mape(&pred, &actual, 50.0).unwrap().is_none());
    let m = metrics(2.0, Some(3.0), Some(0.4));
    check("ane identity", avg_normalized_error(&m, &m).unwrap() == 1.0);
    let scaled = metrics(2.2, Some(3.3), Some(0.44));
    check("ane 1.1", (avg_normalized_error(&scaled, &m).unwrap() - 1.1).abs() < 1e-12);
    let mixed = metrics(2.4, Some(3.0), Some(0.36));
    check("ane mean", (avg_normalized_error(&mixed, &m).unwrap() - 31.0 / 30.0).abs() < 1e-12);
    check("ane zero reference", avg_normalized_error(&m, &metrics(0.0, Some(3.0), Some(0.4))).is_err());
    let pairs = vec![
        (Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap(), Tensor::from_rows(&[vec![1.5, 2.0], vec![2.0, 0.0]]).unwrap()),
        (Tensor::from_rows(&[vec![0.0, 4.0], vec![5.0, 6.0]]).unwrap(), Tensor::from_rows(&[vec![0.0, 3.0], vec![5.0, 8.0]]).unwrap()),
    ];
    let bundle = metrics_bundle(&pairs, 0.0).unwrap();
    let weighted: f64 = bundle.per_horizon.iter().map(|h| h.rmse_all.powi(2) * h.count as f64).sum::<f64>() / bundle.overall.count as f64;
    check("rmse decomposition", (weighted - bundle.overall.rmse_all.powi(2)).abs() < 1e-12);
    check("zero actuals excluded from mape", bundle.overall.mape_count == 6);

    let store = ParamStore::new();
    let mut g = rng(77);
    let mut loss_zero_iff_exact = true;
    for _ in 0..20 {
        let actual = random_tensor(&mut g, 3, 2).map(|v| 30.0 + 20.0 * v);
        let mut s = Session::new(&store);
        let exact = s.constant(actual.clone()).unwrap();
        let l = loss(&mut s, exact, &actual, 0.7, 20.0).unwrap();
        loss_zero_iff_exact &= s.value(l).item() == 0.0;
        let mut off = actual.clone();
        let (r, c) = (g.random_range(0..3), g.random_range(0..2));
        off.set(r, c, off.get(r, c) + 1e-3);
        let p = s.constant(off).unwrap();
        let l = loss(&mut s, p, &actual, 0.7, 20.0).unwrap();
        loss_zero_iff_exact &= s.value(l).item() > 0.0;
    }
    check("loss zero iff exact", loss_zero_iff_exact);
    if fails.is_empty() {
        Ok("rmse, mape threshold, normalized-error and loss cases hold".into())
    } else {
        Err(format!("failed: {}", fails.join(", ")))
    }
}

// ------------------------------------------------------------- determinism

pub const TINY_RUN_CONFIG: &str = r#"{
  "model": {"N": 4, "T": 8, "T_prime": 2, "A": 2, "d_model": 8, "d_aux": 4, "d_pos": 4, "H": 2, "M": 3,
            "M1": 1, "M2": 1, "N_encoder": 1, "N_decoder": 1, "neurons_per_node": 2,
            "use_aux": true, "use_pos": true, "use_gru": true, "similarity": "cosine"},
  "train": {"epochs": 3, "steps_per_epoch": 4, "batch": 8, "mape_threshold": 0.0, "val_windows": 40},
  "split": {"train": 0.6, "val": 0.2, "test": 0.2}
}"#;

pub fn gsaf(args: &[&str]) -> i32 {
    gsaf_core::cli::run(std::iter::once("gsaf").chain(args.iter().copied()))
}

/// Runs synth, learn-graph and train in `dir`; returns the bytes of every output.
pub fn pipeline(dir: &std::path::Path, seed: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    std::fs::write(p("cfg.json"), TINY_RUN_CONFIG).map_err(|e| e.to_string())?;
    let steps: [(&str, Vec<String>); 3] = [
        ("synth", vec!["synth".into(), "--kind".into(), "planted".into(), "--out".into(), p("d"), "--seed".into(), "4".into(), "--n-nodes".into(), "4".into(), "--t-total".into(), "400".into()]),
        ("learn-graph", vec!["learn-graph".into(), "--input".into(), p("d/series.csv"), "--out".into(), p("graph.json")]),
        (
            "train",
            vec![
                "train".into(), "--config".into(), p("cfg.json"), "--data".into(), p("d/series.csv"), "--aux".into(), p("d/aux.csv"),
                "--graph".into(), p("graph.json"), "--seed".into(), seed.into(), "--out".into(), p("m.gsaf"), "--log".into(), p("log.csv"),
            ],
        ),
    ];
    for (name, args) in &steps {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let code = gsaf(&refs);
        if code != 0 {
            return Err(format!("{name} exited with {code}"));
        }
    }
    ["d/series.csv", "d/aux.csv", "d/truth.json", "graph.json", "m.gsaf", "log.csv"]
        .iter()
        .map(|f| std::fs::read(dir.join(f)).map(|b| (f.to_string(), b)).map_err(|e| format!("{f}: {e}")))
        .collect()
}

/// Largest change in steps before `k` when inputs at step `k` and later are perturbed.
pub fn causality_leak(seed: u64) -> Result<f64, String> {
    let mut g = rng(900 + seed);
    let mut cfg = random_model_config(&mut g);
    cfg.horizon = g.random_range(2..=3);
    let graph = random_graph(&mut g, cfg.n_nodes, 0.5);
    let template = WindowTemplate::contiguous(cfg.history, cfg.horizon).map_err(|e| e.to_string())?;
    let state = ModelState::new(cfg.clone(), graph, template, seed).map_err(|e| e.to_string())?;
    let history = random_tensor(&mut g, cfg.n_nodes, cfg.history);
    let aux = random_tensor(&mut g, cfg.aux_dim, cfg.history + cfg.horizon);
    let teacher = random_tensor(&mut g, cfg.n_nodes, cfg.horizon);
    let run = |aux: &Tensor, teacher: Option<&Tensor>| -> Result<Tensor, String> {
        let mut s = Session::new(&state.store);
        let o = state.forward(&mut s, &history, Some(aux), cfg.horizon, teacher, None).map_err(|e| e.to_string())?;
        Ok(s.value(o.joined).clone())
    };
    let mut leak: f64 = 0.0;
    for k in 1..=cfg.horizon {
        // Inputs that first matter at step k: aux of step k and later, true signals of step k and later.
        let mut a2 = aux.clone();
        let mut t2 = teacher.clone();
        for c in cfg.history + k - 1..cfg.history + cfg.horizon {
            for r in 0..cfg.aux_dim {
                a2.set(r, c, a2.get(r, c) + 3.0);
            }
        }
        for c in k - 1..cfg.horizon {
            for r in 0..cfg.n_nodes {
                t2.set(r, c, t2.get(r, c) - 2.0);
            }
        }
        for tf in [false, true] {
            let base = run(&aux, tf.then_some(&teacher))?;
            let moved = run(&a2, tf.then_some(&t2))?;
            for c in 0..k - 1 {
                for r in 0..cfg.n_nodes {
                    leak = leak.max((base.get(r, c) - moved.get(r, c)).abs());
                }
            }
        }
    }
    Ok(leak)
}

pub fn determinism() -> Check {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline(a.path(), "5")?;
    let second = pipeline(b.path(), "5")?;
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        if x != y {
            return Err(format!("{name} differs between identical runs"));
        }
    }
    let ckpt = a.path().join("m.gsaf");
    let loaded = ModelState::load(&ckpt).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&ckpt).map_err(|e| e.to_string())?;
    if loaded.to_bytes() != bytes {
        return Err("checkpoint bytes change on load and re-save".into());
    }
    let again = ModelState::from_bytes(&loaded.to_bytes()).map_err(|e| e.to_string())?;
    let mut g = rng(3);
    let cfg = &loaded.config;
    let history = random_tensor(&mut g, cfg.n_nodes, cfg.history).map(|v| 10.0 + v);
    let aux = random_tensor(&mut g, cfg.aux_dim, cfg.history + cfg.horizon);
    let p1 = loaded.forecast(&history, Some(&aux), cfg.horizon, None).map_err(|e| e.to_string())?;
    let p2 = again.forecast(&history, Some(&aux), cfg.horizon, None).map_err(|e| e.to_string())?;
    let bitwise = p1.predictions.data().iter().zip(p2.predictions.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    if !bitwise {
        return Err("round-tripped checkpoint forecasts differ".into());
    }
    let mut leak: f64 = 0.0;
    for seed in 0..20 {
        leak = leak.max(causality_leak(seed)?);
    }
    if leak != 0.0 {
        return Err(format!("future inputs changed earlier predictions by {leak:e}"));
    }
    let log_lines = String::from_utf8_lossy(&first.iter().find(|f| f.0 == "log.csv").unwrap().1).lines().count();
    Ok(format!(
        "{} outputs byte-identical across runs ({} log lines, {} checkpoint bytes); round trip bit-exact; causality audit clean on 20 models",
        first.len(),
        log_lines,
        bytes.len()
    ))
}

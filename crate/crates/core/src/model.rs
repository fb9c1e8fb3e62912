//! The forecaster: embeddings, filtering encoder, predicting decoder,
//! de-embedding, the optional node-level network and checkpoints.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{gsa_filter, gsa_predict, projection_masks, AttentionHeads, AttentionTrace, HeadsSpec, Similarity};
use crate::autodiff::{AutodiffError, Mask, Tensor, Var};
use crate::data::{Window, WindowTemplate};
use crate::graph::{make_mask_for_dims, DependencyGraph, GraphError};
use crate::layers::{FeedForward, GruCell, Linear, ParamId, ParamStore, PositionalTable, Session, TwoLayer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GSAF";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Offset used by the single-neuron persistence embedding to stay on the linear side of the ReLU.
const PERSISTENCE_SHIFT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("config mismatch in field `{field}`")]
    ConfigMismatch { field: String },
    #[error("checkpoint format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeLevelConfig {
    pub d_model_node: usize,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(rename = "N")]
    pub n_nodes: usize,
    #[serde(rename = "T")]
    pub history: usize,
    #[serde(rename = "T_prime")]
    pub horizon: usize,
    #[serde(rename = "A", default)]
    pub aux_dim: usize,
    pub d_model: usize,
    #[serde(default)]
    pub d_aux: usize,
    #[serde(default)]
    pub d_pos: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "M1")]
    pub m1: usize,
    #[serde(rename = "M2")]
    pub m2: usize,
    #[serde(rename = "N_encoder")]
    pub n_encoder: usize,
    #[serde(rename = "N_decoder")]
    pub n_decoder: usize,
    pub neurons_per_node: usize,
    pub use_aux: bool,
    pub use_pos: bool,
    pub use_gru: bool,
    #[serde(default)]
    pub node_level: Option<NodeLevelConfig>,
    #[serde(default)]
    pub similarity: Similarity,
}

impl ModelConfig {
    /// A small configuration with every feature switched on.
    pub fn tiny(n_nodes: usize, history: usize, horizon: usize, aux_dim: usize) -> Self {
        ModelConfig {
            n_nodes,
            history,
            horizon,
            aux_dim,
            d_model: 2 * n_nodes,
            d_aux: 4,
            d_pos: 4,
            heads: 2,
            m: 3.min(history),
            m1: 2,
            m2: 2,
            n_encoder: 1,
            n_decoder: 1,
            neurons_per_node: 2,
            use_aux: aux_dim > 0,
            use_pos: true,
            use_gru: true,
            node_level: None,
            similarity: Similarity::Cosine,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.n_nodes == 0 || self.history == 0 || self.horizon == 0 {
            return fail("N, T and T_prime must be at least 1".into());
        }
        if self.heads == 0 {
            return fail("H must be at least 1".into());
        }
        if self.neurons_per_node == 0 || self.d_model != self.n_nodes * self.neurons_per_node {
            return fail(format!(
                "d_model {} must equal N {} x neurons_per_node {}",
                self.d_model, self.n_nodes, self.neurons_per_node
            ));
        }
        for (name, dim) in [("d_model", self.d_model), ("d_aux", self.d_aux), ("d_pos", self.d_pos)] {
            if dim % self.heads != 0 {
                return fail(format!("{name} {dim} is not divisible by H {}", self.heads));
            }
        }
        if self.neurons_per_node < self.heads {
            return fail(format!(
                "neurons_per_node {} is below H {}: every head needs one row per node",
                self.neurons_per_node, self.heads
            ));
        }
        if self.m == 0 || self.m > self.history {
            return fail(format!("M {} must lie in 1..=T ({})", self.m, self.history));
        }
        if self.aux_active() && self.d_aux == 0 {
            return fail("use_aux with A > 0 needs d_aux > 0".into());
        }
        if self.use_pos && self.d_pos == 0 {
            return fail("use_pos needs d_pos > 0".into());
        }
        if let Some(nl) = &self.node_level {
            if nl.d_model_node == 0 || nl.d_model_node % self.heads != 0 {
                return fail(format!("d_model_node {} must be a positive multiple of H {}", nl.d_model_node, self.heads));
            }
            if !(0.0..=1.0).contains(&nl.gamma) {
                return fail(format!("gamma {} outside [0, 1]", nl.gamma));
            }
        }
        Ok(())
    }

    pub fn aux_active(&self) -> bool {
        self.use_aux && self.aux_dim > 0
    }

    pub fn gru_active(&self) -> bool {
        self.use_gru && self.m >= 2
    }

    fn graph_spec(&self) -> NetSpec {
        NetSpec {
            n_nodes: self.n_nodes,
            d_model: self.d_model,
            heads: self.heads,
            aux: self.aux_active().then_some((self.aux_dim, self.d_aux)),
            d_pos: self.use_pos.then_some(self.d_pos),
            gru: self.gru_active(),
            n_encoder: self.n_encoder,
            n_decoder: self.n_decoder,
            history: self.history,
            horizon: self.horizon,
            m: self.m,
            m1: self.m1,
            m2: self.m2,
            similarity: self.similarity,
        }
    }

    fn node_spec(&self) -> Option<NetSpec> {
        self.node_level.as_ref().map(|nl| NetSpec {
            n_nodes: 1,
            d_model: nl.d_model_node,
            aux: None,
            d_pos: None,
            ..self.graph_spec()
        })
    }

    /// Entries of every trainable tensor, masked-out entries included.
    pub fn parameter_count(&self) -> usize {
        self.graph_spec().stored_count() + self.node_spec().map_or(0, |s| s.stored_count())
    }
}

#[derive(Clone, Debug)]
struct NetSpec {
    n_nodes: usize,
    d_model: usize,
    heads: usize,
    aux: Option<(usize, usize)>,
    d_pos: Option<usize>,
    gru: bool,
    n_encoder: usize,
    n_decoder: usize,
    history: usize,
    horizon: usize,
    m: usize,
    m1: usize,
    m2: usize,
    similarity: Similarity,
}

impl NetSpec {
    fn stored_count(&self) -> usize {
        let (n, d) = (self.n_nodes, self.d_model);
        let mut total = (d * n + d + d * d + d) + (d * d + d + n * d + n);
        if let Some((a, da)) = self.aux {
            total += da * a + da + da * da + da;
        }
        if let Some(dp) = self.d_pos {
            total += dp * (self.history + self.horizon);
        }
        let mut attn = 4 * d * d + 1;
        if let Some((_, da)) = self.aux {
            attn += 2 * da * da + 1;
        }
        if let Some(dp) = self.d_pos {
            attn += 2 * dp * dp + 1;
        }
        let ff = 2 * (d * d + d);
        total += self.n_encoder * (attn + ff);
        total += self.n_decoder * (attn + ff + if self.gru { 6 * d * d + 6 * d } else { 0 });
        total
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: AttentionHeads,
    pub ff: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub attn: AttentionHeads,
    pub ff: FeedForward,
    pub gru: Option<GruCell>,
}

/// Which attention rows to record during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceRequest {
    /// Decoder step `k` (1-based) whose rows are kept.
    pub step: usize,
}

/// One graph-level or node-level network.
#[derive(Clone, Debug)]
pub struct Network {
    pub n_nodes: usize,
    pub d_model: usize,
    pub embed: TwoLayer,
    pub de_embed: TwoLayer,
    pub aux_embed: Option<TwoLayer>,
    pub positions: Option<PositionalTable>,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    history: usize,
    horizon: usize,
    m: usize,
    m1: usize,
    m2: usize,
}

fn two_layer(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    dims: (usize, usize, usize),
    graph: Option<&DependencyGraph>,
) -> Result<TwoLayer, GraphError> {
    let (i, h, o) = dims;
    let layer = |store: &mut ParamStore, rng: &mut ChaCha8Rng, part: &str, out: usize, inp: usize| -> Result<Linear, GraphError> {
        let full = format!("{name}.{part}");
        Ok(match graph {
            Some(g) => Linear::sparse(store, rng, &full, Arc::new(make_mask_for_dims(g, out, inp)?.mask), true),
            None => Linear::dense(store, rng, &full, out, inp, true),
        })
    };
    Ok(TwoLayer { first: layer(store, rng, "l1", h, i)?, second: layer(store, rng, "l2", o, h)? })
}

impl Network {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        spec: &NetSpec,
        graph: Option<&DependencyGraph>,
    ) -> Result<Self, ModelError> {
        let (n, d) = (spec.n_nodes, spec.d_model);
        let embed = two_layer(store, rng, &format!("{prefix}.embed"), (n, d, d), graph)?;
        let de_embed = two_layer(store, rng, &format!("{prefix}.de_embed"), (d, d, n), graph)?;
        let aux_embed = match spec.aux {
            Some((a, da)) => Some(two_layer(store, rng, &format!("{prefix}.aux_embed"), (a, da, da), None)?),
            None => None,
        };
        let positions = spec
            .d_pos
            .map(|dp| PositionalTable::new(store, rng, &format!("{prefix}.pos"), dp, 1 - spec.history as isize, spec.horizon as isize));
        let masks = match graph {
            Some(g) => Some(projection_masks(g, d, spec.heads)?),
            None => None,
        };
        let heads_spec = HeadsSpec {
            d_model: d,
            heads: spec.heads,
            masks,
            d_aux: spec.aux.map(|(_, da)| da),
            d_pos: spec.d_pos,
            similarity: spec.similarity,
        };
        let mut encoder = Vec::new();
        for l in 0..spec.n_encoder {
            let name = format!("{prefix}.encoder.{l}");
            let attn = AttentionHeads::new(store, rng, &format!("{name}.attn"), &heads_spec)?;
            let ff = FeedForward { inner: two_layer(store, rng, &format!("{name}.ff"), (d, d, d), graph)? };
            encoder.push(EncoderLayer { attn, ff });
        }
        let mut decoder = Vec::new();
        for l in 0..spec.n_decoder {
            let name = format!("{prefix}.decoder.{l}");
            let attn = AttentionHeads::new(store, rng, &format!("{name}.attn"), &heads_spec)?;
            let ff = FeedForward { inner: two_layer(store, rng, &format!("{name}.ff"), (d, d, d), graph)? };
            let gru = spec.gru.then(|| GruCell::new(store, rng, &format!("{name}.gru"), d));
            decoder.push(DecoderLayer { attn, ff, gru });
        }
        Ok(Network {
            n_nodes: n,
            d_model: d,
            embed,
            de_embed,
            aux_embed,
            positions,
            encoder,
            decoder,
            history: spec.history,
            horizon: spec.horizon,
            m: spec.m,
            m1: spec.m1,
            m2: spec.m2,
        })
    }

    /// Filtered encodings of the history (`d_model x T`) and the raw embeddings.
    pub fn encode_history(
        &self,
        s: &mut Session,
        x: Var,
        aux_enc: Option<Var>,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<(Var, Var), AutodiffError> {
        let t = self.history;
        if s.shape(x) != (self.n_nodes, t) {
            return Err(AutodiffError::Contract(format!(
                "history is {:?}, expected {}x{}",
                s.shape(x),
                self.n_nodes,
                t
            )));
        }
        let e = self.embed.forward(s, x)?;
        let aux_hist = match aux_enc {
            Some(a) => Some(s.slice_cols(a, 0, t)?),
            None => None,
        };
        let pos_hist = match &self.positions {
            Some(table) => Some(table.lookup_range(s, 1 - t as isize, 0)?),
            None => None,
        };
        let mut c = e;
        for (l, layer) in self.encoder.iter().enumerate() {
            let tr = trace.as_deref_mut().map(|tr| (tr, l));
            c = gsa_filter(s, &layer.attn, c, aux_hist, pos_hist, self.m1, self.m2, tr)?;
            c = layer.ff.forward(s, c)?;
        }
        Ok((c, e))
    }

    /// Refined estimate for step `k` given the previous sequence and the initial estimate.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_step(
        &self,
        s: &mut Session,
        prev: Var,
        initial: Var,
        aux_enc: Option<Var>,
        k: usize,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<(Var, Var), AutodiffError> {
        let t = self.history;
        if k == 0 || k > self.horizon {
            return Err(AutodiffError::Contract(format!("step {k} outside 1..={}", self.horizon)));
        }
        if s.shape(prev).1 != t + k - 1 {
            return Err(AutodiffError::Contract(format!("step {k} needs {} previous encodings, got {}", t + k - 1, s.shape(prev).1)));
        }
        let aux_k = match aux_enc {
            Some(a) => Some(s.slice_cols(a, 0, t + k)?),
            None => None,
        };
        let pos_k = match &self.positions {
            Some(table) => Some(table.lookup_range(s, 1 - t as isize, k as isize)?),
            None => None,
        };
        let mut est = initial;
        for (l, layer) in self.decoder.iter().enumerate() {
            let f = s.concat_cols(&[prev, est])?;
            let tr = trace.as_deref_mut().map(|tr| (tr, l));
            let refined = gsa_predict(s, &layer.attn, f, aux_k, pos_k, self.m, layer.gru.as_ref(), t, tr)?;
            est = layer.ff.forward(s, refined)?;
        }
        let x_hat = self.de_embed.forward(s, est)?;
        Ok((x_hat, est))
    }

    /// Predictions (`N x steps`) in the network's input scale.
    ///
    /// With `teacher` the true previous signals feed each step; otherwise the
    /// network's own predictions do.
    pub fn run(
        &self,
        s: &mut Session,
        x: Var,
        aux: Option<Var>,
        steps: usize,
        teacher: Option<Var>,
        mut trace: Option<(&mut AttentionTrace, TraceRequest)>,
    ) -> Result<Var, AutodiffError> {
        let t = self.history;
        let aux_enc = match (&self.aux_embed, aux) {
            (Some(net), Some(a)) => Some(net.forward(s, a)?),
            (Some(_), None) => return Err(AutodiffError::Contract("auxiliary inputs are required".into())),
            (None, _) => None,
        };
        if let Some(a) = aux_enc {
            if s.shape(a).1 < t + steps {
                return Err(AutodiffError::Contract(format!("aux covers {} steps, need {}", s.shape(a).1, t + steps)));
            }
        }
        let (mut prev, e) = self.encode_history(s, x, aux_enc, None)?;
        let mut initial = s.slice_cols(e, t - 1, t)?;
        let mut outputs = Vec::with_capacity(steps);
        for k in 1..=steps {
            let tr = match trace.as_mut() {
                Some((tr, req)) if req.step == k => Some(&mut **tr),
                _ => None,
            };
            let (x_hat, _) = self.decode_step(s, prev, initial, aux_enc, k, tr)?;
            outputs.push(x_hat);
            if k < steps {
                let input = match teacher {
                    Some(tf) => s.slice_cols(tf, k - 1, k)?,
                    None => x_hat,
                };
                let p = self.embed.forward(s, input)?;
                prev = s.concat_cols(&[prev, p])?;
                initial = p;
            }
        }
        s.concat_cols(&outputs)
    }
}

/// `γ·graph + (1−γ)·node`.
pub fn join(graph_pred: f64, node_pred: f64, gamma: f64) -> f64 {
    gamma * graph_pred + (1.0 - gamma) * node_pred
}

#[derive(Clone, Debug)]
pub struct Normalizer {
    pub mean: ParamId,
    pub scale: ParamId,
}

/// Complete forecaster state.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub graph: DependencyGraph,
    pub template: WindowTemplate,
    pub store: ParamStore,
    pub net: Network,
    pub node_net: Option<Network>,
    pub norm: Normalizer,
    pub aux_norm: Normalizer,
}

/// Variables produced by one forward pass, all `N x steps` in data scale.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub graph: Var,
    pub node: Option<Var>,
    pub joined: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForecastReport {
    /// `T' x N`.
    pub predictions: Tensor,
    pub graph_predictions: Tensor,
    pub node_predictions: Option<Tensor>,
    pub trace: Option<AttentionTrace>,
}

impl ModelState {
    pub fn new(config: ModelConfig, graph: DependencyGraph, template: WindowTemplate, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if graph.n_nodes != config.n_nodes {
            return Err(ModelError::Config(format!("graph has {} nodes, config N is {}", graph.n_nodes, config.n_nodes)));
        }
        if template.history_len() != config.history || template.horizon != config.horizon {
            return Err(ModelError::Config(format!(
                "template gives T={} T'={}, config has T={} T'={}",
                template.history_len(),
                template.horizon,
                config.history,
                config.horizon
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Network::new(&mut store, &mut rng, "graph", &config.graph_spec(), Some(&graph))?;
        let node_net = match config.node_spec() {
            Some(spec) => Some(Network::new(&mut store, &mut rng, "node", &spec, None)?),
            None => None,
        };
        let (n, a) = (config.n_nodes, config.aux_dim);
        let norm = Normalizer {
            mean: store.add_fixed("norm.mean", Tensor::zeros(n, 1)),
            scale: store.add_fixed("norm.scale", Tensor::filled(n, 1, 1.0)),
        };
        let aux_norm = Normalizer {
            mean: store.add_fixed("aux_norm.mean", Tensor::zeros(a, 1)),
            scale: store.add_fixed("aux_norm.scale", Tensor::filled(a, 1, 1.0)),
        };
        Ok(ModelState { config, graph, template, store, net, node_net, norm, aux_norm })
    }

    /// Entries each weight may actually use, i.e. masked-in entries only.
    pub fn free_parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Sets per-node and per-aux-column mean and spread from `values` (`T x N`) and `aux` (`T x A`).
    pub fn fit_normalizer(&mut self, values: &Tensor, aux: &Tensor) -> Result<(), ModelError> {
        let stats = |m: &Tensor| {
            let rows = m.rows().max(1) as f64;
            let mut mean = Tensor::zeros(m.cols(), 1);
            let mut scale = Tensor::filled(m.cols(), 1, 1.0);
            for c in 0..m.cols() {
                let mu = (0..m.rows()).map(|r| m.get(r, c)).sum::<f64>() / rows;
                let var = (0..m.rows()).map(|r| (m.get(r, c) - mu).powi(2)).sum::<f64>() / rows;
                mean.set(c, 0, mu);
                scale.set(c, 0, if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 });
            }
            (mean, scale)
        };
        if values.cols() != self.config.n_nodes || aux.cols() != self.config.aux_dim {
            return Err(ModelError::Config("normalizer data does not match N and A".into()));
        }
        let (m, sc) = stats(values);
        self.store.set_value(self.norm.mean, m)?;
        self.store.set_value(self.norm.scale, sc)?;
        let (m, sc) = stats(aux);
        self.store.set_value(self.aux_norm.mean, m)?;
        self.store.set_value(self.aux_norm.scale, sc)?;
        Ok(())
    }

    fn normalize(&self, norm: &Normalizer, x: &Tensor) -> Tensor {
        let (mean, scale) = (self.store.value(norm.mean), self.store.value(norm.scale));
        let mut out = x.clone();
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                out.set(r, c, (x.get(r, c) - mean.get(r, 0)) / scale.get(r, 0));
            }
        }
        out
    }

    fn denormalize(&self, s: &mut Session, y: Var) -> Result<Var, AutodiffError> {
        let n = self.config.n_nodes;
        let scale = self.store.value(self.norm.scale);
        let mut diag = Tensor::zeros(n, n);
        for i in 0..n {
            diag.set(i, i, scale.get(i, 0));
        }
        let diag = s.constant(diag)?;
        let scaled = s.matmul(diag, y)?;
        let mean = s.p(self.norm.mean)?;
        s.add_col(scaled, mean)
    }

    /// Graph-level, node-level and joined predictions for `steps` steps.
    ///
    /// `history` is `N x T` in template order, `aux` is `A x (T + T')` and
    /// `teacher` (when given) is `N x steps` of true future signals.
    pub fn forward(
        &self,
        s: &mut Session,
        history: &Tensor,
        aux: Option<&Tensor>,
        steps: usize,
        teacher: Option<&Tensor>,
        trace: Option<(&mut AttentionTrace, TraceRequest)>,
    ) -> Result<ForwardOutput, ModelError> {
        let cfg = &self.config;
        if steps == 0 || steps > cfg.horizon {
            return Err(ModelError::Config(format!("horizon {steps} outside 1..={}", cfg.horizon)));
        }
        if history.shape() != (cfg.n_nodes, cfg.history) {
            return Err(ModelError::Config(format!("history is {:?}, expected {}x{}", history.shape(), cfg.n_nodes, cfg.history)));
        }
        let aux_var = if cfg.aux_active() {
            let a = aux.ok_or_else(|| ModelError::Config("model uses auxiliary information but none was given".into()))?;
            if a.rows() != cfg.aux_dim || a.cols() < cfg.history + steps {
                return Err(ModelError::Config(format!(
                    "aux is {:?}, expected {} rows and at least {} columns",
                    a.shape(),
                    cfg.aux_dim,
                    cfg.history + steps
                )));
            }
            Some(s.constant(self.normalize(&self.aux_norm, a))?)
        } else {
            None
        };
        let x = s.constant(self.normalize(&self.norm, history))?;
        let teacher = match teacher {
            Some(tf) => {
                if tf.rows() != cfg.n_nodes || tf.cols() < steps {
                    return Err(ModelError::Config(format!("teacher signals are {:?}", tf.shape())));
                }
                Some(s.constant(self.normalize(&self.norm, tf))?)
            }
            None => None,
        };
        let g = self.net.run(s, x, aux_var, steps, teacher, trace)?;
        let graph = self.denormalize(s, g)?;
        let node = match &self.node_net {
            Some(net) => {
                let mut rows = Vec::with_capacity(cfg.n_nodes);
                for j in 0..cfg.n_nodes {
                    let xj = s.slice_rows(x, j, j + 1)?;
                    let tj = match teacher {
                        Some(tf) => Some(s.slice_rows(tf, j, j + 1)?),
                        None => None,
                    };
                    rows.push(net.run(s, xj, None, steps, tj, None)?);
                }
                let stacked = s.concat_rows(&rows)?;
                Some(self.denormalize(s, stacked)?)
            }
            None => None,
        };
        let joined = match (node, &cfg.node_level) {
            (Some(nv), Some(nl)) => {
                let a = s.scalar_mul(graph, nl.gamma)?;
                let b = s.scalar_mul(nv, 1.0 - nl.gamma)?;
                s.add(a, b)?
            }
            _ => graph,
        };
        Ok(ForwardOutput { graph, node, joined })
    }

    /// Autoregressive forecast of `steps` steps.
    pub fn forecast(
        &self,
        history: &Tensor,
        aux: Option<&Tensor>,
        steps: usize,
        trace_step: Option<usize>,
    ) -> Result<ForecastReport, ModelError> {
        let mut s = Session::new(&self.store);
        let mut trace = AttentionTrace::default();
        let request = trace_step.map(|step| (&mut trace, TraceRequest { step }));
        let out = self.forward(&mut s, history, aux, steps, None, request)?;
        let report = ForecastReport {
            predictions: s.value(out.joined).transpose(),
            graph_predictions: s.value(out.graph).transpose(),
            node_predictions: out.node.map(|v| s.value(v).transpose()),
            trace: trace_step.map(|_| trace),
        };
        Ok(report)
    }

    pub fn forecast_window(&self, window: &Window, steps: usize) -> Result<ForecastReport, ModelError> {
        let aux = (self.config.aux_dim > 0).then_some(&window.aux);
        self.forecast(&window.history, aux, steps, None)
    }

    /// State whose forecasts repeat the last observed signal.
    ///
    /// Embedding and de-embedding pass each node's value through its own
    /// neurons, every attention output projection and feedforward branch is
    /// zero, and the normalizer is the identity.
    pub fn persistence(config: ModelConfig, graph: DependencyGraph, template: WindowTemplate) -> Result<Self, ModelError> {
        let mut state = ModelState::new(config, graph, template, 0)?;
        let ids: Vec<ParamId> = state.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let shape = state.store.value(id).shape();
            state.store.set_value(id, Tensor::zeros(shape.0, shape.1))?;
        }
        set_passthrough(&mut state.store, &state.net)?;
        if let Some(net) = state.node_net.clone() {
            set_passthrough(&mut state.store, &net)?;
        }
        Ok(state)
    }

    fn header(&self) -> CheckpointHeader {
        let manifest = self
            .store
            .iter()
            .scan(0u64, |offset, (_, p)| {
                let entry = ManifestEntry { name: p.name.clone(), rows: p.value.rows(), cols: p.value.cols(), offset: *offset };
                *offset += (p.value.len() * 8) as u64;
                Some(entry)
            })
            .collect();
        CheckpointHeader {
            config: self.config.clone(),
            graph: self.graph.clone(),
            template: self.template.clone(),
            manifest,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.store.iter().map(|(_, p)| p.value.len()).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, p) in self.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let (header, data_start) = parse_header(bytes)?;
        let mut state = ModelState::new(header.config.clone(), header.graph.clone(), header.template.clone(), 0)
            .map_err(|e| ModelError::Format { offset: 16, detail: format!("header describes an invalid model: {e}") })?;
        fill_params(&mut state.store, &header, bytes, data_start)?;
        Ok(state)
    }

    /// Loads the parameters of a checkpoint built for the same config and graph.
    pub fn load_weights(&mut self, bytes: &[u8]) -> Result<(), ModelError> {
        let (header, data_start) = parse_header(bytes)?;
        let ours = serde_json::to_value(&self.config).expect("config serializes");
        let theirs = serde_json::to_value(&header.config).expect("config serializes");
        if let Some(field) = first_difference(&ours, &theirs, "config") {
            return Err(ModelError::ConfigMismatch { field });
        }
        if self.graph.n_nodes != header.graph.n_nodes {
            return Err(ModelError::ConfigMismatch { field: "graph.n_nodes".into() });
        }
        let pairs = |g: &DependencyGraph| g.edges.iter().map(|e| (e.0, e.1)).collect::<Vec<_>>();
        if pairs(&self.graph) != pairs(&header.graph) {
            return Err(ModelError::ConfigMismatch { field: "graph.edges".into() });
        }
        if self.template != header.template {
            return Err(ModelError::ConfigMismatch { field: "template".into() });
        }
        fill_params(&mut self.store, &header, bytes, data_start)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::Io { path: path.display().to_string(), detail: e.to_string() })?;
        ModelState::from_bytes(&bytes)
    }
}

fn set_passthrough(store: &mut ParamStore, net: &Network) -> Result<(), ModelError> {
    let (n, d) = (net.n_nodes, net.d_model);
    let per = d / n;
    let two = per >= 2;
    let first = |j: usize| j * per;
    // Embedding: x_j -> relu(±x_j) -> x_j on the node's first neuron.
    let mut l1 = Tensor::zeros(d, n);
    let mut b1 = Tensor::zeros(d, 1);
    let mut l2 = Tensor::zeros(d, d);
    let mut b2 = Tensor::zeros(d, 1);
    for j in 0..n {
        let r = first(j);
        l1.set(r, j, 1.0);
        l2.set(r, r, 1.0);
        if two {
            l1.set(r + 1, j, -1.0);
            l2.set(r, r + 1, -1.0);
        } else {
            b1.set(r, 0, PERSISTENCE_SHIFT);
            b2.set(r, 0, -PERSISTENCE_SHIFT);
        }
    }
    let set = |store: &mut ParamStore, lin: &Linear, w: Tensor, b: Tensor| -> Result<(), ModelError> {
        store.set_value(lin.weight, w)?;
        if let Some(bias) = lin.bias {
            store.set_value(bias, b)?;
        }
        Ok(())
    };
    set(store, &net.embed.first, l1, b1.clone())?;
    set(store, &net.embed.second, l2.clone(), b2.clone())?;
    // De-embedding: the node's first neuron -> relu(±e) -> x_j.
    let mut o2 = Tensor::zeros(n, d);
    let mut c1 = Tensor::zeros(d, d);
    for j in 0..n {
        let r = first(j);
        c1.set(r, r, 1.0);
        o2.set(j, r, 1.0);
        if two {
            c1.set(r + 1, r, -1.0);
            o2.set(j, r + 1, -1.0);
        }
    }
    let mut ob = Tensor::zeros(n, 1);
    if !two {
        for j in 0..n {
            ob.set(j, 0, -PERSISTENCE_SHIFT);
        }
    }
    set(store, &net.de_embed.first, c1, b1)?;
    set(store, &net.de_embed.second, o2, ob)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    graph: DependencyGraph,
    template: WindowTemplate,
    manifest: Vec<ManifestEntry>,
}

fn parse_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize), ModelError> {
    let fmt = |offset: usize, detail: &str| ModelError::Format { offset: offset as u64, detail: detail.to_string() };
    if bytes.len() < 4 {
        return Err(fmt(bytes.len(), "file ends inside the magic"));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fmt(0, "bad magic, expected GSAF"));
    }
    if bytes.len() < 16 {
        return Err(fmt(bytes.len(), "file ends inside the preamble"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(fmt(4, &format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| fmt(bytes.len(), "file ends inside the header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..end]).map_err(|e| fmt(16 + e.column().saturating_sub(1), &format!("header: {e}")))?;
    Ok((header, end))
}

fn fill_params(store: &mut ParamStore, header: &CheckpointHeader, bytes: &[u8], data_start: usize) -> Result<(), ModelError> {
    let fmt = |offset: usize, detail: String| ModelError::Format { offset: offset as u64, detail };
    if header.manifest.len() != store.len() {
        return Err(fmt(16, format!("manifest lists {} tensors, model has {}", header.manifest.len(), store.len())));
    }
    let mut expected_offset = 0u64;
    let mut updates = Vec::with_capacity(header.manifest.len());
    for entry in &header.manifest {
        let id = store.find(&entry.name).ok_or_else(|| fmt(16, format!("unknown tensor `{}`", entry.name)))?;
        let shape = store.value(id).shape();
        if shape != (entry.rows, entry.cols) {
            return Err(fmt(16, format!("tensor `{}` is {}x{}, model expects {}x{}", entry.name, entry.rows, entry.cols, shape.0, shape.1)));
        }
        if entry.offset != expected_offset {
            return Err(fmt(16, format!("tensor `{}` at offset {}, expected {}", entry.name, entry.offset, expected_offset)));
        }
        let start = data_start + entry.offset as usize;
        let count = entry.rows * entry.cols;
        let end = start + 8 * count;
        if end > bytes.len() {
            return Err(fmt(bytes.len(), format!("file truncated inside tensor `{}`", entry.name)));
        }
        let data: Vec<f64> = bytes[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(fmt(start + 8 * pos, format!("non-finite value in tensor `{}`", entry.name)));
        }
        if let Some(mask) = &store.get(id).mask {
            if let Some(pos) = data.iter().zip(mask.bits()).position(|(v, b)| !b && *v != 0.0) {
                return Err(fmt(start + 8 * pos, format!("masked-out entry of `{}` is nonzero", entry.name)));
            }
        }
        updates.push((id, Tensor::from_vec(entry.rows, entry.cols, data)?));
        expected_offset += 8 * count as u64;
    }
    let end = data_start + expected_offset as usize;
    if end != bytes.len() {
        return Err(fmt(end, format!("{} trailing bytes", bytes.len() - end)));
    }
    for (id, value) in updates {
        store.set_value(id, value)?;
    }
    Ok(())
}

fn first_difference(a: &serde_json::Value, b: &serde_json::Value, path: &str) -> Option<String> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| match (x.get(k), y.get(k)) {
                (Some(u), Some(v)) => first_difference(u, v, &format!("{path}.{k}")),
                _ => Some(format!("{path}.{k}")),
            })
        }
        _ if a == b => None,
        _ => Some(path.to_string()),
    }
}

/// Writes through a temporary file in the same directory and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ModelError> {
    let io = |e: std::io::Error| ModelError::Io { path: path.display().to_string(), detail: e.to_string() };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        io(e)
    })
}

/// Masks of every sparse weight, for checks on the mask invariant.
pub fn weight_masks(store: &ParamStore) -> Vec<(ParamId, Arc<Mask>)> {
    store.iter().filter_map(|(id, p)| p.mask.as_ref().map(|m| (id, Arc::clone(m)))).collect()
}

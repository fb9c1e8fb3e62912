//! Metrics, the training loss, Adam, the training loop and ablation configs.

use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor, Var};
use crate::data::{build_window, window_positions, DataError, GraphSignalSeries, Splits, Window};
use crate::layers::{ParamStore, Session};
use crate::model::{ModelConfig, ModelError, ModelState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub fn rmse(pred: &Tensor, actual: &Tensor) -> Result<f64, TrainError> {
    if pred.shape() != actual.shape() {
        return Err(TrainError::Contract(format!("rmse of {:?} against {:?}", pred.shape(), actual.shape())));
    }
    if pred.is_empty() {
        return Err(TrainError::Contract("rmse of an empty set".into()));
    }
    let sq: f64 = pred.data().iter().zip(actual.data()).map(|(p, a)| (p - a) * (p - a)).sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Whether an actual value takes part in MAPE.
pub fn mape_qualifies(actual: f64, threshold: f64) -> bool {
    actual >= threshold && actual != 0.0
}

/// Mean absolute percentage error as a fraction; `None` when no entry qualifies.
pub fn mape(pred: &Tensor, actual: &Tensor, threshold: f64) -> Result<Option<f64>, TrainError> {
    if pred.shape() != actual.shape() {
        return Err(TrainError::Contract(format!("mape of {:?} against {:?}", pred.shape(), actual.shape())));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, a) in pred.data().iter().zip(actual.data()) {
        if mape_qualifies(*a, threshold) {
            sum += (p - a).abs() / a.abs();
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse_all: f64,
    pub rmse_nonzero: Option<f64>,
    pub mape: Option<f64>,
    pub count: usize,
    pub nonzero_count: usize,
    pub mape_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub overall: Metrics,
    pub per_horizon: Vec<Metrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub avg_normalized_error: Option<f64>,
}

/// Running sums behind [`Metrics`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsAccumulator {
    sq: f64,
    count: usize,
    sq_nonzero: f64,
    nonzero: usize,
    ape: f64,
    mape_count: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, pred: f64, actual: f64, threshold: f64) {
        let e = pred - actual;
        self.sq += e * e;
        self.count += 1;
        if actual != 0.0 {
            self.sq_nonzero += e * e;
            self.nonzero += 1;
        }
        if mape_qualifies(actual, threshold) {
            self.ape += e.abs() / actual.abs();
            self.mape_count += 1;
        }
    }

    pub fn merge(&mut self, other: &MetricsAccumulator) {
        self.sq += other.sq;
        self.count += other.count;
        self.sq_nonzero += other.sq_nonzero;
        self.nonzero += other.nonzero;
        self.ape += other.ape;
        self.mape_count += other.mape_count;
    }

    pub fn finish(&self) -> Result<Metrics, TrainError> {
        if self.count == 0 {
            return Err(TrainError::Contract("metrics over an empty set".into()));
        }
        Ok(Metrics {
            rmse_all: (self.sq / self.count as f64).sqrt(),
            rmse_nonzero: (self.nonzero > 0).then(|| (self.sq_nonzero / self.nonzero as f64).sqrt()),
            mape: (self.mape_count > 0).then(|| self.ape / self.mape_count as f64),
            count: self.count,
            nonzero_count: self.nonzero,
            mape_count: self.mape_count,
        })
    }
}

/// Metrics of `T' x N` predictions against actuals, per row and overall.
pub fn metrics_bundle(pairs: &[(Tensor, Tensor)], threshold: f64) -> Result<MetricsBundle, TrainError> {
    let horizon = pairs.first().map(|p| p.0.rows()).unwrap_or(0);
    let mut per = vec![MetricsAccumulator::default(); horizon];
    for (pred, actual) in pairs {
        if pred.shape() != actual.shape() || pred.rows() != horizon {
            return Err(TrainError::Contract("prediction and actual shapes differ".into()));
        }
        for (k, acc) in per.iter_mut().enumerate() {
            for (p, a) in pred.row_values(k).iter().zip(actual.row_values(k)) {
                acc.add(*p, *a, threshold);
            }
        }
    }
    bundle_from(&per)
}

fn bundle_from(per: &[MetricsAccumulator]) -> Result<MetricsBundle, TrainError> {
    let mut overall = MetricsAccumulator::default();
    per.iter().for_each(|a| overall.merge(a));
    Ok(MetricsBundle {
        overall: overall.finish()?,
        per_horizon: per.iter().map(MetricsAccumulator::finish).collect::<Result<_, _>>()?,
        avg_normalized_error: None,
    })
}

/// Mean of the RMSE (all), RMSE (non-zero) and MAPE ratios of a model over a reference.
pub fn avg_normalized_error(model: &Metrics, reference: &Metrics) -> Result<f64, TrainError> {
    let pair = |name: &str, m: Option<f64>, r: Option<f64>| -> Result<f64, TrainError> {
        match (m, r) {
            (Some(m), Some(r)) if r != 0.0 => Ok(m / r),
            (None, Some(r)) if r != 0.0 => Err(TrainError::Contract(format!("model {name} is absent"))),
            _ => Err(TrainError::Contract(format!("reference {name} is zero or absent"))),
        }
    };
    let a = pair("rmse_all", Some(model.rmse_all), Some(reference.rmse_all))?;
    let b = pair("rmse_nonzero", model.rmse_nonzero, reference.rmse_nonzero)?;
    let c = pair("mape", model.mape, reference.mape)?;
    Ok((a + b + c) / 3.0)
}

/// `η·RMSE² + MAPE` for one prediction matrix.
pub fn loss(s: &mut Session, pred: Var, actual: &Tensor, eta: f64, threshold: f64) -> Result<Var, AutodiffError> {
    let qualifying = actual.data().iter().filter(|a| mape_qualifies(**a, threshold)).count();
    scaled_loss(s, pred, actual, eta, threshold, actual.len(), qualifying)
}

/// Loss terms normalized by externally supplied counts, so that summing over
/// the windows of a batch gives the batch loss.
pub fn scaled_loss(
    s: &mut Session,
    pred: Var,
    actual: &Tensor,
    eta: f64,
    threshold: f64,
    count: usize,
    mape_count: usize,
) -> Result<Var, AutodiffError> {
    if s.shape(pred) != actual.shape() {
        return Err(AutodiffError::Dimension { op: "loss", detail: format!("{:?} vs {:?}", s.shape(pred), actual.shape()) });
    }
    let target = s.constant(actual.clone())?;
    let diff = s.sub(pred, target)?;
    let sq = s.hadamard(diff, diff)?;
    let sq = s.sum(sq)?;
    let mut total = s.scalar_mul(sq, eta / count.max(1) as f64)?;
    if mape_count > 0 {
        let weights = actual.map(|a| if mape_qualifies(a, threshold) { 1.0 / (a.abs() * mape_count as f64) } else { 0.0 });
        let weights = s.constant(weights)?;
        let ad = s.abs(diff)?;
        let weighted = s.hadamard(ad, weights)?;
        let ape = s.sum(weighted)?;
        total = s.add(total, ape)?;
    }
    Ok(total)
}

/// `MAPE₀ / RMSE₀²`, falling back to 1 when either baseline term vanishes.
pub fn eta_from_baseline(rmse0: f64, mape0: Option<f64>) -> f64 {
    match mape0 {
        Some(m) if rmse0 > 0.0 && m > 0.0 => m / (rmse0 * rmse0),
        _ => 1.0,
    }
}

/// Loss weight that balances the two terms for a persistence forecast of the windows.
pub fn calibrate_eta(windows: &[Window], threshold: f64) -> Result<f64, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::Contract("calibration needs at least one window".into()));
    }
    let mut acc = MetricsAccumulator::default();
    for w in windows {
        let last = w.history.cols() - 1;
        for k in 0..w.target.cols() {
            for i in 0..w.target.rows() {
                acc.add(w.history.get(i, last), w.target.get(i, k), threshold);
            }
        }
    }
    let m = acc.finish()?;
    Ok(eta_from_baseline(m.rmse_all, m.mape))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationId {
    Model1,
    Model2,
    Model3,
    Model4,
    Full,
}

impl FromStr for AblationId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "m1" | "model1" => Ok(AblationId::Model1),
            "m2" | "model2" => Ok(AblationId::Model2),
            "m3" | "model3" => Ok(AblationId::Model3),
            "m4" | "model4" => Ok(AblationId::Model4),
            "full" => Ok(AblationId::Full),
            other => Err(format!("unknown ablation `{other}`, expected full|m1|m2|m3|m4")),
        }
    }
}

pub fn configure_ablation(id: AblationId, base: &ModelConfig) -> ModelConfig {
    let mut cfg = base.clone();
    if id == AblationId::Full {
        return cfg;
    }
    cfg.use_pos = false;
    if id == AblationId::Model4 {
        return cfg;
    }
    cfg.use_aux = false;
    if id == AblationId::Model3 {
        return cfg;
    }
    cfg.use_gru = false;
    if id == AblationId::Model2 {
        return cfg;
    }
    cfg.m = 1;
    cfg.m1 = 0;
    cfg.m2 = 0;
    cfg
}

fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    16
}
fn default_true() -> bool {
    true
}
fn default_threshold() -> f64 {
    20.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Calibrated from a persistence forecast when absent.
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub teacher_forcing: bool,
    #[serde(default = "default_threshold")]
    pub mape_threshold: f64,
    /// One pass over the training windows when absent.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    /// Evenly spaced subset of validation windows; all when absent.
    #[serde(default)]
    pub val_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: None,
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch: default_batch(),
            seed: 0,
            teacher_forcing: true,
            mape_threshold: default_threshold(),
            steps_per_epoch: None,
            val_windows: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if let Some(eta) = self.eta {
            if !(eta > 0.0) || !eta.is_finite() {
                return Err(TrainError::Config(format!("eta must be positive, got {eta}")));
            }
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(TrainError::Config("epochs and batch must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.mape_threshold >= 0.0) {
            return Err(TrainError::Config("learning_rate and mape_threshold must be non-negative".into()));
        }
        Ok(())
    }
}

/// Adam with moment estimates kept only for the free entries of each tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    slots: Vec<Option<AdamSlot>>,
}

#[derive(Clone, Debug)]
struct AdamSlot {
    index: Vec<usize>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let slots = store
            .iter()
            .map(|(_, p)| {
                p.trainable.then(|| {
                    let index: Vec<usize> = match &p.mask {
                        Some(m) => m.bits().iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect(),
                        None => (0..p.value.len()).collect(),
                    };
                    let n = index.len();
                    AdamSlot { index, m: vec![0.0; n], v: vec![0.0; n] }
                })
            })
            .collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, slots }
    }

    /// One update; a missing gradient counts as zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (slot, id) in self.slots.iter_mut().zip(ids) {
            let Some(slot) = slot else { continue };
            let grad = grads.get(id.0).and_then(|g| g.as_ref());
            let value = store.value_mut(id);
            let data = value.data_mut();
            for (j, &i) in slot.index.iter().enumerate() {
                let g = grad.map_or(0.0, |g| g.data()[i]);
                slot.m[j] = self.beta1 * slot.m[j] + (1.0 - self.beta1) * g;
                slot.v[j] = self.beta2 * slot.v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = slot.m[j] / c1;
                let v_hat = slot.v[j] / c2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
    pub val_mape: Option<f64>,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub eta: f64,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn spaced(items: &[usize], limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(n) if n < items.len() => (0..n).map(|i| items[i * items.len() / n]).collect(),
        _ => items.to_vec(),
    }
}

fn window_aux<'a>(state: &ModelState, w: &'a Window) -> Option<&'a Tensor> {
    (state.config.aux_dim > 0).then_some(&w.aux)
}

/// Loss and parameter gradients of one window, scaled by batch-wide counts.
fn window_gradients(
    state: &ModelState,
    w: &Window,
    teacher: bool,
    eta: f64,
    threshold: f64,
    counts: (usize, usize),
) -> Result<(f64, Vec<Option<Tensor>>), ModelError> {
    let mut s = Session::new(&state.store);
    let steps = state.config.horizon;
    let teacher = teacher.then_some(&w.target);
    let out = state.forward(&mut s, &w.history, window_aux(state, w), steps, teacher, None)?;
    let actual = w.target.clone();
    let mut total = scaled_loss(&mut s, out.graph, &actual, eta, threshold, counts.0, counts.1)?;
    if let Some(node) = out.node {
        let extra = scaled_loss(&mut s, node, &actual, eta, threshold, counts.0, counts.1)?;
        total = s.add(total, extra)?;
    }
    let value = s.value(total).item();
    s.backward(total)?;
    Ok((value, s.param_grads()))
}

fn add_grads(acc: &mut Vec<Option<Tensor>>, grads: Vec<Option<Tensor>>) {
    if acc.is_empty() {
        *acc = grads;
        return;
    }
    for (a, g) in acc.iter_mut().zip(grads) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.add_assign(&g),
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
}

/// Autoregressive forecasts over the windows ending in `segments`.
pub fn evaluate(
    state: &ModelState,
    series: &GraphSignalSeries,
    segments: &[Range<usize>],
    threshold: f64,
    limit: Option<usize>,
) -> Result<MetricsBundle, TrainError> {
    let positions = spaced(&window_positions(&state.template, segments), limit);
    if positions.is_empty() {
        return Err(TrainError::Contract("no complete windows to evaluate".into()));
    }
    let steps = state.config.horizon;
    let accs: Vec<Vec<MetricsAccumulator>> = positions
        .par_iter()
        .map(|&t| {
            let w = build_window(series, &state.template, t);
            let r = state.forecast(&w.history, window_aux(state, &w), steps, None)?;
            let mut per = vec![MetricsAccumulator::default(); steps];
            for (k, acc) in per.iter_mut().enumerate() {
                for i in 0..w.target.rows() {
                    acc.add(r.predictions.get(k, i), w.target.get(i, k), threshold);
                }
            }
            Ok(per)
        })
        .collect::<Result<_, ModelError>>()?;
    let mut per = vec![MetricsAccumulator::default(); steps];
    for window in &accs {
        for (a, b) in per.iter_mut().zip(window) {
            a.merge(b);
        }
    }
    bundle_from(&per)
}

/// Builds a state for the data and fits its normalizer on the training rows.
pub fn prepare_state(
    config: ModelConfig,
    graph: crate::graph::DependencyGraph,
    template: crate::data::WindowTemplate,
    series: &GraphSignalSeries,
    splits: &Splits,
    seed: u64,
) -> Result<ModelState, TrainError> {
    if series.n_nodes() != config.n_nodes || series.aux_dim() != config.aux_dim {
        return Err(TrainError::Config(format!(
            "data has N={} A={}, config has N={} A={}",
            series.n_nodes(),
            series.aux_dim(),
            config.n_nodes,
            config.aux_dim
        )));
    }
    let mut state = ModelState::new(config, graph, template, seed)?;
    let values = Splits::gather(series, &splits.train);
    let mut aux_rows = Vec::new();
    for seg in &splits.train {
        for r in seg.clone() {
            aux_rows.extend_from_slice(series.aux.row_values(r));
        }
    }
    let aux = Tensor::from_vec(values.rows(), series.aux_dim(), aux_rows).map_err(ModelError::from)?;
    state.fit_normalizer(&values, &aux)?;
    Ok(state)
}

/// Trains with Adam and returns the state with the lowest validation loss.
pub fn train(
    mut state: ModelState,
    series: &GraphSignalSeries,
    splits: &Splits,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainHistory), TrainError> {
    cfg.validate()?;
    if series.n_nodes() != state.config.n_nodes || series.aux_dim() != state.config.aux_dim {
        return Err(TrainError::Config("series does not match the model's N and A".into()));
    }
    let train_pos = window_positions(&state.template, &splits.train);
    if train_pos.is_empty() {
        return Err(TrainError::Config("training split has no complete window".into()));
    }
    let val_pos = spaced(&window_positions(&state.template, &splits.val), cfg.val_windows);
    let threshold = cfg.mape_threshold;
    let eta = match cfg.eta {
        Some(e) => e,
        None => {
            let sample: Vec<Window> =
                spaced(&train_pos, Some(512)).into_iter().map(|t| build_window(series, &state.template, t)).collect();
            calibrate_eta(&sample, threshold)?
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&state.store, cfg.learning_rate);
    let steps_per_epoch = cfg.steps_per_epoch.unwrap_or(train_pos.len().div_ceil(cfg.batch)).max(1);
    let mut order = train_pos.clone();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let n = state.config.n_nodes;
    let horizon = state.config.horizon;
    for epoch in 1..=cfg.epochs {
        let mut epoch_loss = 0.0;
        for step in 1..=steps_per_epoch {
            let mut batch = Vec::with_capacity(cfg.batch);
            while batch.len() < cfg.batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let windows: Vec<Window> = batch.iter().map(|&t| build_window(series, &state.template, t)).collect();
            let mape_count =
                windows.iter().map(|w| w.target.data().iter().filter(|a| mape_qualifies(**a, threshold)).count()).sum();
            let counts = (windows.len() * n * horizon, mape_count);
            let diverged = |detail: String| TrainError::Diverged { epoch, step, detail };
            let results: Vec<(f64, Vec<Option<Tensor>>)> = windows
                .par_iter()
                .map(|w| window_gradients(&state, w, cfg.teacher_forcing, eta, threshold, counts))
                .collect::<Result<_, _>>()
                .map_err(|e| match e {
                    ModelError::Autodiff(AutodiffError::NonFinite { op }) => diverged(format!("non-finite value in {op}")),
                    other => TrainError::Model(other),
                })?;
            let mut step_loss = 0.0;
            let mut grads = Vec::new();
            for (l, g) in results {
                step_loss += l;
                add_grads(&mut grads, g);
            }
            if !step_loss.is_finite() {
                return Err(diverged(format!("loss {step_loss}")));
            }
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(diverged("non-finite gradient".into()));
            }
            adam.step(&mut state.store, &grads);
            if state.store.iter().any(|(_, p)| !p.value.is_finite()) {
                return Err(diverged("non-finite parameter".into()));
            }
            epoch_loss += step_loss;
        }
        let train_loss = epoch_loss / steps_per_epoch as f64;
        let (val_rmse, val_mape, val_loss) = if val_pos.is_empty() {
            (f64::NAN, None, train_loss)
        } else {
            let segs: Vec<Range<usize>> = val_pos.iter().map(|&t| t..t + 1).collect();
            let m = evaluate_positions(&state, series, &segs, threshold)?;
            let loss = eta * m.rmse_all * m.rmse_all + m.mape.unwrap_or(0.0);
            (m.rmse_all, m.mape, loss)
        };
        if !val_loss.is_finite() {
            return Err(TrainError::Diverged { epoch, step: steps_per_epoch, detail: "non-finite validation loss".into() });
        }
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, state.store.clone()));
        }
        records.push(EpochRecord { epoch, train_loss, val_rmse, val_mape, val_loss });
    }
    let (_, best_epoch, store) = best.expect("at least one epoch ran");
    state.store = store;
    Ok((state, TrainHistory { eta, records, best_epoch }))
}

/// Overall metrics for windows whose current instants are the starts of `points`.
fn evaluate_positions(
    state: &ModelState,
    series: &GraphSignalSeries,
    points: &[Range<usize>],
    threshold: f64,
) -> Result<Metrics, TrainError> {
    let accs: Vec<MetricsAccumulator> = points
        .par_iter()
        .map(|r| {
            let w = build_window(series, &state.template, r.start);
            let out = state.forecast(&w.history, window_aux(state, &w), state.config.horizon, None)?;
            let mut acc = MetricsAccumulator::default();
            for k in 0..w.target.cols() {
                for i in 0..w.target.rows() {
                    acc.add(out.predictions.get(k, i), w.target.get(i, k), threshold);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_, ModelError>>()?;
    let mut total = MetricsAccumulator::default();
    accs.iter().for_each(|a| total.merge(a));
    total.finish()
}

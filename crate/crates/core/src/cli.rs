//! The `gsaf` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{AutodiffError, Tensor};
use crate::data::{
    format_timestamp, load_aux_table, load_series, load_series_with_aux, split, synth_planted_graph,
    synth_toy_pattern, write_aux_csv, write_matrix_csv, write_series_csv, DataError, GraphSignalSeries, PlantedSpec,
    SplitSpec, WindowTemplate,
};
use crate::graph::{learn_graph, DependencyGraph, GraphError, DEFAULT_THRESHOLD};
use crate::model::{write_atomic, ModelConfig, ModelError, ModelState};
use crate::training::{
    avg_normalized_error, configure_ablation, evaluate, prepare_state, train, AblationId, MetricsBundle, TrainConfig,
    TrainError,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "gsaf", version, about = "Graph sequence attention forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SynthKind {
    Toy,
    Planted,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a sparse GMRF to a series and write the thresholded dependency graph.
    LearnGraph {
        #[arg(long)]
        input: PathBuf,
        /// L1 penalty; 1% of the largest off-diagonal covariance when omitted.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic series.csv, aux.csv and truth.json.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        n_repeats: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 6)]
        n_nodes: usize,
        #[arg(long, default_value_t = 2000)]
        t_total: usize,
        #[arg(long, default_value_t = 0.3)]
        edge_density: f64,
        /// Comma-separated seasonal periods in steps.
        #[arg(long, value_delimiter = ',', default_value = "24")]
        periods: Vec<usize>,
        #[arg(long)]
        seasonal_amplitude: Option<f64>,
        #[arg(long)]
        aux_strength: Option<f64>,
    },
    /// Train a model and write the checkpoint with the best validation loss.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        aux: Option<PathBuf>,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value = "full", value_parser = parse_ablation)]
        ablation: AblationId,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Forecast the steps after the end of a series.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        aux: Option<PathBuf>,
        /// Number of steps; the model's horizon when omitted.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score autoregressive forecasts over every complete window of a series.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        aux: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Report of a reference model; adds avg_normalized_error.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 20.0)]
        mape_threshold: f64,
    },
    /// Dump decoder attention weights for one forecast query.
    InspectAttn {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        aux: Option<PathBuf>,
        /// Row index of the current instant in the input series.
        #[arg(long)]
        t: usize,
        /// Decoder step, 1-based.
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_ablation(s: &str) -> Result<AblationId, String> {
    s.parse()
}

/// Everything `train --config` reads.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub split: SplitSpec,
    /// Contiguous history of length `T` when absent.
    #[serde(default)]
    pub template: Option<WindowTemplate>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numerical(m) => m,
        }
    }
}

fn from_data(what: &str, e: DataError) -> CliError {
    CliError::Data(format!("{what}: {e}"))
}

fn from_graph(what: &str, e: GraphError) -> CliError {
    match e {
        GraphError::Numerical(_) => CliError::Numerical(format!("{what}: {e}")),
        GraphError::InvalidArgument(_) => CliError::Usage(format!("{what}: {e}")),
        GraphError::Data(_) => CliError::Data(format!("{what}: {e}")),
    }
}

fn from_model(what: &str, e: ModelError) -> CliError {
    match e {
        ModelError::Autodiff(AutodiffError::NonFinite { .. }) | ModelError::Graph(GraphError::Numerical(_)) => {
            CliError::Numerical(format!("{what}: {e}"))
        }
        _ => CliError::Data(format!("{what}: {e}")),
    }
}

fn from_train(what: &str, e: TrainError) -> CliError {
    match e {
        TrainError::Diverged { .. } => CliError::Numerical(format!("{what}: {e}")),
        TrainError::Model(m) => from_model(what, m),
        TrainError::Data(d) => from_data(what, d),
        other => CliError::Data(format!("{what}: {other}")),
    }
}

fn read_text(path: &Path, flag: &str) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{flag} {}: {e}", path.display())))
}

fn write_out(path: &Path, flag: &str, bytes: &[u8]) -> Result<(), CliError> {
    write_atomic(path, bytes).map_err(|e| CliError::Data(format!("{flag} {}: {e}", path.display())))
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Vec<u8> {
    let mut buf = Vec::new();
    f(&mut buf).expect("writing to memory does not fail");
    buf
}

fn load_data(data: &Path, aux: Option<&Path>, flag: &str) -> Result<GraphSignalSeries, CliError> {
    match aux {
        Some(a) => load_series_with_aux(data, a).map_err(|e| from_data(&format!("{flag}/--aux"), e)),
        None => load_series(data).map_err(|e| from_data(flag, e)),
    }
}

fn load_model(path: &Path) -> Result<ModelState, CliError> {
    ModelState::load(path).map_err(|e| from_model(&format!("--model {}", path.display()), e))
}

/// Series plus aux rows aligned to it, extended by any future aux rows in the file.
fn load_forecast_inputs(
    state: &ModelState,
    input: &Path,
    aux: Option<&Path>,
    future: usize,
) -> Result<(GraphSignalSeries, Option<Tensor>), CliError> {
    let series = load_series(input).map_err(|e| from_data("--input", e))?;
    if series.n_nodes() != state.config.n_nodes {
        return Err(CliError::Data(format!(
            "--input {}: {} node columns, model expects {}",
            input.display(),
            series.n_nodes(),
            state.config.n_nodes
        )));
    }
    if state.config.aux_dim == 0 {
        return Ok((series, None));
    }
    let Some(aux_path) = aux else {
        return if state.config.aux_active() {
            Err(CliError::Usage("--aux is required: the model uses auxiliary information".into()))
        } else {
            let zeros = Tensor::zeros(state.config.aux_dim, series.len() + future);
            Ok((series, Some(zeros)))
        };
    };
    let (ts, values, _) = load_aux_table(aux_path).map_err(|e| from_data("--aux", e))?;
    let at = |what: String| CliError::Data(format!("--aux {}: {what}", aux_path.display()));
    if values.cols() != state.config.aux_dim {
        return Err(at(format!("{} columns, model expects {}", values.cols(), state.config.aux_dim)));
    }
    let start = ts.iter().position(|t| *t == series.timestamps[0]).ok_or_else(|| at("no row for the first series timestamp".into()))?;
    let needed = series.len() + future;
    let available = ts.len() - start;
    if available < series.len() {
        return Err(at(format!("needs {} rows from the series start, found {available}", series.len())));
    }
    if available < needed {
        eprintln!(
            "warning: --aux {}: no rows after {}, holding the last row for {} future steps",
            aux_path.display(),
            format_timestamp(&ts[ts.len() - 1]),
            needed - available
        );
    }
    for (i, t) in series.timestamps.iter().enumerate() {
        if ts[start + i] != *t {
            return Err(at(format!("line {}: timestamp does not match the series", start + i + 2)));
        }
    }
    let mut aux_t = Tensor::zeros(state.config.aux_dim, needed);
    for r in 0..needed {
        for c in 0..values.cols() {
            aux_t.set(c, r, values.get((start + r).min(ts.len() - 1), c));
        }
    }
    Ok((series, Some(aux_t)))
}

/// History and aux columns for a forecast from row `t`.
fn query_inputs(state: &ModelState, series: &GraphSignalSeries, aux: Option<&Tensor>, t: usize, steps: usize) -> Result<(Tensor, Option<Tensor>), CliError> {
    let tpl = &state.template;
    if (t as isize + tpl.min_offset()) < 0 || t >= series.len() {
        return Err(CliError::Usage(format!(
            "--t {t}: history needs rows back to offset {} within {} rows",
            tpl.min_offset(),
            series.len()
        )));
    }
    let n = series.n_nodes();
    let mut hist = Tensor::zeros(n, tpl.history_len());
    for (c, off) in tpl.offsets.iter().enumerate() {
        let row = (t as isize + off) as usize;
        for i in 0..n {
            hist.set(i, c, series.values.get(row, i));
        }
    }
    let aux = aux.map(|a| {
        let mut out = Tensor::zeros(a.rows(), tpl.history_len() + tpl.horizon);
        for (c, off) in tpl.offsets.iter().enumerate() {
            let col = (t as isize + off) as usize;
            for j in 0..a.rows() {
                out.set(j, c, a.get(j, col));
            }
        }
        for k in 0..steps {
            for j in 0..a.rows() {
                out.set(j, tpl.history_len() + k, a.get(j, t + 1 + k));
            }
        }
        out
    });
    Ok((hist, aux))
}

pub fn config_hash(state: &ModelState) -> String {
    let text = serde_json::to_string(&(&state.config, &state.template)).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Serialize, Deserialize)]
struct Report {
    overall: crate::training::Metrics,
    per_horizon: Vec<crate::training::Metrics>,
    config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    avg_normalized_error: Option<f64>,
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s.into_bytes()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite()).map(|x| x.to_string()).unwrap_or_default()
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::LearnGraph { input, lambda, threshold, out } => {
            let series = load_series(&input).map_err(|e| from_data("--input", e))?;
            if let Some(l) = lambda {
                if !(l >= 0.0) || !l.is_finite() {
                    return Err(CliError::Usage(format!("--lambda {l}: must be finite and non-negative")));
                }
            }
            if !(threshold >= 0.0) {
                return Err(CliError::Usage(format!("--threshold {threshold}: must be non-negative")));
            }
            let graph = learn_graph(&series, lambda, threshold).map_err(|e| from_graph(&format!("--input {}", input.display()), e))?;
            let mut text = graph.to_json();
            text.push('\n');
            write_out(&out, "--out", text.as_bytes())
        }
        Command::Synth { kind, out, seed, n_repeats, noise, n_nodes, t_total, edge_density, periods, seasonal_amplitude, aux_strength } => {
            std::fs::create_dir_all(&out).map_err(|e| CliError::Data(format!("--out {}: {e}", out.display())))?;
            let (series, truth) = match kind {
                SynthKind::Toy => {
                    let toy = synth_toy_pattern(n_repeats, noise, seed).map_err(|e| CliError::Usage(format!("--n-repeats/--noise: {e}")))?;
                    let truth = serde_json::json!({
                        "kind": "toy",
                        "match_positions": toy.match_positions,
                        "occurrences": toy.occurrences,
                        "current": toy.current,
                    });
                    (toy.series, truth)
                }
                SynthKind::Planted => {
                    let mut spec = PlantedSpec::new(n_nodes, t_total, edge_density, periods, noise, seed);
                    if let Some(a) = seasonal_amplitude {
                        spec.seasonal_amplitude = a;
                    }
                    if let Some(a) = aux_strength {
                        spec.aux_strength = a;
                    }
                    let (series, graph) = synth_planted_graph(&spec).map_err(|e| CliError::Usage(format!("synth: {e}")))?;
                    let truth = serde_json::json!({ "kind": "planted", "spec": spec, "graph": graph });
                    (series, truth)
                }
            };
            write_out(&out.join("series.csv"), "--out", &csv_bytes(|b| write_series_csv(b, &series)))?;
            write_out(&out.join("aux.csv"), "--out", &csv_bytes(|b| write_aux_csv(b, &series)))?;
            write_out(&out.join("truth.json"), "--out", &json_bytes(&truth))
        }
        Command::Train { config, data, aux, graph, ablation, seed, out, log } => {
            let run: RunConfig = serde_json::from_str(&read_text(&config, "--config")?)
                .map_err(|e| CliError::Data(format!("--config {}: {e}", config.display())))?;
            let series = load_data(&data, aux.as_deref(), "--data")?;
            let graph_json = read_text(&graph, "--graph")?;
            let graph = DependencyGraph::from_json(&graph_json).map_err(|e| from_graph(&format!("--graph {}", graph.display()), e))?;
            let model_cfg = configure_ablation(ablation, &run.model);
            let template = match run.template.clone() {
                Some(t) => t,
                None => WindowTemplate::contiguous(model_cfg.history, model_cfg.horizon).map_err(|e| from_data("--config template", e))?,
            };
            let mut tc = run.train.clone();
            if let Some(s) = seed {
                tc.seed = s;
            }
            let splits = split(&series, &run.split).map_err(|e| from_data("--config split", e))?;
            let state = prepare_state(model_cfg, graph, template, &series, &splits, tc.seed).map_err(|e| from_train("--config", e))?;
            let (state, history) = train(state, &series, &splits, &tc).map_err(|e| from_train("train", e))?;
            write_out(&out, "--out", &state.to_bytes())?;
            if let Some(log) = log {
                let bytes = csv_bytes(|b| {
                    let mut w = csv::Writer::from_writer(b);
                    w.write_record(["epoch", "train_loss", "val_rmse", "val_mape"])?;
                    for r in &history.records {
                        w.write_record([r.epoch.to_string(), r.train_loss.to_string(), fmt_opt(Some(r.val_rmse)), fmt_opt(r.val_mape)])?;
                    }
                    w.flush()
                });
                write_out(&log, "--log", &bytes)?;
            }
            Ok(())
        }
        Command::Predict { model, input, aux, horizon, out } => {
            let state = load_model(&model)?;
            let steps = horizon.unwrap_or(state.config.horizon);
            if steps == 0 || steps > state.config.horizon {
                return Err(CliError::Usage(format!("--horizon {steps}: must lie in 1..={}", state.config.horizon)));
            }
            let (series, aux_t) = load_forecast_inputs(&state, &input, aux.as_deref(), steps)?;
            let t = series.len() - 1;
            let (hist, aux_q) = query_inputs(&state, &series, aux_t.as_ref(), t, steps)?;
            let report = state.forecast(&hist, aux_q.as_ref(), steps, None).map_err(|e| from_model("predict", e))?;
            let step = series.step().unwrap_or(chrono::Duration::hours(1));
            let ts: Vec<DateTime<Utc>> = (1..=steps).map(|k| series.timestamps[t] + step * k as i32).collect();
            let bytes = csv_bytes(|b| write_matrix_csv(b, &ts, &series.node_names, &report.predictions));
            write_out(&out, "--out", &bytes)
        }
        Command::Evaluate { model, data, aux, report, reference, mape_threshold } => {
            let state = load_model(&model)?;
            let series = load_data(&data, aux.as_deref(), "--data")?;
            if series.n_nodes() != state.config.n_nodes || series.aux_dim() != state.config.aux_dim {
                return Err(CliError::Data(format!(
                    "--data {}: N={} A={}, model has N={} A={}",
                    data.display(),
                    series.n_nodes(),
                    series.aux_dim(),
                    state.config.n_nodes,
                    state.config.aux_dim
                )));
            }
            let bundle: MetricsBundle =
                evaluate(&state, &series, &[0..series.len()], mape_threshold, None).map_err(|e| from_train(&format!("--data {}", data.display()), e))?;
            let mut rep = Report { overall: bundle.overall, per_horizon: bundle.per_horizon, config_hash: config_hash(&state), avg_normalized_error: None };
            if let Some(r) = reference {
                let other: Report = serde_json::from_str(&read_text(&r, "--reference")?)
                    .map_err(|e| CliError::Data(format!("--reference {}: {e}", r.display())))?;
                let ane = avg_normalized_error(&rep.overall, &other.overall).map_err(|e| CliError::Data(format!("--reference {}: {e}", r.display())))?;
                rep.avg_normalized_error = Some(ane);
            }
            write_out(&report, "--report", &json_bytes(&rep))
        }
        Command::InspectAttn { model, input, aux, t, k, out } => {
            let state = load_model(&model)?;
            if k == 0 || k > state.config.horizon {
                return Err(CliError::Usage(format!("--k {k}: must lie in 1..={}", state.config.horizon)));
            }
            let series = load_series(&input).map_err(|e| from_data("--input", e))?;
            if t >= series.len() {
                return Err(CliError::Usage(format!("--t {t}: input has {} rows", series.len())));
            }
            let future = (t + k + 1).saturating_sub(series.len());
            let (series, aux_t) = load_forecast_inputs(&state, &input, aux.as_deref(), future)?;
            let (hist, aux_q) = query_inputs(&state, &series, aux_t.as_ref(), t, k)?;
            let report = state.forecast(&hist, aux_q.as_ref(), k, Some(k)).map_err(|e| from_model("inspect-attn", e))?;
            let trace = report.trace.unwrap_or_default();
            let bytes = csv_bytes(|b| {
                let mut w = csv::Writer::from_writer(b);
                w.write_record(["layer", "head", "target_offset", "source_offset", "score", "alpha"])?;
                for row in &trace.rows {
                    for ((src, score), alpha) in row.sources.iter().zip(&row.scores).zip(&row.alphas) {
                        w.write_record([
                            row.layer.to_string(),
                            row.head.to_string(),
                            row.target_offset.to_string(),
                            src.to_string(),
                            score.to_string(),
                            alpha.to_string(),
                        ])?;
                    }
                }
                w.flush()
            });
            write_out(&out, "--out", &bytes)
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.code()
        }
    }
}

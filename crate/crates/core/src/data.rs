//! Series ingestion, splitting, history windows and synthetic generators.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, TimeZone, Utc};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::graph::{partial_correlations_of, DependencyGraph};

pub const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("{file}: {detail}")]
    File { file: String, detail: String },
    #[error("{file}: line {line}: {detail}")]
    Row { file: String, line: usize, detail: String },
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("split configuration: {0}")]
    Split(String),
}

/// Graph signals over time plus the auxiliary series sampled at the same instants.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSignalSeries {
    pub timestamps: Vec<DateTime<Utc>>,
    /// `T x N`, one row per instant.
    pub values: Tensor,
    /// `T x A`; `A` may be zero.
    pub aux: Tensor,
    pub node_names: Vec<String>,
    pub aux_names: Vec<String>,
}

impl GraphSignalSeries {
    pub fn new(
        timestamps: Vec<DateTime<Utc>>,
        values: Tensor,
        aux: Tensor,
        node_names: Vec<String>,
        aux_names: Vec<String>,
    ) -> Result<Self, DataError> {
        let t = timestamps.len();
        if values.rows() != t || aux.rows() != t {
            return Err(DataError::Invalid(format!(
                "{} timestamps, {} value rows, {} aux rows",
                t,
                values.rows(),
                aux.rows()
            )));
        }
        if values.cols() == 0 {
            return Err(DataError::Invalid("series needs at least one node".into()));
        }
        if node_names.len() != values.cols() || aux_names.len() != aux.cols() {
            return Err(DataError::Invalid("column names do not match column counts".into()));
        }
        if !values.is_finite() || !aux.is_finite() {
            return Err(DataError::Invalid("non-finite entry".into()));
        }
        check_uniform(&timestamps).map_err(|(row, detail)| DataError::Invalid(format!("row {row}: {detail}")))?;
        Ok(GraphSignalSeries { timestamps, values, aux, node_names, aux_names })
    }

    /// Series on an evenly spaced clock with default column names.
    pub fn from_values(start: DateTime<Utc>, step: Duration, values: Tensor, aux: Tensor) -> Result<Self, DataError> {
        let timestamps = (0..values.rows()).map(|i| start + step * i as i32).collect();
        let node_names = (0..values.cols()).map(|i| format!("node_{i}")).collect();
        let aux_names = (0..aux.cols()).map(|i| format!("aux_{i}")).collect();
        GraphSignalSeries::new(timestamps, values, aux, node_names, aux_names)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_nodes(&self) -> usize {
        self.values.cols()
    }

    pub fn aux_dim(&self) -> usize {
        self.aux.cols()
    }

    pub fn step(&self) -> Option<Duration> {
        (self.len() >= 2).then(|| self.timestamps[1] - self.timestamps[0])
    }

    pub fn slice(&self, rows: Range<usize>) -> GraphSignalSeries {
        let take = |m: &Tensor| {
            let data = m.data()[rows.start * m.cols()..rows.end * m.cols()].to_vec();
            Tensor::from_vec(rows.len(), m.cols(), data).expect("row slice has consistent size")
        };
        GraphSignalSeries {
            timestamps: self.timestamps[rows.clone()].to_vec(),
            values: take(&self.values),
            aux: take(&self.aux),
            node_names: self.node_names.clone(),
            aux_names: self.aux_names.clone(),
        }
    }
}

fn check_uniform(ts: &[DateTime<Utc>]) -> Result<(), (usize, String)> {
    if ts.len() < 2 {
        return Ok(());
    }
    let step = ts[1] - ts[0];
    if step <= Duration::zero() {
        return Err((1, "timestamps must be strictly increasing".into()));
    }
    for i in 2..ts.len() {
        if ts[i] - ts[i - 1] != step {
            return Err((i, format!("time step {} differs from {}", ts[i] - ts[i - 1], step)));
        }
    }
    Ok(())
}

pub fn parse_timestamp(text: &str) -> Option<DateTime<Utc>> {
    let text = text.trim();
    if let Ok(t) = DateTime::parse_from_rfc3339(text) {
        return Some(t.with_timezone(&Utc));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(text, fmt) {
            return Some(Utc.from_utc_datetime(&t));
        }
    }
    NaiveDate::parse_from_str(text, "%Y-%m-%d").ok().map(|d| Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0).unwrap()))
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.format(TIMESTAMP_FORMAT).to_string()
}

struct Table {
    timestamps: Vec<DateTime<Utc>>,
    names: Vec<String>,
    values: Tensor,
}

fn read_table(reader: impl Read, file: &str, allow_empty_columns: bool) -> Result<Table, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| DataError::File { file: file.into(), detail: e.to_string() })?.clone();
    if header.is_empty() || header.get(0).map(str::trim) != Some("timestamp") {
        return Err(DataError::Row { file: file.into(), line: 1, detail: "header must start with `timestamp`".into() });
    }
    let names: Vec<String> = header.iter().skip(1).map(|s| s.trim().to_string()).collect();
    if names.is_empty() && !allow_empty_columns {
        return Err(DataError::Row { file: file.into(), line: 1, detail: "no node columns".into() });
    }
    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| DataError::Row { file: file.into(), line, detail: e.to_string() })?;
        if rec.len() != names.len() + 1 {
            return Err(DataError::Row {
                file: file.into(),
                line,
                detail: format!("{} cells, expected {}", rec.len(), names.len() + 1),
            });
        }
        let ts = parse_timestamp(&rec[0])
            .ok_or_else(|| DataError::Row { file: file.into(), line, detail: format!("bad timestamp `{}`", &rec[0]) })?;
        for (c, cell) in rec.iter().skip(1).enumerate() {
            let cell = cell.trim();
            if cell.is_empty() {
                return Err(DataError::Row { file: file.into(), line, detail: format!("missing value in column `{}`", names[c]) });
            }
            let v: f64 = cell
                .parse()
                .map_err(|_| DataError::Row { file: file.into(), line, detail: format!("bad number `{cell}`") })?;
            if !v.is_finite() {
                return Err(DataError::Row { file: file.into(), line, detail: format!("non-finite value in column `{}`", names[c]) });
            }
            data.push(v);
        }
        timestamps.push(ts);
    }
    if let Err((row, detail)) = check_uniform(&timestamps) {
        return Err(DataError::Row { file: file.into(), line: row + 2, detail });
    }
    let values = Tensor::from_vec(timestamps.len(), names.len(), data).expect("row lengths checked");
    Ok(Table { timestamps, names, values })
}

fn open(path: &Path) -> Result<std::fs::File, DataError> {
    std::fs::File::open(path).map_err(|e| DataError::File { file: path.display().to_string(), detail: e.to_string() })
}

/// Reads `timestamp,node_0,...` without auxiliary columns.
pub fn load_series(path: &Path) -> Result<GraphSignalSeries, DataError> {
    let file = path.display().to_string();
    let table = read_table(open(path)?, &file, false)?;
    let t = table.timestamps.len();
    GraphSignalSeries::new(table.timestamps, table.values, Tensor::zeros(t, 0), table.names, Vec::new())
}

/// Reads a series and the auxiliary file that must share its timestamps.
pub fn load_series_with_aux(path: &Path, aux_path: &Path) -> Result<GraphSignalSeries, DataError> {
    let series = load_series(path)?;
    let aux_file = aux_path.display().to_string();
    let aux = read_table(open(aux_path)?, &aux_file, true)?;
    attach_aux(series, aux, &aux_file)
}

fn attach_aux(series: GraphSignalSeries, aux: Table, aux_file: &str) -> Result<GraphSignalSeries, DataError> {
    for (i, ts) in series.timestamps.iter().enumerate() {
        match aux.timestamps.get(i) {
            Some(a) if a == ts => {}
            Some(a) => {
                return Err(DataError::Row {
                    file: aux_file.into(),
                    line: i + 2,
                    detail: format!("timestamp {} does not match series timestamp {}", format_timestamp(a), format_timestamp(ts)),
                })
            }
            None => {
                return Err(DataError::Row {
                    file: aux_file.into(),
                    line: i + 2,
                    detail: format!("missing row for series timestamp {}", format_timestamp(ts)),
                })
            }
        }
    }
    if aux.timestamps.len() != series.len() {
        return Err(DataError::Row {
            file: aux_file.into(),
            line: series.len() + 2,
            detail: format!("{} aux rows for {} series rows", aux.timestamps.len(), series.len()),
        });
    }
    GraphSignalSeries::new(series.timestamps, series.values, aux.values, series.node_names, aux.names)
}

/// Auxiliary table that may extend past the series end.
pub fn load_aux_table(path: &Path) -> Result<(Vec<DateTime<Utc>>, Tensor, Vec<String>), DataError> {
    let table = read_table(open(path)?, &path.display().to_string(), true)?;
    Ok((table.timestamps, table.values, table.names))
}

/// Parses series and aux CSV text held in memory.
pub fn parse_series(series_csv: &str, aux_csv: Option<&str>) -> Result<GraphSignalSeries, DataError> {
    let table = read_table(series_csv.as_bytes(), "series", false)?;
    let t = table.timestamps.len();
    let series = GraphSignalSeries::new(table.timestamps, table.values, Tensor::zeros(t, 0), table.names, Vec::new())?;
    match aux_csv {
        Some(text) => attach_aux(series, read_table(text.as_bytes(), "aux", true)?, "aux"),
        None => Ok(series),
    }
}

fn write_table(w: impl Write, ts: &[DateTime<Utc>], names: &[String], values: &Tensor) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["timestamp".to_string()];
    header.extend(names.iter().cloned());
    wtr.write_record(&header)?;
    for (r, t) in ts.iter().enumerate() {
        let mut row = vec![format_timestamp(t)];
        row.extend(values.row_values(r).iter().map(|v| v.to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush()
}

pub fn write_series_csv(w: impl Write, series: &GraphSignalSeries) -> std::io::Result<()> {
    write_table(w, &series.timestamps, &series.node_names, &series.values)
}

pub fn write_aux_csv(w: impl Write, series: &GraphSignalSeries) -> std::io::Result<()> {
    write_table(w, &series.timestamps, &series.aux_names, &series.aux)
}

/// Writes a matrix with its own timestamps, e.g. a forecast.
pub fn write_matrix_csv(w: impl Write, ts: &[DateTime<Utc>], names: &[String], values: &Tensor) -> std::io::Result<()> {
    write_table(w, ts, names, values)
}

/// Half-open time interval; a date-only end includes that whole day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: String,
    pub end: String,
}

impl DateRange {
    fn bounds(&self) -> Result<(DateTime<Utc>, DateTime<Utc>), DataError> {
        let start = parse_timestamp(&self.start).ok_or_else(|| DataError::Split(format!("bad start `{}`", self.start)))?;
        let end = if let Ok(d) = NaiveDate::parse_from_str(self.end.trim(), "%Y-%m-%d") {
            Utc.from_utc_datetime(&d.and_hms_opt(0, 0, 0).unwrap()) + Duration::days(1)
        } else {
            parse_timestamp(&self.end).ok_or_else(|| DataError::Split(format!("bad end `{}`", self.end)))? + Duration::seconds(1)
        };
        Ok((start, end))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSpec {
    Fractions { train: f64, val: f64, test: f64 },
    Ranges { train: Vec<DateRange>, val: Vec<DateRange>, test: Vec<DateRange> },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions { train: 0.7, val: 0.1, test: 0.2 }
    }
}

/// Row segments of each part of a split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Range<usize>>,
    pub val: Vec<Range<usize>>,
    pub test: Vec<Range<usize>>,
}

impl Splits {
    pub fn sub_series(series: &GraphSignalSeries, segments: &[Range<usize>]) -> Vec<GraphSignalSeries> {
        segments.iter().map(|r| series.slice(r.clone())).collect()
    }

    /// Rows of all segments stacked, used for statistics that ignore time order.
    pub fn gather(series: &GraphSignalSeries, segments: &[Range<usize>]) -> Tensor {
        let n = series.n_nodes();
        let mut data = Vec::new();
        let mut rows = 0;
        for seg in segments {
            for r in seg.clone() {
                data.extend_from_slice(series.values.row_values(r));
                rows += 1;
            }
        }
        Tensor::from_vec(rows, n, data).expect("gathered rows have node width")
    }
}

pub fn split(series: &GraphSignalSeries, spec: &SplitSpec) -> Result<Splits, DataError> {
    let t = series.len();
    let splits = match spec {
        SplitSpec::Fractions { train, val, test } => {
            let parts = [*train, *val, *test];
            if parts.iter().any(|f| !(*f >= 0.0) || !f.is_finite()) {
                return Err(DataError::Split("fractions must be finite and non-negative".into()));
            }
            if train + val + test > 1.0 + 1e-9 {
                return Err(DataError::Split(format!("fractions sum to {} > 1", train + val + test)));
            }
            let a = (train * t as f64).round() as usize;
            let b = ((train + val) * t as f64).round() as usize;
            let c = (((train + val + test) * t as f64).round() as usize).min(t);
            let seg = |r: Range<usize>| if r.is_empty() { vec![] } else { vec![r] };
            Splits { train: seg(0..a), val: seg(a..b), test: seg(b..c) }
        }
        SplitSpec::Ranges { train, val, test } => {
            let resolve = |ranges: &[DateRange]| -> Result<Vec<Range<usize>>, DataError> {
                let mut out = Vec::new();
                for r in ranges {
                    let (s, e) = r.bounds()?;
                    if e <= s {
                        return Err(DataError::Split(format!("range {}..{} is empty", r.start, r.end)));
                    }
                    let lo = series.timestamps.partition_point(|x| *x < s);
                    let hi = series.timestamps.partition_point(|x| *x < e);
                    if hi > lo {
                        out.push(lo..hi);
                    }
                }
                Ok(out)
            };
            let splits = Splits { train: resolve(train)?, val: resolve(val)?, test: resolve(test)? };
            let mut all: Vec<Range<usize>> = splits.train.iter().chain(&splits.val).chain(&splits.test).cloned().collect();
            all.sort_by_key(|r| r.start);
            for pair in all.windows(2) {
                if pair[1].start < pair[0].end {
                    return Err(DataError::Split(format!("rows {:?} and {:?} overlap", pair[0], pair[1])));
                }
            }
            splits
        }
    };
    if splits.test.is_empty() {
        return Err(DataError::Split("test range is empty".into()));
    }
    if splits.train.is_empty() {
        return Err(DataError::Split("train range is empty".into()));
    }
    Ok(splits)
}

/// History offsets relative to the current instant plus the horizon.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowTemplate {
    pub offsets: Vec<isize>,
    pub horizon: usize,
}

impl WindowTemplate {
    pub fn new(mut offsets: Vec<isize>, horizon: usize) -> Result<Self, DataError> {
        offsets.sort_unstable();
        offsets.dedup();
        if offsets.is_empty() {
            return Err(DataError::Invalid("template needs at least one offset".into()));
        }
        if *offsets.last().unwrap() > 0 {
            return Err(DataError::Invalid("history offsets must not be positive".into()));
        }
        if horizon == 0 {
            return Err(DataError::Invalid("horizon must be at least 1".into()));
        }
        Ok(WindowTemplate { offsets, horizon })
    }

    /// The last `len` instants.
    pub fn contiguous(len: usize, horizon: usize) -> Result<Self, DataError> {
        WindowTemplate::new((0..len as isize).map(|i| i - len as isize + 1).collect(), horizon)
    }

    /// Hourly template: the past week plus matching hours of the past four weeks.
    pub fn hourly_weekly(horizon: usize) -> Self {
        let mut offs = Vec::new();
        for j in 0..=6isize {
            offs.extend((-23..=0).map(|i| i - j * 24));
        }
        for j in 2..=4isize {
            offs.extend((-18..=5).map(|i| i - j * 24 * 7));
        }
        offs.extend((-18..=0).map(|i| i - 24 * 7));
        WindowTemplate::new(offs, horizon).expect("static template is valid")
    }

    /// Five-minute template: the past hour, the past week, and the same weekday of the past four weeks.
    pub fn five_minute_weekly(horizon: usize) -> Self {
        let mut offs: Vec<isize> = (-11..=0).collect();
        for j in 1..=6isize {
            offs.extend((-11..=18).map(|i| i - j * 24 * 12));
        }
        for j in 1..=4isize {
            offs.extend((-11..=18).map(|i| i - j * 7 * 24 * 12));
        }
        WindowTemplate::new(offs, horizon).expect("static template is valid")
    }

    pub fn history_len(&self) -> usize {
        self.offsets.len()
    }

    pub fn min_offset(&self) -> isize {
        self.offsets[0]
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    /// Row index of the current instant `t`.
    pub t: usize,
    /// `N x T`, columns in template order.
    pub history: Tensor,
    /// `A x (T + T')`: aux at the history instants, then at `t+1 ..= t+T'`.
    pub aux: Tensor,
    /// `N x T'`.
    pub target: Tensor,
}

/// Current instants whose whole history and horizon fall inside one segment.
pub fn window_positions(template: &WindowTemplate, segments: &[Range<usize>]) -> Vec<usize> {
    let back = (-template.min_offset()) as usize;
    let mut out = Vec::new();
    for seg in segments {
        let first = seg.start + back;
        if seg.end < template.horizon + 1 {
            continue;
        }
        let last_exclusive = seg.end - template.horizon;
        out.extend(first..last_exclusive.max(first));
    }
    out
}

pub fn build_window(series: &GraphSignalSeries, template: &WindowTemplate, t: usize) -> Window {
    let n = series.n_nodes();
    let a = series.aux_dim();
    let th = template.history_len();
    let tp = template.horizon;
    let mut history = Tensor::zeros(n, th);
    let mut aux = Tensor::zeros(a, th + tp);
    for (c, off) in template.offsets.iter().enumerate() {
        let row = (t as isize + off) as usize;
        for i in 0..n {
            history.set(i, c, series.values.get(row, i));
        }
        for j in 0..a {
            aux.set(j, c, series.aux.get(row, j));
        }
    }
    let mut target = Tensor::zeros(n, tp);
    for k in 0..tp {
        let row = t + 1 + k;
        for i in 0..n {
            target.set(i, k, series.values.get(row, i));
        }
        for j in 0..a {
            aux.set(j, th + k, series.aux.get(row, j));
        }
    }
    Window { t, history, aux, target }
}

/// Windows whose every offset lies inside the same segment; others are skipped.
pub fn extract_windows<'a>(
    series: &'a GraphSignalSeries,
    template: &'a WindowTemplate,
    segments: &[Range<usize>],
) -> impl Iterator<Item = Window> + 'a {
    window_positions(template, segments).into_iter().map(move |t| build_window(series, template, t))
}

/// Values of the recurring motif on the 256-point grid, labelled `a ..= r`.
///
/// High nibbles never repeat in a short cycle, and low nibbles sit where a
/// few grid steps of noise leave bit 3 and everything above it intact.
pub const TOY_MOTIF: [u8; 18] =
    [0x3b, 0x94, 0x53, 0xf4, 0x1c, 0xa3, 0x64, 0x03, 0x2b, 0xbc, 0x7b, 0x93, 0x3c, 0x54, 0xa4, 0x03, 0x63, 0xcb];
/// Value that follows `r` in every completed occurrence: the bitwise complement of `r`.
pub const TOY_JUMP: u8 = 0x34;
const TOY_GAP_NIBBLES: [u8; 5] = [0x1, 0x2, 0x3, 0x7, 0xb];

pub const TOY_BITS: usize = 8;

/// Nearest grid level `k` in `0..=255` for a value in `[0, 1)`.
pub fn quantize(x: f64) -> u8 {
    (x * 256.0).round().clamp(0.0, 255.0) as u8
}

/// `±1` bits of the grid level, most significant first.
pub fn encode_bits(x: f64) -> [f64; TOY_BITS] {
    let k = quantize(x);
    let mut e = [0.0; TOY_BITS];
    for (i, bit) in e.iter_mut().enumerate() {
        *bit = if k & (0x80 >> i) != 0 { 1.0 } else { -1.0 };
    }
    e
}

/// `Σ ((e_i + 1)/2) 2^{-i}`.
pub fn decode_bits(e: &[f64]) -> f64 {
    e.iter().enumerate().map(|(i, b)| (b + 1.0) / 2.0 * 2f64.powi(-(i as i32 + 1))).sum()
}

#[derive(Clone, Debug)]
pub struct ToyPattern {
    pub series: GraphSignalSeries,
    /// Row of the jump value after each completed occurrence.
    pub match_positions: Vec<usize>,
    /// Row of the last value, the final occurrence's `r`.
    pub current: usize,
    /// First row of every occurrence.
    pub occurrences: Vec<usize>,
}

/// Single-node series in which the motif recurs after random gaps.
///
/// All occurrences except the last end with the jump; the last stops at `r`,
/// so the value to predict next is the jump.
pub fn synth_toy_pattern(n_repeats: usize, noise: f64, seed: u64) -> Result<ToyPattern, DataError> {
    if n_repeats < 2 {
        return Err(DataError::Invalid(format!("need at least 2 repeats, got {n_repeats}")));
    }
    if !(noise >= 0.0) {
        return Err(DataError::Invalid(format!("noise must be non-negative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut levels: Vec<u8> = Vec::new();
    let gap = |rng: &mut ChaCha8Rng, levels: &mut Vec<u8>, len: usize| {
        for _ in 0..len {
            let hi = TOY_GAP_NIBBLES[rng.random_range(0..TOY_GAP_NIBBLES.len())];
            levels.push((hi << 4) | rng.random_range(0..16u8));
        }
    };
    let lead = rng.random_range(12..=18);
    gap(&mut rng, &mut levels, lead);
    let mut match_positions = Vec::new();
    let mut occurrences = Vec::new();
    for rep in 0..n_repeats {
        occurrences.push(levels.len());
        levels.extend_from_slice(&TOY_MOTIF);
        if rep + 1 < n_repeats {
            match_positions.push(levels.len());
            levels.push(TOY_JUMP);
            let len = rng.random_range(4..=14);
            gap(&mut rng, &mut levels, len);
        }
    }
    let values: Vec<f64> = levels
        .iter()
        .map(|&k| {
            let z: f64 = rng.sample(StandardNormal);
            k as f64 / 256.0 + noise * z
        })
        .collect();
    let t = values.len();
    let series = GraphSignalSeries::from_values(
        Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap(),
        Duration::hours(1),
        Tensor::from_vec(t, 1, values).expect("single column"),
        Tensor::zeros(t, 0),
    )?;
    Ok(ToyPattern { series, match_positions, current: t - 1, occurrences })
}

/// Parameters of the planted-graph benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub n_nodes: usize,
    pub t_total: usize,
    pub edge_density: f64,
    pub seasonal_periods: Vec<usize>,
    /// Scale of the graph-correlated innovations.
    pub noise: f64,
    pub seed: u64,
    pub seasonal_amplitude: f64,
    pub aux_strength: f64,
    /// Lag-one autocorrelation of the innovations.
    pub ar_coef: f64,
    pub level: f64,
}

impl PlantedSpec {
    pub fn new(n_nodes: usize, t_total: usize, edge_density: f64, seasonal_periods: Vec<usize>, noise: f64, seed: u64) -> Self {
        PlantedSpec {
            n_nodes,
            t_total,
            edge_density,
            seasonal_periods,
            noise,
            seed,
            seasonal_amplitude: 1.0,
            aux_strength: 0.5,
            ar_coef: 0.8,
            level: 10.0,
        }
    }

    /// Desk-scale forecasting benchmark: six nodes, 2000 hourly steps, a
    /// daily cycle and aux effects strong enough to be worth modelling.
    pub fn benchmark(seed: u64) -> Self {
        PlantedSpec { seasonal_amplitude: 2.0, aux_strength: 1.0, ..PlantedSpec::new(6, 2000, 0.3, vec![24], 0.5, seed) }
    }
}

/// Sparse precision with unit-scale diagonal and planted off-diagonal entries.
pub fn planted_precision(n: usize, edge_density: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let mut q = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in i + 1..n {
            if rng.random::<f64>() < edge_density {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let v = sign * rng.random_range(0.3..0.5);
                q[(i, j)] = v;
                q[(j, i)] = v;
            }
        }
    }
    let min_eig = q.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < 0.3 {
        for i in 0..n {
            q[(i, i)] += 0.3 - min_eig;
        }
    }
    q
}

/// Series with a planted dependency graph, seasonal components and an aux-driven shift.
pub fn synth_planted_graph(spec: &PlantedSpec) -> Result<(GraphSignalSeries, DependencyGraph), DataError> {
    let n = spec.n_nodes;
    if n < 2 {
        return Err(DataError::Invalid(format!("need at least 2 nodes, got {n}")));
    }
    if spec.t_total < 2 {
        return Err(DataError::Invalid("need at least 2 time steps".into()));
    }
    if !(0.0..=1.0).contains(&spec.edge_density) || !(spec.ar_coef.abs() < 1.0) || spec.seasonal_periods.contains(&0) {
        return Err(DataError::Invalid("edge_density must be in [0,1], |ar_coef| < 1, periods positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let q = planted_precision(n, spec.edge_density, &mut rng);
    let sigma = Cholesky::new(q.clone()).expect("planted precision is positive-definite").inverse();
    let l = Cholesky::new(sigma).expect("covariance is positive-definite").l();

    // Nodes share each period's phase up to a small jitter, like demand peaking citywide.
    let phases: Vec<f64> = spec.seasonal_periods.iter().map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let amps: Vec<Vec<(f64, f64)>> = (0..n)
        .map(|_| phases.iter().map(|p| (rng.random_range(0.5..1.5), p + rng.random_range(-0.3..0.3))).collect())
        .collect();
    let rain_effect: Vec<f64> = (0..n).map(|_| -rng.random_range(0.5..1.5)).collect();
    let temp_effect: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.0)).collect();

    let t = spec.t_total;
    let phi = spec.ar_coef;
    let scale = (1.0 - phi * phi).sqrt();
    let mut state = DVector::<f64>::zeros(n);
    let first = l.clone() * DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
    state.copy_from(&first);
    let mut rain = 0.0;
    let mut temp = 0.0;
    let temp_period = 7.0 * spec.seasonal_periods.iter().copied().max().unwrap_or(24) as f64;
    let mut values = Tensor::zeros(t, n);
    let mut aux = Tensor::zeros(t, 2);
    for step in 0..t {
        if step > 0 {
            let z = l.clone() * DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
            state = state * phi + z * scale;
        }
        let flip: f64 = rng.random();
        rain = if rain > 0.5 { if flip < 0.2 { 0.0 } else { 1.0 } } else if flip < 0.05 { 1.0 } else { 0.0 };
        let wiggle: f64 = rng.sample(StandardNormal);
        temp = 0.9 * temp + 0.1 * wiggle;
        let temp_signal = (std::f64::consts::TAU * (step as f64 % temp_period) / temp_period).sin() + temp;
        aux.set(step, 0, rain);
        aux.set(step, 1, temp_signal);
        for i in 0..n {
            let mut x = spec.level + spec.noise * state[i];
            for (p, &(amp, phase)) in spec.seasonal_periods.iter().zip(&amps[i]) {
                let angle = std::f64::consts::TAU * (step % p) as f64 / *p as f64 + phase;
                x += spec.seasonal_amplitude * amp * angle.sin();
            }
            x += spec.aux_strength * (rain_effect[i] * rain + temp_effect[i] * temp_signal);
            values.set(step, i, x);
        }
    }
    let series = GraphSignalSeries::from_values(Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap(), Duration::hours(1), values, aux)?;
    let series = GraphSignalSeries { aux_names: vec!["rain".into(), "temperature".into()], ..series };

    let rho = partial_correlations_of(&q).expect("planted precision has positive diagonal");
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if q[(i, j)] != 0.0 {
                edges.push((i, j, rho[(i, j)]));
            }
        }
    }
    Ok((series, DependencyGraph { n_nodes: n, edges, threshold: 0.0, lambda: None }))
}

//! Series ingestion, normalization, sliding windows and the synthetic
//! benchmark generator.
//!
//! A [`SeriesMatrix`] is stored sensor-major: the readings of sensor `i`
//! occupy `values[i * len .. (i + 1) * len]`.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{PgmaError, Result};

/// Name of the label column recognised when no explicit name is given.
pub const DEFAULT_LABEL_COLUMN: &str = "label";

/// An `N x T` multivariate series with optional per-timestamp labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesMatrix {
    n_sensors: usize,
    len: usize,
    values: Vec<f64>,
    labels: Option<Vec<u8>>,
    sensor_names: Vec<String>,
}

impl SeriesMatrix {
    /// Builds a series from per-sensor rows.
    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Option<Vec<u8>>) -> Result<Self> {
        let names = (0..rows.len()).map(|i| format!("s{i}")).collect();
        Self::with_names(rows, labels, names)
    }

    pub fn with_names(
        rows: Vec<Vec<f64>>,
        labels: Option<Vec<u8>>,
        sensor_names: Vec<String>,
    ) -> Result<Self> {
        let n_sensors = rows.len();
        if n_sensors == 0 {
            return Err(PgmaError::Data("series needs at least one sensor".into()));
        }
        if sensor_names.len() != n_sensors {
            return Err(PgmaError::Shape(format!(
                "{} sensor names for {} sensors",
                sensor_names.len(),
                n_sensors
            )));
        }
        let len = rows[0].len();
        if len < 2 {
            return Err(PgmaError::Data(format!(
                "series needs at least 2 timestamps, got {len}"
            )));
        }
        let mut values = Vec::with_capacity(n_sensors * len);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != len {
                return Err(PgmaError::Shape(format!(
                    "sensor {i} has {} timestamps, expected {len}",
                    row.len()
                )));
            }
            if let Some(t) = row.iter().position(|v| !v.is_finite()) {
                return Err(PgmaError::Data(format!(
                    "non-finite value at sensor {i}, timestamp {t}"
                )));
            }
            values.extend(row);
        }
        if let Some(labels) = &labels {
            check_labels(labels, len)?;
        }
        Ok(SeriesMatrix {
            n_sensors,
            len,
            values,
            labels,
            sensor_names,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.n_sensors
    }

    /// Number of timestamps `T`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sensor(&self, i: usize) -> &[f64] {
        &self.values[i * self.len..(i + 1) * self.len]
    }

    pub fn value(&self, sensor: usize, t: usize) -> f64 {
        self.values[sensor * self.len + t]
    }

    pub fn labels(&self) -> Option<&[u8]> {
        self.labels.as_deref()
    }

    pub fn sensor_names(&self) -> &[String] {
        &self.sensor_names
    }

    pub fn set_labels(&mut self, labels: Option<Vec<u8>>) -> Result<()> {
        if let Some(l) = &labels {
            check_labels(l, self.len)?;
        }
        self.labels = labels;
        Ok(())
    }

    /// Copies timestamps `[start, end)` into a new series.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len {
            return Err(PgmaError::Shape(format!(
                "slice [{start}, {end}) out of range for length {}",
                self.len
            )));
        }
        let rows = (0..self.n_sensors)
            .map(|i| self.sensor(i)[start..end].to_vec())
            .collect();
        let labels = self.labels.as_ref().map(|l| l[start..end].to_vec());
        Self::with_names(rows, labels, self.sensor_names.clone())
    }

    /// Chronological split: the first `train_fraction` of timestamps become
    /// the training series.
    pub fn split(&self, train_fraction: f64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
            return Err(PgmaError::Config(format!(
                "train fraction must lie in (0, 1), got {train_fraction}"
            )));
        }
        let cut = (self.len as f64 * train_fraction).round() as usize;
        Ok((self.slice(0, cut)?, self.slice(cut, self.len)?))
    }

    /// Writes the CSV format read by [`ingest_csv`]: a header of sensor
    /// names, an optional trailing `label` column, one row per timestamp.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.sensor_names.iter().map(String::as_str).collect();
        if self.labels.is_some() {
            header.push(DEFAULT_LABEL_COLUMN);
        }
        out.write_record(&header).map_err(csv_err)?;
        let mut record = Vec::with_capacity(header.len());
        for t in 0..self.len {
            record.clear();
            for i in 0..self.n_sensors {
                record.push(format!("{}", self.value(i, t)));
            }
            if let Some(l) = &self.labels {
                record.push(l[t].to_string());
            }
            out.write_record(&record).map_err(csv_err)?;
        }
        out.flush()
            .map_err(|e| PgmaError::Data(format!("csv write failed: {e}")))?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| PgmaError::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn check_labels(labels: &[u8], len: usize) -> Result<()> {
    if labels.len() != len {
        return Err(PgmaError::Shape(format!(
            "{} labels for {len} timestamps",
            labels.len()
        )));
    }
    if let Some(t) = labels.iter().position(|&l| l > 1) {
        return Err(PgmaError::Data(format!(
            "label at timestamp {t} is {}, expected 0 or 1",
            labels[t]
        )));
    }
    Ok(())
}

fn csv_err(e: csv::Error) -> PgmaError {
    PgmaError::Data(format!("csv: {e}"))
}

/// Result of reading a CSV file, with the number of dropped rows.
#[derive(Debug, Clone)]
pub struct CsvIngest {
    pub series: SeriesMatrix,
    /// Rows dropped because a reading was empty, NaN or infinite.
    pub rejected_rows: usize,
}

/// Reads a CSV series from `path`. See [`read_csv`].
pub fn ingest_csv(path: impl AsRef<Path>, label_column: Option<&str>) -> Result<SeriesMatrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| PgmaError::io(path, e))?;
    let ingest = read_csv(file, label_column)?;
    if ingest.rejected_rows > 0 {
        log::warn!(
            "{}: rejected {} rows with non-finite readings",
            path.display(),
            ingest.rejected_rows
        );
    }
    Ok(ingest.series)
}

/// Parses a header-first CSV. When `label_column` is `None` a column named
/// `label` is used if present. Row and column numbers in errors are 1-based
/// and count data rows only.
pub fn read_csv<R: Read>(reader: R, label_column: Option<&str>) -> Result<CsvIngest> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(csv_err)?.clone();
    let label_name = label_column.unwrap_or(DEFAULT_LABEL_COLUMN);
    let label_idx = header.iter().position(|h| h == label_name);
    if label_column.is_some() && label_idx.is_none() {
        return Err(PgmaError::Data(format!("label column {label_name:?} not found")));
    }
    let data_cols: Vec<usize> = (0..header.len()).filter(|&c| Some(c) != label_idx).collect();
    if data_cols.is_empty() {
        return Err(PgmaError::Data("no data columns".into()));
    }
    let names: Vec<String> = data_cols.iter().map(|&c| header[c].to_string()).collect();

    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); data_cols.len()];
    let mut labels = Vec::new();
    let mut rejected = 0;
    let mut scratch = Vec::with_capacity(data_cols.len());
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(csv_err)?;
        let row = r + 1;
        scratch.clear();
        let mut finite = true;
        for &c in &data_cols {
            let cell = record.get(c).unwrap_or("");
            if cell.is_empty() {
                finite = false;
                scratch.push(f64::NAN);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| PgmaError::NonNumeric {
                row,
                column: c + 1,
                value: cell.to_string(),
            })?;
            finite &= v.is_finite();
            scratch.push(v);
        }
        let label = match label_idx {
            Some(c) => {
                let cell = record.get(c).unwrap_or("");
                let v: f64 = cell.parse().map_err(|_| PgmaError::NonNumeric {
                    row,
                    column: c + 1,
                    value: cell.to_string(),
                })?;
                if v != 0.0 && v != 1.0 {
                    return Err(PgmaError::Data(format!(
                        "label {cell:?} at row {row} is not 0 or 1"
                    )));
                }
                Some(v as u8)
            }
            None => None,
        };
        if !finite {
            rejected += 1;
            continue;
        }
        for (dst, &v) in rows.iter_mut().zip(&scratch) {
            dst.push(v);
        }
        if let Some(l) = label {
            labels.push(l);
        }
    }
    if rows[0].len() < 2 {
        return Err(PgmaError::Data(format!(
            "need at least 2 valid rows, found {}",
            rows[0].len()
        )));
    }
    let labels = label_idx.map(|_| labels);
    let series = SeriesMatrix::with_names(rows, labels, names)?;
    Ok(CsvIngest {
        series,
        rejected_rows: rejected,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    #[default]
    MinMax,
    ZScore,
}

impl std::str::FromStr for NormMode {
    type Err = PgmaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(NormMode::MinMax),
            "zscore" => Ok(NormMode::ZScore),
            other => Err(PgmaError::Config(format!("unknown normalization {other:?}"))),
        }
    }
}

/// Per-sensor affine normalization `(x - center) / span`, fitted on
/// training data. `center`/`span` are min/range for min-max and
/// mean/population-std for z-score. A zero span maps the sensor to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mode: NormMode,
    pub center: Vec<f64>,
    pub span: Vec<f64>,
}

pub fn fit_normalizer(train: &SeriesMatrix, mode: NormMode) -> NormalizationStats {
    let n = train.n_sensors();
    let mut center = Vec::with_capacity(n);
    let mut span = Vec::with_capacity(n);
    for i in 0..n {
        let x = train.sensor(i);
        match mode {
            NormMode::MinMax => {
                let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                center.push(lo);
                span.push(hi - lo);
            }
            NormMode::ZScore => {
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
                center.push(mean);
                span.push(var.sqrt());
            }
        }
    }
    NormalizationStats { mode, center, span }
}

impl NormalizationStats {
    fn check(&self, series: &SeriesMatrix) -> Result<()> {
        if series.n_sensors() != self.center.len() {
            return Err(PgmaError::Shape(format!(
                "normalizer fitted on {} sensors, series has {}",
                self.center.len(),
                series.n_sensors()
            )));
        }
        Ok(())
    }

    pub fn normalize_value(&self, sensor: usize, v: f64) -> f64 {
        let span = self.span[sensor];
        if span > 0.0 {
            (v - self.center[sensor]) / span
        } else {
            0.0
        }
    }

    pub fn denormalize_value(&self, sensor: usize, v: f64) -> f64 {
        v * self.span[sensor] + self.center[sensor]
    }

    pub fn apply(&self, series: &SeriesMatrix) -> Result<SeriesMatrix> {
        self.map(series, Self::normalize_value)
    }

    pub fn invert(&self, series: &SeriesMatrix) -> Result<SeriesMatrix> {
        self.map(series, Self::denormalize_value)
    }

    fn map(&self, series: &SeriesMatrix, f: fn(&Self, usize, f64) -> f64) -> Result<SeriesMatrix> {
        self.check(series)?;
        let mut out = series.clone();
        let len = series.len();
        for (idx, v) in out.values.iter_mut().enumerate() {
            *v = f(self, idx / len, *v);
        }
        Ok(out)
    }
}

/// Sliding windows with their one-step-ahead targets.
///
/// `windows` is laid out `[b][sensor][lag]` and `targets` `[b][sensor]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub n_sensors: usize,
    pub window: usize,
    pub windows: Vec<f64>,
    pub targets: Vec<f64>,
    pub starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// The `N x w` block of window `b`.
    pub fn window(&self, b: usize) -> &[f64] {
        let sz = self.n_sensors * self.window;
        &self.windows[b * sz..(b + 1) * sz]
    }

    pub fn target(&self, b: usize) -> &[f64] {
        &self.targets[b * self.n_sensors..(b + 1) * self.n_sensors]
    }

    /// Window indices `[from, to)` as a new batch.
    pub fn subset(&self, from: usize, to: usize) -> WindowBatch {
        let sz = self.n_sensors * self.window;
        WindowBatch {
            n_sensors: self.n_sensors,
            window: self.window,
            windows: self.windows[from * sz..to * sz].to_vec(),
            targets: self.targets[from * self.n_sensors..to * self.n_sensors].to_vec(),
            starts: self.starts[from..to].to_vec(),
        }
    }
}

/// Cuts `series` into windows of length `w` taken every `stride` steps. The
/// target of the window starting at `s` is the reading at `s + w`.
pub fn make_windows(series: &SeriesMatrix, w: usize, stride: usize) -> Result<WindowBatch> {
    if w == 0 || stride == 0 {
        return Err(PgmaError::Config("window and stride must be positive".into()));
    }
    let t = series.len();
    if w + 1 > t {
        return Err(PgmaError::Data(format!(
            "window {w} leaves no target timestamp in a series of length {t}"
        )));
    }
    let n = series.n_sensors();
    let count = (t - w - 1) / stride + 1;
    let mut windows = Vec::with_capacity(count * n * w);
    let mut targets = Vec::with_capacity(count * n);
    let mut starts = Vec::with_capacity(count);
    for b in 0..count {
        let s = b * stride;
        for i in 0..n {
            windows.extend_from_slice(&series.sensor(i)[s..s + w]);
        }
        for i in 0..n {
            targets.push(series.value(i, s + w));
        }
        starts.push(s);
    }
    Ok(WindowBatch {
        n_sensors: n,
        window: w,
        windows,
        targets,
        starts,
    })
}

/// Parameters of the synthetic periodic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_sensors: usize,
    pub length: usize,
    pub period: usize,
    pub anomaly_rate: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.period < 2 {
            return Err(PgmaError::Config(format!(
                "period must be at least 2, got {}",
                self.period
            )));
        }
        if !(0.0..=0.2).contains(&self.anomaly_rate) {
            return Err(PgmaError::Config(format!(
                "anomaly rate must lie in [0, 0.2], got {}",
                self.anomaly_rate
            )));
        }
        if self.n_sensors == 0 || self.length < 2 {
            return Err(PgmaError::Config(
                "synthetic series needs at least one sensor and two timestamps".into(),
            ));
        }
        Ok(())
    }
}

/// Relative noise level of the synthetic generator (fraction of amplitude).
pub const SYNTH_NOISE: f64 = 0.05;

/// Shortest and longest injected anomaly segment.
const SEGMENT_LEN: (usize, usize) = (4, 12);

/// Clean signal, noise-free, for sensor `i` at time `t`.
fn synth_clean(i: usize, t: usize, period: usize, n_sensors: usize) -> (f64, f64) {
    let group = i % 2;
    let member = i / 2;
    let amp = 1.0 + 0.25 * (member % 3) as f64;
    let offset = 0.5 * group as f64 + 0.1 * member as f64;
    let phase = group as f64 * PI / 2.0 + 0.15 * member as f64 / n_sensors.max(1) as f64;
    let arg = 2.0 * PI * t as f64 / period as f64 + phase;
    // the second group carries a weak harmonic so the groups differ in shape
    let harmonic = if group == 1 { 0.2 * (2.0 * arg).sin() } else { 0.0 };
    (offset + amp * (arg.sin() + harmonic), amp)
}

/// A labeled periodic benchmark. Sensors alternate between two groups of
/// phase-shifted sinusoids with Gaussian noise (`SYNTH_NOISE` of amplitude).
/// Anomalies are contiguous segments on one or two sensors, either spike
/// trains or level shifts, until exactly `round(rate * length)` timestamps
/// are labeled.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SeriesMatrix> {
    generate_inner(spec, 0)
}

/// Train/test pair drawn from one synthetic run: the first
/// `train_fraction` of timestamps is anomaly-free, anomalies are injected
/// into the remaining test part at `spec.anomaly_rate`.
pub fn synthetic_train_test(
    spec: &SyntheticSpec,
    train_fraction: f64,
) -> Result<(SeriesMatrix, SeriesMatrix)> {
    spec.validate()?;
    let cut = (spec.length as f64 * train_fraction).round() as usize;
    if cut < 2 || cut + 2 > spec.length {
        return Err(PgmaError::Config(format!(
            "train fraction {train_fraction} leaves an empty split"
        )));
    }
    let full = generate_inner(spec, cut)?;
    let (mut train, test) = (full.slice(0, cut)?, full.slice(cut, spec.length)?);
    train.set_labels(None)?;
    Ok((train, test))
}

fn generate_inner(spec: &SyntheticSpec, anomaly_from: usize) -> Result<SeriesMatrix> {
    spec.validate()?;
    let SyntheticSpec {
        n_sensors: n,
        length,
        period,
        ..
    } = *spec;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut rows = vec![vec![0.0; length]; n];
    let mut amps = vec![0.0; n];
    for (i, row) in rows.iter_mut().enumerate() {
        for (t, v) in row.iter_mut().enumerate() {
            let (clean, amp) = synth_clean(i, t, period, n);
            amps[i] = amp;
            *v = clean + SYNTH_NOISE * amp * unit.sample(&mut rng);
        }
    }

    let span = length - anomaly_from;
    let target = (spec.anomaly_rate * span as f64).round() as usize;
    let mut labels = vec![0u8; length];
    let mut labeled = 0;
    let mut attempts = 0;
    while labeled < target && attempts < 100_000 {
        attempts += 1;
        let seg_len = rng
            .random_range(SEGMENT_LEN.0..=SEGMENT_LEN.1)
            .min(target - labeled)
            .min(span);
        let start = anomaly_from + rng.random_range(0..=span - seg_len);
        let end = start + seg_len;
        // keep a one-step gap so segments stay separate
        let lo = start.saturating_sub(1).max(anomaly_from);
        let hi = (end + 1).min(length);
        if labels[lo..hi].iter().any(|&l| l == 1) {
            continue;
        }
        let first = rng.random_range(0..n);
        let mut sensors = vec![first];
        if n > 1 && rng.random_bool(0.5) {
            let mut second = rng.random_range(0..n - 1);
            if second >= first {
                second += 1;
            }
            sensors.push(second);
        }
        let spike_train = rng.random_bool(0.5);
        for &i in &sensors {
            let magnitude = rng.random_range(1.0..1.5) * amps[i];
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            for t in start..end {
                let s = if spike_train && rng.random_bool(0.5) { -sign } else { sign };
                rows[i][t] += s * magnitude;
            }
        }
        labels[start..end].fill(1);
        labeled += seg_len;
    }
    if labeled < target {
        return Err(PgmaError::Config(format!(
            "could not place {target} anomalous timestamps in {span} steps"
        )));
    }
    let names = (0..n).map(|i| format!("sensor_{i}")).collect();
    SeriesMatrix::with_names(rows, Some(labels), names)
}

/// Noise-free value of the synthetic generator, for tests of the injected
/// deviations.
pub fn synthetic_clean_value(spec: &SyntheticSpec, sensor: usize, t: usize) -> f64 {
    synth_clean(sensor, t, spec.period, spec.n_sensors).0
}

pub fn synthetic_noise_sigma(spec: &SyntheticSpec, sensor: usize) -> f64 {
    SYNTH_NOISE * synth_clean(sensor, 0, spec.period, spec.n_sensors).1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_text(rows: &[&str]) -> String {
        rows.join("\n") + "\n"
    }

    #[test]
    fn ingest_shape_passthrough() {
        let mut text = String::from("a,b,c\n");
        for t in 0..100 {
            text.push_str(&format!("{t},{},{}\n", t * 2, t * 3));
        }
        let ingest = read_csv(text.as_bytes(), None).unwrap();
        assert_eq!(ingest.series.n_sensors(), 3);
        assert_eq!(ingest.series.len(), 100);
        assert!(ingest.series.labels().is_none());
        assert_eq!(ingest.series.sensor_names(), ["a", "b", "c"]);
    }

    #[test]
    fn ingest_label_column() {
        let text = csv_text(&["x,y,label", "1,2,0", "3,4,1", "5,6,0"]);
        let s = read_csv(text.as_bytes(), None).unwrap().series;
        assert_eq!(s.n_sensors(), 2);
        assert_eq!(s.labels().unwrap(), [0, 1, 0]);

        let text = csv_text(&["x,y,anom", "1,2,0", "3,4,1"]);
        let s = read_csv(text.as_bytes(), Some("anom")).unwrap().series;
        assert_eq!(s.labels().unwrap(), [0, 1]);
        assert!(read_csv(text.as_bytes(), Some("missing")).is_err());
    }

    #[test]
    fn ingest_reports_non_numeric_cell() {
        let text = csv_text(&["a,b,c", "1,2,3", "1,2,3", "1,2,3", "1,2,3", "1,abc,3", "1,2,3"]);
        match read_csv(text.as_bytes(), None) {
            Err(PgmaError::NonNumeric { row, column, value }) => {
                assert_eq!((row, column), (5, 2));
                assert_eq!(value, "abc");
            }
            other => panic!("expected NonNumeric, got {other:?}"),
        }
    }

    #[test]
    fn ingest_rejects_non_finite_rows_and_short_files() {
        let text = csv_text(&["a,b", "1,2", "NaN,3", "4,", "5,6", "inf,1"]);
        let ingest = read_csv(text.as_bytes(), None).unwrap();
        assert_eq!(ingest.rejected_rows, 3);
        assert_eq!(ingest.series.len(), 2);

        let text = csv_text(&["a,b", "1,2"]);
        assert!(matches!(read_csv(text.as_bytes(), None), Err(PgmaError::Data(_))));
        assert!(matches!(
            ingest_csv("/definitely/not/here.csv", None),
            Err(PgmaError::Io { .. })
        ));
    }

    #[test]
    fn ingest_rejects_bad_labels() {
        let text = csv_text(&["a,label", "1,0", "2,2"]);
        assert!(read_csv(text.as_bytes(), None).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let spec = SyntheticSpec {
            n_sensors: 3,
            length: 50,
            period: 10,
            anomaly_rate: 0.1,
            seed: 3,
        };
        let s = generate_synthetic(&spec).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), None).unwrap().series;
        assert_eq!(back, s);
    }

    #[test]
    fn minmax_examples() {
        let s = SeriesMatrix::from_rows(vec![vec![0.0, 5.0, 10.0], vec![4.0, 4.0, 4.0]], None)
            .unwrap();
        let stats = fit_normalizer(&s, NormMode::MinMax);
        let n = stats.apply(&s).unwrap();
        assert_eq!(n.sensor(0), [0.0, 0.5, 1.0]);
        assert_eq!(n.sensor(1), [0.0, 0.0, 0.0]);
        assert_eq!(stats.invert(&n).unwrap(), s);
    }

    #[test]
    fn zscore_example() {
        let s = SeriesMatrix::from_rows(vec![vec![1.0, 2.0, 3.0]], None).unwrap();
        let stats = fit_normalizer(&s, NormMode::ZScore);
        assert!((stats.center[0] - 2.0).abs() < 1e-15);
        assert!((stats.span[0] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        let z = stats.apply(&s).unwrap();
        let mean: f64 = z.sensor(0).iter().sum::<f64>() / 3.0;
        let var: f64 = z.sensor(0).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_examples() {
        let s = SeriesMatrix::from_rows(vec![(0..10).map(f64::from).collect()], None).unwrap();
        let b = make_windows(&s, 5, 1).unwrap();
        assert_eq!(b.len(), 5);
        assert_eq!(b.starts, [0, 1, 2, 3, 4]);
        assert_eq!(b.window(2), [2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(b.target(2), [7.0]);

        let s6 = s.slice(0, 6).unwrap();
        assert_eq!(make_windows(&s6, 5, 1).unwrap().len(), 1);
        let s5 = s.slice(0, 5).unwrap();
        assert!(make_windows(&s5, 5, 1).is_err());

        let b = make_windows(&s, 3, 2).unwrap();
        // floor((10 - 3 - 1) / 2) + 1
        assert_eq!(b.len(), 4);
        assert_eq!(b.starts, [0, 2, 4, 6]);
    }

    #[test]
    fn synthetic_label_count_and_determinism() {
        let spec = SyntheticSpec {
            n_sensors: 4,
            length: 2400,
            period: 24,
            anomaly_rate: 0.05,
            seed: 7,
        };
        let a = generate_synthetic(&spec).unwrap();
        assert_eq!((a.n_sensors(), a.len()), (4, 2400));
        let count: usize = a.labels().unwrap().iter().map(|&l| l as usize).sum();
        assert_eq!(count, 120);
        assert_eq!(generate_synthetic(&spec).unwrap(), a);

        let clean = generate_synthetic(&SyntheticSpec {
            anomaly_rate: 0.0,
            ..spec.clone()
        })
        .unwrap();
        assert!(clean.labels().unwrap().iter().all(|&l| l == 0));
    }

    #[test]
    fn synthetic_rejects_bad_arguments() {
        let base = SyntheticSpec {
            n_sensors: 2,
            length: 100,
            period: 10,
            anomaly_rate: 0.05,
            seed: 1,
        };
        assert!(generate_synthetic(&SyntheticSpec { period: 1, ..base.clone() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { anomaly_rate: 0.3, ..base.clone() }).is_err());
        assert!(generate_synthetic(&SyntheticSpec { anomaly_rate: -0.1, ..base }).is_err());
    }

    #[test]
    fn synthetic_anomalies_deviate_from_clean_signal() {
        let spec = SyntheticSpec {
            n_sensors: 6,
            length: 3000,
            period: 24,
            anomaly_rate: 0.1,
            seed: 11,
        };
        let s = generate_synthetic(&spec).unwrap();
        let labels = s.labels().unwrap();
        for t in (0..s.len()).filter(|&t| labels[t] == 1) {
            let max_dev = (0..s.n_sensors())
                .map(|i| {
                    (s.value(i, t) - synthetic_clean_value(&spec, i, t)).abs()
                        / synthetic_noise_sigma(&spec, i)
                })
                .fold(0.0, f64::max);
            assert!(max_dev >= 3.0, "timestamp {t} deviates only {max_dev} sigma");
        }
    }

    #[test]
    fn train_test_split_keeps_train_clean() {
        let spec = SyntheticSpec {
            n_sensors: 8,
            length: 4800,
            period: 24,
            anomaly_rate: 0.03,
            seed: 7,
        };
        let (train, test) = synthetic_train_test(&spec, 0.5).unwrap();
        assert_eq!((train.len(), test.len()), (2400, 2400));
        assert!(train.labels().is_none());
        let count: usize = test.labels().unwrap().iter().map(|&l| l as usize).sum();
        assert_eq!(count, 72);
    }
}

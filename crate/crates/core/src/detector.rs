//! End-to-end detector: fitting from a raw training series, scoring a test
//! series, and the versioned JSON checkpoint that carries everything needed
//! to score later.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{fit_normalizer, make_windows, NormalizationStats, SeriesMatrix, WindowBatch};
use crate::error::{PgmaError, Result};
use crate::graph::{assign_slot, Adjacency};
use crate::model::Model;
use crate::scoring::{self, MetricsReport, ScoreCalibration, ScoreTrace, ThresholdMode};
use crate::spectral::{detect_period, detect_period_rows, PeriodProfile};
use crate::train::{self, GridCell, TrainConfig, TrainReport, TrainingSet};

pub const CHECKPOINT_FORMAT: &str = "pgma-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained detector and the data-dependent state it was fitted with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub format: String,
    pub version: u32,
    /// SHA-256 of the training configuration as JSON.
    pub config_hash: String,
    pub train_config: TrainConfig,
    pub sensor_names: Vec<String>,
    /// Length of the training series; the default phase origin of test data.
    pub train_len: usize,
    pub effective_k: usize,
    pub normalizer: NormalizationStats,
    pub period: PeriodProfile,
    pub model: Model,
    /// Slot graphs the kept parameters were validated with.
    pub graphs: Vec<Adjacency>,
    pub calibration: ScoreCalibration,
    /// Validation errors, one row per sensor, for threshold calibration.
    pub validation_errors: Vec<Vec<f64>>,
}

/// Normalized training data with its detected period and windows.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub normalizer: NormalizationStats,
    pub normalized: SeriesMatrix,
    pub period: PeriodProfile,
    pub set: TrainingSet,
}

pub fn config_hash(cfg: &TrainConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
}

/// Graph slot of every window. Window starts are shifted by `offset` so
/// test windows keep the phase of the training series.
fn window_slots(
    batch: &WindowBatch,
    period: usize,
    n_slots: usize,
    offset: usize,
    per_window: bool,
) -> Result<Vec<usize>> {
    (0..batch.len())
        .map(|b| {
            let p = if per_window {
                let win = batch.window(b);
                let rows: Vec<&[f64]> = win.chunks(batch.window).collect();
                detect_period_rows(&rows)?.period
            } else {
                period
            };
            Ok(assign_slot(batch.starts[b] + offset, p, n_slots))
        })
        .collect()
}

/// Fits the normalizer, detects the period and cuts the training windows.
pub fn prepare(train: &SeriesMatrix, cfg: &TrainConfig) -> Result<Prepared> {
    cfg.validate()?;
    if cfg.effective_k(train.n_sensors()) < cfg.k {
        log::warn!("k = {} needs more sensors; using k = {}", cfg.k, cfg.effective_k(train.n_sensors()));
    }
    let normalizer = fit_normalizer(train, cfg.normalization);
    let normalized = normalizer.apply(train)?;
    let period = detect_period(&normalized)?;
    if period.aperiodic {
        log::warn!("no dominant frequency found; using the aperiodic fallback period {}", period.period);
    }
    let windows = make_windows(&normalized, cfg.window, cfg.stride)?;
    let slots = window_slots(
        &windows,
        period.period,
        cfg.effective_slots(),
        0,
        cfg.period_per_window,
    )?;
    let set = TrainingSet::split(windows, slots, cfg.val_fraction)?;
    Ok(Prepared {
        normalizer,
        normalized,
        period,
        set,
    })
}

/// Options for [`Detector::score`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreOptions {
    pub ma_window: usize,
    pub threshold: ThresholdMode,
    /// Phase origin of the test series; defaults to the training length.
    pub time_offset: Option<usize>,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions {
            ma_window: 3,
            threshold: ThresholdMode::MaxValidation,
            time_offset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutput {
    /// Test timestamp of each scored position (`start + w`).
    pub timestamps: Vec<usize>,
    pub trace: ScoreTrace,
    pub labels_true: Option<Vec<u8>>,
    pub metrics: Option<MetricsReport>,
    pub metrics_point_adjusted: Option<MetricsReport>,
}

impl Detector {
    /// Trains with `cfg` on a raw (unnormalized) anomaly-free series.
    pub fn fit(train: &SeriesMatrix, cfg: &TrainConfig) -> Result<(Detector, TrainReport)> {
        let prep = prepare(train, cfg)?;
        let model = Model::new(cfg.model_config(train.n_sensors()), cfg.seed)?;
        let out = train::train(model, &prep.set, cfg)?;
        let det = Self::assemble(train, cfg, prep, out.model, out.graphs)?;
        Ok((det, out.report))
    }

    /// Learning-rate grid search; the best cell becomes the detector.
    pub fn fit_grid(
        train: &SeriesMatrix,
        cfg: &TrainConfig,
        grid: &[f64],
        workers: usize,
    ) -> Result<(Detector, TrainReport, TrainConfig, Vec<GridCell>)> {
        let prep = prepare(train, cfg)?;
        let n = train.n_sensors();
        let outcome = train::grid_search(
            |c| Model::new(c.model_config(n), c.seed),
            &prep.set,
            cfg,
            grid,
            workers,
        )?;
        let best_cfg = outcome.best_config.clone();
        let report = outcome.best.report.clone();
        let det = Self::assemble(train, &best_cfg, prep, outcome.best.model, outcome.best.graphs)?;
        Ok((det, report, best_cfg, outcome.cells))
    }

    fn assemble(
        train: &SeriesMatrix,
        cfg: &TrainConfig,
        prep: Prepared,
        model: Model,
        graphs: Vec<Adjacency>,
    ) -> Result<Detector> {
        let (pred, actual) = predict_batch(&model, &graphs, &prep.set.val, &prep.set.val_slots)?;
        let validation_errors: Vec<Vec<f64>> = pred
            .iter()
            .zip(&actual)
            .map(|(p, a)| scoring::sensor_errors(p, a))
            .collect::<Result<_>>()?;
        let calibration = scoring::calibrate(&validation_errors)?;
        Ok(Detector {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash(cfg),
            train_config: cfg.clone(),
            sensor_names: train.sensor_names().to_vec(),
            train_len: train.len(),
            effective_k: cfg.effective_k(train.n_sensors()),
            normalizer: prep.normalizer,
            period: prep.period,
            model,
            graphs,
            calibration,
            validation_errors,
        })
    }

    pub fn n_sensors(&self) -> usize {
        self.model.config.n_sensors
    }

    /// Smoothed validation anomaly score for a moving-average width.
    pub fn validation_scores(&self, ma_window: usize) -> Result<Vec<f64>> {
        let s = scoring::normalize_scores(&self.validation_errors, &self.calibration)?;
        Ok(scoring::aggregate_and_smooth(&s, ma_window)?.1)
    }

    /// One-step-ahead predictions for every window of a raw series, in raw
    /// normalized units: returns `(timestamps, predictions, observations)`
    /// with one row per sensor.
    pub fn predict_series(
        &self,
        series: &SeriesMatrix,
        time_offset: Option<usize>,
    ) -> Result<(Vec<usize>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if series.n_sensors() != self.n_sensors() {
            return Err(PgmaError::Shape(format!(
                "detector expects {} sensors, series has {}",
                self.n_sensors(),
                series.n_sensors()
            )));
        }
        let cfg = &self.train_config;
        let normalized = self.normalizer.apply(series)?;
        let windows = make_windows(&normalized, cfg.window, 1)?;
        let offset = time_offset.unwrap_or(self.train_len);
        let slots = window_slots(
            &windows,
            self.period.period,
            self.model.config.n_slots,
            offset,
            cfg.period_per_window,
        )?;
        let (pred, actual) = predict_batch(&self.model, &self.graphs, &windows, &slots)?;
        let timestamps = windows.starts.iter().map(|s| s + cfg.window).collect();
        Ok((timestamps, pred, actual))
    }

    /// Scores a raw test series. Metrics are filled in when the series
    /// carries labels.
    pub fn score(&self, test: &SeriesMatrix, opts: &ScoreOptions) -> Result<ScoreOutput> {
        let (timestamps, pred, actual) = self.predict_series(test, opts.time_offset)?;
        let errors: Vec<Vec<f64>> = pred
            .iter()
            .zip(&actual)
            .map(|(p, a)| scoring::sensor_errors(p, a))
            .collect::<Result<_>>()?;
        let labels_true: Option<Vec<u8>> = test
            .labels()
            .map(|l| timestamps.iter().map(|&t| l[t]).collect());
        let validation = match opts.threshold {
            ThresholdMode::MaxValidation => Some(self.validation_scores(opts.ma_window)?),
            _ => None,
        };
        let trace = scoring::score_trace(
            errors,
            &self.calibration,
            opts.ma_window,
            opts.threshold,
            validation.as_deref(),
            labels_true.as_deref(),
        )?;
        let (metrics, metrics_point_adjusted) = match &labels_true {
            Some(truth) => {
                let mut m = scoring::evaluate(&trace.labels_pred, truth, false)?;
                m.threshold = Some(trace.threshold);
                let mut pa = scoring::evaluate(&trace.labels_pred, truth, true)?;
                pa.threshold = Some(trace.threshold);
                (Some(m), Some(pa))
            }
            None => (None, None),
        };
        Ok(ScoreOutput {
            timestamps,
            trace,
            labels_true,
            metrics,
            metrics_point_adjusted,
        })
    }

    /// Similarity-weighted edge list of every slot graph:
    /// `(slot, source, target, cosine similarity)`.
    pub fn edge_list(&self) -> Result<Vec<(usize, usize, usize, f64)>> {
        let emb = &self.model.params.embeddings;
        let mut out = Vec::new();
        for (s, g) in self.graphs.iter().enumerate() {
            let e = crate::graph::cosine_similarity(emb.slot(s), emb.n_nodes, emb.dim)?;
            for (src, dst) in g.edges() {
                out.push((s, src, dst, e.get(src, dst)));
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| PgmaError::Checkpoint(e.to_string()))
    }

    /// Parses and validates a checkpoint.
    pub fn from_json(text: &str) -> Result<Detector> {
        let det: Detector = serde_json::from_str(text)
            .map_err(|e| PgmaError::Checkpoint(format!("malformed checkpoint: {e}")))?;
        det.validate()?;
        Ok(det)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| PgmaError::io(path, e))?;
        file.write_all(self.to_json()?.as_bytes())
            .map_err(|e| PgmaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Detector> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| PgmaError::io(path, e))?;
        Self::from_json(&text)
    }

    fn validate(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(PgmaError::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(PgmaError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let shape = |msg: String| PgmaError::Checkpoint(format!("shape metadata mismatch: {msg}"));
        let cfg = &self.model.config;
        cfg.validate().map_err(|e| shape(e.to_string()))?;
        self.model
            .params
            .check_shapes(cfg)
            .map_err(|e| shape(e.to_string()))?;
        if *cfg != self.train_config.model_config(cfg.n_sensors) {
            return Err(shape("model config disagrees with training config".into()));
        }
        let n = cfg.n_sensors;
        if self.sensor_names.len() != n
            || self.normalizer.center.len() != n
            || self.normalizer.span.len() != n
            || self.calibration.median.len() != n
            || self.calibration.iqr.len() != n
            || self.validation_errors.len() != n
        {
            return Err(shape(format!("per-sensor tables do not all have {n} entries")));
        }
        if self.graphs.len() != cfg.n_slots || self.graphs.iter().any(|g| g.n != n) {
            return Err(shape("slot graphs do not match the model".into()));
        }
        if self.config_hash != config_hash(&self.train_config) {
            return Err(PgmaError::Checkpoint("config hash mismatch".into()));
        }
        Ok(())
    }
}

/// Predictions and targets of `batch`, one row per sensor.
fn predict_batch(
    model: &Model,
    graphs: &[Adjacency],
    batch: &WindowBatch,
    slots: &[usize],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let n = model.config.n_sensors;
    let att = model.attention(graphs)?;
    let mut pred = vec![Vec::with_capacity(batch.len()); n];
    let mut actual = vec![Vec::with_capacity(batch.len()); n];
    for b in 0..batch.len() {
        let p = model.predict(batch.window(b), slots[b], &att)?;
        for i in 0..n {
            pred[i].push(p[i]);
            actual[i].push(batch.target(b)[i]);
        }
    }
    Ok((pred, actual))
}

impl ScoreOutput {
    /// `t,ano,smoothed,label_pred,label_true,top_sensor`; `label_true` is
    /// empty for unlabeled data.
    pub fn write_trace_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| PgmaError::io("<trace>", e);
        writeln!(out, "t,ano,smoothed,label_pred,label_true,top_sensor").map_err(io)?;
        for (k, &t) in self.timestamps.iter().enumerate() {
            let truth = self
                .labels_true
                .as_ref()
                .map_or(String::new(), |l| l[k].to_string());
            writeln!(
                out,
                "{t},{},{},{},{truth},{}",
                self.trace.ano[k], self.trace.smoothed[k], self.trace.labels_pred[k], self.trace.top_sensor[k]
            )
            .map_err(io)?;
        }
        Ok(())
    }

    /// Whitespace-separated columns for gnuplot.
    pub fn write_plot_data<W: Write>(&self, mut out: W) -> Result<()> {
        let io = |e| PgmaError::io("<plot>", e);
        writeln!(out, "# t ano smoothed threshold label_pred label_true").map_err(io)?;
        for (k, &t) in self.timestamps.iter().enumerate() {
            let truth = self.labels_true.as_ref().map_or(-1, |l| i32::from(l[k]));
            writeln!(
                out,
                "{t} {} {} {} {} {truth}",
                self.trace.ano[k], self.trace.smoothed[k], self.trace.threshold, self.trace.labels_pred[k]
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

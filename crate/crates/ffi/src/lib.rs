//! C ABI over the `pgma` detector.
//!
//! All objects are opaque handles allocated by this library and released
//! with the matching `*_free` function. Every fallible call returns a
//! `PgmaStatus`; on failure a message is available from
//! `pgma_last_error` on the same thread until the next failing call.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use pgma::config::RunConfig;
use pgma::data::{ingest_csv, synthetic_train_test, SeriesMatrix, SyntheticSpec};
use pgma::detector::{Detector, ScoreOptions, ScoreOutput};
use pgma::scoring::ThresholdMode;
use pgma::PgmaError;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgmaStatus {
    Ok = 0,
    /// Invalid configuration or option string.
    Config = 1,
    /// Unreadable, malformed or mis-shaped input data.
    Data = 2,
    /// Non-finite gradients or diverged training.
    Numeric = 3,
    /// Checkpoint could not be parsed or does not match.
    Checkpoint = 4,
    /// Null pointer, bad UTF-8 or out-of-range argument.
    InvalidArgument = 5,
    /// The requested value does not exist (e.g. metrics without labels).
    Unavailable = 6,
    /// Internal panic caught at the boundary.
    Internal = 7,
}

/// A multivariate series with optional labels.
pub struct PgmaSeries(SeriesMatrix);

/// A trained detector.
pub struct PgmaDetector(Detector);

/// Output of `pgma_detector_score`.
pub struct PgmaScores(ScoreOutput);

/// Precision, recall and F1 at the chosen threshold.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct PgmaMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &PgmaError) -> PgmaStatus {
    match err {
        PgmaError::Checkpoint(_) => PgmaStatus::Checkpoint,
        e => match e.exit_code() {
            1 => PgmaStatus::Config,
            2 => PgmaStatus::Data,
            _ => PgmaStatus::Numeric,
        },
    }
}

struct Fail(PgmaStatus, String);

impl From<PgmaError> for Fail {
    fn from(e: PgmaError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(PgmaStatus::InvalidArgument, msg.to_string())
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PgmaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PgmaStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            PgmaStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Last error message of this thread, or null. Valid until the next
/// failing call on the same thread.
#[no_mangle]
pub extern "C" fn pgma_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pgma_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Reads a CSV file. `label_column` may be null (a column named `label` is
/// still picked up).
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pgma_series_from_csv(
    path: *const c_char,
    label_column: *const c_char,
    out: *mut *mut PgmaSeries,
) -> PgmaStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let lc = opt_str_arg(label_column, "label_column")?;
        put(out, PgmaSeries(ingest_csv(path, lc)?))
    })
}

/// Builds a series from sensor-major values (`n_sensors * len` doubles,
/// sensor 0 first). `labels` may be null, else it holds `len` bytes of 0/1.
///
/// # Safety
/// `values` must point to `n_sensors * len` doubles and `labels`, when not
/// null, to `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pgma_series_from_values(
    values: *const f64,
    n_sensors: usize,
    len: usize,
    labels: *const u8,
    out: *mut *mut PgmaSeries,
) -> PgmaStatus {
    guard(|| {
        if values.is_null() {
            return Err(invalid("values is null"));
        }
        let total = n_sensors
            .checked_mul(len)
            .ok_or_else(|| invalid("n_sensors * len overflows"))?;
        let flat = std::slice::from_raw_parts(values, total);
        let rows: Vec<Vec<f64>> = if len == 0 {
            vec![Vec::new(); n_sensors]
        } else {
            flat.chunks(len).map(<[f64]>::to_vec).collect()
        };
        let labels = (!labels.is_null()).then(|| std::slice::from_raw_parts(labels, len).to_vec());
        put(out, PgmaSeries(SeriesMatrix::from_rows(rows, labels)?))
    })
}

/// Synthetic labeled benchmark split into a clean training part and a
/// test part with injected anomalies.
///
/// # Safety
/// Both output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn pgma_series_synthetic(
    n_sensors: usize,
    length: usize,
    period: usize,
    anomaly_rate: f64,
    seed: u64,
    train_fraction: f64,
    out_train: *mut *mut PgmaSeries,
    out_test: *mut *mut PgmaSeries,
) -> PgmaStatus {
    guard(|| {
        if out_train.is_null() || out_test.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let spec = SyntheticSpec {
            n_sensors,
            length,
            period,
            anomaly_rate,
            seed,
        };
        let (train, test) = synthetic_train_test(&spec, train_fraction)?;
        put(out_train, PgmaSeries(train))?;
        put(out_test, PgmaSeries(test))
    })
}

/// Writes the series (with its label column, if any) as CSV.
///
/// # Safety
/// `series` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pgma_series_save_csv(series: *const PgmaSeries, path: *const c_char) -> PgmaStatus {
    guard(|| {
        let s = handle(series, "series")?;
        Ok(s.0.save_csv(str_arg(path, "path")?)?)
    })
}

/// # Safety
/// `series` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgma_series_n_sensors(series: *const PgmaSeries) -> usize {
    series.as_ref().map_or(0, |s| s.0.n_sensors())
}

/// # Safety
/// `series` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgma_series_len(series: *const PgmaSeries) -> usize {
    series.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `series` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pgma_series_free(series: *mut PgmaSeries) {
    if !series.is_null() {
        drop(Box::from_raw(series));
    }
}

/// Dominant period of the min-max normalized series.
///
/// # Safety
/// `series` must be a live handle; `out_period` writable.
#[no_mangle]
pub unsafe extern "C" fn pgma_detect_period(series: *const PgmaSeries, out_period: *mut usize) -> PgmaStatus {
    guard(|| {
        let s = handle(series, "series")?;
        if out_period.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let norm = pgma::data::fit_normalizer(&s.0, Default::default()).apply(&s.0)?;
        *out_period = pgma::spectral::detect_period(&norm)?.period;
        Ok(())
    })
}

/// Trains a detector. `config_json` may be null for defaults; otherwise
/// it uses the same schema as the command-line config file.
///
/// # Safety
/// `train` must be a live handle, `config_json` null or NUL-terminated,
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pgma_detector_train(
    train: *const PgmaSeries,
    config_json: *const c_char,
    out: *mut *mut PgmaDetector,
) -> PgmaStatus {
    guard(|| {
        let s = handle(train, "train")?;
        let cfg = match opt_str_arg(config_json, "config_json")? {
            Some(text) => RunConfig::from_json(text)?,
            None => RunConfig::default(),
        };
        cfg.validate()?;
        let (det, _) = Detector::fit(&s.0, &cfg.train)?;
        put(out, PgmaDetector(det))
    })
}

/// # Safety
/// `path` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pgma_detector_load(path: *const c_char, out: *mut *mut PgmaDetector) -> PgmaStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        put(out, PgmaDetector(Detector::load(path)?))
    })
}

/// # Safety
/// `detector` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pgma_detector_save(detector: *const PgmaDetector, path: *const c_char) -> PgmaStatus {
    guard(|| {
        let d = handle(detector, "detector")?;
        Ok(d.0.save(str_arg(path, "path")?)?)
    })
}

/// Period the detector was fitted with, or 0 for a null handle.
///
/// # Safety
/// `detector` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgma_detector_period(detector: *const PgmaDetector) -> usize {
    detector.as_ref().map_or(0, |d| d.0.period.period)
}

/// # Safety
/// `detector` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pgma_detector_free(detector: *mut PgmaDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Scores a series. `threshold` is `max-validation`, `best-f1` or
/// `fixed:<value>`; null means `max-validation`. `ma_window` 0 means the
/// default of 3.
///
/// # Safety
/// Handles must be live, `threshold` null or NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pgma_detector_score(
    detector: *const PgmaDetector,
    series: *const PgmaSeries,
    ma_window: usize,
    threshold: *const c_char,
    out: *mut *mut PgmaScores,
) -> PgmaStatus {
    guard(|| {
        let d = handle(detector, "detector")?;
        let s = handle(series, "series")?;
        let mut opts = ScoreOptions::default();
        if ma_window > 0 {
            opts.ma_window = ma_window;
        }
        if let Some(t) = opt_str_arg(threshold, "threshold")? {
            opts.threshold = t.parse::<ThresholdMode>()?;
        }
        put(out, PgmaScores(d.0.score(&s.0, &opts)?))
    })
}

/// Number of scored timestamps.
///
/// # Safety
/// `scores` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgma_scores_len(scores: *const PgmaScores) -> usize {
    scores.as_ref().map_or(0, |s| s.0.timestamps.len())
}

/// # Safety
/// `scores` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pgma_scores_threshold(scores: *const PgmaScores) -> f64 {
    scores.as_ref().map_or(f64::NAN, |s| s.0.trace.threshold)
}

unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, cap: usize) -> Result<(), Fail> {
    if dst.is_null() {
        return Err(invalid("buffer is null"));
    }
    if cap < src.len() {
        return Err(invalid(&format!("buffer holds {cap}, need {}", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

/// Copies the smoothed anomaly scores into `buf` (capacity `cap`).
///
/// # Safety
/// `buf` must have room for `cap` doubles.
#[no_mangle]
pub unsafe extern "C" fn pgma_scores_smoothed(scores: *const PgmaScores, buf: *mut f64, cap: usize) -> PgmaStatus {
    guard(|| copy_out(&handle(scores, "scores")?.0.trace.smoothed, buf, cap))
}

/// Copies the predicted 0/1 labels into `buf` (capacity `cap`).
///
/// # Safety
/// `buf` must have room for `cap` bytes.
#[no_mangle]
pub unsafe extern "C" fn pgma_scores_labels(scores: *const PgmaScores, buf: *mut u8, cap: usize) -> PgmaStatus {
    guard(|| copy_out(&handle(scores, "scores")?.0.trace.labels_pred, buf, cap))
}

/// Copies the timestamps of the scored positions into `buf`.
///
/// # Safety
/// `buf` must have room for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn pgma_scores_timestamps(scores: *const PgmaScores, buf: *mut usize, cap: usize) -> PgmaStatus {
    guard(|| copy_out(&handle(scores, "scores")?.0.timestamps, buf, cap))
}

/// Point-wise (`point_adjust = false`) or point-adjusted metrics. Returns
/// `Unavailable` when the scored series had no labels.
///
/// # Safety
/// `scores` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pgma_scores_metrics(
    scores: *const PgmaScores,
    point_adjust: bool,
    out: *mut PgmaMetrics,
) -> PgmaStatus {
    guard(|| {
        let s = handle(scores, "scores")?;
        if out.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let m = if point_adjust {
            &s.0.metrics_point_adjusted
        } else {
            &s.0.metrics
        };
        let m = m
            .as_ref()
            .ok_or_else(|| Fail(PgmaStatus::Unavailable, "scored series has no labels".into()))?;
        *out = PgmaMetrics {
            precision: m.precision,
            recall: m.recall,
            f1: m.f1,
            threshold: s.0.trace.threshold,
            true_positives: m.true_positives,
            false_positives: m.false_positives,
            true_negatives: m.true_negatives,
            false_negatives: m.false_negatives,
        };
        Ok(())
    })
}

/// Writes the score trace CSV (`t,ano,smoothed,label_pred,label_true,top_sensor`).
///
/// # Safety
/// `scores` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn pgma_scores_save_csv(scores: *const PgmaScores, path: *const c_char) -> PgmaStatus {
    guard(|| {
        let s = handle(scores, "scores")?;
        let path = str_arg(path, "path")?;
        let file = std::fs::File::create(path).map_err(|e| Fail(PgmaStatus::Data, format!("{path}: {e}")))?;
        Ok(s.0.write_trace_csv(std::io::BufWriter::new(file))?)
    })
}

/// # Safety
/// `scores` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pgma_scores_free(scores: *mut PgmaScores) {
    if !scores.is_null() {
        drop(Box::from_raw(scores));
    }
}

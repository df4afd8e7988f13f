//! Graph-deviation scoring: absolute forecast errors, robust per-sensor
//! normalization by median and IQR, max aggregation over sensors, trailing
//! moving average, thresholding and PRE/REC/F1.

use serde::{Deserialize, Serialize};

use crate::error::{PgmaError, Result};

/// Added to the IQR before dividing.
pub const IQR_EPSILON: f64 = 1e-6;

/// Element-wise `|X - X_hat|`.
pub fn sensor_errors(pred: &[f64], actual: &[f64]) -> Result<Vec<f64>> {
    if pred.len() != actual.len() {
        return Err(PgmaError::Shape(format!(
            "{} predictions for {} observations",
            pred.len(),
            actual.len()
        )));
    }
    Ok(pred.iter().zip(actual).map(|(p, a)| (a - p).abs()).collect())
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCalibration {
    pub median: Vec<f64>,
    pub iqr: Vec<f64>,
    pub epsilon: f64,
}

/// Per-sensor median and IQR of validation errors. `errors` is one row per
/// sensor.
pub fn calibrate(errors: &[Vec<f64>]) -> Result<ScoreCalibration> {
    if errors.is_empty() {
        return Err(PgmaError::Data("no sensors to calibrate".into()));
    }
    let mut median = Vec::with_capacity(errors.len());
    let mut iqr = Vec::with_capacity(errors.len());
    for (i, row) in errors.iter().enumerate() {
        if row.len() < 4 {
            return Err(PgmaError::Data(format!(
                "sensor {i} has {} validation errors, need at least 4",
                row.len()
            )));
        }
        let mut sorted = row.clone();
        sorted.sort_by(f64::total_cmp);
        median.push(quantile_sorted(&sorted, 0.5));
        iqr.push(quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25));
    }
    Ok(ScoreCalibration {
        median,
        iqr,
        epsilon: IQR_EPSILON,
    })
}

/// `(Err - median) / (IQR + eps)`, row per sensor.
pub fn normalize_scores(errors: &[Vec<f64>], calib: &ScoreCalibration) -> Result<Vec<Vec<f64>>> {
    if errors.len() != calib.median.len() {
        return Err(PgmaError::Shape(format!(
            "calibration covers {} sensors, errors have {}",
            calib.median.len(),
            errors.len()
        )));
    }
    Ok(errors
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let scale = calib.iqr[i] + calib.epsilon;
            row.iter().map(|e| (e - calib.median[i]) / scale).collect()
        })
        .collect())
}

/// `ano(t) = max_i ano_i(t)` with the arg-max sensor.
pub fn aggregate(scores: &[Vec<f64>]) -> (Vec<f64>, Vec<usize>) {
    let len = scores.first().map_or(0, Vec::len);
    let mut ano = vec![f64::NEG_INFINITY; len];
    let mut who = vec![0; len];
    for (i, row) in scores.iter().enumerate() {
        for (t, &v) in row.iter().enumerate() {
            if v > ano[t] {
                ano[t] = v;
                who[t] = i;
            }
        }
    }
    (ano, who)
}

/// Trailing mean over `[t - window + 1, t]`, shorter at the start.
pub fn moving_average(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(PgmaError::Config("moving-average window must be at least 1".into()));
    }
    Ok((0..values.len())
        .map(|t| {
            let span = &values[(t + 1).saturating_sub(window)..=t];
            span.iter().sum::<f64>() / span.len() as f64
        })
        .collect())
}

/// Max aggregation followed by the moving average.
pub fn aggregate_and_smooth(scores: &[Vec<f64>], ma_window: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let (ano, _) = aggregate(scores);
    let smoothed = moving_average(&ano, ma_window)?;
    Ok((ano, smoothed))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Largest smoothed score seen on the validation split.
    MaxValidation,
    Fixed(f64),
    /// Oracle threshold maximizing F1 against ground truth.
    BestF1,
}

impl std::str::FromStr for ThresholdMode {
    type Err = PgmaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-validation" | "max_validation" => Ok(ThresholdMode::MaxValidation),
            "best-f1" | "best_f1" => Ok(ThresholdMode::BestF1),
            _ => {
                let v = s
                    .strip_prefix("fixed:")
                    .ok_or_else(|| PgmaError::Config(format!("unknown threshold mode {s:?}")))?;
                v.parse()
                    .map(ThresholdMode::Fixed)
                    .map_err(|_| PgmaError::Config(format!("bad fixed threshold {v:?}")))
            }
        }
    }
}

impl std::fmt::Display for ThresholdMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdMode::MaxValidation => write!(f, "max-validation"),
            ThresholdMode::Fixed(v) => write!(f, "fixed:{v}"),
            ThresholdMode::BestF1 => write!(f, "best-f1"),
        }
    }
}

/// Labels `smoothed(t) > threshold`.
pub fn apply_threshold(smoothed: &[f64], threshold: f64) -> Vec<u8> {
    smoothed.iter().map(|&s| u8::from(s > threshold)).collect()
}

/// Picks the threshold for `mode` and labels the trace. `validation` is the
/// smoothed validation score (for `MaxValidation`), `truth` the labels (for
/// `BestF1`).
pub fn threshold_and_label(
    smoothed: &[f64],
    mode: ThresholdMode,
    validation: Option<&[f64]>,
    truth: Option<&[u8]>,
) -> Result<(Vec<u8>, f64)> {
    let threshold = match mode {
        ThresholdMode::Fixed(v) => v,
        ThresholdMode::MaxValidation => {
            let val = validation
                .filter(|v| !v.is_empty())
                .ok_or_else(|| PgmaError::Config("max-validation needs validation scores".into()))?;
            val.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        }
        ThresholdMode::BestF1 => {
            let truth =
                truth.ok_or_else(|| PgmaError::Config("best-f1 threshold needs ground-truth labels".into()))?;
            best_f1_threshold(smoothed, truth)?.0
        }
    };
    Ok((apply_threshold(smoothed, threshold), threshold))
}

/// Sweeps every cut between distinct score values and returns the
/// threshold with the highest point-wise F1 (the highest such threshold on
/// ties) together with that F1.
pub fn best_f1_threshold(scores: &[f64], truth: &[u8]) -> Result<(f64, f64)> {
    if scores.len() != truth.len() {
        return Err(PgmaError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            truth.len()
        )));
    }
    if scores.is_empty() {
        return Err(PgmaError::Data("cannot pick a threshold for an empty trace".into()));
    }
    let positives: usize = truth.iter().map(|&l| l as usize).sum();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // start with nothing flagged: threshold at the maximum score
    let mut best_thr = scores[order[0]];
    let mut best_f1 = 0.0;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut idx = 0;
    while idx < order.len() {
        let value = scores[order[idx]];
        while idx < order.len() && scores[order[idx]] == value {
            if truth[order[idx]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            idx += 1;
        }
        // everything >= value is flagged; the threshold sits at the next
        // lower distinct score
        let thr = if idx < order.len() {
            scores[order[idx]]
        } else {
            value - 1.0f64.max(value.abs())
        };
        let f1 = f1_from_counts(tp, fp, positives - tp);
        if f1 > best_f1 {
            best_f1 = f1;
            best_thr = thr;
        }
    }
    Ok((best_thr, best_f1))
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub point_adjust: bool,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
}

/// Credits a whole contiguous true-anomaly segment when any of its
/// timestamps is flagged.
pub fn point_adjust(pred: &[u8], truth: &[u8]) -> Vec<u8> {
    let mut out = pred.to_vec();
    let mut t = 0;
    while t < truth.len() {
        if truth[t] == 1 {
            let start = t;
            while t < truth.len() && truth[t] == 1 {
                t += 1;
            }
            if pred[start..t].contains(&1) {
                out[start..t].fill(1);
            }
        } else {
            t += 1;
        }
    }
    out
}

/// Point-wise precision, recall and F1, optionally after point adjustment.
pub fn evaluate(pred: &[u8], truth: &[u8], adjust: bool) -> Result<MetricsReport> {
    if pred.len() != truth.len() {
        return Err(PgmaError::Shape(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    if truth.iter().any(|&l| l > 1) || pred.iter().any(|&l| l > 1) {
        return Err(PgmaError::Data("labels must be 0 or 1".into()));
    }
    let adjusted;
    let pred = if adjust {
        adjusted = point_adjust(pred, truth);
        &adjusted[..]
    } else {
        pred
    };
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 0) => tn += 1,
            _ => fn_ += 1,
        }
    }
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    Ok(MetricsReport {
        precision,
        recall,
        f1: f1_from_counts(tp, fp, fn_),
        threshold: None,
        point_adjust: adjust,
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fn_,
    })
}

/// Every stage of scoring one test trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrace {
    /// `Err`, one row per sensor.
    pub errors: Vec<Vec<f64>>,
    /// `ano_i(t)`, one row per sensor.
    pub sensor_scores: Vec<Vec<f64>>,
    pub ano: Vec<f64>,
    /// Sensor attaining the max in `ano(t)`.
    pub top_sensor: Vec<usize>,
    pub smoothed: Vec<f64>,
    pub labels_pred: Vec<u8>,
    pub threshold: f64,
}

/// Runs the full scoring chain on one trace.
pub fn score_trace(
    errors: Vec<Vec<f64>>,
    calib: &ScoreCalibration,
    ma_window: usize,
    mode: ThresholdMode,
    validation_smoothed: Option<&[f64]>,
    truth: Option<&[u8]>,
) -> Result<ScoreTrace> {
    let sensor_scores = normalize_scores(&errors, calib)?;
    let (ano, top_sensor) = aggregate(&sensor_scores);
    let smoothed = moving_average(&ano, ma_window)?;
    let (labels_pred, threshold) = threshold_and_label(&smoothed, mode, validation_smoothed, truth)?;
    Ok(ScoreTrace {
        errors,
        sensor_scores,
        ano,
        top_sensor,
        smoothed,
        labels_pred,
        threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_examples() {
        assert_eq!(sensor_errors(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), [0.0, 0.0]);
        assert_eq!(sensor_errors(&[3.0], &[5.0]).unwrap(), [2.0]);
        assert_eq!(sensor_errors(&[2.0], &[-1.0]).unwrap(), [3.0]);
        assert!(sensor_errors(&[2.0], &[]).is_err());
    }

    #[test]
    fn calibration_examples() {
        let c = calibrate(&[vec![1.0, 2.0, 3.0, 4.0, 5.0]]).unwrap();
        assert_eq!((c.median[0], c.iqr[0]), (3.0, 2.0));
        let c = calibrate(&[vec![0.7; 6]]).unwrap();
        assert_eq!(c.iqr[0], 0.0);
        let c = calibrate(&[vec![0.0, 0.0, 0.0, 10.0]]).unwrap();
        assert_eq!((c.median[0], c.iqr[0]), (0.0, 2.5));
        assert!(calibrate(&[vec![1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn normalization_examples() {
        let c = ScoreCalibration {
            median: vec![3.0, 3.0],
            iqr: vec![2.0, 0.0],
            epsilon: IQR_EPSILON,
        };
        let s = normalize_scores(&[vec![3.0, 5.0], vec![3.0, 4.0]], &c).unwrap();
        assert_eq!(s[0][0], 0.0);
        assert!((s[0][1] - 1.0).abs() < 1e-6);
        assert!((s[1][1] - 1e6).abs() < 1e-6);
    }

    #[test]
    fn aggregation_and_smoothing_examples() {
        let (ano, who) = aggregate(&[vec![0.5], vec![2.0], vec![1.0]]);
        assert_eq!(ano, [2.0]);
        assert_eq!(who, [1]);
        let x = [0.3, 1.2, -0.4, 5.0];
        assert_eq!(moving_average(&x, 1).unwrap(), x);
        assert_eq!(
            moving_average(&[0.0, 0.0, 3.0, 0.0, 0.0], 3).unwrap(),
            [0.0, 0.0, 1.0, 1.0, 1.0]
        );
        assert_eq!(moving_average(&[2.0, 4.0, 6.0], 5).unwrap(), [2.0, 3.0, 4.0]);
        assert!(moving_average(&x, 0).is_err());
    }

    #[test]
    fn long_moving_average_matches_direct_mean() {
        let x: Vec<f64> = (0..5000).map(|t| ((t * 7919) % 1000) as f64 * 1e-3).collect();
        let m = moving_average(&x, 7).unwrap();
        for t in [0usize, 6, 1023, 1024, 2047, 4999] {
            let lo = t.saturating_sub(6);
            let direct = x[lo..=t].iter().sum::<f64>() / (t - lo + 1) as f64;
            assert!((m[t] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_examples() {
        let (l, thr) = threshold_and_label(&[0.5, 1.5], ThresholdMode::Fixed(1.0), None, None).unwrap();
        assert_eq!((l, thr), (vec![0, 1], 1.0));
        let (l, thr) =
            threshold_and_label(&[1.9, 2.1], ThresholdMode::MaxValidation, Some(&[0.3, 2.0]), None).unwrap();
        assert_eq!((l, thr), (vec![0, 1], 2.0));
        assert!(threshold_and_label(&[1.0], ThresholdMode::BestF1, None, None).is_err());
        assert!(threshold_and_label(&[1.0], ThresholdMode::MaxValidation, None, None).is_err());
    }

    /// Exhaustive oracle: every candidate threshold below, between and at
    /// each score value.
    fn oracle_best_f1(scores: &[f64], truth: &[u8]) -> f64 {
        let mut cands: Vec<f64> = scores.to_vec();
        cands.push(scores.iter().copied().fold(f64::INFINITY, f64::min) - 1.0);
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        for w in sorted.windows(2) {
            cands.push((w[0] + w[1]) / 2.0);
        }
        cands
            .iter()
            .map(|&thr| evaluate(&apply_threshold(scores, thr), truth, false).unwrap().f1)
            .fold(0.0, f64::max)
    }

    #[test]
    fn best_f1_on_toy_trace() {
        let scores = [0.1, 0.9, 0.4, 0.8, 0.3, 0.85];
        let truth = [0, 1, 0, 1, 1, 0];
        let (thr, f1) = best_f1_threshold(&scores, &truth).unwrap();
        assert!((f1 - oracle_best_f1(&scores, &truth)).abs() < 1e-12);
        // hand enumeration: flagging {0.9, 0.85, 0.8} gives P=2/3, R=2/3;
        // flagging everything >= 0.3 gives P=3/5, R=1 -> F1 = 0.75
        assert!((f1 - 0.75).abs() < 1e-12);
        let m = evaluate(&apply_threshold(&scores, thr), &truth, false).unwrap();
        assert!((m.f1 - f1).abs() < 1e-12);
        let (labels, _) = threshold_and_label(&scores, ThresholdMode::BestF1, None, Some(&truth)).unwrap();
        assert_eq!(labels, [0, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn evaluate_examples() {
        let m = evaluate(&[1, 1, 0, 0], &[1, 0, 1, 0], false).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
        assert_eq!(evaluate(&[0, 1, 1, 0], &[0, 1, 1, 0], false).unwrap().f1, 1.0);
        let m = evaluate(&[0, 0, 1, 0, 0], &[0, 1, 1, 1, 0], true).unwrap();
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.f1, 1.0);
        let m = evaluate(&[0, 0, 1, 0, 0], &[0, 1, 1, 1, 0], false).unwrap();
        assert!((m.recall - 1.0 / 3.0).abs() < 1e-15);
        assert!(evaluate(&[0, 1], &[1], false).is_err());
        let none = evaluate(&[0, 0], &[0, 0], false).unwrap();
        assert_eq!(none.f1, 0.0);
    }

    #[test]
    fn threshold_mode_parsing() {
        assert_eq!("fixed:0".parse::<ThresholdMode>().unwrap(), ThresholdMode::Fixed(0.0));
        assert_eq!("best-f1".parse::<ThresholdMode>().unwrap(), ThresholdMode::BestF1);
        assert_eq!(
            "max-validation".parse::<ThresholdMode>().unwrap(),
            ThresholdMode::MaxValidation
        );
        assert!("fixed:x".parse::<ThresholdMode>().is_err());
        assert_eq!(ThresholdMode::Fixed(1.5).to_string(), "fixed:1.5");
    }
}

use std::ffi::{CStr, CString};
use std::ptr;

use pgma_ffi::*;

const SMALL: &str = r#"{"train": {"window": 16, "max_epochs": 2, "patience": 2, "embed_dim": 8,
    "graph_dim": 8, "temporal_dim": 4, "mlp_hidden": 8, "conv_channels": 2, "k": 3}}"#;

fn last_error() -> String {
    let p = pgma_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn synthetic() -> (*mut PgmaSeries, *mut PgmaSeries) {
    let (mut train, mut test) = (ptr::null_mut(), ptr::null_mut());
    let st = unsafe { pgma_series_synthetic(4, 600, 24, 0.05, 3, 0.5, &mut train, &mut test) };
    assert_eq!(st, PgmaStatus::Ok);
    (train, test)
}

#[test]
fn train_score_save_load() {
    let (train, test) = synthetic();
    unsafe {
        assert_eq!(pgma_series_n_sensors(train), 4);
        assert_eq!(pgma_series_len(train), 300);
        let mut period = 0;
        assert_eq!(pgma_detect_period(train, &mut period), PgmaStatus::Ok);
        assert_eq!(period, 24);

        let cfg = CString::new(SMALL).unwrap();
        let mut det = ptr::null_mut();
        assert_eq!(pgma_detector_train(train, cfg.as_ptr(), &mut det), PgmaStatus::Ok);
        assert_eq!(pgma_detector_period(det), 24);

        let th = CString::new("best-f1").unwrap();
        let mut scores = ptr::null_mut();
        assert_eq!(pgma_detector_score(det, test, 3, th.as_ptr(), &mut scores), PgmaStatus::Ok);
        let n = pgma_scores_len(scores);
        assert_eq!(n, 300 - 16);
        let mut smoothed = vec![0.0; n];
        let mut labels = vec![9u8; n];
        let mut ts = vec![0usize; n];
        assert_eq!(pgma_scores_smoothed(scores, smoothed.as_mut_ptr(), n), PgmaStatus::Ok);
        assert_eq!(pgma_scores_labels(scores, labels.as_mut_ptr(), n), PgmaStatus::Ok);
        assert_eq!(pgma_scores_timestamps(scores, ts.as_mut_ptr(), n), PgmaStatus::Ok);
        assert_eq!(ts[0], 16);
        let thr = pgma_scores_threshold(scores);
        for (s, l) in smoothed.iter().zip(&labels) {
            assert_eq!(*l, u8::from(*s > thr));
        }
        let mut m = PgmaMetrics::default();
        assert_eq!(pgma_scores_metrics(scores, false, &mut m), PgmaStatus::Ok);
        let mut pa = PgmaMetrics::default();
        assert_eq!(pgma_scores_metrics(scores, true, &mut pa), PgmaStatus::Ok);
        assert!(pa.f1 >= m.f1);
        assert_eq!(m.true_positives + m.false_positives + m.true_negatives + m.false_negatives, n);

        // too small a buffer is rejected, not overrun
        assert_eq!(
            pgma_scores_smoothed(scores, smoothed.as_mut_ptr(), n - 1),
            PgmaStatus::InvalidArgument
        );

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("ckpt.json").to_str().unwrap()).unwrap();
        assert_eq!(pgma_detector_save(det, path.as_ptr()), PgmaStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(pgma_detector_load(path.as_ptr(), &mut loaded), PgmaStatus::Ok);
        let mut again = ptr::null_mut();
        assert_eq!(pgma_detector_score(loaded, test, 3, th.as_ptr(), &mut again), PgmaStatus::Ok);
        let mut smoothed2 = vec![0.0; n];
        pgma_scores_smoothed(again, smoothed2.as_mut_ptr(), n);
        assert_eq!(smoothed, smoothed2);

        pgma_scores_free(again);
        pgma_detector_free(loaded);
        pgma_scores_free(scores);
        pgma_detector_free(det);
        pgma_series_free(train);
        pgma_series_free(test);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    unsafe {
        let mut s = ptr::null_mut();
        let missing = CString::new("/definitely/not/here.csv").unwrap();
        assert_eq!(pgma_series_from_csv(missing.as_ptr(), ptr::null(), &mut s), PgmaStatus::Data);
        assert!(last_error().contains("here.csv"));
        assert!(s.is_null());

        assert_eq!(pgma_series_from_csv(ptr::null(), ptr::null(), &mut s), PgmaStatus::InvalidArgument);

        let values = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(pgma_series_from_values(values.as_ptr(), 2, 3, ptr::null(), &mut s), PgmaStatus::Ok);
        assert_eq!(pgma_series_len(s), 3);

        let bad = CString::new(r#"{"train": {"nope": 1}}"#).unwrap();
        let mut det = ptr::null_mut();
        assert_eq!(pgma_detector_train(s, bad.as_ptr(), &mut det), PgmaStatus::Config);
        pgma_series_free(s);

        let garbage = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(garbage.path(), "{}").unwrap();
        let p = CString::new(garbage.path().to_str().unwrap()).unwrap();
        assert_eq!(pgma_detector_load(p.as_ptr(), &mut det), PgmaStatus::Checkpoint);

        // null handles are tolerated by getters and free functions
        assert_eq!(pgma_series_len(ptr::null()), 0);
        pgma_series_free(ptr::null_mut());
        pgma_detector_free(ptr::null_mut());
        pgma_scores_free(ptr::null_mut());
    }
}

#[test]
fn metrics_unavailable_without_labels() {
    let (train, _test) = synthetic();
    unsafe {
        let cfg = CString::new(SMALL).unwrap();
        let mut det = ptr::null_mut();
        assert_eq!(pgma_detector_train(train, cfg.as_ptr(), &mut det), PgmaStatus::Ok);
        let values: Vec<f64> = (0..4 * 40).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut unlabeled = ptr::null_mut();
        pgma_series_from_values(values.as_ptr(), 4, 40, ptr::null(), &mut unlabeled);
        let mut scores = ptr::null_mut();
        assert_eq!(pgma_detector_score(det, unlabeled, 0, ptr::null(), &mut scores), PgmaStatus::Ok);
        let mut m = PgmaMetrics::default();
        assert_eq!(pgma_scores_metrics(scores, false, &mut m), PgmaStatus::Unavailable);
        let th = CString::new("best-f1").unwrap();
        let mut s2 = ptr::null_mut();
        assert_eq!(pgma_detector_score(det, unlabeled, 0, th.as_ptr(), &mut s2), PgmaStatus::Config);
        pgma_scores_free(scores);
        pgma_series_free(unlabeled);
        pgma_detector_free(det);
        pgma_series_free(train);
        pgma_series_free(_test);
    }
}

#[test]
fn version_is_set() {
    let v = unsafe { CStr::from_ptr(pgma_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

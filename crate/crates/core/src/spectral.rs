//! Dominant-period detection from the sensor-averaged amplitude spectrum.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::data::SeriesMatrix;
use crate::error::{PgmaError, Result};

/// Spectra whose largest non-DC amplitude is at or below this are treated
/// as aperiodic.
pub const APERIODIC_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodProfile {
    /// Averaged DFT magnitudes; `amplitudes[k]` belongs to bin `k + 1`.
    pub amplitudes: Vec<f64>,
    pub dominant_frequency: usize,
    pub period: usize,
    /// Set when the spectrum is flat zero and `period` fell back to `T`.
    pub aperiodic: bool,
    /// Length of the series the profile was computed on.
    pub series_len: usize,
}

impl PeriodProfile {
    /// The `k` strongest bins as `(bin, amplitude)`, strongest first, ties to
    /// the lower bin.
    pub fn top_bins(&self, k: usize) -> Vec<(usize, f64)> {
        let mut bins: Vec<(usize, f64)> = self
            .amplitudes
            .iter()
            .enumerate()
            .map(|(i, &a)| (i + 1, a))
            .collect();
        bins.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        bins.truncate(k);
        bins
    }
}

/// Magnitude spectrum of each sensor over bins `1..=T/2`, averaged across
/// sensors.
pub fn amplitude_spectrum(series: &SeriesMatrix) -> Result<Vec<f64>> {
    let rows: Vec<&[f64]> = (0..series.n_sensors()).map(|i| series.sensor(i)).collect();
    amplitude_spectrum_rows(&rows)
}

/// Same as [`amplitude_spectrum`] over raw equal-length rows.
pub fn amplitude_spectrum_rows(rows: &[&[f64]]) -> Result<Vec<f64>> {
    let t = rows.first().map_or(0, |r| r.len());
    if t < 4 {
        return Err(PgmaError::Data(format!(
            "spectrum needs at least 4 timestamps, got {t}"
        )));
    }
    let half = t / 2;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(t);
    let mut acc = vec![0.0; half];
    let mut buf = vec![Complex::new(0.0, 0.0); t];
    for row in rows {
        if row.len() != t {
            return Err(PgmaError::Shape("spectrum rows differ in length".into()));
        }
        // removing the mean only touches the DC bin, and keeps rounding noise
        // out of the others for constant inputs
        let mean = row.iter().sum::<f64>() / t as f64;
        for (dst, &v) in buf.iter_mut().zip(row.iter()) {
            *dst = Complex::new(v - mean, 0.0);
        }
        fft.process(&mut buf);
        for (a, c) in acc.iter_mut().zip(&buf[1..=half]) {
            *a += c.norm();
        }
    }
    let n = rows.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Finds the strongest non-DC bin `f` and the period `ceil(T / f)`.
pub fn detect_period(series: &SeriesMatrix) -> Result<PeriodProfile> {
    let amplitudes = amplitude_spectrum(series)?;
    Ok(profile_from_spectrum(amplitudes, series.len()))
}

pub fn detect_period_rows(rows: &[&[f64]]) -> Result<PeriodProfile> {
    let amplitudes = amplitude_spectrum_rows(rows)?;
    Ok(profile_from_spectrum(amplitudes, rows[0].len()))
}

fn profile_from_spectrum(amplitudes: Vec<f64>, t: usize) -> PeriodProfile {
    let mut best = 0;
    for (k, &a) in amplitudes.iter().enumerate() {
        if a > amplitudes[best] {
            best = k;
        }
    }
    if amplitudes[best] <= APERIODIC_FLOOR {
        return PeriodProfile {
            amplitudes,
            dominant_frequency: 1,
            period: t,
            aperiodic: true,
            series_len: t,
        };
    }
    let f = best + 1;
    PeriodProfile {
        amplitudes,
        dominant_frequency: f,
        period: t.div_ceil(f),
        aperiodic: false,
        series_len: t,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Direct O(T^2) DFT magnitudes for bins 1..=T/2.
    fn brute_dft(x: &[f64]) -> Vec<f64> {
        let t = x.len();
        (1..=t / 2)
            .map(|f| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, &v) in x.iter().enumerate() {
                    let ang = -2.0 * PI * (f * n) as f64 / t as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    fn sine(t: usize, period: f64, amp: f64) -> Vec<f64> {
        (0..t).map(|n| amp * (2.0 * PI * n as f64 / period).sin()).collect()
    }

    #[test]
    fn pure_sine_peaks_at_bin_ten() {
        let x = sine(240, 24.0, 1.0);
        let spec = amplitude_spectrum_rows(&[&x]).unwrap();
        let oracle = brute_dft(&x);
        let peak = oracle[9];
        assert!((spec[9] - peak).abs() < 1e-9);
        for (k, (&a, &o)) in spec.iter().zip(&oracle).enumerate() {
            if k != 9 {
                assert!(a <= 1e-9 * peak, "bin {} = {a}", k + 1);
                assert!(o <= 1e-9 * peak, "oracle bin {} = {o}", k + 1);
            }
        }
        let s = SeriesMatrix::from_rows(vec![x], None).unwrap();
        let p = detect_period(&s).unwrap();
        assert_eq!((p.dominant_frequency, p.period, p.aperiodic), (10, 24, false));
    }

    #[test]
    fn opposite_sines_average_amplitudes() {
        let a = sine(240, 24.0, 1.0);
        let b: Vec<f64> = a.iter().map(|v| -v).collect();
        let spec = amplitude_spectrum_rows(&[&a, &b]).unwrap();
        let oa = brute_dft(&a);
        let ob = brute_dft(&b);
        for k in 0..spec.len() {
            assert!((spec[k] - (oa[k] + ob[k]) / 2.0).abs() < 1e-9);
        }
        let argmax = (0..spec.len()).max_by(|&i, &j| spec[i].total_cmp(&spec[j])).unwrap();
        assert_eq!(argmax + 1, 10);
    }

    #[test]
    fn larger_component_wins() {
        let x: Vec<f64> = sine(240, 60.0, 0.3)
            .iter()
            .zip(sine(240, 12.0, 1.0))
            .map(|(a, b)| a + b)
            .collect();
        let p = detect_period_rows(&[&x]).unwrap();
        assert_eq!((p.dominant_frequency, p.period), (20, 12));
        let oracle = brute_dft(&x);
        let oracle_arg = (0..oracle.len()).max_by(|&i, &j| oracle[i].total_cmp(&oracle[j])).unwrap();
        assert_eq!(oracle_arg + 1, 20);
    }

    #[test]
    fn constant_series_is_aperiodic() {
        let x = vec![3.7; 50];
        let spec = amplitude_spectrum_rows(&[&x]).unwrap();
        assert!(spec.iter().all(|&a| a <= APERIODIC_FLOOR));
        let p = detect_period_rows(&[&x]).unwrap();
        assert!(p.aperiodic);
        assert_eq!(p.period, 50);
    }

    #[test]
    fn ties_prefer_lower_frequency() {
        let x: Vec<f64> = sine(120, 12.0, 1.0)
            .iter()
            .zip(sine(120, 24.0, 1.0))
            .map(|(a, b)| a + b)
            .collect();
        let p = detect_period_rows(&[&x]).unwrap();
        // bins 5 and 10 have equal magnitude up to rounding; either way the
        // result must be one of the two
        assert!(p.dominant_frequency == 5 || p.dominant_frequency == 10);
        let flat = profile_from_spectrum(vec![1.0, 1.0, 1.0], 6);
        assert_eq!(flat.dominant_frequency, 1);
    }

    #[test]
    fn short_series_rejected() {
        assert!(amplitude_spectrum_rows(&[&[1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn period_rounds_up() {
        let p = profile_from_spectrum(vec![0.0, 0.0, 5.0, 0.0, 0.0], 10);
        assert_eq!(p.dominant_frequency, 3);
        assert_eq!(p.period, 4);
        assert_eq!(p.top_bins(2), vec![(3, 5.0), (1, 0.0)]);
    }
}

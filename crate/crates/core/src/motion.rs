//! Motion-artifact detection and correction.
//!
//! Detection flags amplitude excursions and bursts of local variance.
//! Correction subtracts a cubic smoothing-spline trend inside each flagged
//! segment, then removes remaining outliers by thresholding Daubechies-4
//! wavelet detail coefficients level by level.

use crate::error::{Error, Result};
use crate::scalar::{mean, median, quantile, variance_pop, variance_sample, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trigger {
    Amplitude,
    MovingStd,
}

/// Half-open sample range `[start, end)` flagged on one channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactSegment {
    pub start: usize,
    pub end: usize,
    pub channel: String,
    pub trigger: Trigger,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionParams<T> {
    /// Amplitude threshold in multiples of the series standard deviation.
    pub amp_sigma: T,
    pub std_window_s: T,
    /// Moving-std threshold in multiples of its median.
    pub std_threshold: T,
    /// The moving std must also exceed this multiple of the series std, so
    /// smooth responses on quiet baselines are not flagged.
    pub std_floor_sigma: T,
    /// Padding added on both sides of a flagged run.
    pub pad_s: T,
    /// Length of the baseline used to re-anchor a corrected segment.
    pub baseline_s: T,
    /// Roughness penalty of the smoothing spline, in sample units.
    pub spline_lambda: T,
    pub iqr_multiplier: T,
}

impl<T: Real> Default for MotionParams<T> {
    fn default() -> Self {
        MotionParams {
            amp_sigma: T::lit(5.0),
            std_window_s: T::lit(1.0),
            std_threshold: T::lit(3.0),
            std_floor_sigma: T::lit(0.5),
            pad_s: T::lit(0.5),
            baseline_s: T::lit(2.0),
            spline_lambda: T::lit(0.001),
            iqr_multiplier: T::lit(1.5),
        }
    }
}

fn samples<T: Real>(seconds: T, fs: T) -> usize {
    (seconds * fs).round().to_usize().unwrap_or(0)
}

fn moving_std<T: Real>(x: &[T], w: usize) -> Vec<T> {
    let n = x.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(w / 2);
            let hi = (lo + w).min(n);
            variance_pop(&x[lo..hi]).sqrt()
        })
        .collect()
}

/// Flags artifact segments on one channel series.
pub fn detect_artifacts<T: Real>(
    x: &[T],
    fs: T,
    channel: &str,
    params: &MotionParams<T>,
) -> Result<Vec<ArtifactSegment>> {
    let w = samples(params.std_window_s, fs).max(2);
    if x.len() <= w {
        return Err(Error::Data(format!(
            "series of {} samples is not longer than the {w}-sample std window",
            x.len()
        )));
    }
    let sd = variance_sample(x).sqrt();
    if sd <= T::zero() {
        return Ok(Vec::new());
    }
    let centre = median(x);
    let mstd = moving_std(x, w);
    let mstd_median = median(&mstd);
    let amp_flag: Vec<bool> = x.iter().map(|&v| (v - centre).abs() > params.amp_sigma * sd).collect();
    let std_flag: Vec<bool> = mstd
        .iter()
        .map(|&s| s > params.std_threshold * mstd_median && s > params.std_floor_sigma * sd)
        .collect();

    let pad = samples(params.pad_s, fs);
    let n = x.len();
    let mut segments: Vec<ArtifactSegment> = Vec::new();
    let mut i = 0;
    while i < n {
        if !(amp_flag[i] || std_flag[i]) {
            i += 1;
            continue;
        }
        let run_start = i;
        let mut amplitude = false;
        while i < n && (amp_flag[i] || std_flag[i]) {
            amplitude |= amp_flag[i];
            i += 1;
        }
        let start = run_start.saturating_sub(pad);
        let end = (i + pad).min(n);
        let trigger = if amplitude { Trigger::Amplitude } else { Trigger::MovingStd };
        match segments.last_mut() {
            Some(prev) if start <= prev.end => {
                prev.end = prev.end.max(end);
                if trigger == Trigger::Amplitude {
                    prev.trigger = Trigger::Amplitude;
                }
            }
            _ => segments.push(ArtifactSegment {
                start,
                end,
                channel: channel.to_string(),
                trigger,
            }),
        }
    }
    Ok(segments)
}

/// Solves a symmetric positive-definite pentadiagonal system in place.
///
/// `diag`, `off1`, `off2` hold the main, first and second super-diagonals.
fn solve_pentadiagonal<T: Real>(diag: &[T], off1: &[T], off2: &[T], rhs: &mut [T]) -> Result<()> {
    let n = diag.len();
    // Banded Cholesky: L has unit bandwidth 2, stored row-wise.
    let mut l0 = vec![T::zero(); n];
    let mut l1 = vec![T::zero(); n];
    let mut l2 = vec![T::zero(); n];
    for i in 0..n {
        if i >= 2 {
            l2[i] = off2[i - 2] / l0[i - 2];
        }
        if i >= 1 {
            let mut v = off1[i - 1];
            if i >= 2 {
                v = v - l2[i] * l1[i - 1];
            }
            l1[i] = v / l0[i - 1];
        }
        let mut d = diag[i] - l1[i] * l1[i] - l2[i] * l2[i];
        if !(d > T::zero()) {
            return Err(Error::Numerical("smoothing-spline system is not positive definite".into()));
        }
        d = d.sqrt();
        l0[i] = d;
    }
    for i in 0..n {
        let mut v = rhs[i];
        if i >= 1 {
            v = v - l1[i] * rhs[i - 1];
        }
        if i >= 2 {
            v = v - l2[i] * rhs[i - 2];
        }
        rhs[i] = v / l0[i];
    }
    for i in (0..n).rev() {
        let mut v = rhs[i];
        if i + 1 < n {
            v = v - l1[i + 1] * rhs[i + 1];
        }
        if i + 2 < n {
            v = v - l2[i + 2] * rhs[i + 2];
        }
        rhs[i] = v / l0[i];
    }
    Ok(())
}

/// Cubic smoothing spline through equally spaced samples (unit spacing),
/// minimising `Σ(y − f)² + λ∫f''²` via the Reinsch formulation.
pub fn smoothing_spline<T: Real>(y: &[T], lambda: T) -> Result<Vec<T>> {
    let n = y.len();
    if n < 3 {
        return Ok(y.to_vec());
    }
    let m = n - 2;
    let (two_thirds, sixth) = (T::lit(2.0 / 3.0), T::lit(1.0 / 6.0));
    // R + λ QᵀQ with Q the second-difference operator.
    let diag: Vec<T> = (0..m).map(|_| two_thirds + lambda * T::lit(6.0)).collect();
    let off1: Vec<T> = (0..m.saturating_sub(1)).map(|_| sixth - lambda * T::lit(4.0)).collect();
    let off2: Vec<T> = (0..m.saturating_sub(2)).map(|_| lambda).collect();
    let mut gamma: Vec<T> = (0..m).map(|i| y[i] - T::lit(2.0) * y[i + 1] + y[i + 2]).collect();
    solve_pentadiagonal(&diag, &off1, &off2, &mut gamma)?;
    // f = y − λ Q γ
    let mut f = y.to_vec();
    for (i, &g) in gamma.iter().enumerate() {
        f[i] = f[i] - lambda * g;
        f[i + 1] = f[i + 1] + T::lit(2.0) * lambda * g;
        f[i + 2] = f[i + 2] - lambda * g;
    }
    Ok(f)
}

/// Spline-based correction of flagged segments. Samples outside the
/// segments are returned unchanged.
pub fn spline_correct<T: Real>(
    x: &[T],
    segments: &[ArtifactSegment],
    fs: T,
    params: &MotionParams<T>,
) -> Result<Vec<T>> {
    let n = x.len();
    let mut out = x.to_vec();
    let baseline = samples(params.baseline_s, fs).max(1);
    let mut sorted: Vec<&ArtifactSegment> = segments.iter().collect();
    sorted.sort_by_key(|s| s.start);
    for seg in sorted {
        if !(seg.start < seg.end && seg.end <= n) {
            return Err(Error::Data(format!(
                "segment [{}, {}) invalid for a series of {n} samples",
                seg.start, seg.end
            )));
        }
        let data = &out[seg.start..seg.end];
        let trend = smoothing_spline(data, params.spline_lambda)?;
        let residual: Vec<T> = data.iter().zip(&trend).map(|(&a, &b)| a - b).collect();
        let r_mean = mean(&residual);
        let anchor = if seg.start > 0 {
            mean(&out[seg.start.saturating_sub(baseline)..seg.start])
        } else if seg.end < n {
            mean(&out[seg.end..(seg.end + baseline).min(n)])
        } else {
            T::zero()
        };
        for (k, r) in residual.into_iter().enumerate() {
            out[seg.start + k] = r - r_mean + anchor;
        }
    }
    Ok(out)
}

/// Daubechies-4 (eight-tap) reconstruction low-pass filter.
pub const DB4: [f64; 8] = [
    0.230_377_813_308_855_23,
    0.714_846_570_552_541_5,
    0.630_880_767_929_590_4,
    -0.027_983_769_416_983_85,
    -0.187_034_811_718_881_14,
    0.030_841_381_835_986_965,
    0.032_883_011_666_982_945,
    -0.010_597_401_784_997_278,
];

fn filters<T: Real>() -> ([T; 8], [T; 8]) {
    let h: [T; 8] = DB4.map(T::lit);
    let mut g = [T::zero(); 8];
    for (n, gv) in g.iter_mut().enumerate() {
        let v = h[7 - n];
        *gv = if n % 2 == 0 { v } else { -v };
    }
    (h, g)
}

/// Periodized orthogonal DWT. Returns the final approximation and the
/// detail levels from finest to coarsest.
pub fn dwt<T: Real>(x: &[T], levels: usize) -> (Vec<T>, Vec<Vec<T>>) {
    let (h, g) = filters::<T>();
    let mut approx = x.to_vec();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let n = approx.len();
        let half = n / 2;
        let mut a = vec![T::zero(); half];
        let mut d = vec![T::zero(); half];
        for k in 0..half {
            for j in 0..8 {
                let v = approx[(2 * k + j) % n];
                a[k] = a[k] + h[j] * v;
                d[k] = d[k] + g[j] * v;
            }
        }
        details.push(d);
        approx = a;
    }
    (approx, details)
}

/// Inverse of [`dwt`].
pub fn idwt<T: Real>(approx: &[T], details: &[Vec<T>]) -> Vec<T> {
    let (h, g) = filters::<T>();
    let mut a = approx.to_vec();
    for d in details.iter().rev() {
        let n = 2 * a.len();
        let mut x = vec![T::zero(); n];
        for k in 0..a.len() {
            for j in 0..8 {
                let idx = (2 * k + j) % n;
                x[idx] = x[idx] + h[j] * a[k] + g[j] * d[k];
            }
        }
        a = x;
    }
    a
}

/// Deepest level whose coefficients still span one filter length.
pub fn max_level(n: usize) -> usize {
    let mut level = 0;
    let mut len = n;
    while len / 2 >= 7 && len % 2 == 0 {
        len /= 2;
        level += 1;
        if len < 8 {
            break;
        }
    }
    level
}

/// Levels with fewer detail coefficients than this pass through untouched:
/// their quartiles are too coarse to tell an outlier from the signal itself.
pub const MIN_LEVEL_COEFFS: usize = 32;

/// Wavelet outlier removal: detail coefficients whose magnitude lies more
/// than `iqr_multiplier`·IQR above the upper quartile of their level's
/// magnitudes are zeroed.
pub fn wavelet_correct<T: Real>(x: &[T], iqr_multiplier: T) -> Result<Vec<T>> {
    let n = x.len();
    if n < 16 {
        return Err(Error::Data(format!("wavelet correction needs at least 16 samples, got {n}")));
    }
    let padded_len = n.next_power_of_two();
    let extra = padded_len - n;
    let left = extra / 2;
    let right = extra - left;
    let mut ext = Vec::with_capacity(padded_len);
    // Odd reflection keeps value and slope continuous at both ends.
    let two = T::lit(2.0);
    ext.extend((1..=left).rev().map(|i| two * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=right).map(|i| two * x[n - 1] - x[n - 1 - i]));

    let (approx, mut details) = dwt(&ext, max_level(padded_len));
    for level in details.iter_mut().filter(|l| l.len() >= MIN_LEVEL_COEFFS) {
        let mags: Vec<T> = level.iter().map(|c| c.abs()).collect();
        let q1 = quantile(&mags, T::lit(0.25));
        let q3 = quantile(&mags, T::lit(0.75));
        let fence = q3 + iqr_multiplier * (q3 - q1);
        for c in level.iter_mut() {
            if c.abs() > fence {
                *c = T::zero();
            }
        }
    }
    let rec = idwt(&approx, &details);
    Ok(rec[left..left + n].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    const FS: f64 = 3.9;

    fn sine(f: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / FS).sin()).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn db4_is_orthonormal() {
        let s: f64 = DB4.iter().sum();
        assert!((s - 2f64.sqrt()).abs() < 1e-12);
        for shift in [0usize, 2, 4, 6] {
            let dot: f64 = (0..8 - shift).map(|i| DB4[i] * DB4[i + shift]).sum();
            let want = if shift == 0 { 1.0 } else { 0.0 };
            assert!((dot - want).abs() < 1e-12, "shift {shift}: {dot}");
        }
    }

    #[test]
    fn dwt_round_trip() {
        let x: Vec<f64> = (0..256).map(|i| ((i * 31 % 17) as f64).sin() + i as f64 * 0.01).collect();
        let (a, d) = dwt(&x, max_level(256));
        let y = idwt(&a, &d);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    /// Direct threshold evaluation on the analytic signal: the same two
    /// criteria, computed independently with full-window statistics.
    fn oracle_flags(x: &[f64], w: usize) -> bool {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let mut sorted = x.to_vec();
        sorted.sort_by(f64::total_cmp);
        let med = (sorted[x.len() / 2] + sorted[(x.len() - 1) / 2]) / 2.0;
        let amp = x.iter().any(|v| (v - med).abs() > 5.0 * sd);
        let ms: Vec<f64> = (0..x.len())
            .map(|i| {
                let lo = i.saturating_sub(w / 2);
                let hi = (lo + w).min(x.len());
                let s = &x[lo..hi];
                let mm = s.iter().sum::<f64>() / s.len() as f64;
                (s.iter().map(|v| (v - mm).powi(2)).sum::<f64>() / s.len() as f64).sqrt()
            })
            .collect();
        let mut sms = ms.clone();
        sms.sort_by(f64::total_cmp);
        let mmed = (sms[ms.len() / 2] + sms[(ms.len() - 1) / 2]) / 2.0;
        amp || ms.iter().any(|v| *v > 3.0 * mmed && *v > 0.5 * sd)
    }

    #[test]
    fn clean_sine_has_no_artifacts() {
        let x = sine(0.1, 800);
        assert!(!oracle_flags(&x, 4));
        let segs = detect_artifacts(&x, FS, "S1-D1", &MotionParams::default()).unwrap();
        assert!(segs.is_empty(), "{segs:?}");
    }

    #[test]
    fn single_spike_gives_one_segment() {
        let mut x = sine(0.1, 800);
        let sd = (x.iter().map(|v| v * v).sum::<f64>() / 799.0).sqrt();
        x[400] += 10.0 * sd;
        assert!(oracle_flags(&x, 4));
        let segs = detect_artifacts(&x, FS, "S1-D1", &MotionParams::default()).unwrap();
        assert_eq!(segs.len(), 1, "{segs:?}");
        assert!(segs[0].start <= 400 && 400 < segs[0].end);
        assert_eq!(segs[0].trigger, Trigger::Amplitude);
        assert_eq!(segs[0].channel, "S1-D1");
    }

    #[test]
    fn smooth_blocks_on_flat_baseline_are_not_flagged() {
        // Raised-cosine bumps separated by exactly flat stretches.
        let x: Vec<f64> = (0..800)
            .map(|i| {
                let ph = (i % 156) as f64 / 78.0;
                if ph < 1.0 { 1.0 - (2.0 * PI * ph).cos() } else { 0.0 }
            })
            .collect();
        assert!(detect_artifacts(&x, FS, "c", &MotionParams::default()).unwrap().is_empty());
        let mut spiky = x.clone();
        spiky[500] += 6.0;
        assert_eq!(detect_artifacts(&spiky, FS, "c", &MotionParams::default()).unwrap().len(), 1);
    }

    #[test]
    fn constant_series_has_no_artifacts() {
        assert!(detect_artifacts(&[2.0; 100], FS, "c", &MotionParams::default()).unwrap().is_empty());
    }

    #[test]
    fn detection_needs_more_than_a_window() {
        assert!(detect_artifacts(&[1.0, 2.0, 3.0], FS, "c", &MotionParams::default()).is_err());
    }

    #[test]
    fn spline_with_no_segments_is_identity() {
        let x = sine(0.1, 100);
        assert_eq!(spline_correct(&x, &[], FS, &MotionParams::default()).unwrap(), x);
    }

    #[test]
    fn spline_removes_step() {
        let mut x = vec![0.0; 200];
        for v in &mut x[80..120] {
            *v = 10.0;
        }
        let seg = ArtifactSegment { start: 78, end: 122, channel: "c".into(), trigger: Trigger::Amplitude };
        let y = spline_correct(&x, &[seg], FS, &MotionParams::default()).unwrap();
        let worst = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 0.5, "{worst}");
    }

    #[test]
    fn spline_leaves_outside_untouched() {
        let x: Vec<f64> = (0..300).map(|i| (i as f64 * 0.05).sin() * 3.0 + (i % 7) as f64).collect();
        let segs = vec![
            ArtifactSegment { start: 0, end: 20, channel: "c".into(), trigger: Trigger::MovingStd },
            ArtifactSegment { start: 100, end: 150, channel: "c".into(), trigger: Trigger::Amplitude },
        ];
        let y = spline_correct(&x, &segs, FS, &MotionParams::default()).unwrap();
        for i in (20..100).chain(150..300) {
            assert_eq!(x[i], y[i]);
        }
    }

    #[test]
    fn spline_full_coverage_is_demeaned() {
        let x: Vec<f64> = (0..120).map(|i| 4.0 + (i as f64 * 0.3).sin()).collect();
        let seg = ArtifactSegment { start: 0, end: 120, channel: "c".into(), trigger: Trigger::Amplitude };
        let y = spline_correct(&x, &[seg], FS, &MotionParams::default()).unwrap();
        assert!(mean(&y).abs() < 1e-12);
        assert!(y.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn smoothing_spline_limits() {
        let y: Vec<f64> = (0..50).map(|i| ((i * 13 % 7) as f64) - 3.0).collect();
        let interp = smoothing_spline(&y, 1e-12).unwrap();
        for (a, b) in y.iter().zip(&interp) {
            assert!((a - b).abs() < 1e-9);
        }
        // Heavy smoothing tends to the least-squares line.
        let line: Vec<f64> = (0..50).map(|i| 2.0 * i as f64 + 1.0).collect();
        let noisy: Vec<f64> = line.iter().zip(&y).map(|(a, b)| a + b).collect();
        let smooth = smoothing_spline(&noisy, 1e9).unwrap();
        let xm = 24.5;
        let ym = mean(&noisy);
        let slope = (0..50).map(|i| (i as f64 - xm) * (noisy[i] - ym)).sum::<f64>()
            / (0..50).map(|i| (i as f64 - xm).powi(2)).sum::<f64>();
        for i in 0..50 {
            let fit = ym + slope * (i as f64 - xm);
            assert!((smooth[i] - fit).abs() < 1e-3, "{i}");
        }
    }

    #[test]
    fn wavelet_zero_in_zero_out() {
        let y = wavelet_correct(&[0.0f64; 100], 1.5).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wavelet_infinite_threshold_is_identity() {
        let x: Vec<f64> = (0..777).map(|i| (i as f64 * 0.07).sin() + ((i * 7919) % 13) as f64 * 0.1).collect();
        let y = wavelet_correct(&x, f64::INFINITY).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn wavelet_keeps_smooth_signal() {
        // 1500 and 1700 pad to 2048 and exercise the short coarse levels.
        for n in [780, 1000, 1500, 1700, 2048] {
            let x = sine(0.05, n);
            let y = wavelet_correct(&x, 1.5).unwrap();
            let diff: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            assert!(rms(&diff) < 0.05 * rms(&x), "n={n}: {}", rms(&diff) / rms(&x));
        }
    }

    #[test]
    fn wavelet_suppresses_spike() {
        let mut x = sine(0.05, 780);
        let sd = rms(&x);
        let clean = x[390];
        x[390] += 20.0 * sd;
        let y = wavelet_correct(&x, 1.5).unwrap();
        let residual = (y[390] - clean).abs();
        assert!(residual <= 0.2 * 20.0 * sd, "residual {residual}");
    }

    #[test]
    fn wavelet_rejects_short_series() {
        assert!(wavelet_correct(&[1.0f64; 15], 1.5).is_err());
    }

    #[test]
    fn motion_kernels_run_in_f32() {
        let x: Vec<f32> = sine(0.05, 300).into_iter().map(|v| v as f32).collect();
        let y = wavelet_correct(&x, f32::INFINITY).unwrap();
        assert!(x.iter().zip(&y).all(|(a, b)| (a - b).abs() < 1e-4));
    }
}

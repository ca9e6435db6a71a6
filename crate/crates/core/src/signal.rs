//! Band-pass filtering and short-channel regression.
//!
//! The band-pass is a digital Butterworth design (bilinear transform with
//! pre-warped band edges) realised as cascaded second-order sections. The
//! default 0.05–0.7 Hz passband keeps the hemodynamic band while removing
//! slow drift, cardiac and most respiratory power.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::model::{ChannelKind, Montage};
use crate::scalar::{mean, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandpassSpec<T> {
    pub low_cut_hz: T,
    pub high_cut_hz: T,
    /// Total filter order; each band edge gets `order / 2` poles.
    pub order: usize,
    pub zero_phase: bool,
}

impl<T: Real> Default for BandpassSpec<T> {
    fn default() -> Self {
        BandpassSpec {
            low_cut_hz: T::lit(0.05),
            high_cut_hz: T::lit(0.7),
            order: 4,
            zero_phase: true,
        }
    }
}

impl<T: Real> BandpassSpec<T> {
    pub fn validate(&self, fs: T) -> Result<()> {
        let nyquist = fs / T::lit(2.0);
        if !(self.low_cut_hz > T::zero() && self.low_cut_hz < self.high_cut_hz) {
            return Err(Error::Config(format!(
                "band edges must satisfy 0 < low ({}) < high ({})",
                self.low_cut_hz, self.high_cut_hz
            )));
        }
        if self.high_cut_hz >= nyquist {
            return Err(Error::Config(format!(
                "high cut {} Hz must be below Nyquist {} Hz",
                self.high_cut_hz, nyquist
            )));
        }
        if self.order == 0 || self.order % 2 != 0 {
            return Err(Error::Config(format!("filter order must be even and positive, got {}", self.order)));
        }
        Ok(())
    }
}

/// Second-order section `(b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad<T> {
    pub b: [T; 3],
    pub a: [T; 2],
}

impl<T: Real> Biquad<T> {
    fn response(&self, z_inv: Complex<T>) -> Complex<T> {
        let z2 = z_inv * z_inv;
        let num = Complex::from(self.b[0]) + z_inv * self.b[1] + z2 * self.b[2];
        let den = Complex::from(T::one()) + z_inv * self.a[0] + z2 * self.a[1];
        num / den
    }

    fn dc_gain(&self) -> T {
        (self.b[0] + self.b[1] + self.b[2]) / (T::one() + self.a[0] + self.a[1])
    }

    /// Transposed direct form II with initial state `z`.
    fn run(&self, x: &mut [T], mut z: [T; 2]) {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        for v in x.iter_mut() {
            let input = *v;
            let y = b0 * input + z[0];
            z[0] = b1 * input - a1 * y + z[1];
            z[1] = b2 * input - a2 * y;
            *v = y;
        }
    }

    /// State that makes a constant input `u` produce its steady-state output.
    fn steady_state(&self, u: T) -> [T; 2] {
        let y = self.dc_gain() * u;
        [y - self.b[0] * u, self.b[2] * u - self.a[1] * y]
    }
}

/// A designed Butterworth band-pass filter for one sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct ButterworthBandpass<T> {
    pub spec: BandpassSpec<T>,
    pub fs: T,
    sections: Vec<Biquad<T>>,
    settle_samples: usize,
}

impl<T: Real> ButterworthBandpass<T> {
    pub fn design(spec: BandpassSpec<T>, fs: T) -> Result<Self> {
        spec.validate(fs)?;
        let two = T::lit(2.0);
        let pi = T::PI();
        let two_fs = two * fs;
        let w1 = two_fs * (pi * spec.low_cut_hz / fs).tan();
        let w2 = two_fs * (pi * spec.high_cut_hz / fs).tan();
        let w0_sq = w1 * w2;
        let bw = w2 - w1;
        let n = spec.order / 2;

        let bilinear = |s: Complex<T>| (Complex::from(two_fs) + s) / (Complex::from(two_fs) - s);
        let mut sections = Vec::with_capacity(n);
        let mut push = |p1: Complex<T>, p2: Complex<T>| {
            let (z1, z2) = (bilinear(p1), bilinear(p2));
            sections.push(Biquad {
                b: [T::one(), T::zero(), -T::one()],
                a: [-(z1 + z2).re, (z1 * z2).re],
            });
        };
        let tiny = T::tol(-12);
        for k in 0..n {
            // Left-half-plane poles of the normalised low-pass prototype.
            let angle = pi * T::from_usize_lossy(2 * k + n + 1) / T::from_usize_lossy(2 * n);
            let p = Complex::new(angle.cos(), angle.sin());
            // Low-pass to band-pass: each prototype pole yields the roots of
            // s² − p·B·s + ω0² = 0.
            let pb = p * bw;
            let disc = (pb * pb - Complex::from(T::lit(4.0) * w0_sq)).sqrt();
            let r1 = (pb + disc) / two;
            let r2 = (pb - disc) / two;
            if p.im.abs() <= tiny {
                push(r1, r2);
            } else if p.im > T::zero() {
                push(r1, r1.conj());
                push(r2, r2.conj());
            }
        }

        let mut filt = ButterworthBandpass {
            spec,
            fs,
            sections,
            settle_samples: 0,
        };
        // Unit gain at the digital image of the analog centre frequency.
        let centre_hz = fs / pi * (w0_sq.sqrt() / two_fs).atan();
        let g = filt.single_pass_magnitude(centre_hz);
        let per_section = g.powf(-T::one() / T::from_usize_lossy(filt.sections.len()));
        for s in &mut filt.sections {
            for b in &mut s.b {
                *b = *b * per_section;
            }
        }

        // Samples for the slowest pole to decay by 1e-9.
        let r_max = filt
            .sections
            .iter()
            .map(|s| {
                let disc = Complex::from(s.a[0] * s.a[0] - T::lit(4.0) * s.a[1]).sqrt();
                let lhs = Complex::from(-s.a[0]);
                ((lhs + disc) / two).norm().max(((lhs - disc) / two).norm())
            })
            .fold(T::zero(), T::max);
        filt.settle_samples = if r_max < T::one() {
            (T::lit(1e-9).ln() / r_max.ln()).ceil().to_usize().unwrap_or(usize::MAX)
        } else {
            usize::MAX
        };
        Ok(filt)
    }

    pub fn sections(&self) -> &[Biquad<T>] {
        &self.sections
    }

    pub fn settle_samples(&self) -> usize {
        self.settle_samples
    }

    fn single_pass_magnitude(&self, f_hz: T) -> T {
        let w = T::lit(2.0) * T::PI() * f_hz / self.fs;
        let z_inv = Complex::new(w.cos(), -w.sin());
        self.sections
            .iter()
            .fold(Complex::from(T::one()), |acc, s| acc * s.response(z_inv))
            .norm()
    }

    /// Magnitude response of [`Self::apply`] at `f_hz`; squared when zero-phase.
    pub fn magnitude(&self, f_hz: T) -> T {
        let m = self.single_pass_magnitude(f_hz);
        if self.spec.zero_phase {
            m * m
        } else {
            m
        }
    }

    fn forward(&self, x: &mut [T]) {
        let Some(&first) = x.first() else { return };
        let mut u = first;
        for s in &self.sections {
            let z = s.steady_state(u);
            u = s.dc_gain() * u;
            s.run(x, z);
        }
    }

    /// Filters `x`. Zero-phase mode runs forward and backward over an
    /// odd-reflection padded copy, padding by one settling length.
    pub fn apply(&self, x: &[T]) -> Result<Vec<T>> {
        let min_len = 3 * self.spec.order;
        if x.len() < min_len.max(2) {
            return Err(Error::Data(format!(
                "series of {} samples is too short for an order-{} filter (need {min_len})",
                x.len(),
                self.spec.order
            )));
        }
        if !self.spec.zero_phase {
            let mut y = x.to_vec();
            self.forward(&mut y);
            return Ok(y);
        }
        let n = x.len();
        let pad = self.settle_samples.min(n - 1);
        let two = T::lit(2.0);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| two * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| two * x[n - 1] - x[n - 1 - i]));
        self.forward(&mut ext);
        ext.reverse();
        self.forward(&mut ext);
        ext.reverse();
        Ok(ext[pad..pad + n].to_vec())
    }
}

/// Designs and applies a band-pass in one call.
pub fn bandpass<T: Real>(x: &[T], spec: BandpassSpec<T>, fs: T) -> Result<Vec<T>> {
    ButterworthBandpass::design(spec, fs)?.apply(x)
}

/// Removes the projection of `long` onto the demeaned `short` series.
///
/// Returns the corrected series and the regression coefficient.
pub fn short_channel_regress<T: Real>(long: &[T], short: &[T]) -> Result<(Vec<T>, T)> {
    if long.len() != short.len() {
        return Err(Error::Data(format!(
            "long ({}) and short ({}) series lengths differ",
            long.len(),
            short.len()
        )));
    }
    let ml = mean(long);
    let ms = mean(short);
    let mut num = T::zero();
    let mut den = T::zero();
    let mut scale = T::zero();
    for (&l, &s) in long.iter().zip(short) {
        let ds = s - ms;
        num = num + (l - ml) * ds;
        den = den + ds * ds;
        scale = scale + s * s;
    }
    if !(den > T::epsilon() * scale) || den == T::zero() {
        return Err(Error::Data("uninformative short channel (zero variance)".into()));
    }
    let beta = num / den;
    Ok((long.iter().zip(short).map(|(&l, &s)| l - beta * (s - ms)).collect(), beta))
}

fn id_key(id: &str) -> (u64, &str) {
    let digits: String = id.chars().filter(char::is_ascii_digit).collect();
    (digits.parse().unwrap_or(u64::MAX), id)
}

/// Picks the short channel used to clean `long_channel`: one sharing its
/// source (smallest detector id on ties), otherwise the first short channel.
pub fn match_short_channel(montage: &Montage, long_channel: &str) -> Result<String> {
    let shorts: Vec<_> = montage
        .channels
        .iter()
        .filter(|c| c.kind == ChannelKind::Short)
        .collect();
    let Some(first) = shorts.first() else {
        return Err(Error::Data("montage has no short channels".into()));
    };
    let long = montage
        .channel(long_channel)
        .ok_or_else(|| Error::Data(format!("unknown channel {long_channel}")))?;
    Ok(shorts
        .iter()
        .filter(|c| c.source == long.source)
        .min_by(|a, b| id_key(&a.detector).cmp(&id_key(&b.detector)))
        .unwrap_or(first)
        .id())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Channel, Hemisphere};
    use proptest::prelude::*;
    use std::f64::consts::PI;

    const FS: f64 = 3.9;

    fn sine(f: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / FS).sin()).collect()
    }

    /// Analytic Butterworth band-pass magnitude at the pre-warped frequency.
    fn analytic_magnitude(f: f64, low: f64, high: f64, n: usize) -> f64 {
        let warp = |x: f64| 2.0 * FS * (PI * x / FS).tan();
        let (w, w1, w2) = (warp(f), warp(low), warp(high));
        let omega = (w * w - w1 * w2) / (w * (w2 - w1));
        1.0 / (1.0 + omega.powi(2 * n as i32)).sqrt()
    }

    fn steady_amplitude(y: &[f64], edge: usize) -> f64 {
        y[edge..y.len() - edge].iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn magnitude_matches_analytic_response() {
        for order in [2, 4, 6] {
            let spec = BandpassSpec { order, zero_phase: false, ..Default::default() };
            let f = ButterworthBandpass::design(spec, FS).unwrap();
            for &hz in &[0.01, 0.05, 0.1, 0.2, 0.5, 0.7, 1.1, 1.5, 1.9] {
                let want = analytic_magnitude(hz, 0.05, 0.7, order / 2);
                let got = f.magnitude(hz);
                assert!((got - want).abs() < 1e-9, "order {order} f {hz}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn dc_is_removed() {
        let x = vec![5.0; 2000];
        let y = bandpass(&x, BandpassSpec::default(), FS).unwrap();
        let edge = (5.0 * FS) as usize;
        assert!(steady_amplitude(&y, edge) < 1e-3);
    }

    #[test]
    fn passband_sine_survives() {
        let y = bandpass(&sine(0.2, 2000), BandpassSpec::default(), FS).unwrap();
        let amp = steady_amplitude(&y, 400);
        assert!(amp >= 0.9, "{amp}");
        assert!((amp - analytic_magnitude(0.2, 0.05, 0.7, 2).powi(2)).abs() < 5e-3);
    }

    #[test]
    fn cardiac_sine_is_attenuated() {
        let y = bandpass(&sine(1.1, 2000), BandpassSpec::default(), FS).unwrap();
        let amp = steady_amplitude(&y, 400);
        assert!(amp <= 0.1, "{amp}");
        let expected = analytic_magnitude(1.1, 0.05, 0.7, 2).powi(2);
        assert!((amp - expected).abs() < 5e-3, "{amp} vs {expected}");
    }

    #[test]
    fn causal_mode_uses_single_pass() {
        let spec = BandpassSpec { zero_phase: false, ..Default::default() };
        let y = bandpass(&sine(0.2, 2000), spec, FS).unwrap();
        let amp = steady_amplitude(&y, 400);
        assert!((amp - analytic_magnitude(0.2, 0.05, 0.7, 2)).abs() < 5e-3);
    }

    #[test]
    fn rejects_bad_specs() {
        let bad_high = BandpassSpec { high_cut_hz: 2.0, ..Default::default() };
        assert!(bandpass(&[0.0; 100], bad_high, FS).is_err());
        let odd = BandpassSpec::<f64> { order: 3, ..Default::default() };
        assert!(bandpass(&[0.0; 100], odd, FS).is_err());
        assert!(bandpass(&[0.0; 11], BandpassSpec::default(), FS).is_err());
        assert!(bandpass(&[0.0; 12], BandpassSpec::default(), FS).is_ok());
    }

    #[test]
    fn time_invariant_on_interior() {
        let filt = ButterworthBandpass::design(BandpassSpec::default(), FS).unwrap();
        let base: Vec<f64> = (0..3000).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) + (i as f64 * 0.013).sin()).collect();
        let k = 17;
        let y0 = filt.apply(&base[k..]).unwrap();
        let y1 = filt.apply(&base[..base.len() - k]).unwrap();
        // y0[i] sees x[i + k]; y1[i + k] sees the same sample.
        let margin = filt.settle_samples().min(1000);
        for i in margin..(y0.len() - margin) {
            assert!((y0[i] - y1[i + k]).abs() < 1e-6, "i={i}");
        }
    }

    #[test]
    fn generic_over_f32() {
        let x: Vec<f32> = sine(0.2, 2000).into_iter().map(|v| v as f32).collect();
        let y = bandpass(&x, BandpassSpec::default(), 3.9f32).unwrap();
        let amp = y[400..1600].iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(amp > 0.9 && amp < 1.01, "{amp}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn bandpass_is_linear(
            x in prop::collection::vec(-1.0f64..1.0, 64..300),
            a in -5.0f64..5.0,
        ) {
            let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * 0.5 + (i as f64 * 0.3).cos()).collect();
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
            let fm = bandpass(&mix, BandpassSpec::default(), FS).unwrap();
            let fx = bandpass(&x, BandpassSpec::default(), FS).unwrap();
            let fy = bandpass(&y, BandpassSpec::default(), FS).unwrap();
            for i in 0..x.len() {
                prop_assert!((fm[i] - (a * fx[i] + fy[i])).abs() < 1e-9);
            }
        }

        #[test]
        fn regression_is_idempotent(
            long in prop::collection::vec(-1.0f64..1.0, 20..200),
            seed in 0u64..1000,
        ) {
            let short: Vec<f64> = (0..long.len()).map(|i| ((i as u64 * 7919 + seed) % 97) as f64 / 97.0).collect();
            prop_assume!(crate::scalar::variance_pop(&short) > 1e-6);
            let (once, _) = short_channel_regress(&long, &short).unwrap();
            let (twice, beta2) = short_channel_regress(&once, &short).unwrap();
            prop_assert!(beta2.abs() < 1e-12);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scaled_short_is_removed_completely() {
        let short: Vec<f64> = (0..400).map(|i| (i as f64 * 0.1).sin() + 0.3 * (i as f64 * 0.37).cos()).collect();
        let long: Vec<f64> = short.iter().map(|v| 2.5 * v).collect();
        let (c, beta) = short_channel_regress(&long, &short).unwrap();
        assert!((beta - 2.5).abs() < 1e-12);
        assert!(crate::scalar::variance_pop(&c).sqrt() < 1e-10);
    }

    #[test]
    fn orthogonal_long_is_unchanged() {
        let n = 400;
        let w = 2.0 * PI * 5.0 / n as f64;
        let long: Vec<f64> = (0..n).map(|i| (w * i as f64).sin()).collect();
        let short: Vec<f64> = (0..n).map(|i| (w * i as f64).cos()).collect();
        let (c, _) = short_channel_regress(&long, &short).unwrap();
        for (a, b) in c.iter().zip(&long) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn recovers_neural_component() {
        let n = 800;
        let w = 2.0 * PI / n as f64;
        let neural: Vec<f64> = (0..n).map(|i| (3.0 * w * i as f64).sin()).collect();
        let short: Vec<f64> = (0..n).map(|i| (7.0 * w * i as f64).cos() + 0.5 * (11.0 * w * i as f64).sin()).collect();
        let long: Vec<f64> = neural.iter().zip(&short).map(|(a, b)| a + 0.8 * b).collect();
        let (c, _) = short_channel_regress(&long, &short).unwrap();
        let rms = (c.iter().zip(&neural).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n as f64).sqrt();
        assert!(rms < 1e-6, "{rms}");
        let ms = crate::scalar::mean(&short);
        let dot: f64 = c.iter().zip(&short).map(|(a, b)| a * (b - ms)).sum();
        let norms = (c.iter().map(|v| v * v).sum::<f64>() * short.iter().map(|v| (v - ms).powi(2)).sum::<f64>()).sqrt();
        assert!(dot.abs() < 1e-9 * norms);
    }

    #[test]
    fn zero_variance_short_is_rejected() {
        let err = short_channel_regress(&[1.0, 2.0, 3.0], &[4.0; 3]).unwrap_err();
        assert!(err.to_string().contains("uninformative short channel"));
    }

    fn short(source: &str, detector: &str) -> Channel {
        Channel {
            source: source.into(),
            detector: detector.into(),
            distance_m: 0.008,
            kind: ChannelKind::Short,
            hemisphere: Hemisphere::Right,
        }
    }

    #[test]
    fn short_channel_matching() {
        let mut m = Montage::default_motor();
        m.channels.retain(|c| c.kind == ChannelKind::Long);
        m.channels.push(short("S5", "SD5"));
        m.channels.push(short("S7", "SD7"));
        assert_eq!(match_short_channel(&m, "S7-D6").unwrap(), "S7-SD7");
        assert_eq!(match_short_channel(&m, "S1-D1").unwrap(), "S5-SD5");
        m.channels.push(short("S7", "SD3"));
        assert_eq!(match_short_channel(&m, "S7-D6").unwrap(), "S7-SD3");
        m.channels.retain(|c| c.kind == ChannelKind::Long);
        assert!(match_short_channel(&m, "S7-D6").is_err());
    }
}

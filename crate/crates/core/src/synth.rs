//! Synthetic block-design recordings with a known group effect.
//!
//! Each long channel carries a canonical hemodynamic response to every task
//! block. Patients can have a scaled and delayed response on chosen
//! channels. Responses are forward-modelled to optical density, mixed with
//! superficial physiology (shared with the matched short channel), drift,
//! white noise and motion spikes, and stored as raw intensities.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Annotation, Chromophore, Dataset, Group, Manifest, Montage, Recording, Task,
    DEFAULT_SAMPLE_RATE_HZ, SCHEMA_VERSION,
};
use crate::optics::ExtinctionTable;
use crate::scalar::Real;
use crate::signal::match_short_channel;
use crate::stats::ln_gamma;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrfParams {
    pub peak_s: f64,
    pub undershoot_s: f64,
    pub undershoot_ratio: f64,
}

impl Default for HrfParams {
    fn default() -> Self {
        HrfParams { peak_s: 6.0, undershoot_s: 16.0, undershoot_ratio: 1.0 / 6.0 }
    }
}

/// Double-gamma response normalised to a maximum of 1 at exactly `peak_s`.
#[derive(Debug, Clone, Copy)]
pub struct Hrf<T> {
    a1: T,
    a2: T,
    ln_g1: T,
    ln_g2: T,
    ratio: T,
    /// Time stretch mapping the raw shape's argmax onto `peak_s`.
    stretch: T,
    norm: T,
}

impl<T: Real> Hrf<T> {
    pub fn new(peak_s: T, undershoot_s: T, undershoot_ratio: T) -> Result<Self> {
        if !(peak_s > T::zero() && undershoot_s > peak_s && undershoot_ratio >= T::zero() && undershoot_ratio < T::one()) {
            return Err(Error::Config(format!(
                "invalid HRF shape: peak {peak_s}, undershoot {undershoot_s}, ratio {undershoot_ratio}"
            )));
        }
        let (a1, a2) = (peak_s + T::one(), undershoot_s + T::one());
        let mut h = Hrf {
            a1,
            a2,
            ln_g1: ln_gamma(a1),
            ln_g2: ln_gamma(a2),
            ratio: undershoot_ratio,
            stretch: T::one(),
            norm: T::one(),
        };
        // The undershoot term pulls the argmax slightly below peak_s.
        let (mut lo, mut hi) = (peak_s * T::lit(0.5), peak_s);
        let g = T::lit(0.618_033_988_749_894_8);
        for _ in 0..200 {
            let m1 = hi - g * (hi - lo);
            let m2 = lo + g * (hi - lo);
            if h.raw(m1) < h.raw(m2) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        let t_star = (lo + hi) * T::lit(0.5);
        h.stretch = t_star / peak_s;
        h.norm = h.raw(t_star);
        Ok(h)
    }

    fn raw(&self, t: T) -> T {
        if t <= T::zero() {
            return T::zero();
        }
        let lt = t.ln();
        let one = T::one();
        ((self.a1 - one) * lt - t - self.ln_g1).exp()
            - self.ratio * ((self.a2 - one) * lt - t - self.ln_g2).exp()
    }

    pub fn eval(&self, t: T) -> T {
        self.raw(t * self.stretch) / self.norm
    }
}

/// `canonical_hrf(t)` with the given shape parameters; 0 for `t ≤ 0`.
pub fn canonical_hrf<T: Real>(t: T, params: &HrfParams) -> Result<T> {
    let h = Hrf::new(T::lit(params.peak_s), T::lit(params.undershoot_s), T::lit(params.undershoot_ratio))?;
    Ok(h.eval(t))
}

/// Response to a boxcar of `duration_s` starting at 0, by Simpson's rule on
/// `∫ h(u) du` over `[max(0, t − duration), t]`.
pub fn block_response<T: Real>(hrf: &Hrf<T>, t: T, duration_s: T) -> T {
    if t <= T::zero() {
        return T::zero();
    }
    let a = (t - duration_s).max(T::zero());
    let n = 400usize;
    let step = (t - a) / T::from_usize_lossy(n);
    let mut acc = hrf.eval(a) + hrf.eval(t);
    for i in 1..n {
        let w = if i % 2 == 1 { T::lit(4.0) } else { T::lit(2.0) };
        acc = acc + w * hrf.eval(a + step * T::from_usize_lossy(i));
    }
    acc * step / T::lit(3.0)
}

/// Group effect injected into patients on the target channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub target_channels: Vec<String>,
    /// How strongly each chromophore carries the effect, in [0, 1].
    pub hbo_weight: f64,
    pub hbr_weight: f64,
    pub amplitude_ratio: f64,
    pub peak_delay_s: f64,
}

impl Default for EffectSpec {
    fn default() -> Self {
        EffectSpec {
            target_channels: vec!["S7-D6".into(), "S5-D6".into()],
            hbo_weight: 0.0,
            hbr_weight: 1.0,
            amplitude_ratio: 0.5,
            peak_delay_s: 1.5,
        }
    }
}

impl EffectSpec {
    pub fn null() -> Self {
        EffectSpec { amplitude_ratio: 1.0, peak_delay_s: 0.0, ..EffectSpec::default() }
    }

    pub fn is_null(&self) -> bool {
        self.target_channels.is_empty()
            || (self.amplitude_ratio == 1.0 && self.peak_delay_s == 0.0)
            || (self.hbo_weight == 0.0 && self.hbr_weight == 0.0)
    }

    pub fn weight(&self, chromophore: Chromophore) -> f64 {
        match chromophore {
            Chromophore::Hbo => self.hbo_weight,
            Chromophore::Hbr => self.hbr_weight,
        }
    }

    /// (amplitude factor, delay) applied to a patient's response.
    pub fn modulation(&self, chromophore: Chromophore) -> (f64, f64) {
        let w = self.weight(chromophore);
        (1.0 - w * (1.0 - self.amplitude_ratio), w * self.peak_delay_s)
    }

    pub fn validate(&self, montage: &Montage, window_s: f64) -> Result<()> {
        if !(self.amplitude_ratio > 0.0 && self.amplitude_ratio <= 1.0) {
            return Err(Error::Config(format!("amplitude ratio must lie in (0, 1], got {}", self.amplitude_ratio)));
        }
        if !(self.peak_delay_s >= 0.0 && self.peak_delay_s < window_s) {
            return Err(Error::Config(format!(
                "peak delay must lie in [0, {window_s}), got {}",
                self.peak_delay_s
            )));
        }
        for w in [self.hbo_weight, self.hbr_weight] {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("chromophore weight must lie in [0, 1], got {w}")));
            }
        }
        for id in &self.target_channels {
            match montage.channel(id) {
                Some(c) if c.kind == crate::model::ChannelKind::Long => {}
                _ => return Err(Error::Config(format!("effect channel {id} is not a long channel of the montage"))),
            }
        }
        Ok(())
    }
}

/// Nuisance components, in optical-density units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub cardiac_hz: f64,
    pub cardiac_amp: f64,
    pub respiration_hz: f64,
    pub respiration_amp: f64,
    pub mayer_hz: f64,
    pub mayer_amp: f64,
    /// Phase random-walk rate of the physiological rhythms, rad² per second.
    /// Zero gives pure sinusoids, which lock to the block period.
    pub phase_diffusion: f64,
    pub white_sd: f64,
    /// Largest per-channel drift slope, OD per second.
    pub drift_slope: f64,
    pub spikes_per_min: f64,
    pub spike_amp: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            cardiac_hz: 1.1,
            cardiac_amp: 0.01,
            respiration_hz: 0.3,
            respiration_amp: 0.006,
            mayer_hz: 0.1,
            mayer_amp: 0.006,
            phase_diffusion: 0.05,
            white_sd: 0.0005,
            drift_slope: 2e-5,
            spikes_per_min: 0.1,
            spike_amp: 0.02,
        }
    }
}

impl NoiseSpec {
    pub fn silent() -> Self {
        NoiseSpec {
            cardiac_amp: 0.0,
            respiration_amp: 0.0,
            mayer_amp: 0.0,
            white_sd: 0.0,
            drift_slope: 0.0,
            spikes_per_min: 0.0,
            spike_amp: 0.0,
            ..NoiseSpec::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let amps = [
            self.cardiac_amp,
            self.respiration_amp,
            self.mayer_amp,
            self.phase_diffusion,
            self.white_sd,
            self.drift_slope,
            self.spikes_per_min,
            self.spike_amp,
        ];
        if amps.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::Config("noise amplitudes must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub n_controls: usize,
    pub trials_per_task: usize,
    pub task_s: f64,
    pub rest_s: f64,
    pub lead_in_s: f64,
    pub tail_s: f64,
    pub sample_rate_hz: f64,
    pub wavelengths_nm: [f64; 2],
    /// Peak ΔHbO of the block response in mol/L; ΔHbR is −⅓ of it.
    pub hbo_amplitude: f64,
    /// Relative spread of response amplitude between participants.
    pub participant_sd: f64,
    /// Relative spread of response amplitude between trials.
    pub trial_sd: f64,
    pub hrf: HrfParams,
    pub effect: EffectSpec,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 12,
            n_controls: 12,
            trials_per_task: 5,
            task_s: 20.0,
            rest_s: 20.0,
            lead_in_s: 20.0,
            tail_s: 20.0,
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            wavelengths_nm: [760.0, 850.0],
            hbo_amplitude: 1e-6,
            participant_sd: 0.1,
            trial_sd: 0.1,
            hrf: HrfParams::default(),
            effect: EffectSpec::default(),
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantTruth {
    pub participant_id: String,
    pub group: String,
    /// Noise-free time to peak of the block response on the target channels.
    pub hbo_time_to_peak_s: f64,
    pub hbr_time_to_peak_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub effect: EffectSpec,
    /// Channels whose generative distribution differs between groups.
    pub discriminative_channels: Vec<String>,
    pub discriminative_chromophores: Vec<String>,
    pub participants: Vec<ParticipantTruth>,
}

pub fn ground_truth_report(gt: &GroundTruth) -> String {
    toml::to_string(gt).expect("ground truth serialises to TOML")
}

pub fn parse_ground_truth(text: &str) -> Result<GroundTruth> {
    toml::from_str(text).map_err(|e| Error::Parse {
        file: "ground truth".into(),
        line: None,
        message: e.to_string(),
    })
}

/// Sampled block response: `table[k]` is the response `k / fs − delay`
/// seconds after onset, normalised by `peak`.
struct ResponseTable {
    values: Vec<f64>,
}

impl ResponseTable {
    fn new(hrf: &Hrf<f64>, task_s: f64, fs: f64, delay: f64, span_s: f64, peak: f64) -> Self {
        let n = (span_s * fs).ceil() as usize;
        let values = (0..n)
            .map(|k| block_response(hrf, k as f64 / fs - delay, task_s) / peak)
            .collect();
        ResponseTable { values }
    }
}

/// Argmax of the undelayed block response and its value: a 10 ms grid
/// search refined by golden section.
fn block_peak(hrf: &Hrf<f64>, task_s: f64) -> (f64, f64) {
    let f = |t: f64| block_response(hrf, t, task_s);
    let mut coarse = (0.0, f64::MIN);
    for k in 1..=((task_s + 20.0) * 100.0) as usize {
        let t = k as f64 / 100.0;
        let v = f(t);
        if v > coarse.1 {
            coarse = (t, v);
        }
    }
    let (mut lo, mut hi) = (coarse.0 - 0.01, coarse.0 + 0.01);
    let g = 0.618_033_988_749_894_8;
    for _ in 0..60 {
        let m1 = hi - g * (hi - lo);
        let m2 = lo + g * (hi - lo);
        if f(m1) < f(m2) {
            lo = m1;
        } else {
            hi = m2;
        }
    }
    let t = 0.5 * (lo + hi);
    (t, f(t))
}

fn participant_ids(cfg: &SynthConfig) -> Vec<(String, Group)> {
    let mut out = Vec::with_capacity(cfg.n_patients + cfg.n_controls);
    out.extend((1..=cfg.n_patients).map(|i| (format!("P{i:02}"), Group::Patient)));
    out.extend((1..=cfg.n_controls).map(|i| (format!("C{i:02}"), Group::Control)));
    out
}

/// Generates raw two-wavelength intensities for every participant and the
/// ground truth of what was injected.
pub fn generate_dataset(montage: &Montage, cfg: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    montage.validate()?;
    if cfg.n_patients == 0 || cfg.n_controls == 0 || cfg.trials_per_task == 0 {
        return Err(Error::Config("synthetic dataset needs at least one participant per group and one trial".into()));
    }
    if !(cfg.sample_rate_hz > 0.0 && cfg.task_s > 0.0 && cfg.rest_s >= 0.0 && cfg.lead_in_s >= 0.0 && cfg.tail_s >= 0.0) {
        return Err(Error::Config("timing parameters must be positive".into()));
    }
    if !(cfg.participant_sd >= 0.0 && cfg.trial_sd >= 0.0 && cfg.hbo_amplitude.is_finite()) {
        return Err(Error::Config("amplitude parameters must be finite and non-negative".into()));
    }
    cfg.effect.validate(montage, cfg.task_s)?;
    cfg.noise.validate()?;
    let table = ExtinctionTable::<f64>::default_table();
    // Fail early on unsupported wavelengths.
    table.system(cfg.wavelengths_nm, crate::model::DEFAULT_LONG_DISTANCE_M)?;

    let hrf = Hrf::new(cfg.hrf.peak_s, cfg.hrf.undershoot_s, cfg.hrf.undershoot_ratio)?;
    let (t_peak, peak) = block_peak(&hrf, cfg.task_s);
    let span = cfg.task_s + 40.0;
    let fs = cfg.sample_rate_hz;
    let base = ResponseTable::new(&hrf, cfg.task_s, fs, 0.0, span, peak);
    let delayed: Vec<(Chromophore, ResponseTable)> = [Chromophore::Hbo, Chromophore::Hbr]
        .into_iter()
        .map(|c| (c, ResponseTable::new(&hrf, cfg.task_s, fs, cfg.effect.modulation(c).1, span, peak)))
        .collect();

    let ids = participant_ids(cfg);
    let recordings = ids
        .par_iter()
        .enumerate()
        .map(|(index, (id, group))| {
            let ctx = ParticipantCtx {
                cfg,
                montage,
                table: &table,
                base: &base,
                delayed: &delayed,
            };
            ctx.generate(index, id, *group)
        })
        .collect::<Result<Vec<_>>>()?;

    let participants = ids
        .iter()
        .map(|(id, group)| {
            let shift = |c: Chromophore| {
                if *group == Group::Patient && !cfg.effect.is_null() {
                    cfg.effect.modulation(c).1
                } else {
                    0.0
                }
            };
            ParticipantTruth {
                participant_id: id.clone(),
                group: group.as_str().to_string(),
                hbo_time_to_peak_s: t_peak + shift(Chromophore::Hbo),
                hbr_time_to_peak_s: t_peak + shift(Chromophore::Hbr),
            }
        })
        .collect();
    let (channels, chromophores) = if cfg.effect.is_null() {
        (Vec::new(), Vec::new())
    } else {
        let chroms = [Chromophore::Hbo, Chromophore::Hbr]
            .into_iter()
            .filter(|&c| cfg.effect.weight(c) > 0.0)
            .map(|c| c.as_str().to_string())
            .collect();
        (cfg.effect.target_channels.clone(), chroms)
    };
    let truth = GroundTruth {
        seed: cfg.seed,
        effect: cfg.effect.clone(),
        discriminative_channels: channels,
        discriminative_chromophores: chromophores,
        participants,
    };
    let dataset = Dataset {
        manifest: Manifest {
            schema_version: SCHEMA_VERSION,
            creator: format!("nirscope synth {}", env!("CARGO_PKG_VERSION")),
            seed: Some(cfg.seed),
        },
        sample_rate_hz: fs,
        wavelengths_nm: cfg.wavelengths_nm,
        montage: montage.clone(),
        recordings,
    };
    dataset.validate()?;
    Ok((dataset, truth))
}

struct ParticipantCtx<'a> {
    cfg: &'a SynthConfig,
    montage: &'a Montage,
    table: &'a ExtinctionTable<f64>,
    base: &'a ResponseTable,
    delayed: &'a [(Chromophore, ResponseTable)],
}

impl ParticipantCtx<'_> {
    fn generate(&self, index: usize, id: &str, group: Group) -> Result<Recording> {
        let cfg = self.cfg;
        let fs = cfg.sample_rate_hz;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64);

        let mut order: Vec<Task> = std::iter::repeat(Task::Single)
            .take(cfg.trials_per_task)
            .chain(std::iter::repeat(Task::Dual).take(cfg.trials_per_task))
            .collect();
        order.shuffle(&mut rng);
        let mut annotations = Vec::with_capacity(order.len() * 2);
        let period = cfg.task_s + cfg.rest_s;
        for (k, &task) in order.iter().enumerate() {
            let onset = cfg.lead_in_s + period * k as f64;
            annotations.push(Annotation { onset_s: onset, duration_s: cfg.task_s, task });
            if cfg.rest_s > 0.0 {
                annotations.push(Annotation { onset_s: onset + cfg.task_s, duration_s: cfg.rest_s, task: Task::Rest });
            }
        }
        let total_s = cfg.lead_in_s + period * order.len() as f64 + cfg.tail_s;
        let n = (total_s * fs + 1e-9).floor() as usize;
        let onsets: Vec<usize> = annotations
            .iter()
            .filter(|a| a.task != Task::Rest)
            .map(|a| (a.onset_s * fs).round() as usize)
            .collect();

        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let noise = &cfg.noise;
        let time: Vec<f64> = (0..n).map(|i| i as f64 / fs).collect();

        // Superficial physiology shared by every channel of this participant.
        let step_sd = (noise.phase_diffusion / fs).sqrt();
        let mut phases: [f64; 3] = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()].map(|u| u * 2.0 * PI);
        let rhythms = [
            (noise.cardiac_hz, noise.cardiac_amp),
            (noise.respiration_hz, noise.respiration_amp),
            (noise.mayer_hz, noise.mayer_amp),
        ];
        let mut systemic = Vec::with_capacity(n);
        for &t in &time {
            let mut v = 0.0;
            for (phase, &(hz, amp)) in phases.iter_mut().zip(&rhythms) {
                v += amp * (2.0 * PI * hz * t + *phase).sin();
                if step_sd > 0.0 {
                    *phase += step_sd * unit.sample(&mut rng);
                }
            }
            systemic.push(v);
        }
        let wavelength_gain = [1.0, 0.8];
        let channel_noise = |rng: &mut ChaCha8Rng, spikes: bool| -> Vec<f64> {
            let slope = noise.drift_slope * (2.0 * rng.gen::<f64>() - 1.0);
            let mut v: Vec<f64> = time.iter().map(|&t| slope * t + noise.white_sd * unit.sample(rng)).collect();
            if spikes && noise.spikes_per_min > 0.0 && noise.spike_amp > 0.0 {
                let count = Poisson::new(noise.spikes_per_min * total_s / 60.0)
                    .expect("positive rate")
                    .sample(rng) as usize;
                for _ in 0..count {
                    let at = rng.gen_range(0..n);
                    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    let amp = sign * noise.spike_amp * rng.gen_range(0.5..1.5);
                    for (j, x) in v[at..].iter_mut().enumerate().take((2.0 * fs) as usize) {
                        *x += amp * (-(j as f64) / (0.3 * fs)).exp();
                    }
                }
            }
            v
        };

        let mut channels = Vec::new();
        let mut intensity: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
        let trial_sd = Normal::new(0.0, cfg.trial_sd).map_err(|e| Error::Config(e.to_string()))?;
        let part_sd = Normal::new(0.0, cfg.participant_sd).map_err(|e| Error::Config(e.to_string()))?;
        for ch in &self.montage.channels {
            let id_c = ch.id();
            let sys = self.table.system(cfg.wavelengths_nm, ch.distance_m)?;
            let mut od = [vec![0.0; n], vec![0.0; n]];
            let is_long = ch.kind == crate::model::ChannelKind::Long;
            if is_long {
                let targeted = group == Group::Patient
                    && !cfg.effect.is_null()
                    && cfg.effect.target_channels.iter().any(|t| *t == id_c);
                let participant_gain = 1.0 + part_sd.sample(&mut rng);
                let mut hb = [vec![0.0; n], vec![0.0; n]];
                for (ci, chrom) in [Chromophore::Hbo, Chromophore::Hbr].into_iter().enumerate() {
                    let sign_amp = match chrom {
                        Chromophore::Hbo => cfg.hbo_amplitude,
                        Chromophore::Hbr => -cfg.hbo_amplitude / 3.0,
                    };
                    let (factor, table) = if targeted {
                        let (f, _) = cfg.effect.modulation(chrom);
                        (f, &self.delayed[ci].1)
                    } else {
                        (1.0, self.base)
                    };
                    for &on in &onsets {
                        let g = sign_amp * factor * participant_gain * (1.0 + trial_sd.sample(&mut rng));
                        for (k, &r) in table.values.iter().enumerate() {
                            if on + k >= n {
                                break;
                            }
                            hb[ci][on + k] += g * r;
                        }
                    }
                }
                for t in 0..n {
                    let (a, b) = sys.forward(hb[0][t], hb[1][t]);
                    od[0][t] = a;
                    od[1][t] = b;
                }
            }
            for (w, series) in od.iter_mut().enumerate() {
                let extra = channel_noise(&mut rng, is_long);
                for t in 0..n {
                    series[t] += wavelength_gain[w] * systemic[t] + extra[t];
                }
            }
            channels.push(id_c);
            intensity[0].push(od[0].iter().map(|v| (-v).exp()).collect());
            intensity[1].push(od[1].iter().map(|v| (-v).exp()).collect());
        }
        // Every long channel must have a short partner carrying the same physiology.
        for ch in self.montage.long_channels() {
            match_short_channel(self.montage, &ch.id())?;
        }
        let rec = Recording {
            participant_id: id.to_string(),
            group,
            sample_rate_hz: fs,
            wavelengths_nm: cfg.wavelengths_nm,
            channels,
            intensity,
            annotations,
        };
        rec.validate()?;
        Ok(rec)
    }
}

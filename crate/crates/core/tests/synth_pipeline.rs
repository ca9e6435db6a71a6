//! Synthetic generator checked through the full preprocessing chain.

use nirscope::epochs::{block_average, segment, EpochParams};
use nirscope::model::{Group, Montage, Task};
use nirscope::preprocess::{preprocess, PreprocessConfig};
use nirscope::signal::bandpass;
use nirscope::synth::{block_response, generate_dataset, EffectSpec, NoiseSpec, SynthConfig};
use nirscope::Hrf;

/// The injected HbO series, rebuilt from the annotations.
fn injected_hbo(cfg: &SynthConfig, rec: &nirscope::model::Recording, n: usize) -> Vec<f64> {
    let hrf = Hrf::new(cfg.hrf.peak_s, cfg.hrf.undershoot_s, cfg.hrf.undershoot_ratio).unwrap();
    let peak = (0..60_000)
        .map(|k| block_response(&hrf, k as f64 * 1e-3, cfg.task_s))
        .fold(f64::MIN, f64::max);
    let fs = cfg.sample_rate_hz;
    let span = ((cfg.task_s + 40.0) * fs).ceil() as usize;
    let mut out = vec![0.0; n];
    for a in rec.annotations.iter().filter(|a| a.task != Task::Rest) {
        let on = (a.onset_s * fs).round() as usize;
        for k in 0..span.min(n.saturating_sub(on)) {
            out[on + k] += cfg.hbo_amplitude * block_response(&hrf, k as f64 / fs, cfg.task_s) / peak;
        }
    }
    out
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[test]
fn noise_free_null_recovers_injected_hbo() {
    let montage = Montage::default_motor();
    let cfg = SynthConfig {
        n_patients: 1,
        n_controls: 1,
        effect: EffectSpec::null(),
        noise: NoiseSpec::silent(),
        participant_sd: 0.0,
        trial_sd: 0.0,
        seed: 9,
        ..SynthConfig::default()
    };
    let (d, _) = generate_dataset(&montage, &cfg).unwrap();
    for motion in [true, false] {
        let pcfg = PreprocessConfig { motion, ..PreprocessConfig::default() };
        for rec in &d.recordings {
            let hemo = preprocess(rec, &montage, &pcfg).unwrap();
            let n = hemo.hbo[0].len();
            // The band-pass is part of the chain, so the reference goes through it too.
            let truth = bandpass(&injected_hbo(&cfg, rec, n), pcfg.bandpass, cfg.sample_rate_hz).unwrap();
            for (ch, got) in hemo.channels.iter().zip(&hemo.hbo) {
                let err: Vec<f64> = got.iter().zip(&truth).map(|(a, b)| a - b).collect();
                let rel = rms(&err) / rms(&truth);
                assert!(rel <= 0.05, "{} {ch} motion={motion}: relative RMS {rel:.4}", rec.participant_id);
            }
        }
    }
}

#[test]
fn halved_hbr_survives_preprocessing() {
    let montage = Montage::default_motor();
    let targets = ["S7-D6", "S5-D6"];
    let mut ratios = Vec::new();
    for seed in 0..3 {
        let cfg = SynthConfig { seed, ..SynthConfig::default() };
        let (d, _) = generate_dataset(&montage, &cfg).unwrap();
        let pcfg = PreprocessConfig::default();
        let hemo: Vec<_> = d.recordings.iter().map(|r| preprocess(r, &montage, &pcfg).unwrap()).collect();
        let sets: Vec<_> = hemo.iter().map(|h| segment(h, &EpochParams::default()).unwrap()).collect();
        let mut set = sets[0].clone();
        for s in &sets[1..] {
            set.epochs.extend(s.epochs.iter().cloned());
        }
        for task in [Task::Single, Task::Dual] {
            let p = block_average(&set, task, Some(Group::Patient)).unwrap();
            let c = block_average(&set, task, Some(Group::Control)).unwrap();
            for t in targets {
                let i = p.channels.iter().position(|x| x == t).unwrap();
                let p2p = |v: &[f64]| v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
                ratios.push(p2p(&p.hbr_mean[i]) / p2p(&c.hbr_mean[i]));
            }
        }
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    assert!((mean - 0.5).abs() <= 0.05, "patient/control HbR peak-to-peak {mean:.3} from {ratios:?}");
}

#[test]
fn intensities_positive_under_default_noise() {
    let montage = Montage::default_motor();
    for seed in 0..4 {
        let cfg = SynthConfig { seed, n_patients: 3, n_controls: 3, ..SynthConfig::default() };
        let (d, _) = generate_dataset(&montage, &cfg).unwrap();
        for rec in &d.recordings {
            assert!(rec.intensity.iter().flatten().flatten().all(|v| *v > 0.0 && v.is_finite()));
        }
    }
}

#[test]
fn ground_truth_delay_is_exact() {
    let montage = Montage::default_motor();
    let cfg = SynthConfig { n_patients: 2, n_controls: 2, ..SynthConfig::default() };
    let (_, gt) = generate_dataset(&montage, &cfg).unwrap();
    let of = |g: &str| gt.participants.iter().find(|p| p.group == g).unwrap();
    let (p, c) = (of(Group::Patient.as_str()), of(Group::Control.as_str()));
    assert_eq!(p.hbr_time_to_peak_s - c.hbr_time_to_peak_s, cfg.effect.peak_delay_s);
    assert_eq!(p.hbo_time_to_peak_s, c.hbo_time_to_peak_s);
}

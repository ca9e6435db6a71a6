//! Raw intensity to band-limited hemoglobin series.
//!
//! Order: optical density, short-channel regression (per wavelength), modified
//! Beer-Lambert inversion, motion correction (spline then wavelet), band-pass.
//! Every step is appended to the series provenance with its parameters.

use crate::error::{Error, Result, StageExt};
use crate::model::{HemoSeries, Montage, Recording};
use crate::motion::{detect_artifacts, spline_correct, wavelet_correct, MotionParams};
use crate::optics::{intensity_to_od, ExtinctionTable};
use crate::scalar::variance_pop;
use crate::signal::{match_short_channel, short_channel_regress, BandpassSpec, ButterworthBandpass};

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub short_channel: bool,
    pub motion: bool,
    pub motion_params: MotionParams<f64>,
    pub bandpass: BandpassSpec<f64>,
    pub extinction: ExtinctionTable<f64>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            short_channel: true,
            motion: true,
            motion_params: MotionParams::default(),
            bandpass: BandpassSpec::default(),
            extinction: ExtinctionTable::default_table(),
        }
    }
}

pub fn preprocess(rec: &Recording, montage: &Montage, cfg: &PreprocessConfig) -> Result<HemoSeries> {
    rec.validate()?;
    let fs = rec.sample_rate_hz;
    let index_of = |id: &str| {
        rec.channel_index(id)
            .ok_or_else(|| Error::Data(format!("{}: channel {id} missing from recording", rec.participant_id)))
    };

    let to_od = |w: usize| -> Result<Vec<Vec<f64>>> {
        rec.intensity[w].iter().map(|s| intensity_to_od(s, None)).collect()
    };
    let mut od = [to_od(0).stage("optical_density")?, to_od(1).stage("optical_density")?];

    let long: Vec<&crate::model::Channel> = montage.long_channels().collect();
    let mut skipped = 0usize;
    let mut betas = Vec::new();
    if cfg.short_channel {
        for ch in &long {
            let id = ch.id();
            let li = index_of(&id).stage("short_channel_regression")?;
            let si = index_of(&match_short_channel(montage, &id).stage("short_channel_regression")?)
                .stage("short_channel_regression")?;
            for series in od.iter_mut() {
                if variance_pop(&series[si]) == 0.0 {
                    skipped += 1;
                    continue;
                }
                let (clean, beta) =
                    short_channel_regress(&series[li], &series[si]).stage("short_channel_regression")?;
                series[li] = clean;
                betas.push(beta);
            }
        }
    }

    let mut hbo = Vec::with_capacity(long.len());
    let mut hbr = Vec::with_capacity(long.len());
    for ch in &long {
        let li = index_of(&ch.id()).stage("mbll")?;
        let sys = cfg.extinction.system(rec.wavelengths_nm, ch.distance_m).stage("mbll")?;
        let (o, r): (Vec<f64>, Vec<f64>) = od[0][li].iter().zip(&od[1][li]).map(|(&a, &b)| sys.invert(a, b)).unzip();
        hbo.push(o);
        hbr.push(r);
    }

    let mut segments = 0usize;
    if cfg.motion {
        let p = &cfg.motion_params;
        for (ci, ch) in long.iter().enumerate() {
            let id = ch.id();
            for series in [&mut hbo[ci], &mut hbr[ci]] {
                let segs = detect_artifacts(series, fs, &id, p).stage("motion")?;
                segments += segs.len();
                let spl = spline_correct(series, &segs, fs, p).stage("motion")?;
                *series = wavelet_correct(&spl, p.iqr_multiplier).stage("motion")?;
            }
        }
    }

    let filter = ButterworthBandpass::design(cfg.bandpass, fs).stage("bandpass")?;
    for s in hbo.iter_mut().chain(hbr.iter_mut()) {
        *s = filter.apply(s).stage("bandpass")?;
    }

    let mut out = HemoSeries::new(
        rec.participant_id.clone(),
        rec.group,
        fs,
        long.iter().map(|c| c.id()).collect(),
        hbo,
        hbr,
        rec.annotations.clone(),
    )?;
    out.record("optical_density", "reference=mean");
    if cfg.short_channel {
        let mean_beta = if betas.is_empty() { 0.0 } else { betas.iter().sum::<f64>() / betas.len() as f64 };
        out.record(
            "short_channel_regression",
            format!("domain=od regressed={} skipped_constant={skipped} mean_beta={mean_beta:.6}", betas.len()),
        );
    } else {
        out.record("short_channel_regression", "disabled");
    }
    let rows: Vec<String> = cfg
        .extinction
        .rows()
        .iter()
        .filter(|r| rec.wavelengths_nm.contains(&r.wavelength_nm))
        .map(|r| format!("{}:{}/{}/dpf{}", r.wavelength_nm, r.eps_hbo, r.eps_hbr, r.dpf))
        .collect();
    out.record("mbll", format!("wavelengths_nm={:?} extinction={}", rec.wavelengths_nm, rows.join(",")));
    if cfg.motion {
        let p = &cfg.motion_params;
        out.record(
            "motion_spline",
            format!(
                "amp_sigma={} std_window_s={} std_threshold={} pad_s={} baseline_s={} lambda={} segments={segments}",
                p.amp_sigma, p.std_window_s, p.std_threshold, p.pad_s, p.baseline_s, p.spline_lambda
            ),
        );
        out.record("motion_wavelet", format!("family=db4 iqr_multiplier={}", p.iqr_multiplier));
    } else {
        out.record("motion", "disabled");
    }
    let b = &cfg.bandpass;
    out.record(
        "bandpass",
        format!(
            "low_cut_hz={} high_cut_hz={} order={} zero_phase={}",
            b.low_cut_hz, b.high_cut_hz, b.order, b.zero_phase
        ),
    );
    Ok(out)
}

//! Block-design segmentation, block averaging and time-to-peak extraction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Chromophore, Epoch, EpochSet, Group, HemoSeries, Task};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochParams {
    pub window_s: f64,
    /// Pre-onset span whose mean is subtracted from each window.
    pub baseline_s: f64,
}

impl Default for EpochParams {
    fn default() -> Self {
        EpochParams { window_s: 20.0, baseline_s: 2.0 }
    }
}

pub fn window_samples(window_s: f64, fs: f64) -> usize {
    // Guard against 19.999… from binary representation of the product.
    (window_s * fs + 1e-9).floor() as usize
}

/// Cuts one baseline-corrected window per task annotation. Rest annotations
/// are skipped. Trial indices count from 0 per task in onset order.
pub fn segment(hemo: &HemoSeries, params: &EpochParams) -> Result<EpochSet> {
    let fs = hemo.sample_rate_hz;
    let w = window_samples(params.window_s, fs);
    if w == 0 {
        return Err(Error::Data(format!("window of {} s holds no samples", params.window_s)));
    }
    let baseline = (params.baseline_s * fs).round() as usize;
    let n = hemo.n_samples();
    let mut tasks: Vec<_> = hemo.annotations.iter().filter(|a| a.task != Task::Rest).collect();
    if tasks.is_empty() {
        return Err(Error::Data(format!("{}: no task annotations", hemo.participant_id)));
    }
    tasks.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
    let mut counters: BTreeMap<Task, usize> = BTreeMap::new();
    let mut epochs = Vec::with_capacity(tasks.len());
    for a in tasks {
        if a.duration_s + 1e-9 < params.window_s {
            return Err(Error::Data(format!(
                "{}: window {} s exceeds {} annotation of {} s at {} s",
                hemo.participant_id, params.window_s, a.task, a.duration_s, a.onset_s
            )));
        }
        let onset = (a.onset_s * fs).round() as usize;
        if onset + w > n {
            return Err(Error::Data(format!(
                "{}: {} annotation at {} s runs past the end of the recording",
                hemo.participant_id, a.task, a.onset_s
            )));
        }
        let cut = |series: &[Vec<f64>]| -> Vec<Vec<f64>> {
            series
                .iter()
                .map(|s| {
                    let pre = &s[onset.saturating_sub(baseline)..onset];
                    let b = if pre.is_empty() { 0.0 } else { pre.iter().sum::<f64>() / pre.len() as f64 };
                    s[onset..onset + w].iter().map(|v| v - b).collect()
                })
                .collect()
        };
        let trial = counters.entry(a.task).or_insert(0);
        epochs.push(Epoch {
            participant_id: hemo.participant_id.clone(),
            group: hemo.group,
            task: a.task,
            trial: *trial,
            hbo: cut(&hemo.hbo),
            hbr: cut(&hemo.hbr),
        });
        *trial += 1;
    }
    let set = EpochSet {
        channels: hemo.channels.clone(),
        sample_rate_hz: fs,
        window_samples: w,
        epochs,
    };
    set.validate()?;
    Ok(set)
}

/// Pointwise mean and population std over trials.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockAverage {
    pub task: Task,
    pub group: Option<Group>,
    pub participant_id: Option<String>,
    pub channels: Vec<String>,
    pub n_trials: usize,
    pub hbo_mean: Vec<Vec<f64>>,
    pub hbo_std: Vec<Vec<f64>>,
    pub hbr_mean: Vec<Vec<f64>>,
    pub hbr_std: Vec<Vec<f64>>,
}

impl BlockAverage {
    pub fn mean(&self, chromophore: Chromophore) -> &[Vec<f64>] {
        match chromophore {
            Chromophore::Hbo => &self.hbo_mean,
            Chromophore::Hbr => &self.hbr_mean,
        }
    }

    pub fn std(&self, chromophore: Chromophore) -> &[Vec<f64>] {
        match chromophore {
            Chromophore::Hbo => &self.hbo_std,
            Chromophore::Hbr => &self.hbr_std,
        }
    }

    pub fn channel_index(&self, id: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == id)
    }
}

/// Mean and population std across `windows`, which must share one length.
pub fn pointwise_mean_std<T: Real>(windows: &[&[T]]) -> (Vec<T>, Vec<T>) {
    let len = windows.first().map_or(0, |w| w.len());
    let k = T::from_usize_lossy(windows.len());
    let mut m = vec![T::zero(); len];
    for w in windows {
        for (acc, &v) in m.iter_mut().zip(w.iter()) {
            *acc = *acc + v;
        }
    }
    for v in &mut m {
        *v = *v / k;
    }
    let mut s = vec![T::zero(); len];
    for w in windows {
        for ((acc, &v), &mu) in s.iter_mut().zip(w.iter()).zip(&m) {
            *acc = *acc + (v - mu) * (v - mu);
        }
    }
    for v in &mut s {
        *v = (*v / k).sqrt();
    }
    (m, s)
}

fn average_of(set: &EpochSet, chosen: &[&Epoch], task: Task, group: Option<Group>, participant: Option<String>) -> BlockAverage {
    let per = |chrom: Chromophore| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (0..set.channels.len())
            .map(|c| {
                let ws: Vec<&[f64]> = chosen.iter().map(|e| e.series(chrom)[c].as_slice()).collect();
                pointwise_mean_std(&ws)
            })
            .unzip()
    };
    let (hbo_mean, hbo_std) = per(Chromophore::Hbo);
    let (hbr_mean, hbr_std) = per(Chromophore::Hbr);
    BlockAverage {
        task,
        group,
        participant_id: participant,
        channels: set.channels.clone(),
        n_trials: chosen.len(),
        hbo_mean,
        hbo_std,
        hbr_mean,
        hbr_std,
    }
}

/// Averages every trial of `task`, optionally restricted to one group; the
/// group-level form pools trials across participants.
pub fn block_average(set: &EpochSet, task: Task, group: Option<Group>) -> Result<BlockAverage> {
    let chosen: Vec<&Epoch> = set
        .epochs
        .iter()
        .filter(|e| e.task == task && group.map_or(true, |g| e.group == g))
        .collect();
    if chosen.is_empty() {
        return Err(Error::Data(format!(
            "no {task} epochs{}",
            group.map(|g| format!(" for group {g}")).unwrap_or_default()
        )));
    }
    Ok(average_of(set, &chosen, task, group, None))
}

/// Averages the trials of `task` for one participant.
pub fn participant_block_average(set: &EpochSet, participant_id: &str, task: Task) -> Result<BlockAverage> {
    let chosen: Vec<&Epoch> = set
        .epochs
        .iter()
        .filter(|e| e.task == task && e.participant_id == participant_id)
        .collect();
    let Some(first) = chosen.first() else {
        return Err(Error::Data(format!("no {task} epochs for participant {participant_id}")));
    };
    let group = first.group;
    Ok(average_of(set, &chosen, task, Some(group), Some(participant_id.to_string())))
}

/// Seconds from window start to the response peak. HbO peaks at its
/// maximum; HbR at its largest absolute deviation from the pre-onset
/// baseline, which epoching has already moved to zero. Ties resolve to the
/// earliest index.
pub fn time_to_peak<T: Real>(curve: &[T], fs: T, chromophore: Chromophore) -> T {
    if curve.is_empty() {
        return T::zero();
    }
    let score = |v: T| match chromophore {
        Chromophore::Hbo => v,
        Chromophore::Hbr => v.abs(),
    };
    let mut best = 0;
    let mut best_score = score(curve[0]);
    for (i, &v) in curve.iter().enumerate().skip(1) {
        let s = score(v);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    T::from_usize_lossy(best) / fs
}

/// Pointwise mean over the ROI members of `series`, which is indexed like
/// `channels`.
pub fn roi_average<T: Real>(series: &[Vec<T>], channels: &[String], roi: &[String]) -> Result<Vec<T>> {
    if roi.is_empty() {
        return Err(Error::Data("empty region of interest".into()));
    }
    let members = roi
        .iter()
        .map(|id| {
            channels
                .iter()
                .position(|c| c == id)
                .map(|i| series[i].as_slice())
                .ok_or_else(|| Error::Data(format!("ROI channel {id} not present")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pointwise_mean_std(&members).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakTiming {
    pub participant_id: String,
    pub group: Group,
    pub roi: String,
    pub chromophore: Chromophore,
    pub time_to_peak_s: f64,
}

/// Per-participant time to peak of the ROI-averaged block response, with
/// the trials of every task in `tasks` averaged together.
pub fn peak_timings(set: &EpochSet, tasks: &[Task], roi_name: &str, roi: &[String]) -> Result<Vec<PeakTiming>> {
    let mut ids: Vec<(&str, Group)> = Vec::new();
    for e in &set.epochs {
        if tasks.contains(&e.task) && !ids.iter().any(|(id, _)| *id == e.participant_id) {
            ids.push((&e.participant_id, e.group));
        }
    }
    if ids.is_empty() {
        return Err(Error::Data(format!("no epochs for tasks {tasks:?}")));
    }
    let mut out = Vec::with_capacity(ids.len() * 2);
    for (id, group) in ids {
        let chosen: Vec<&Epoch> =
            set.epochs.iter().filter(|e| e.participant_id == id && tasks.contains(&e.task)).collect();
        for chrom in [Chromophore::Hbo, Chromophore::Hbr] {
            let curves = chosen
                .iter()
                .map(|e| roi_average(e.series(chrom), &set.channels, roi))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&[f64]> = curves.iter().map(Vec::as_slice).collect();
            let curve = pointwise_mean_std(&refs).0;
            out.push(PeakTiming {
                participant_id: id.to_string(),
                group,
                roi: roi_name.to_string(),
                chromophore: chrom,
                time_to_peak_s: time_to_peak(&curve, set.sample_rate_hz, chrom),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Annotation, Montage};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FS: f64 = 3.9;

    fn hemo_with(annotations: Vec<Annotation>, n: usize) -> HemoSeries {
        let channels = vec!["S1-D1".to_string(), "S1-D2".to_string()];
        let ramp: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let neg: Vec<f64> = ramp.iter().map(|v| -v).collect();
        HemoSeries::new("P01", Group::Patient, FS, channels, vec![ramp.clone(), neg.clone()], vec![neg, ramp], annotations)
            .unwrap()
    }

    fn design() -> Vec<Annotation> {
        let mut out = Vec::new();
        for k in 0..10 {
            let task = if k % 2 == 0 { Task::Single } else { Task::Dual };
            out.push(Annotation { onset_s: 20.0 + 40.0 * k as f64, duration_s: 20.0, task });
            out.push(Annotation { onset_s: 40.0 + 40.0 * k as f64, duration_s: 20.0, task: Task::Rest });
        }
        out
    }

    #[test]
    fn window_length_is_floor() {
        assert_eq!(window_samples(20.0, 3.9), 78);
        assert_eq!(window_samples(20.0, 10.0), 200);
    }

    #[test]
    fn ten_trials_from_block_design() {
        let h = hemo_with(design(), (440.0 * FS) as usize);
        let set = segment(&h, &EpochParams::default()).unwrap();
        assert_eq!(set.epochs.len(), 10);
        assert_eq!(set.window_samples, 78);
        assert_eq!(set.epochs.iter().filter(|e| e.task == Task::Single).count(), 5);
        let dual_trials: Vec<usize> = set.epochs.iter().filter(|e| e.task == Task::Dual).map(|e| e.trial).collect();
        assert_eq!(dual_trials, vec![0, 1, 2, 3, 4]);
        // Ramp minus the mean of the 2 s (8 samples) before onset 78.
        let first = &set.epochs[0].hbo[0];
        assert!((first[0] - (78.0 - 73.5)).abs() < 1e-12);
        assert!((first[77] - (155.0 - 73.5)).abs() < 1e-12);
    }

    #[test]
    fn windows_cover_annotated_samples_once() {
        let h = hemo_with(design(), (440.0 * FS) as usize);
        let set = segment(&h, &EpochParams { window_s: 20.0, baseline_s: 0.0 }).unwrap();
        let mut covered: Vec<f64> = set.epochs.iter().flat_map(|e| e.hbo[0].iter().copied()).collect();
        covered.sort_by(f64::total_cmp);
        let mut expected = Vec::new();
        for a in h.annotations.iter().filter(|a| a.task != Task::Rest) {
            let on = (a.onset_s * FS).round() as usize;
            expected.extend((on..on + 78).map(|i| i as f64));
        }
        expected.sort_by(f64::total_cmp);
        assert_eq!(covered, expected);
    }

    #[test]
    fn segment_errors() {
        let h = hemo_with(design(), (440.0 * FS) as usize);
        assert!(segment(&h, &EpochParams { window_s: 25.0, baseline_s: 2.0 }).is_err());
        let short = hemo_with(design(), 300);
        assert!(segment(&short, &EpochParams::default()).is_err());
        let rest_only = hemo_with(vec![Annotation { onset_s: 1.0, duration_s: 20.0, task: Task::Rest }], 200);
        assert!(segment(&rest_only, &EpochParams::default()).is_err());
    }

    fn set_from(trials: Vec<Vec<f64>>) -> EpochSet {
        let w = trials[0].len();
        EpochSet {
            channels: vec!["S1-D1".into()],
            sample_rate_hz: FS,
            window_samples: w,
            epochs: trials
                .into_iter()
                .enumerate()
                .map(|(i, t)| Epoch {
                    participant_id: format!("P{}", i % 2),
                    group: if i % 2 == 0 { Group::Patient } else { Group::Control },
                    task: Task::Single,
                    trial: i,
                    hbo: vec![t.clone()],
                    hbr: vec![t.iter().map(|v| -v).collect()],
                })
                .collect(),
        }
    }

    #[test]
    fn identical_trials_average_to_themselves() {
        let t: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
        let avg = block_average(&set_from(vec![t.clone(); 5]), Task::Single, None).unwrap();
        assert_eq!(avg.n_trials, 5);
        for (a, b) in avg.hbo_mean[0].iter().zip(&t) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(avg.hbo_std[0].iter().all(|&s| s.abs() < 1e-15));
    }

    #[test]
    fn opposite_trials_average_to_zero() {
        let t: Vec<f64> = (0..10).map(|i| (i as f64).cos() * 3.0).collect();
        let neg: Vec<f64> = t.iter().map(|v| -v).collect();
        let avg = block_average(&set_from(vec![t.clone(), neg]), Task::Single, None).unwrap();
        for i in 0..10 {
            assert!(avg.hbo_mean[0][i].abs() < 1e-15);
            assert!((avg.hbo_std[0][i] - t[i].abs()).abs() < 1e-15);
        }
    }

    #[test]
    fn block_average_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let trials: Vec<Vec<f64>> = (0..5).map(|_| (0..12).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect()).collect();
        let avg = block_average(&set_from(trials.clone()), Task::Single, None).unwrap();
        for t in 0..12 {
            let m = trials.iter().map(|x| x[t]).sum::<f64>() / 5.0;
            let v = trials.iter().map(|x| (x[t] - m).powi(2)).sum::<f64>() / 5.0;
            assert!((avg.hbo_mean[0][t] - m).abs() < 1e-12);
            assert!((avg.hbo_std[0][t] - v.sqrt()).abs() < 1e-12);
        }
        let patients = block_average(&set_from(trials.clone()), Task::Single, Some(Group::Patient)).unwrap();
        assert_eq!(patients.n_trials, 3);
        assert!(block_average(&set_from(trials.clone()), Task::Dual, None).is_err());
        let p1 = participant_block_average(&set_from(trials), "P1", Task::Single).unwrap();
        assert_eq!((p1.n_trials, p1.group), (2, Some(Group::Control)));
    }

    #[test]
    fn time_to_peak_definitions() {
        assert_eq!(time_to_peak(&[1.0f64; 20], FS, Chromophore::Hbo), 0.0);
        assert_eq!(time_to_peak(&[1.0f64; 20], FS, Chromophore::Hbr), 0.0);
        // Dip to −1 at 4 s, later rise to +0.5.
        let mut hbr = vec![0.0f64; 80];
        hbr[40] = -1.0;
        hbr[60] = 0.5;
        assert_eq!(time_to_peak(&hbr, 10.0, Chromophore::Hbr), 4.0);
        assert_eq!(time_to_peak(&hbr, 10.0, Chromophore::Hbo), 6.0);
        let tie = [0.0f64, 2.0, 1.0, 2.0];
        assert_eq!(time_to_peak(&tie, 1.0, Chromophore::Hbo), 1.0);
    }

    #[test]
    fn roi_average_cases() {
        let ch: Vec<String> = vec!["a".into(), "b".into()];
        let x = vec![1.0f64, -2.0, 3.5];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let series = vec![x.clone(), neg];
        assert_eq!(roi_average(&series, &ch, &["a".into()]).unwrap(), x);
        assert!(roi_average(&series, &ch, &ch).unwrap().iter().all(|v| *v == 0.0));
        assert!(roi_average(&series, &ch, &["c".into()]).is_err());
    }

    #[test]
    fn left_roi_is_mean_of_left_channels() {
        let m = Montage::default_motor();
        let ids: Vec<String> = m.long_channels().map(|c| c.id()).collect();
        let series: Vec<Vec<f64>> = (0..ids.len()).map(|c| (0..6).map(|t| (c * 7 + t * 3) as f64).collect()).collect();
        let roi = &m.roi_map["left"];
        let got = roi_average(&series, &ids, roi).unwrap();
        let left: Vec<usize> = ids
            .iter()
            .enumerate()
            .filter(|(_, id)| ["S1-", "S2-", "S3-", "S4-"].iter().any(|p| id.starts_with(p)))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(left.len(), roi.len());
        for t in 0..6 {
            let want = left.iter().map(|&i| series[i][t]).sum::<f64>() / left.len() as f64;
            assert!((got[t] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn peak_timings_per_participant() {
        let mut trial = vec![0.0f64; 20];
        trial[8] = 1.0;
        let set = set_from(vec![trial.clone(), trial.clone(), trial]);
        let roi = vec!["S1-D1".to_string()];
        let pt = peak_timings(&set, &[Task::Single], "x", &roi).unwrap();
        assert!(peak_timings(&set, &[Task::Dual], "x", &roi).is_err());
        assert_eq!(pt.len(), 4);
        assert!(pt.iter().all(|p| (p.time_to_peak_s - 8.0 / FS).abs() < 1e-12));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn block_then_roi_equals_roi_then_block(
                data in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 8), 6),
            ) {
                // 3 trials × 2 channels.
                let set = EpochSet {
                    channels: vec!["a".into(), "b".into()],
                    sample_rate_hz: 1.0,
                    window_samples: 8,
                    epochs: (0..3).map(|i| Epoch {
                        participant_id: "p".into(),
                        group: Group::Control,
                        task: Task::Dual,
                        trial: i,
                        hbo: vec![data[2 * i].clone(), data[2 * i + 1].clone()],
                        hbr: vec![data[2 * i].clone(), data[2 * i + 1].clone()],
                    }).collect(),
                };
                let roi: Vec<String> = vec!["a".into(), "b".into()];
                let avg = block_average(&set, Task::Dual, None).unwrap();
                let a = roi_average(&avg.hbo_mean, &set.channels, &roi).unwrap();
                let per_trial: Vec<Vec<f64>> = set.epochs.iter().map(|e| roi_average(&e.hbo, &set.channels, &roi).unwrap()).collect();
                let refs: Vec<&[f64]> = per_trial.iter().map(|v| v.as_slice()).collect();
                let b = pointwise_mean_std(&refs).0;
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }

            #[test]
            fn time_to_peak_scale_invariant(
                curve in proptest::collection::vec(-3.0f64..3.0, 1..50),
                scale in 0.01f64..100.0,
            ) {
                let scaled: Vec<f64> = curve.iter().map(|v| v * scale).collect();
                for chrom in [Chromophore::Hbo, Chromophore::Hbr] {
                    prop_assert_eq!(time_to_peak(&curve, 3.9, chrom), time_to_peak(&scaled, 3.9, chrom));
                }
            }
        }
    }
}

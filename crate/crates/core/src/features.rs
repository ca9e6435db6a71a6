//! Trial feature matrices, ANOVA-F scoring, top-k selection and scaling.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epochs::time_to_peak;
use crate::error::{Error, Result};
use crate::model::{Chromophore, EpochSet, Task};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Every sample of every channel and chromophore.
    #[default]
    Raw,
    /// Four statistics per channel and chromophore.
    Summary,
}

impl FeatureMode {
    pub fn default_k(self) -> usize {
        match self {
            FeatureMode::Raw => 40,
            FeatureMode::Summary => 20,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureMode::Raw => "raw",
            FeatureMode::Summary => "summary",
        }
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(FeatureMode::Raw),
            "summary" => Ok(FeatureMode::Summary),
            _ => Err(Error::Config(format!("unknown feature mode {s:?} (expected raw or summary)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SummaryStat {
    Mean,
    PeakValue,
    TimeToPeak,
    MeanSlope,
}

impl SummaryStat {
    pub const ALL: [SummaryStat; 4] = [
        SummaryStat::Mean,
        SummaryStat::PeakValue,
        SummaryStat::TimeToPeak,
        SummaryStat::MeanSlope,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SummaryStat::Mean => "mean",
            SummaryStat::PeakValue => "peak",
            SummaryStat::TimeToPeak => "time_to_peak",
            SummaryStat::MeanSlope => "slope",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Sample(usize),
    Stat(SummaryStat),
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Slot::Sample(i) => write!(f, "t{i}"),
            Slot::Stat(s) => f.write_str(s.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureDesc {
    pub channel: String,
    pub chromophore: Chromophore,
    pub slot: Slot,
}

impl fmt::Display for FeatureDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.channel, self.chromophore, self.slot)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    /// Row-major: `x[row][column]`.
    pub x: Vec<Vec<f64>>,
    /// 1 for patients, 0 for controls.
    pub y: Vec<u8>,
    pub participant_ids: Vec<String>,
    pub feature_index: Vec<FeatureDesc>,
    pub mode: FeatureMode,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.x.len()
    }

    pub fn n_cols(&self) -> usize {
        self.feature_index.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.y.len() != self.x.len() || self.participant_ids.len() != self.x.len() {
            return Err(Error::Data("feature rows, labels and participant ids differ in count".into()));
        }
        for (r, row) in self.x.iter().enumerate() {
            if row.len() != self.feature_index.len() {
                return Err(Error::Data(format!("feature row {r} has {} columns, expected {}", row.len(), self.n_cols())));
            }
            if let Some(c) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!("non-finite feature at row {r}, column {}", self.feature_index[c])));
            }
        }
        Ok(())
    }

    /// Row indices belonging to the given participants, in matrix order.
    pub fn rows_of<'a>(&self, ids: impl IntoIterator<Item = &'a str> + Clone) -> Vec<usize> {
        (0..self.n_rows())
            .filter(|&r| ids.clone().into_iter().any(|id| id == self.participant_ids[r]))
            .collect()
    }
}

fn summary_stats(w: &[f64], fs: f64, chrom: Chromophore) -> [f64; 4] {
    let n = w.len();
    let mean = w.iter().sum::<f64>() / n as f64;
    let ttp = time_to_peak(w, fs, chrom);
    let peak_idx = ((ttp * fs).round() as usize).min(n - 1);
    let slope = if n > 1 { (w[n - 1] - w[0]) / ((n - 1) as f64 / fs) } else { 0.0 };
    [mean, w[peak_idx], ttp, slope]
}

/// One row per epoch of `task`. Columns run over channels in set order,
/// HbO before HbR, then slots in order.
pub fn build_features(set: &EpochSet, task: Task, mode: FeatureMode) -> Result<FeatureMatrix> {
    set.validate()?;
    let epochs: Vec<_> = set.epochs.iter().filter(|e| e.task == task).collect();
    if epochs.is_empty() {
        return Err(Error::Data(format!("no {task} epochs to build features from")));
    }
    let w = set.window_samples;
    let chroms = [Chromophore::Hbo, Chromophore::Hbr];
    let mut feature_index = Vec::new();
    for ch in &set.channels {
        for chrom in chroms {
            match mode {
                FeatureMode::Raw => feature_index.extend((0..w).map(|i| FeatureDesc {
                    channel: ch.clone(),
                    chromophore: chrom,
                    slot: Slot::Sample(i),
                })),
                FeatureMode::Summary => feature_index.extend(SummaryStat::ALL.iter().map(|&s| FeatureDesc {
                    channel: ch.clone(),
                    chromophore: chrom,
                    slot: Slot::Stat(s),
                })),
            }
        }
    }
    let x = epochs
        .iter()
        .map(|e| {
            let mut row = Vec::with_capacity(feature_index.len());
            for c in 0..set.channels.len() {
                for chrom in chroms {
                    let win = &e.series(chrom)[c];
                    match mode {
                        FeatureMode::Raw => row.extend_from_slice(win),
                        FeatureMode::Summary => row.extend(summary_stats(win, set.sample_rate_hz, chrom)),
                    }
                }
            }
            row
        })
        .collect();
    let m = FeatureMatrix {
        x,
        y: epochs.iter().map(|e| e.group.label()).collect(),
        participant_ids: epochs.iter().map(|e| e.participant_id.clone()).collect(),
        feature_index,
        mode,
    };
    m.validate()?;
    Ok(m)
}

/// Two-group one-way ANOVA F per column. Perfectly separated columns score
/// `+∞`; columns constant overall score 0.
pub fn anova_f_scores(x: &[Vec<f64>], y: &[u8]) -> Result<Vec<f64>> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::Data("feature rows and labels must be nonempty and equal in count".into()));
    }
    let n1 = y.iter().filter(|&&v| v == 1).count();
    let n0 = y.len() - n1;
    if n0 < 2 || n1 < 2 {
        return Err(Error::Data(format!("ANOVA scoring needs two rows per class, got {n0} and {n1}")));
    }
    let cols = x[0].len();
    let n = y.len() as f64;
    Ok((0..cols)
        .into_par_iter()
        .map(|c| {
            let (mut s0, mut s1) = (0.0, 0.0);
            for (row, &label) in x.iter().zip(y) {
                if label == 1 {
                    s1 += row[c];
                } else {
                    s0 += row[c];
                }
            }
            let (m0, m1) = (s0 / n0 as f64, s1 / n1 as f64);
            let grand = (s0 + s1) / n;
            let mut within = 0.0;
            for (row, &label) in x.iter().zip(y) {
                let d = row[c] - if label == 1 { m1 } else { m0 };
                within += d * d;
            }
            let between = n0 as f64 * (m0 - grand).powi(2) + n1 as f64 * (m1 - grand).powi(2);
            let ms_within = within / (n - 2.0);
            if ms_within > 0.0 {
                between / ms_within
            } else if between > 0.0 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .collect())
}

/// Indices of the `k` highest scores, by descending score then ascending index.
pub fn select_k_best(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!("k = {k} must lie in 1..={}", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Column-wise z-scoring fitted on training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(train: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = train.first() else {
            return Err(Error::Data("cannot fit a scaler on zero rows".into()));
        };
        let n = train.len() as f64;
        let cols = first.len();
        let mut mean = vec![0.0; cols];
        for row in train {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; cols];
        for row in train {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        Ok(Scaler { mean, std })
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| if *s > 0.0 { (v - m) / s } else { 0.0 })
            .collect()
    }

    pub fn transform(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.transform_row(r)).collect()
    }
}

/// Standardizes `train` and `apply` with statistics of `train` alone.
pub fn standardize(train: &[Vec<f64>], apply: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Scaler)> {
    let s = Scaler::fit(train)?;
    Ok((s.transform(train), s.transform(apply), s))
}

pub fn take_columns(rows: &[Vec<f64>], columns: &[usize]) -> Vec<Vec<f64>> {
    rows.iter().map(|r| columns.iter().map(|&c| r[c]).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Epoch, Group};
    use crate::stats::one_way_anova;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_set(channels: usize, window: usize) -> EpochSet {
        let ch: Vec<String> = (0..channels).map(|i| format!("S{}-D{}", i + 1, i + 1)).collect();
        let mut epochs = Vec::new();
        for p in 0..4 {
            for trial in 0..2 {
                let v = (p * 10 + trial) as f64;
                epochs.push(Epoch {
                    participant_id: format!("X{p}"),
                    group: if p < 2 { Group::Patient } else { Group::Control },
                    task: Task::Single,
                    trial,
                    hbo: (0..channels).map(|c| (0..window).map(|t| v + c as f64 + t as f64).collect()).collect(),
                    hbr: (0..channels).map(|c| (0..window).map(|t| -(v + c as f64) * t as f64).collect()).collect(),
                });
            }
        }
        EpochSet { channels: ch, sample_rate_hz: 3.9, window_samples: window, epochs }
    }

    #[test]
    fn column_counts() {
        let set = toy_set(20, 78);
        let raw = build_features(&set, Task::Single, FeatureMode::Raw).unwrap();
        assert_eq!(raw.n_cols(), 3120);
        assert_eq!(raw.n_rows(), 8);
        let sum = build_features(&set, Task::Single, FeatureMode::Summary).unwrap();
        assert_eq!(sum.n_cols(), 160);
        assert!(build_features(&set, Task::Dual, FeatureMode::Raw).is_err());
    }

    #[test]
    fn column_order_and_labels() {
        let set = toy_set(2, 3);
        let m = build_features(&set, Task::Single, FeatureMode::Raw).unwrap();
        let names: Vec<String> = m.feature_index.iter().map(|d| d.to_string()).collect();
        assert_eq!(&names[..4], ["S1-D1:hbo:t0", "S1-D1:hbo:t1", "S1-D1:hbo:t2", "S1-D1:hbr:t0"]);
        assert_eq!(names[6], "S2-D2:hbo:t0");
        assert_eq!(m.y, vec![1, 1, 1, 1, 0, 0, 0, 0]);
        assert_eq!(m.x[1][..3], [1.0, 2.0, 3.0]);
        let s = build_features(&set, Task::Single, FeatureMode::Summary).unwrap();
        assert_eq!(s.feature_index[2].to_string(), "S1-D1:hbo:time_to_peak");
        // Row 1: hbo window [1,2,3] at 3.9 Hz.
        assert_eq!(s.x[1][..4], [2.0, 3.0, 2.0 / 3.9, 2.0 / (2.0 / 3.9)]);
    }

    #[test]
    fn anova_scores() {
        let y = vec![0u8, 0, 1, 1, 1];
        let x: Vec<Vec<f64>> = y.iter().map(|&l| vec![4.0, l as f64]).collect();
        let f = anova_f_scores(&x, &y).unwrap();
        assert_eq!(f, vec![0.0, f64::INFINITY]);
        assert!(anova_f_scores(&x, &[1, 1, 1, 1, 1]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y: Vec<u8> = (0..30).map(|i| (i % 3 == 0) as u8).collect();
        let x: Vec<Vec<f64>> = (0..30).map(|_| (0..5).map(|_| rng.gen::<f64>()).collect()).collect();
        let f = anova_f_scores(&x, &y).unwrap();
        for c in 0..5 {
            let g0: Vec<f64> = (0..30).filter(|&r| y[r] == 0).map(|r| x[r][c]).collect();
            let g1: Vec<f64> = (0..30).filter(|&r| y[r] == 1).map(|r| x[r][c]).collect();
            let oracle = one_way_anova(&[g0, g1]).unwrap().statistic;
            assert!((f[c] - oracle).abs() < 1e-10 * oracle.max(1.0));
        }
    }

    #[test]
    fn selection() {
        assert_eq!(select_k_best(&[3.0, 1.0, 3.0, 2.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(select_k_best(&[1.0, 2.0], 2).unwrap(), vec![1, 0]);
        assert_eq!(select_k_best(&[0.0, f64::INFINITY, 5.0], 1).unwrap(), vec![1]);
        assert!(select_k_best(&[1.0], 0).is_err());
        assert!(select_k_best(&[1.0], 2).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores: Vec<f64> = (0..50).map(|_| (rng.gen::<f64>() * 10.0).floor()).collect();
        let got = select_k_best(&scores, 5).unwrap();
        let mut all: Vec<(f64, usize)> = scores.iter().copied().zip(0..).collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<usize> = all[..5].iter().map(|p| p.1).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn scaling() {
        let train = vec![vec![1.0, 5.0, 2.0], vec![3.0, 5.0, 4.0], vec![5.0, 5.0, 9.0]];
        let (t, _, s) = standardize(&train, &train).unwrap();
        for c in [0, 2] {
            let col: Vec<f64> = t.iter().map(|r| r[c]).collect();
            let m = col.iter().sum::<f64>() / 3.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        }
        assert!(t.iter().all(|r| r[1] == 0.0));
        let held = vec![vec![7.0, 1.0, 0.0]];
        let (_, h, _) = standardize(&train, &held).unwrap();
        assert!((h[0][0] - (7.0 - 3.0) / s.std[0]).abs() < 1e-12);
        assert_eq!(h[0][1], 0.0);
        let (own, _, _) = standardize(&held, &held).unwrap();
        assert_ne!(own[0][0], h[0][0]);
        assert!(Scaler::fit(&[]).is_err());
    }
}

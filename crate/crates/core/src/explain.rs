//! Shapley attribution over feature groups: an exact enumerator, a kernel
//! approximation, and the per-channel importance ranking built on them.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{take_columns, FeatureDesc};
use crate::learn::CvResult;
use crate::model::Chromophore;

pub const MAX_EXACT_GROUPS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Attribution {
    /// One value per group, in group order.
    pub phi: Vec<f64>,
    /// Mean score over the background.
    pub base_value: f64,
    /// Score of the instance itself.
    pub score: f64,
}

fn check_inputs(background: &[Vec<f64>], instance: &[f64], groups: &[Vec<usize>]) -> Result<()> {
    if background.is_empty() {
        return Err(Error::Data("Shapley background is empty".into()));
    }
    if groups.is_empty() {
        return Err(Error::Data("no feature groups to attribute".into()));
    }
    let p = instance.len();
    if background.iter().any(|b| b.len() != p) {
        return Err(Error::Data("background rows and instance differ in length".into()));
    }
    let mut seen = vec![false; p];
    for g in groups {
        if g.is_empty() {
            return Err(Error::Data("empty feature group".into()));
        }
        for &c in g {
            if c >= p || seen[c] {
                return Err(Error::Data(format!("feature groups do not partition the {p} columns (column {c})")));
            }
            seen[c] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Data(format!("feature groups do not cover all {p} columns")));
    }
    Ok(())
}

/// Mean score over the background with the groups in `mask` taken from the
/// instance.
fn coalition_value<F: Fn(&[f64]) -> f64>(
    f: &F,
    background: &[Vec<f64>],
    instance: &[f64],
    groups: &[Vec<usize>],
    mask: &[bool],
) -> f64 {
    let mut row = vec![0.0; instance.len()];
    let mut total = 0.0;
    for b in background {
        row.copy_from_slice(b);
        for (g, &on) in groups.iter().zip(mask) {
            if on {
                for &c in g {
                    row[c] = instance[c];
                }
            }
        }
        total += f(&row);
    }
    total / background.len() as f64
}

fn bits(mask: u64, n: usize) -> Vec<bool> {
    (0..n).map(|i| mask >> i & 1 == 1).collect()
}

/// Exact group Shapley values by enumerating all 2ⁿ coalitions.
pub fn exact_shapley<F>(f: &F, background: &[Vec<f64>], instance: &[f64], groups: &[Vec<usize>]) -> Result<Attribution>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    check_inputs(background, instance, groups)?;
    let n = groups.len();
    if n > MAX_EXACT_GROUPS {
        return Err(Error::Config(format!("exact Shapley handles at most {MAX_EXACT_GROUPS} groups, got {n}")));
    }
    let values: Vec<f64> = (0..1u64 << n)
        .into_par_iter()
        .map(|m| coalition_value(f, background, instance, groups, &bits(m, n)))
        .collect();
    // weight[s] = s!(n−s−1)!/n!
    let mut weight = vec![0.0; n];
    for (s, w) in weight.iter_mut().enumerate() {
        *w = 1.0 / (n as f64 * binomial(n - 1, s));
    }
    let mut phi = vec![0.0; n];
    for (m, &v) in values.iter().enumerate() {
        let m = m as u64;
        let size = m.count_ones() as usize;
        for (g, p) in phi.iter_mut().enumerate() {
            if m >> g & 1 == 0 {
                *p += weight[size] * (values[(m | 1 << g) as usize] - v);
            }
        }
    }
    Ok(Attribution { phi, base_value: values[0], score: values[(1usize << n) - 1] })
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Total Shapley-kernel mass of all coalitions of size `s`.
fn size_mass(n: usize, s: usize) -> f64 {
    (n - 1) as f64 / (s * (n - s)) as f64
}

/// Coalitions and regression weights. Size pairs (s, n−s) are enumerated
/// completely while the budget covers their share of kernel mass; the rest
/// is sampled in complementary pairs.
fn plan_coalitions(n: usize, budget: usize, seed: u64) -> Vec<(u64, f64)> {
    let full = (1u64 << n) - 1;
    if budget as f64 >= 2f64.powi(n as i32) - 2.0 {
        return (1..full).map(|m| (m, size_mass(n, m.count_ones() as usize) / binomial(n, m.count_ones() as usize))).collect();
    }
    let pairs: Vec<Vec<usize>> =
        (1..=n / 2).map(|s| if s == n - s { vec![s] } else { vec![s, n - s] }).collect();
    let mut out = Vec::new();
    let mut remaining = budget;
    let mut open = 0;
    let total_mass: f64 = pairs.iter().flatten().map(|&s| size_mass(n, s)).sum();
    let mut mass_left = total_mass;
    for sizes in &pairs {
        let count: f64 = sizes.iter().map(|&s| binomial(n, s)).sum();
        let mass: f64 = sizes.iter().map(|&s| size_mass(n, s)).sum();
        if count > remaining as f64 || remaining as f64 * mass / mass_left < count * (1.0 - 1e-9) {
            break;
        }
        for &s in sizes {
            let w = size_mass(n, s) / binomial(n, s);
            out.extend((1..full).filter(|m| m.count_ones() as usize == s).map(|m| (m, w)));
        }
        remaining -= count as usize;
        mass_left -= mass;
        open += 1;
    }
    let rest = &pairs[open..];
    if rest.is_empty() || remaining < 2 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair_mass: Vec<f64> = rest.iter().map(|ss| ss.iter().map(|&s| size_mass(n, s)).sum()).collect();
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    // Repeated draws add weight without spending budget, up to a cap.
    let mut draws = 0usize;
    while counts.len() + 2 <= remaining && draws < 4 * remaining {
        draws += 1;
        let mut u = rng.gen::<f64>() * mass_left;
        let mut pick = rest.len() - 1;
        for (i, m) in pair_mass.iter().enumerate() {
            if u < *m {
                pick = i;
                break;
            }
            u -= m;
        }
        let s = rest[pick][0];
        let mut m = 0u64;
        for i in sample(&mut rng, n, s) {
            m |= 1 << i;
        }
        *counts.entry(m).or_default() += 1;
        *counts.entry(full ^ m).or_default() += 1;
    }
    let per_draw = mass_left / (2 * draws) as f64;
    out.extend(counts.into_iter().map(|(m, c)| (m, per_draw * c as f64)));
    out
}

/// Kernel SHAP over groups. The efficiency constraint is imposed exactly by
/// eliminating the last group from the weighted least-squares system.
pub fn kernel_shap<F>(
    f: &F,
    background: &[Vec<f64>],
    instance: &[f64],
    groups: &[Vec<usize>],
    n_samples: usize,
    seed: u64,
) -> Result<Attribution>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    check_inputs(background, instance, groups)?;
    let n = groups.len();
    if n_samples < 2 * n + 2 {
        return Err(Error::Config(format!("kernel SHAP needs at least {} samples for {n} groups", 2 * n + 2)));
    }
    if n > 62 {
        return Err(Error::Config(format!("kernel SHAP handles at most 62 groups, got {n}")));
    }
    let base = coalition_value(f, background, instance, groups, &vec![false; n]);
    let score = coalition_value(f, background, instance, groups, &vec![true; n]);
    let total = score - base;
    if n == 1 {
        return Ok(Attribution { phi: vec![total], base_value: base, score });
    }
    let coalitions = plan_coalitions(n, n_samples - 2, seed);
    let values: Vec<f64> = coalitions
        .par_iter()
        .map(|(m, _)| coalition_value(f, background, instance, groups, &bits(*m, n)))
        .collect();

    // Unknowns φ_0..φ_{n−2}; φ_{n−1} = total − Σ others.
    let k = n - 1;
    let mut a = vec![vec![0.0; k]; k];
    let mut rhs = vec![0.0; k];
    for ((m, w), v) in coalitions.iter().zip(&values) {
        let z = bits(*m, n);
        let last = if z[k] { 1.0 } else { 0.0 };
        let row: Vec<f64> = (0..k).map(|i| if z[i] { 1.0 } else { 0.0 } - last).collect();
        let target = v - base - last * total;
        for i in 0..k {
            if row[i] == 0.0 {
                continue;
            }
            rhs[i] += w * row[i] * target;
            for j in 0..k {
                a[i][j] += w * row[i] * row[j];
            }
        }
    }
    let mut phi = solve(a, rhs).ok_or_else(|| Error::Numerical("insufficient coalition diversity".into()))?;
    let rest: f64 = phi.iter().sum();
    phi.push(total - rest);
    Ok(Attribution { phi, base_value: base, score })
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() <= 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Training mean row followed by up to `max_rows − 1` rows spread evenly
/// over the training rows sorted by Euclidean norm.
pub fn background_rows(train: &[Vec<f64>], max_rows: usize) -> Result<Vec<Vec<f64>>> {
    let Some(first) = train.first() else {
        return Err(Error::Data("cannot build a background from zero rows".into()));
    };
    let mut mean = vec![0.0; first.len()];
    for r in train {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= train.len() as f64);
    let mut out = vec![mean];
    let extra = max_rows.saturating_sub(1).min(train.len());
    if extra > 0 {
        let mut order: Vec<(f64, usize)> =
            train.iter().enumerate().map(|(i, r)| (r.iter().map(|v| v * v).sum::<f64>(), i)).collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        out.extend((0..extra).map(|i| train[order[i * train.len() / extra].1].clone()));
    }
    Ok(out)
}

/// A (channel, chromophore) pair.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChannelKey {
    pub channel: String,
    pub chromophore: Chromophore,
}

/// Columns grouped per (channel, chromophore), in order of first
/// appearance among `columns`.
pub fn channel_groups(columns: &[FeatureDesc]) -> (Vec<ChannelKey>, Vec<Vec<usize>>) {
    let mut keys: Vec<ChannelKey> = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, d) in columns.iter().enumerate() {
        let key = ChannelKey { channel: d.channel.clone(), chromophore: d.chromophore };
        match keys.iter().position(|k| *k == key) {
            Some(g) => groups[g].push(i),
            None => {
                keys.push(key);
                groups.push(vec![i]);
            }
        }
    }
    (keys, groups)
}

/// Group attribution labelled by channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttribution {
    pub keys: Vec<ChannelKey>,
    pub attribution: Attribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub channel: String,
    pub chromophore: Chromophore,
    pub mean_abs_shap: f64,
}

/// Channels ranked by mean |φ| over attributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelImportance {
    pub rows: Vec<ImportanceRow>,
}

impl ChannelImportance {
    pub fn rank_of(&self, channel: &str, chromophore: Chromophore) -> Option<usize> {
        self.rows.iter().position(|r| r.channel == channel && r.chromophore == chromophore)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,chromophore,mean_abs_shap\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{:.9e}\n", r.channel, r.chromophore.as_str(), r.mean_abs_shap));
        }
        s
    }
}

/// Mean over attributions of |φ| per (channel, chromophore). Pairs listed in
/// `channels` but absent from an attribution count as zero for it. Sorted by
/// descending importance, then channel label, HbO before HbR.
pub fn channel_importance(attributions: &[ChannelAttribution], channels: &[String]) -> Result<ChannelImportance> {
    if attributions.is_empty() {
        return Err(Error::Data("channel importance needs at least one attribution".into()));
    }
    let mut sums: BTreeMap<ChannelKey, f64> = BTreeMap::new();
    for ch in channels {
        for chromophore in [Chromophore::Hbo, Chromophore::Hbr] {
            sums.insert(ChannelKey { channel: ch.clone(), chromophore }, 0.0);
        }
    }
    for a in attributions {
        if a.keys.len() != a.attribution.phi.len() {
            return Err(Error::Data("attribution keys and values differ in count".into()));
        }
        for (k, p) in a.keys.iter().zip(&a.attribution.phi) {
            *sums.entry(k.clone()).or_insert(0.0) += p.abs();
        }
    }
    let n = attributions.len() as f64;
    let mut rows: Vec<ImportanceRow> = sums
        .into_iter()
        .map(|(k, s)| ImportanceRow { channel: k.channel, chromophore: k.chromophore, mean_abs_shap: s / n })
        .collect();
    rows.sort_by(|a, b| {
        b.mean_abs_shap
            .total_cmp(&a.mean_abs_shap)
            .then_with(|| a.channel.cmp(&b.channel))
            .then_with(|| a.chromophore.cmp(&b.chromophore))
    });
    Ok(ChannelImportance { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    /// Coalition budget for the kernel estimator.
    pub n_samples: usize,
    pub seed: u64,
    /// Groups at or below this count use exact enumeration.
    pub exact_max_groups: usize,
    pub background_rows: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig { n_samples: 2048, seed: 0, exact_max_groups: 10, background_rows: 16 }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.exact_max_groups > MAX_EXACT_GROUPS {
            return Err(Error::Config(format!("exact_max_groups may not exceed {MAX_EXACT_GROUPS}")));
        }
        if self.background_rows == 0 {
            return Err(Error::Config("background_rows must be positive".into()));
        }
        Ok(())
    }
}

/// Attributes every test trial of every fold to the fold's own model,
/// against a background drawn from that fold's training rows.
pub fn explain_cv(cv: &CvResult, cfg: &ExplainConfig) -> Result<Vec<ChannelAttribution>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for fold in &cv.folds {
        let columns: Vec<FeatureDesc> = fold.selected.iter().map(|&c| cv.features.feature_index[c].clone()).collect();
        let (keys, groups) = channel_groups(&columns);
        let train: Vec<Vec<f64>> = fold.train_rows.iter().map(|&r| cv.features.x[r].clone()).collect();
        let train = fold.scaler.transform(&take_columns(&train, &fold.selected));
        let background = background_rows(&train, cfg.background_rows)?;
        let score = |row: &[f64]| fold.model.score_row(row);
        let attributions = fold
            .test_rows
            .par_iter()
            .map(|&r| {
                let x = fold.scaler.transform_row(&take_columns(&[cv.features.x[r].clone()], &fold.selected)[0]);
                let attribution = if groups.len() <= cfg.exact_max_groups {
                    exact_shapley(&score, &background, &x, &groups)?
                } else {
                    let seed = cfg.seed ^ ((fold.fold as u64) << 32) ^ r as u64;
                    kernel_shap(&score, &background, &x, &groups, cfg.n_samples, seed)?
                };
                Ok(ChannelAttribution { keys: keys.clone(), attribution })
            })
            .collect::<Result<Vec<_>>>()?;
        out.extend(attributions);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn singletons(n: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| vec![i]).collect()
    }

    /// Random model with pairwise interactions and a saturating term.
    struct Game {
        w: Vec<f64>,
        pairs: Vec<(usize, usize, f64)>,
        instance: Vec<f64>,
        background: Vec<Vec<f64>>,
    }

    impl Game {
        fn new(n: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = Normal::new(0.0, 1.0).unwrap();
            let w = (0..n).map(|_| g.sample(&mut rng)).collect();
            let pairs = (0..n)
                .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n), 0.5 * g.sample(&mut rng)))
                .collect();
            let instance = (0..n).map(|_| g.sample(&mut rng)).collect();
            let background = (0..6).map(|_| (0..n).map(|_| g.sample(&mut rng)).collect()).collect();
            Game { w, pairs, instance, background }
        }

        fn score(&self, x: &[f64]) -> f64 {
            let lin: f64 = self.w.iter().zip(x).map(|(a, b)| a * b).sum();
            let inter: f64 = self.pairs.iter().map(|&(i, j, c)| c * x[i] * x[j]).sum();
            // Saturation and a triple product give the game terms above second order.
            lin + inter + (0.5 * lin).tanh() + x[0] * x[1 % x.len()] * x[2 % x.len()]
        }
    }

    #[test]
    fn additive_model_closed_form() {
        let w = [2.0, -1.0, 0.5, 3.0];
        let f = |x: &[f64]| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let bg = vec![vec![1.0, 0.0, 2.0, -1.0], vec![3.0, 2.0, 0.0, 1.0]];
        let x = vec![0.5, 1.0, -2.0, 4.0];
        let exact = exact_shapley(&f, &bg, &x, &singletons(4)).unwrap();
        let kernel = kernel_shap(&f, &bg, &x, &singletons(4), 10, 3).unwrap();
        for i in 0..4 {
            let mean_bg = (bg[0][i] + bg[1][i]) / 2.0;
            let want = w[i] * (x[i] - mean_bg);
            assert!((exact.phi[i] - want).abs() < 1e-12);
            assert!((kernel.phi[i] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn symmetric_features_share_credit() {
        let f = |x: &[f64]| x[0] * x[1] + x[2];
        let a = exact_shapley(&f, &[vec![0.0, 0.0, 0.0]], &[2.0, 2.0, 1.0], &singletons(3)).unwrap();
        assert!((a.phi[0] - a.phi[1]).abs() < 1e-12);
        assert!((a.phi[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn grouped_columns_act_as_one_player() {
        let f = |x: &[f64]| x[0] + x[1] + 10.0 * x[2];
        let a = exact_shapley(&f, &[vec![0.0; 3]], &[1.0, 2.0, 1.0], &[vec![0, 1], vec![2]]).unwrap();
        assert_eq!(a.phi, vec![3.0, 10.0]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = |x: &[f64]| x[0];
        assert!(exact_shapley(&f, &[], &[1.0], &singletons(1)).is_err());
        assert!(exact_shapley(&f, &[vec![0.0, 0.0]], &[1.0, 1.0], &[vec![0]]).is_err());
        assert!(exact_shapley(&f, &[vec![0.0; 21]], &[0.0; 21], &singletons(21)).is_err());
        let err = kernel_shap(&f, &[vec![0.0; 4]], &[1.0; 4], &singletons(4), 9, 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(kernel_shap(&f, &[vec![0.0; 4]], &[1.0; 4], &singletons(4), 10, 0).is_ok());
    }

    #[test]
    fn full_enumeration_matches_exact() {
        for seed in 0..10 {
            let n = 2 + (seed as usize % 9);
            let g = Game::new(n, seed);
            let f = |x: &[f64]| g.score(x);
            let exact = exact_shapley(&f, &g.background, &g.instance, &singletons(n)).unwrap();
            let budget = (1usize << n).max(2 * n + 2);
            let kernel = kernel_shap(&f, &g.background, &g.instance, &singletons(n), budget, seed).unwrap();
            for (a, b) in exact.phi.iter().zip(&kernel.phi) {
                assert!((a - b).abs() < 1e-6, "n={n}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn kernel_error_shrinks_with_budget() {
        let n = 8;
        let mut errs = Vec::new();
        for budget in [32usize, 64, 128, 256] {
            let mut total = 0.0;
            for seed in 0..40 {
                let g = Game::new(n, 100 + seed);
                let f = |x: &[f64]| g.score(x);
                let exact = exact_shapley(&f, &g.background, &g.instance, &singletons(n)).unwrap();
                let k = kernel_shap(&f, &g.background, &g.instance, &singletons(n), budget, seed).unwrap();
                total += exact.phi.iter().zip(&k.phi).map(|(a, b)| (a - b).abs()).sum::<f64>() / n as f64;
            }
            errs.push(total / 40.0);
        }
        assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
        assert!(errs[3] < 1e-9);
    }

    #[test]
    fn coalition_plan_weights_cover_kernel_mass() {
        let n = 8;
        let total: f64 = (1..n).map(|s| size_mass(n, s)).sum();
        for budget in [18usize, 30, 100, 254] {
            let plan = plan_coalitions(n, budget, 1);
            let mass: f64 = plan.iter().map(|(_, w)| w).sum();
            assert!((mass - total).abs() < 1e-9, "budget {budget}: {mass} vs {total}");
            assert!(plan.iter().all(|(m, _)| *m != 0 && *m != 255));
        }
    }

    #[test]
    fn background_is_mean_plus_norm_strided_rows() {
        let train: Vec<Vec<f64>> = (0..40).map(|i| vec![(39 - i) as f64, 0.0]).collect();
        let bg = background_rows(&train, 16).unwrap();
        assert_eq!(bg.len(), 16);
        assert_eq!(bg[0], vec![19.5, 0.0]);
        // Norm order is ascending value; stride 40/15.
        assert_eq!(bg[1], vec![0.0, 0.0]);
        assert_eq!(bg[2], vec![2.0, 0.0]);
        assert_eq!(background_rows(&train[..3], 16).unwrap().len(), 4);
    }

    fn keys(labels: &[(&str, Chromophore)]) -> Vec<ChannelKey> {
        labels.iter().map(|(c, h)| ChannelKey { channel: c.to_string(), chromophore: *h }).collect()
    }

    fn attr(phi: Vec<f64>) -> Attribution {
        Attribution { phi, base_value: 0.0, score: 0.0 }
    }

    #[test]
    fn importance_singletons_and_zero_fill() {
        let a = ChannelAttribution {
            keys: keys(&[("S1-D1", Chromophore::Hbr), ("S2-D2", Chromophore::Hbo)]),
            attribution: attr(vec![-0.3, 0.1]),
        };
        let chans = vec!["S1-D1".to_string(), "S2-D2".to_string()];
        let imp = channel_importance(&[a], &chans).unwrap();
        let got: Vec<(String, Chromophore, f64)> =
            imp.rows.iter().map(|r| (r.channel.clone(), r.chromophore, r.mean_abs_shap)).collect();
        assert_eq!(
            got,
            vec![
                ("S1-D1".into(), Chromophore::Hbr, 0.3),
                ("S2-D2".into(), Chromophore::Hbo, 0.1),
                ("S1-D1".into(), Chromophore::Hbo, 0.0),
                ("S2-D2".into(), Chromophore::Hbr, 0.0),
            ]
        );
        assert!(channel_importance(&[], &chans).is_err());
    }

    #[test]
    fn all_zero_importance_keeps_label_order() {
        let a = ChannelAttribution { keys: keys(&[("S2-D2", Chromophore::Hbr)]), attribution: attr(vec![0.0]) };
        let imp = channel_importance(&[a], &["S2-D2".to_string(), "S1-D1".to_string()]).unwrap();
        let labels: Vec<String> =
            imp.rows.iter().map(|r| format!("{}:{}", r.channel, r.chromophore.as_str())).collect();
        assert_eq!(labels, ["S1-D1:hbo", "S1-D1:hbr", "S2-D2:hbo", "S2-D2:hbr"]);
    }

    #[test]
    fn channel_groups_follow_first_appearance() {
        use crate::features::Slot;
        let d = |c: &str, h, i| FeatureDesc { channel: c.into(), chromophore: h, slot: Slot::Sample(i) };
        let cols = vec![
            d("S1-D1", Chromophore::Hbr, 3),
            d("S5-D6", Chromophore::Hbr, 1),
            d("S1-D1", Chromophore::Hbr, 4),
            d("S1-D1", Chromophore::Hbo, 0),
        ];
        let (k, g) = channel_groups(&cols);
        assert_eq!(k, keys(&[("S1-D1", Chromophore::Hbr), ("S5-D6", Chromophore::Hbr), ("S1-D1", Chromophore::Hbo)]));
        assert_eq!(g, vec![vec![0, 2], vec![1], vec![3]]);
    }

    mod props {
        use super::{channel_importance, exact_shapley, kernel_shap, keys, singletons, ChannelAttribution, Chromophore, Game};
        use proptest::prelude::*;
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(50))]

            #[test]
            fn exact_axioms(seed in 0u64..10_000) {
                let n = 8;
                let mut g = Game::new(n, seed);
                // Feature 7 is ignored by the model.
                g.w[7] = 0.0;
                g.pairs.retain(|&(i, j, _)| i != 7 && j != 7);
                let f = |x: &[f64]| g.score(x);
                let a = exact_shapley(&f, &g.background, &g.instance, &singletons(n)).unwrap();
                let mean_bg = g.background.iter().map(|b| f(b)).sum::<f64>() / g.background.len() as f64;
                let sum: f64 = a.phi.iter().sum();
                prop_assert!((sum - (f(&g.instance) - mean_bg)).abs() < 1e-9);
                prop_assert!((a.base_value - mean_bg).abs() < 1e-12);
                prop_assert!(a.phi[7].abs() < 1e-9);
            }

            #[test]
            fn exact_symmetry(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let c: f64 = rng.gen_range(-2.0..2.0);
                let v: f64 = rng.gen_range(-2.0..2.0);
                let f = |x: &[f64]| c * (x[0] + x[1]).powi(2) + x[2] * x[0] * x[1] + x[3];
                let bg = vec![vec![0.5, 0.5, 1.0, 0.0], vec![-1.0, -1.0, 2.0, 1.0]];
                let a = exact_shapley(&f, &bg, &[v, v, 0.3, 1.0], &singletons(4)).unwrap();
                prop_assert!((a.phi[0] - a.phi[1]).abs() < 1e-9);
            }

            #[test]
            fn kernel_is_efficient(seed in 0u64..10_000) {
                let g = Game::new(8, seed);
                let f = |x: &[f64]| g.score(x);
                let k = kernel_shap(&f, &g.background, &g.instance, &singletons(8), 32, seed).unwrap();
                prop_assert!((k.phi.iter().sum::<f64>() - (k.score - k.base_value)).abs() < 1e-9);
            }

            #[test]
            fn ranking_ignores_positive_score_scale(seed in 0u64..10_000, scale in 0.01f64..100.0) {
                let g = Game::new(6, seed);
                let groups = vec![vec![0, 1], vec![2], vec![3, 4], vec![5]];
                let k = keys(&[("A", Chromophore::Hbo), ("A", Chromophore::Hbr), ("B", Chromophore::Hbo), ("B", Chromophore::Hbr)]);
                let chans = vec!["A".to_string(), "B".to_string()];
                let rank = |s: f64| {
                    let f = |x: &[f64]| s * g.score(x);
                    let a = exact_shapley(&f, &g.background, &g.instance, &groups).unwrap();
                    channel_importance(&[ChannelAttribution { keys: k.clone(), attribution: a }], &chans)
                        .unwrap()
                        .rows
                        .into_iter()
                        .map(|r| (r.channel, r.chromophore))
                        .collect::<Vec<_>>()
                };
                prop_assert_eq!(rank(1.0), rank(scale));
            }
        }
    }
}

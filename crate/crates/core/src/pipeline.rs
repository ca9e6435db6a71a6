//! End-to-end run: ingest or synthesize, preprocess, epoch, cross-validate,
//! attribute, test, and render the report files.
//!
//! Stages are public so the command-line front end can stop after any of
//! them. Every error leaving this module names the stage that raised it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::epochs::{block_average, peak_timings, pointwise_mean_std, roi_average, segment, EpochParams, PeakTiming};
use crate::error::{Error, Result, StageExt};
use crate::explain::{channel_importance, explain_cv, ChannelImportance, ExplainConfig};
use crate::features::FeatureMode;
use crate::io::load_dataset;
use crate::learn::{cross_validate, make_fold_plan, participants_of, ClassifierKind, ClassifierSpec, CvConfig, CvResult, FoldPlan};
use crate::model::{Chromophore, Dataset, EpochSet, Group, HemoSeries, Montage, Task};
use crate::motion::MotionParams;
use crate::optics::ExtinctionTable;
use crate::preprocess::{preprocess, PreprocessConfig};
use crate::signal::BandpassSpec;
use crate::stats::{levene, one_way_anova, t_test, Center, Df, GroupSummary, TestResult};
use crate::svg::{bar_chart, curve_chart, BarSeries, Curve, CurvePanel};
use crate::synth::{generate_dataset, ground_truth_report, EffectSpec, GroundTruth, NoiseSpec, SynthConfig};

pub const METRICS_FILE: &str = "metrics.txt";
pub const IMPORTANCE_CSV: &str = "channel_importance.csv";
pub const IMPORTANCE_SVG: &str = "channel_importance.svg";
pub const BLOCK_AVERAGES_SVG: &str = "block_averages.svg";
pub const TIME_TO_PEAK_SVG: &str = "time_to_peak.svg";
pub const TIME_TO_PEAK_CSV: &str = "time_to_peak.csv";
pub const STATS_FILE: &str = "stats.txt";
pub const PROVENANCE_FILE: &str = "provenance.toml";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.toml";

/// The six artifacts every run produces.
pub const REPORT_ARTIFACTS: [&str; 6] =
    [METRICS_FILE, IMPORTANCE_CSV, IMPORTANCE_SVG, BLOCK_AVERAGES_SVG, TIME_TO_PEAK_SVG, PROVENANCE_FILE];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Raw dataset directory; a synthetic cohort is generated when absent.
    pub dataset: Option<PathBuf>,
    pub synth: SynthOptions,
    pub preprocess: PreprocessOptions,
    pub epoch: EpochOptions,
    pub features: FeatureOptions,
    pub train: TrainOptions,
    pub explain: ExplainOptions,
    pub stats: StatsOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOptions {
    pub patients: usize,
    pub controls: usize,
    pub trials_per_task: usize,
    pub effect_channels: Vec<String>,
    pub hbo_weight: f64,
    pub hbr_weight: f64,
    pub amplitude_ratio: f64,
    pub peak_delay_s: f64,
    pub seed: u64,
    pub noise: NoiseSpec,
}

impl Default for SynthOptions {
    fn default() -> Self {
        let e = EffectSpec::default();
        let c = SynthConfig::default();
        SynthOptions {
            patients: c.n_patients,
            controls: c.n_controls,
            trials_per_task: c.trials_per_task,
            effect_channels: e.target_channels,
            hbo_weight: e.hbo_weight,
            hbr_weight: e.hbr_weight,
            amplitude_ratio: e.amplitude_ratio,
            peak_delay_s: e.peak_delay_s,
            seed: c.seed,
            noise: c.noise,
        }
    }
}

impl SynthOptions {
    pub fn to_config(&self) -> SynthConfig {
        SynthConfig {
            n_patients: self.patients,
            n_controls: self.controls,
            trials_per_task: self.trials_per_task,
            effect: EffectSpec {
                target_channels: self.effect_channels.clone(),
                hbo_weight: self.hbo_weight,
                hbr_weight: self.hbr_weight,
                amplitude_ratio: self.amplitude_ratio,
                peak_delay_s: self.peak_delay_s,
            },
            noise: self.noise,
            seed: self.seed,
            ..SynthConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessOptions {
    pub short_channel: bool,
    pub motion: bool,
    pub low_cut_hz: f64,
    pub high_cut_hz: f64,
    pub filter_order: usize,
    pub zero_phase: bool,
    pub motion_amp_sigma: f64,
    pub motion_iqr: f64,
    /// CSV with `wavelength_nm,eps_hbo,eps_hbr,dpf`; built-in table when absent.
    pub extinction_csv: Option<PathBuf>,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        let c = PreprocessConfig::default();
        PreprocessOptions {
            short_channel: c.short_channel,
            motion: c.motion,
            low_cut_hz: c.bandpass.low_cut_hz,
            high_cut_hz: c.bandpass.high_cut_hz,
            filter_order: c.bandpass.order,
            zero_phase: c.bandpass.zero_phase,
            motion_amp_sigma: c.motion_params.amp_sigma,
            motion_iqr: c.motion_params.iqr_multiplier,
            extinction_csv: None,
        }
    }
}

impl PreprocessOptions {
    pub fn to_config(&self) -> Result<PreprocessConfig> {
        let extinction = match &self.extinction_csv {
            Some(p) => ExtinctionTable::from_csv_file(p)?,
            None => ExtinctionTable::default_table(),
        };
        Ok(PreprocessConfig {
            short_channel: self.short_channel,
            motion: self.motion,
            motion_params: MotionParams {
                amp_sigma: self.motion_amp_sigma,
                iqr_multiplier: self.motion_iqr,
                ..MotionParams::default()
            },
            bandpass: BandpassSpec {
                low_cut_hz: self.low_cut_hz,
                high_cut_hz: self.high_cut_hz,
                order: self.filter_order,
                zero_phase: self.zero_phase,
            },
            extinction,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpochOptions {
    pub window_s: f64,
    pub baseline_s: f64,
}

impl Default for EpochOptions {
    fn default() -> Self {
        let p = EpochParams::default();
        EpochOptions { window_s: p.window_s, baseline_s: p.baseline_s }
    }
}

impl EpochOptions {
    pub fn params(&self) -> EpochParams {
        EpochParams { window_s: self.window_s, baseline_s: self.baseline_s }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureOptions {
    pub mode: FeatureMode,
    /// Mode default when absent.
    pub select_k: Option<usize>,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        FeatureOptions { mode: FeatureMode::Raw, select_k: None }
    }
}

impl FeatureOptions {
    pub fn k(&self) -> usize {
        self.select_k.unwrap_or(self.mode.default_k())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub models: Vec<ClassifierKind>,
    pub folds: usize,
    /// Seeds the fold plan and the learners.
    pub seed: u64,
    pub knn_k: usize,
    pub rf_trees: usize,
    pub svm_c: f64,
    pub svm_epochs: usize,
    pub gbdt_rounds: usize,
    pub gbdt_learning_rate: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        let s = ClassifierSpec::new(ClassifierKind::Knn);
        TrainOptions {
            models: ClassifierKind::ALL.to_vec(),
            folds: 6,
            seed: 0,
            knn_k: s.knn_k,
            rf_trees: s.rf_trees,
            svm_c: s.svm_c,
            svm_epochs: s.svm_epochs,
            gbdt_rounds: s.gbdt_rounds,
            gbdt_learning_rate: s.gbdt_learning_rate,
        }
    }
}

impl TrainOptions {
    pub fn spec(&self, kind: ClassifierKind) -> ClassifierSpec {
        ClassifierSpec {
            knn_k: self.knn_k,
            rf_trees: self.rf_trees,
            svm_c: self.svm_c,
            svm_epochs: self.svm_epochs,
            gbdt_rounds: self.gbdt_rounds,
            gbdt_learning_rate: self.gbdt_learning_rate,
            ..ClassifierSpec::new(kind)
        }
        .with_seed(self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainOptions {
    /// Classifier whose folds are attributed.
    pub model: ClassifierKind,
    pub samples: usize,
    pub seed: u64,
    pub background_rows: usize,
    pub exact_max_groups: usize,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        let c = ExplainConfig::default();
        ExplainOptions {
            model: ClassifierKind::Knn,
            samples: c.n_samples,
            seed: c.seed,
            background_rows: c.background_rows,
            exact_max_groups: c.exact_max_groups,
        }
    }
}

impl ExplainOptions {
    pub fn config(&self) -> ExplainConfig {
        ExplainConfig {
            n_samples: self.samples,
            seed: self.seed,
            exact_max_groups: self.exact_max_groups,
            background_rows: self.background_rows,
        }
    }
}

/// How window samples become observations for the group tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    /// Every sample of every trial window.
    #[default]
    Sample,
    /// One mean per trial window.
    Trial,
}

impl std::str::FromStr for Pool {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(Pool::Sample),
            "trial" => Ok(Pool::Trial),
            other => Err(Error::Config(format!("unknown pooling '{other}' (expected sample or trial)"))),
        }
    }
}

impl Pool {
    pub fn as_str(self) -> &'static str {
        match self {
            Pool::Sample => "sample",
            Pool::Trial => "trial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsOptions {
    pub pool: Pool,
    /// ROI for time to peak and the ROI group test.
    pub roi_name: String,
    pub roi: Vec<String>,
    /// Number of top-ranked (channel, chromophore) rows tested between groups.
    pub top: usize,
}

impl Default for StatsOptions {
    fn default() -> Self {
        StatsOptions {
            pool: Pool::Sample,
            roi_name: "target".into(),
            roi: EffectSpec::default().target_channels,
            top: 4,
        }
    }
}

/// Loads `cfg.dataset`, or synthesizes a cohort with its ground truth.
pub fn ingest(cfg: &PipelineConfig) -> Result<(Dataset, Option<GroundTruth>)> {
    match &cfg.dataset {
        Some(dir) => Ok((load_dataset(dir).stage("ingest")?, None)),
        None => {
            let (d, gt) = generate_dataset(&Montage::default_motor(), &cfg.synth.to_config()).stage("synth")?;
            Ok((d, Some(gt)))
        }
    }
}

/// Preprocesses every recording in parallel, keeping dataset order.
pub fn preprocess_dataset(d: &Dataset, cfg: &PreprocessConfig) -> Result<Vec<HemoSeries>> {
    d.recordings
        .par_iter()
        .map(|r| {
            preprocess(r, &d.montage, cfg).map_err(|e| Error::Stage { stage: "preprocess", source: Box::new(e) })
        })
        .collect()
}

pub fn epoch_all(hemo: &[HemoSeries], params: &EpochParams) -> Result<EpochSet> {
    let sets = hemo.iter().map(|h| segment(h, params)).collect::<Result<Vec<_>>>().stage("epoch")?;
    EpochSet::merge(sets).stage("epoch")
}

/// Task labels present in the set, in label order.
pub fn tasks_of(set: &EpochSet) -> Vec<Task> {
    let mut t: Vec<Task> = set.epochs.iter().map(|e| e.task).collect();
    t.sort();
    t.dedup();
    t
}

/// Cross-validation results of every requested model on one task.
#[derive(Debug, Clone)]
pub struct TaskRun {
    pub task: Task,
    pub plan: FoldPlan,
    pub results: Vec<(ClassifierKind, CvResult)>,
}

impl TaskRun {
    pub fn result(&self, kind: ClassifierKind) -> Option<&CvResult> {
        self.results.iter().find(|(k, _)| *k == kind).map(|(_, r)| r)
    }
}

fn check_k(set: &EpochSet, opts: &FeatureOptions) -> Result<()> {
    let per = match opts.mode {
        FeatureMode::Raw => set.window_samples,
        FeatureMode::Summary => 4,
    };
    let cols = set.channels.len() * 2 * per;
    let k = opts.k();
    if k == 0 || k > cols {
        return Err(Error::Config(format!(
            "select_k = {k} is outside 1..={cols} for {} features",
            opts.mode.as_str()
        )));
    }
    Ok(())
}

/// Runs every model in `kinds` on every task; one fold plan serves all.
pub fn classify(set: &EpochSet, cfg: &PipelineConfig, kinds: &[ClassifierKind]) -> Result<Vec<TaskRun>> {
    check_k(set, &cfg.features).stage("features")?;
    let participants = participants_of(set);
    let plan = make_fold_plan(&participants, cfg.train.folds, cfg.train.seed).stage("folds")?;
    let mut runs = Vec::new();
    for task in tasks_of(set) {
        let mut results = Vec::new();
        for &kind in kinds {
            let cv = CvConfig { mode: cfg.features.mode, k: cfg.features.k(), spec: cfg.train.spec(kind) };
            cv.spec.validate().stage("train")?;
            let r = cross_validate(set, task, &cv, &plan).stage("train")?;
            results.push((kind, r));
        }
        runs.push(TaskRun { task, plan: plan.clone(), results });
    }
    Ok(runs)
}

/// Channel importance over the test trials of every task.
pub fn attribute(set: &EpochSet, runs: &[TaskRun], opts: &ExplainOptions) -> Result<ChannelImportance> {
    let cfg = opts.config();
    cfg.validate().stage("explain")?;
    let mut all = Vec::new();
    for run in runs {
        let cv = run
            .result(opts.model)
            .ok_or_else(|| Error::Config(format!("model {} was not trained", opts.model)))
            .stage("explain")?;
        all.extend(explain_cv(cv, &cfg).stage("explain")?);
    }
    channel_importance(&all, &set.channels).stage("explain")
}

/// Observations of one ROI and chromophore for `task`, as (control, patient).
pub fn group_observations(
    set: &EpochSet,
    task: Task,
    roi: &[String],
    chromophore: Chromophore,
    pool: Pool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut control = Vec::new();
    let mut patient = Vec::new();
    for e in set.epochs.iter().filter(|e| e.task == task) {
        let curve = roi_average(e.series(chromophore), &set.channels, roi)?;
        let dst = match e.group {
            Group::Control => &mut control,
            Group::Patient => &mut patient,
        };
        match pool {
            Pool::Sample => dst.extend_from_slice(&curve),
            Pool::Trial => dst.push(curve.iter().sum::<f64>() / curve.len() as f64),
        }
    }
    if control.len() < 2 || patient.len() < 2 {
        return Err(Error::Data(format!("task {task} needs at least two observations per group")));
    }
    Ok((control, patient))
}

fn df_text(df: Df<f64>) -> String {
    match df {
        Df::Single(d) => format!("{d:.2}"),
        Df::Pair(a, b) => format!("{a:.0},{b:.0}"),
    }
}

fn test_line(name: &str, r: &TestResult<f64>) -> String {
    let mut s = format!("  {name:<10} statistic={:.4} df={} p={:.4e}", r.statistic, df_text(r.df), r.p_two_sided);
    if let Some(d) = r.mean_difference {
        let _ = write!(s, " mean_difference={d:.4e}");
    }
    s
}

fn summary_line(name: &str, xs: &[f64]) -> Result<String> {
    let g = GroupSummary::from_samples(xs)?;
    Ok(format!("  {name:<10} n={} mean={:.4e} sd={:.4e}", g.n, g.mean, g.sd))
}

fn compare(out: &mut String, title: &str, control: &[f64], patient: &[f64]) -> Result<()> {
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{}", summary_line("control", control)?);
    let _ = writeln!(out, "{}", summary_line("patient", patient)?);
    let groups = [control.to_vec(), patient.to_vec()];
    let _ = writeln!(out, "{}", test_line("levene", &levene(&groups, Center::Mean)?));
    let _ = writeln!(out, "{}", test_line("t_pooled", &t_test(control, patient, true)?));
    let _ = writeln!(out, "{}", test_line("t_welch", &t_test(control, patient, false)?));
    let _ = writeln!(out, "{}", test_line("anova", &one_way_anova(&groups)?));
    Ok(())
}

/// Group tests: top-ranked channels and every ROI per task, then time to
/// peak in the configured ROI. Control is the first group throughout.
pub fn stats_report(
    set: &EpochSet,
    montage: &Montage,
    importance: &ChannelImportance,
    timings: &[PeakTiming],
    opts: &StatsOptions,
) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "# group comparisons (control vs patient), pool = {}", opts.pool.as_str());
    for task in tasks_of(set) {
        let _ = writeln!(out, "\n## task {task}");
        for row in importance.rows.iter().take(opts.top) {
            let (c, p) = group_observations(set, task, std::slice::from_ref(&row.channel), row.chromophore, opts.pool)?;
            compare(&mut out, &format!("channel {} {}", row.channel, row.chromophore), &c, &p)?;
        }
        let mut rois: Vec<(&str, &[String])> =
            montage.roi_map.iter().map(|(k, v)| (k.as_str(), v.as_slice())).collect();
        rois.push((&opts.roi_name, &opts.roi));
        for (name, members) in rois {
            for chrom in [Chromophore::Hbo, Chromophore::Hbr] {
                let (c, p) = group_observations(set, task, members, chrom, opts.pool)?;
                compare(&mut out, &format!("roi {name} {chrom}"), &c, &p)?;
            }
        }
    }
    let _ = writeln!(out, "\n## time to peak, roi {} ({}), all tasks", opts.roi_name, opts.roi.join(" "));
    for chrom in [Chromophore::Hbo, Chromophore::Hbr] {
        let pick = |g: Group| -> Vec<f64> {
            timings.iter().filter(|t| t.group == g && t.chromophore == chrom).map(|t| t.time_to_peak_s).collect()
        };
        let (c, p) = (pick(Group::Control), pick(Group::Patient));
        if c.len() >= 2 && p.len() >= 2 {
            compare(&mut out, &format!("time_to_peak {chrom} (s)"), &c, &p)?;
        }
    }
    Ok(out)
}

/// Pooled and per-fold metrics of every model, per task.
pub fn metrics_report(cfg: &PipelineConfig, runs: &[TaskRun]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# cross-participant classification, trial level, support-weighted metrics");
    let _ = writeln!(out, "feature_mode = {}", cfg.features.mode.as_str());
    let _ = writeln!(out, "select_k = {}", cfg.features.k());
    let _ = writeln!(out, "folds = {}", cfg.train.folds);
    for run in runs {
        let _ = writeln!(out, "\n## task {}", run.task);
        let _ = writeln!(out, "{:<6} {:>9} {:>9} {:>9} {:>9}", "model", "accuracy", "precision", "recall", "f1");
        for (kind, r) in &run.results {
            let m = &r.pooled;
            let _ = writeln!(
                out,
                "{:<6} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                kind.as_str(),
                m.accuracy,
                m.precision,
                m.recall,
                m.f1
            );
        }
        let _ = writeln!(out, "\nper-fold accuracy");
        for (kind, r) in &run.results {
            let accs: Vec<String> = r.folds.iter().map(|f| format!("{:.4}", f.metrics.accuracy)).collect();
            let _ = writeln!(out, "{:<6} {}", kind.as_str(), accs.join(" "));
        }
    }
    if let Some(run) = runs.first() {
        let _ = writeln!(out, "\n## test participants per fold");
        for (i, f) in run.plan.folds.iter().enumerate() {
            let _ = writeln!(out, "{i}: {}", f.test.join(" "));
        }
    }
    out
}

pub fn importance_svg(importance: &ChannelImportance, opts: &ExplainOptions, mode: FeatureMode) -> Result<String> {
    let labels: Vec<String> = importance.rows.iter().map(|r| format!("{} {}", r.channel, r.chromophore)).collect();
    let values = importance.rows.iter().map(|r| r.mean_abs_shap).collect();
    bar_chart(
        &format!("channel importance ({}, {} features)", opts.model, mode.as_str()),
        "mean |SHAP|",
        &labels,
        &[BarSeries { name: "mean |SHAP|".into(), values }],
    )
}

/// The first `n` distinct channels of the ranking.
pub fn top_channels(importance: &ChannelImportance, n: usize) -> Vec<String> {
    let mut channels: Vec<String> = Vec::new();
    for r in &importance.rows {
        if channels.len() == n {
            break;
        }
        if !channels.contains(&r.channel) {
            channels.push(r.channel.clone());
        }
    }
    channels
}

/// Group block averages, one panel per channel and task.
pub fn block_average_svg(set: &EpochSet, channels: &[String]) -> Result<String> {
    let tasks = tasks_of(set);
    let mut panels = Vec::new();
    for ch in channels {
        for &task in &tasks {
            let mut curves = Vec::new();
            for chrom in [Chromophore::Hbo, Chromophore::Hbr] {
                for group in [Group::Control, Group::Patient] {
                    let b = block_average(set, task, Some(group))?;
                    let i = b.channel_index(ch).ok_or_else(|| Error::Data(format!("channel {ch} missing")))?;
                    let um = |v: &[f64]| v.iter().map(|x| x * 1e6).collect::<Vec<_>>();
                    curves.push(Curve {
                        name: format!("{group} {chrom}"),
                        mean: um(&b.mean(chrom)[i]),
                        std: um(&b.std(chrom)[i]),
                    });
                }
            }
            panels.push(CurvePanel { title: format!("{ch}, {task} task"), curves });
        }
    }
    curve_chart("group block averages (mean ± std)", "μmol/L", set.sample_rate_hz, &panels, tasks.len())
}

/// Group block averages as long-format CSV, concentrations in mol/L.
pub fn block_average_csv(set: &EpochSet) -> Result<String> {
    let mut s = String::from("task,group,channel,chromophore,t_s,mean,std\n");
    for task in tasks_of(set) {
        for group in [Group::Control, Group::Patient] {
            let b = block_average(set, task, Some(group))?;
            for (ci, ch) in b.channels.iter().enumerate() {
                for chrom in [Chromophore::Hbo, Chromophore::Hbr] {
                    for (i, (m, sd)) in b.mean(chrom)[ci].iter().zip(&b.std(chrom)[ci]).enumerate() {
                        let t = i as f64 / set.sample_rate_hz;
                        let _ = writeln!(s, "{task},{group},{ch},{chrom},{t:.4},{m:.9e},{sd:.9e}");
                    }
                }
            }
        }
    }
    Ok(s)
}

pub fn timings_csv(timings: &[PeakTiming]) -> String {
    let mut s = String::from("participant,group,roi,chromophore,time_to_peak_s\n");
    for t in timings {
        let _ = writeln!(s, "{},{},{},{},{:.6}", t.participant_id, t.group, t.roi, t.chromophore, t.time_to_peak_s);
    }
    s
}

pub fn timings_svg(timings: &[PeakTiming], roi_name: &str) -> Result<String> {
    let mut ids: Vec<(Group, &str)> = Vec::new();
    for t in timings {
        if !ids.iter().any(|(_, id)| *id == t.participant_id) {
            ids.push((t.group, &t.participant_id));
        }
    }
    ids.sort();
    let value = |id: &str, c: Chromophore| {
        timings.iter().find(|t| t.participant_id == id && t.chromophore == c).map_or(0.0, |t| t.time_to_peak_s)
    };
    let labels: Vec<String> = ids.iter().map(|(g, id)| format!("{id} {g}")).collect();
    let series: Vec<BarSeries> = [Chromophore::Hbo, Chromophore::Hbr]
        .into_iter()
        .map(|c| BarSeries { name: c.to_string(), values: ids.iter().map(|(_, id)| value(id, c)).collect() })
        .collect();
    bar_chart(&format!("time to peak, roi {roi_name}"), "time to peak (s)", &labels, &series)
}

#[derive(Serialize)]
struct ParticipantSteps {
    participant: String,
    steps: Vec<String>,
}

#[derive(Serialize)]
struct Provenance<'a> {
    tool: &'static str,
    version: &'static str,
    source: String,
    participants: usize,
    epochs: usize,
    window_samples: usize,
    sample_rate_hz: f64,
    artifacts: Vec<String>,
    config: &'a PipelineConfig,
    preprocessing: Vec<ParticipantSteps>,
}

/// Report files keyed by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Report {
    pub files: BTreeMap<String, String>,
}

impl Report {
    /// Writes every file under `out`. On failure the files already written
    /// are removed, along with `out` itself if this call created it.
    pub fn write(&self, out: &Path) -> Result<()> {
        let created = !out.exists();
        fs::create_dir_all(out).map_err(|e| Error::io(out, e)).stage("report")?;
        let mut written = Vec::new();
        for (name, text) in &self.files {
            let path = out.join(name);
            if let Err(e) = fs::write(&path, text) {
                for p in &written {
                    let _ = fs::remove_file(p);
                }
                if created {
                    let _ = fs::remove_dir(out);
                }
                return Err(Error::io(path, e)).stage("report");
            }
            written.push(path);
        }
        Ok(())
    }
}

/// Everything a run computes, kept for callers that inspect results.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub ground_truth: Option<GroundTruth>,
    pub epochs: EpochSet,
    pub runs: Vec<TaskRun>,
    pub importance: ChannelImportance,
    pub timings: Vec<PeakTiming>,
    pub report: Report,
}

/// Runs every stage and renders the report in memory.
pub fn build_report(cfg: &PipelineConfig) -> Result<RunOutcome> {
    let pre = cfg.preprocess.to_config().stage("config")?;
    let (dataset, truth) = ingest(cfg)?;
    dataset.require_both_groups().stage("ingest")?;
    let hemo = preprocess_dataset(&dataset, &pre)?;
    let set = epoch_all(&hemo, &cfg.epoch.params())?;

    let mut kinds = cfg.train.models.clone();
    if !kinds.contains(&cfg.explain.model) {
        kinds.push(cfg.explain.model);
    }
    let runs = classify(&set, cfg, &kinds)?;
    let importance = attribute(&set, &runs, &cfg.explain)?;
    let timings = peak_timings(&set, &tasks_of(&set), &cfg.stats.roi_name, &cfg.stats.roi).stage("epoch")?;
    let stats = stats_report(&set, &dataset.montage, &importance, &timings, &cfg.stats).stage("stats")?;

    let mut files = BTreeMap::new();
    files.insert(METRICS_FILE.to_string(), metrics_report(cfg, &runs));
    files.insert(IMPORTANCE_CSV.to_string(), importance.to_csv());
    files.insert(IMPORTANCE_SVG.to_string(), importance_svg(&importance, &cfg.explain, cfg.features.mode).stage("report")?);
    files.insert(BLOCK_AVERAGES_SVG.to_string(), block_average_svg(&set, &top_channels(&importance, 2)).stage("report")?);
    files.insert(TIME_TO_PEAK_SVG.to_string(), timings_svg(&timings, &cfg.stats.roi_name).stage("report")?);
    files.insert(TIME_TO_PEAK_CSV.to_string(), timings_csv(&timings));
    files.insert(STATS_FILE.to_string(), stats);
    if let Some(gt) = &truth {
        files.insert(GROUND_TRUTH_FILE.to_string(), ground_truth_report(gt));
    }
    let mut artifacts: Vec<String> = files.keys().cloned().collect();
    artifacts.push(PROVENANCE_FILE.to_string());
    artifacts.sort();
    let prov = Provenance {
        tool: "nirscope",
        version: env!("CARGO_PKG_VERSION"),
        source: match &cfg.dataset {
            Some(p) => p.display().to_string(),
            None => "synthetic".into(),
        },
        participants: dataset.recordings.len(),
        epochs: set.epochs.len(),
        window_samples: set.window_samples,
        sample_rate_hz: set.sample_rate_hz,
        artifacts,
        config: cfg,
        preprocessing: hemo
            .iter()
            .map(|h| ParticipantSteps {
                participant: h.participant_id.clone(),
                steps: h.provenance().iter().map(|p| p.render()).collect(),
            })
            .collect(),
    };
    let prov_text = toml::to_string(&prov).map_err(|e| Error::Data(format!("provenance: {e}"))).stage("report")?;
    files.insert(PROVENANCE_FILE.to_string(), prov_text);

    Ok(RunOutcome { ground_truth: truth, epochs: set, runs, importance, timings, report: Report { files } })
}

/// Full pipeline with the report written to `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<RunOutcome> {
    let outcome = build_report(cfg)?;
    outcome.report.write(out)?;
    Ok(outcome)
}

/// Mean and std over participants of per-participant values, by group.
pub fn group_mean_std(timings: &[PeakTiming], chromophore: Chromophore) -> BTreeMap<Group, (f64, f64)> {
    let mut out = BTreeMap::new();
    for g in [Group::Patient, Group::Control] {
        let v: Vec<f64> =
            timings.iter().filter(|t| t.group == g && t.chromophore == chromophore).map(|t| t.time_to_peak_s).collect();
        if !v.is_empty() {
            let (m, s) = pointwise_mean_std(&v.iter().map(std::slice::from_ref).collect::<Vec<_>>());
            out.insert(g, (m[0], s[0]));
        }
    }
    out
}

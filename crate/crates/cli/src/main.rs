//! `nirscope` command-line front end.
//!
//! Flags fill a [`PipelineConfig`]; a `--config` file is merged on top, so
//! its values win over flags. Exit codes: 0 success, 2 configuration error,
//! 3 data error, 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nirscope::epochs::peak_timings;
use nirscope::error::{Error, Result, StageExt};
use nirscope::features::FeatureMode;
use nirscope::io::{load_hemo, save_dataset, save_hemo};
use nirscope::learn::ClassifierKind;
use nirscope::model::{EpochSet, HemoSeries};
use nirscope::pipeline::{self, PipelineConfig, Pool, Report};
use nirscope::stats::{self, Center, Df, GroupSummary, TestResult};
use nirscope::synth::ground_truth_report;

#[derive(Parser)]
#[command(name = "nirscope", version, about = "fNIRS preprocessing, classification and channel attribution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort as a raw dataset directory.
    Synth(WithOut),
    /// Convert a raw dataset to hemoglobin series.
    Preprocess(WithOut),
    /// Segment into task windows; write block averages and time to peak.
    Epoch(WithHemo),
    /// Cross-participant validation of the selected models.
    Train(WithHemo),
    /// Shapley channel importance of one model's folds.
    Explain(WithHemo),
    /// Classical group tests on sample files or published summaries.
    Stats(StatsArgs),
    /// Full report on an existing dataset (`--data` required).
    Report(WithOut),
    /// Full pipeline; synthesizes a cohort unless `--data` is given.
    Run(WithOut),
}

#[derive(Args)]
struct WithOut {
    #[command(flatten)]
    opts: Opts,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WithHemo {
    #[command(flatten)]
    opts: Opts,
    /// Preprocessed series from `preprocess`; skips ingest and preprocessing.
    #[arg(long, conflicts_with = "data")]
    hemo: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Default)]
struct Opts {
    /// TOML pipeline config; its values override flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Raw dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed for synthesis, fold plan, learners and attribution.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    controls: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    effect_channels: Option<Vec<String>>,
    #[arg(long)]
    amplitude_ratio: Option<f64>,
    #[arg(long)]
    peak_delay: Option<f64>,
    #[arg(long)]
    low_cut: Option<f64>,
    #[arg(long)]
    high_cut: Option<f64>,
    #[arg(long)]
    filter_order: Option<usize>,
    #[arg(long)]
    no_short_channel: bool,
    #[arg(long)]
    no_motion: bool,
    #[arg(long)]
    motion_amp_sigma: Option<f64>,
    #[arg(long)]
    motion_iqr: Option<f64>,
    /// Extinction table CSV: wavelength_nm,eps_hbo,eps_hbr,dpf.
    #[arg(long)]
    extinction: Option<PathBuf>,
    /// Epoch window in seconds.
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    feature_mode: Option<FeatureMode>,
    #[arg(long)]
    select_k: Option<usize>,
    /// knn, rf, svm or gbdt; comma-separated for `train`.
    #[arg(long, value_delimiter = ',')]
    model: Option<Vec<ClassifierKind>>,
    #[arg(long)]
    folds: Option<usize>,
    /// Coalition budget of the kernel Shapley estimator.
    #[arg(long)]
    samples: Option<usize>,
    /// Observations for group tests: every sample or one mean per trial.
    #[arg(long)]
    pool: Option<Pool>,
    /// ROI channels for time to peak, comma-separated.
    #[arg(long, value_delimiter = ',')]
    roi: Option<Vec<String>>,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(value_enum)]
    test: StatTest,
    /// Group summary `n,mean,sd`; repeat once per group.
    #[arg(long)]
    summary: Vec<String>,
    /// One-column sample file; repeat once per group.
    #[arg(long)]
    csv: Vec<PathBuf>,
    /// Unequal-variance t-test.
    #[arg(long)]
    welch: bool,
    /// Levene center.
    #[arg(long, value_enum, default_value = "mean")]
    center: CenterArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum StatTest {
    Ttest,
    Anova,
    Levene,
}

#[derive(Clone, Copy, ValueEnum)]
enum CenterArg {
    Mean,
    Median,
}

impl Opts {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(d) = &self.data {
            cfg.dataset = Some(d.clone());
        }
        if let Some(s) = self.seed {
            cfg.synth.seed = s;
            cfg.train.seed = s;
            cfg.explain.seed = s;
        }
        let s = &mut cfg.synth;
        set(&mut s.patients, self.patients);
        set(&mut s.controls, self.controls);
        set(&mut s.effect_channels, self.effect_channels.clone());
        set(&mut s.amplitude_ratio, self.amplitude_ratio);
        set(&mut s.peak_delay_s, self.peak_delay);
        let p = &mut cfg.preprocess;
        set(&mut p.low_cut_hz, self.low_cut);
        set(&mut p.high_cut_hz, self.high_cut);
        set(&mut p.filter_order, self.filter_order);
        set(&mut p.motion_amp_sigma, self.motion_amp_sigma);
        set(&mut p.motion_iqr, self.motion_iqr);
        p.short_channel &= !self.no_short_channel;
        p.motion &= !self.no_motion;
        if self.extinction.is_some() {
            p.extinction_csv = self.extinction.clone();
        }
        set(&mut cfg.epoch.window_s, self.window);
        set(&mut cfg.features.mode, self.feature_mode);
        if self.select_k.is_some() {
            cfg.features.select_k = self.select_k;
        }
        if let Some(m) = self.model.as_ref().filter(|m| !m.is_empty()) {
            cfg.train.models = m.clone();
            cfg.explain.model = m[0];
        }
        set(&mut cfg.train.folds, self.folds);
        set(&mut cfg.explain.samples, self.samples);
        set(&mut cfg.stats.pool, self.pool);
        set(&mut cfg.stats.roi, self.roi.clone());
    }

    fn config(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::default();
        self.apply(&mut cfg);
        match &self.config {
            Some(path) => merge_file(&cfg, path),
            None => Ok(cfg),
        }
    }
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn merge_file(cfg: &PipelineConfig, path: &Path) -> Result<PipelineConfig> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{file}: {e}")))?;
    let over: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{file}: {e}")))?;
    let mut base = toml::Value::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    merge(&mut base, over);
    base.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{file}: {e}")))
}

fn hemo_series(hemo: &Option<PathBuf>, cfg: &PipelineConfig) -> Result<Vec<HemoSeries>> {
    match hemo {
        Some(dir) => load_hemo(dir).stage("ingest"),
        None => {
            let pre = cfg.preprocess.to_config().stage("config")?;
            let (d, _) = pipeline::ingest(cfg)?;
            pipeline::preprocess_dataset(&d, &pre)
        }
    }
}

fn epochs(a: &WithHemo, cfg: &PipelineConfig) -> Result<EpochSet> {
    let hemo = hemo_series(&a.hemo, cfg)?;
    pipeline::epoch_all(&hemo, &cfg.epoch.params())
}

fn report(files: Vec<(&str, String)>) -> Report {
    Report { files: files.into_iter().map(|(k, v)| (k.to_string(), v)).collect() }
}

/// Removes `out` after a failure if this command created it.
fn guarded(out: &Path, f: impl FnOnce() -> Result<()>) -> Result<()> {
    let existed = out.exists();
    let r = f();
    if r.is_err() && !existed && out.exists() {
        let _ = fs::remove_dir_all(out);
    }
    r
}

fn cmd_synth(a: &WithOut) -> Result<()> {
    let cfg = a.opts.config()?;
    let (d, gt) = match pipeline::ingest(&PipelineConfig { dataset: None, ..cfg })? {
        (d, Some(gt)) => (d, gt),
        (_, None) => unreachable!("synthesis always yields ground truth"),
    };
    guarded(&a.out, || {
        save_dataset(&d, &a.out).stage("synth")?;
        let path = a.out.join(pipeline::GROUND_TRUTH_FILE);
        fs::write(&path, ground_truth_report(&gt)).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    })?;
    println!("wrote {} participants to {}", d.recordings.len(), a.out.display());
    Ok(())
}

fn cmd_preprocess(a: &WithOut) -> Result<()> {
    let cfg = a.opts.config()?;
    let pre = cfg.preprocess.to_config().stage("config")?;
    let (d, _) = pipeline::ingest(&cfg)?;
    let hemo = pipeline::preprocess_dataset(&d, &pre)?;
    guarded(&a.out, || save_hemo(&hemo, &a.out).stage("preprocess"))?;
    println!("wrote {} hemoglobin series to {}", hemo.len(), a.out.display());
    Ok(())
}

fn cmd_epoch(a: &WithHemo) -> Result<()> {
    let cfg = a.opts.config()?;
    let set = epochs(a, &cfg)?;
    let timings = peak_timings(&set, &pipeline::tasks_of(&set), &cfg.stats.roi_name, &cfg.stats.roi).stage("epoch")?;
    let r = report(vec![
        ("block_averages.csv", pipeline::block_average_csv(&set).stage("epoch")?),
        (pipeline::BLOCK_AVERAGES_SVG, pipeline::block_average_svg(&set, &cfg.stats.roi).stage("report")?),
        (pipeline::TIME_TO_PEAK_CSV, pipeline::timings_csv(&timings)),
        (pipeline::TIME_TO_PEAK_SVG, pipeline::timings_svg(&timings, &cfg.stats.roi_name).stage("report")?),
    ]);
    r.write(&a.out)?;
    println!("{} epochs of {} samples", set.epochs.len(), set.window_samples);
    Ok(())
}

fn cmd_train(a: &WithHemo) -> Result<()> {
    let cfg = a.opts.config()?;
    let set = epochs(a, &cfg)?;
    let runs = pipeline::classify(&set, &cfg, &cfg.train.models)?;
    let text = pipeline::metrics_report(&cfg, &runs);
    report(vec![(pipeline::METRICS_FILE, text.clone())]).write(&a.out)?;
    print!("{text}");
    Ok(())
}

fn cmd_explain(a: &WithHemo) -> Result<()> {
    let cfg = a.opts.config()?;
    let set = epochs(a, &cfg)?;
    let runs = pipeline::classify(&set, &cfg, &[cfg.explain.model])?;
    let imp = pipeline::attribute(&set, &runs, &cfg.explain)?;
    report(vec![
        (pipeline::IMPORTANCE_CSV, imp.to_csv()),
        (pipeline::IMPORTANCE_SVG, pipeline::importance_svg(&imp, &cfg.explain, cfg.features.mode).stage("report")?),
    ])
    .write(&a.out)?;
    for r in imp.rows.iter().take(5) {
        println!("{} {} {:.6}", r.channel, r.chromophore, r.mean_abs_shap);
    }
    Ok(())
}

fn cmd_report(a: &WithOut, require_data: bool) -> Result<()> {
    let cfg = a.opts.config()?;
    if require_data && cfg.dataset.is_none() {
        return Err(Error::Config("report needs --data (use `run` to synthesize)".into()));
    }
    let outcome = pipeline::run_pipeline(&cfg, &a.out)?;
    for run in &outcome.runs {
        for (kind, r) in &run.results {
            println!("{} {} accuracy {:.4}", run.task, kind, r.pooled.accuracy);
        }
    }
    println!("report written to {}", a.out.display());
    Ok(())
}

fn parse_summary(s: &str) -> Result<GroupSummary<f64>> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::Config(format!("summary '{s}' must be n,mean,sd"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let n: usize = parts[0].parse().map_err(|_| bad())?;
    let mean: f64 = parts[1].parse().map_err(|_| bad())?;
    let sd: f64 = parts[2].parse().map_err(|_| bad())?;
    GroupSummary::new(n, mean, sd).map_err(|e| Error::Config(e.to_string()))
}

/// Numbers one per line; a non-numeric first line is taken as a header.
fn read_samples(path: &Path) -> Result<Vec<f64>> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{file}: {e}")))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.parse::<f64>() {
            Ok(v) if v.is_finite() => out.push(v),
            _ if i == 0 => {}
            _ => return Err(Error::Data(format!("{file}:{}: not a finite number: '{line}'", i + 1))),
        }
    }
    Ok(out)
}

fn print_result(name: &str, r: &TestResult<f64>) {
    println!("test = {name}");
    println!("statistic = {:.6}", r.statistic);
    match r.df {
        Df::Single(d) => println!("df = {d:.4}"),
        Df::Pair(a, b) => println!("df = {a}, {b}"),
    }
    println!("p = {:.6e}", r.p_two_sided);
    if let Some(d) = r.mean_difference {
        println!("mean_difference = {d:.6e}");
    }
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    if a.summary.is_empty() == a.csv.is_empty() {
        return Err(Error::Config("give either --summary or --csv groups, not both".into()));
    }
    let groups: Vec<Vec<f64>> = a.csv.iter().map(|p| read_samples(p)).collect::<Result<_>>()?;
    let summaries: Vec<GroupSummary<f64>> = a.summary.iter().map(|s| parse_summary(s)).collect::<Result<_>>()?;
    let count = groups.len().max(summaries.len());
    match a.test {
        StatTest::Ttest => {
            if count != 2 {
                return Err(Error::Config("t-test needs exactly two groups".into()));
            }
            let r = if summaries.is_empty() {
                stats::t_test(&groups[0], &groups[1], !a.welch)?
            } else {
                stats::t_test_from_summary(&summaries[0], &summaries[1], !a.welch)?
            };
            print_result(if a.welch { "t (welch)" } else { "t (pooled)" }, &r);
        }
        StatTest::Anova => {
            let r = if summaries.is_empty() {
                stats::one_way_anova(&groups)?
            } else {
                stats::one_way_anova_from_summary(&summaries)?
            };
            print_result("one-way anova F", &r);
        }
        StatTest::Levene => {
            if groups.is_empty() {
                return Err(Error::Config("levene needs sample files (--csv), not summaries".into()));
            }
            let center = match a.center {
                CenterArg::Mean => Center::Mean,
                CenterArg::Median => Center::Median,
            };
            print_result("levene F", &stats::levene(&groups, center)?);
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("NIRSCOPE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("NIRSCOPE_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Epoch(a) => cmd_epoch(a),
        Command::Train(a) => cmd_train(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Report(a) => cmd_report(a, true),
        Command::Run(a) => cmd_report(a, false),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Experiment driver: dataset construction, library training, ensemble
//! versus single-model comparison cases, per-twin breakdowns and the
//! context-switch study, with JSON and CSV report writers.
//!
//! Everything downstream of a config is deterministic: split seeds, twin
//! seeds, coverage subsamples and repeat seeds all derive from the master
//! seed, so a whole comparison reproduces bit-for-bit.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AppConfig, PartitionSection};
use crate::dataset::{
    build_dataset, compute_norm_stats, load_dataset, partition_regimes, save_dataset,
    select_features, Dataset, RegimePartition, SplitLabel,
};
use crate::fnn::{
    make_subset, make_subset_from_indices, train_twin, TrainConfig, TrainSubset, TrainedTwin,
};
use crate::plant::{format_f64, inject_context_switch, simulate_episode, ControlAction, Episode,
    PlantConfig, PumpProfile};
use crate::pva::{run_ensemble, EnsembleStep, TrackingConfig};
use crate::seed::{derive_seed, rng_for};
use crate::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

// ======================================================================
// Metrics
// ======================================================================

/// Mean squared error between two equal-length series, squared deg C.
pub fn episode_mse(predicted: &[f64], truth: &[f64]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch { left: predicted.len(), right: truth.len() });
    }
    if predicted.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: 0 });
    }
    let sum: f64 = predicted.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / predicted.len() as f64)
}

/// Largest and smallest one-step signed excursion `predicted - truth`;
/// positive means over-prediction. Neither value is clamped to zero.
pub fn excursions(predicted: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch { left: predicted.len(), right: truth.len() });
    }
    if predicted.is_empty() {
        return Err(Error::LengthMismatch { left: 0, right: 0 });
    }
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for (p, t) in predicted.iter().zip(truth) {
        let d = p - t;
        hi = hi.max(d);
        lo = lo.min(d);
    }
    Ok((hi, lo))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Mean and 95 percent capture bounds (mean plus or minus 1.96 sample
/// standard deviations); a single value degenerates to the point itself.
pub fn capture_interval(xs: &[f64]) -> (f64, f64, f64) {
    let m = mean(xs);
    let s = sample_std(xs);
    (m, m - 1.96 * s, m + 1.96 * s)
}

/// Sorted uniform random subsample of `0..n` holding `ceil(coverage * n)`
/// indices, at least one and at most all.
pub fn subsample_indices(n: usize, coverage: f64, rng: &mut ChaCha12Rng) -> Vec<usize> {
    let count = ((n as f64 * coverage).ceil() as usize).clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut picked = order[..count].to_vec();
    picked.sort_unstable();
    picked
}

// ======================================================================
// Data context and library training
// ======================================================================

/// The sampled dataset splits, all normalized by the Train statistics
/// and sharing the Train-selected feature list. `ext_train` is the
/// training pool for extension twins; `extp` stays evaluation-only.
#[derive(Debug, Clone, PartialEq)]
pub struct DataContext {
    pub train: Dataset,
    pub intp: Dataset,
    pub extp: Dataset,
    pub ext_train: Dataset,
}

impl DataContext {
    pub fn dataset(&self, label: SplitLabel) -> &Dataset {
        match label {
            SplitLabel::Train => &self.train,
            SplitLabel::Intp => &self.intp,
            SplitLabel::Extp => &self.extp,
            SplitLabel::ExtTrain => &self.ext_train,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for ds in [&self.train, &self.intp, &self.extp, &self.ext_train] {
            save_dataset(ds, &dir.join(ds.label.as_str().to_lowercase()))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<DataContext> {
        Ok(DataContext {
            train: load_dataset(&dir.join("train"))?,
            intp: load_dataset(&dir.join("intp"))?,
            extp: load_dataset(&dir.join("extp"))?,
            ext_train: load_dataset(&dir.join("ext_train"))?,
        })
    }
}

/// Simulate every split, fit the normalization statistics on Train,
/// select the feature channels and stamp both onto every split.
pub fn build_all_datasets(cfg: &AppConfig) -> Result<DataContext> {
    cfg.validate()?;
    let mut train = build_dataset(&cfg.plan(SplitLabel::Train), &cfg.plant)?;
    let mut intp = build_dataset(&cfg.plan(SplitLabel::Intp), &cfg.plant)?;
    let mut extp = build_dataset(&cfg.plan(SplitLabel::Extp), &cfg.plant)?;
    let mut ext_train = build_dataset(&cfg.plan(SplitLabel::ExtTrain), &cfg.plant)?;

    let stats = compute_norm_stats(&train.episodes)?;
    let features =
        select_features(&train.episodes, cfg.features.threshold, &cfg.features.expert)?;
    for ds in [&mut train, &mut intp, &mut extp, &mut ext_train] {
        ds.norm_stats = stats.clone();
        ds.feature_names = features.clone();
    }
    Ok(DataContext { train, intp, extp, ext_train })
}

/// Train one twin per (sub-range, seed) cell of an equal-width partition
/// of the dataset's end-speed range. `group` namespaces the twin seeds.
pub fn train_library(
    ds: &Dataset,
    part: &PartitionSection,
    cfg: &AppConfig,
    group: &str,
) -> Result<Vec<TrainedTwin>> {
    let partition = RegimePartition::equal_width(
        ds.plan.w_end_range,
        part.n_ranges,
        part.overlap,
        part.seeds_per_range,
    );
    let subsets = partition_regimes(ds, &partition)?;
    let mut jobs = Vec::new();
    let mut idx = 0u64;
    for sub in &subsets {
        for s in 0..part.seeds_per_range as u64 {
            jobs.push((sub, s, cfg.twin_seed(group, idx)));
            idx += 1;
        }
    }
    jobs.par_iter()
        .map(|&(sub, s, seed)| {
            let subset = make_subset(ds, sub, s)?;
            let tc = TrainConfig { seed, ..cfg.train.clone() };
            train_twin(&subset, &tc)
        })
        .collect()
}

/// Denormalized centerline series a single twin predicts for an episode.
pub fn twin_ssf_series(twin: &TrainedTwin, episode: &Episode) -> Result<Vec<f64>> {
    let series: Vec<&[f64]> = twin
        .features
        .iter()
        .map(|n| episode.channel(n))
        .collect::<Result<_>>()?;
    let stats: Vec<(f64, f64)> = twin
        .features
        .iter()
        .map(|n| twin.norm_stats.lookup(n))
        .collect::<Result<_>>()?;
    let n = episode.n_steps();
    let mut out = Vec::with_capacity(n);
    let mut x = vec![0.0; series.len()];
    for i in 0..n {
        for (j, (s, &(m, sd))) in series.iter().zip(&stats).enumerate() {
            x[j] = (s[i] - m) / sd;
        }
        out.push(twin.predict_ssf(&x)?);
    }
    Ok(out)
}

// ======================================================================
// Experiment specs and reports
// ======================================================================

/// What produces the predictions in one comparison case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSource {
    /// The twin library with voting; `extended` appends the
    /// extension twins to the base library.
    Ensemble { extended: bool },
    /// One network trained on a seeded subsample of the named splits.
    Single { coverage: f64, labels: Vec<SplitLabel> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub case_id: String,
    pub source: ModelSource,
    pub eval: Vec<SplitLabel>,
    pub repeats: usize,
    pub seed: u64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.case_id.is_empty() {
            return Err(Error::InvalidConfig("case_id must be non-empty".into()));
        }
        if self.eval.is_empty() {
            return Err(Error::InvalidConfig("eval dataset list must be non-empty".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidConfig("repeats must be >= 1".into()));
        }
        if let ModelSource::Single { coverage, labels } = &self.source {
            if !(*coverage > 0.0 && *coverage <= 1.0) {
                return Err(Error::InvalidConfig("coverage must lie in (0, 1]".into()));
            }
            if labels.is_empty() {
                return Err(Error::InvalidConfig("coverage label list must be non-empty".into()));
            }
        }
        Ok(())
    }
}

/// Repeat statistics for single-model cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatStats {
    pub repeats: usize,
    pub mean: f64,
    pub capture_low: f64,
    pub capture_high: f64,
    pub per_repeat_mean: Vec<f64>,
}

/// Evaluation of one case on one dataset split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEval {
    pub label: SplitLabel,
    pub per_episode_mse: Vec<f64>,
    pub mean_mse: f64,
    pub excursion_positive: f64,
    pub excursion_negative: f64,
    pub within_margin: bool,
    /// Standalone per-twin mean MSE; ensemble cases only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_twin_mse: Option<Vec<f64>>,
    /// Capture statistics over repeats; single-model cases only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repeat_stats: Option<RepeatStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub spec: ExperimentSpec,
    pub evals: Vec<DatasetEval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: u32,
    pub master_seed: u64,
    pub excursion_margin: f64,
    pub cases: Vec<CaseReport>,
}

/// Shared inputs for running cases.
pub struct RunContext<'a> {
    pub data: &'a DataContext,
    pub base: &'a [TrainedTwin],
    pub extension: &'a [TrainedTwin],
    pub train: &'a TrainConfig,
    pub tracking: &'a TrackingConfig,
    pub margin: f64,
}

// ======================================================================
// Case execution
// ======================================================================

fn within(margin: f64, hi: f64, lo: f64) -> bool {
    hi <= margin && lo >= -margin
}

/// Evaluate a twin library with voting over every episode of a dataset.
pub fn evaluate_ensemble(
    twins: &[TrainedTwin],
    ds: &Dataset,
    tracking: &TrackingConfig,
    margin: f64,
) -> Result<DatasetEval> {
    let per_episode: Vec<(f64, f64, f64, Vec<f64>)> = ds
        .episodes
        .par_iter()
        .map(|ep| {
            let steps = run_ensemble(twins, ep, tracking)?;
            let y_hat: Vec<f64> = steps.iter().map(|s| s.y_hat).collect();
            let mse = episode_mse(&y_hat, &ep.ssf)?;
            let (hi, lo) = excursions(&y_hat, &ep.ssf)?;
            let mut twin_sq = vec![0.0; twins.len()];
            for (i, step) in steps.iter().enumerate() {
                for (k, ts) in step.twins.iter().enumerate() {
                    let d = ts.ssf - ep.ssf[i];
                    twin_sq[k] += d * d;
                }
            }
            for v in twin_sq.iter_mut() {
                *v /= steps.len() as f64;
            }
            Ok((mse, hi, lo, twin_sq))
        })
        .collect::<Result<_>>()?;

    let per_episode_mse: Vec<f64> = per_episode.iter().map(|r| r.0).collect();
    let hi = per_episode.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = per_episode.iter().map(|r| r.2).fold(f64::INFINITY, f64::min);
    let mut per_twin = vec![0.0; twins.len()];
    for r in &per_episode {
        for (k, v) in r.3.iter().enumerate() {
            per_twin[k] += v;
        }
    }
    for v in per_twin.iter_mut() {
        *v /= per_episode.len() as f64;
    }
    Ok(DatasetEval {
        label: ds.label,
        mean_mse: mean(&per_episode_mse),
        per_episode_mse,
        excursion_positive: hi,
        excursion_negative: lo,
        within_margin: within(margin, hi, lo),
        per_twin_mse: Some(per_twin),
        repeat_stats: None,
    })
}

/// Subsample each named split at the coverage fraction and merge into one
/// training subset; the regime interval is the hull of the split ranges.
fn coverage_subset(
    data: &DataContext,
    labels: &[SplitLabel],
    coverage: f64,
    seed: u64,
) -> Result<TrainSubset> {
    let mut episodes = Vec::new();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &label in labels {
        let ds = data.dataset(label);
        let mut rng = rng_for(seed, "coverage_subsample", label as u64);
        let indices = subsample_indices(ds.episodes.len(), coverage, &mut rng);
        let sub = make_subset_from_indices(ds, &indices, ds.plan.w_end_range, 0)?;
        episodes.extend(sub.episodes);
        lo = lo.min(ds.plan.w_end_range[0]);
        hi = hi.max(ds.plan.w_end_range[1]);
    }
    Ok(TrainSubset {
        features: data.train.feature_names.clone(),
        episodes,
        norm_stats: data.train.norm_stats.clone(),
        regime: crate::fnn::RegimeInfo { w_end_range: [lo, hi], seed_index: 0 },
    })
}

fn eval_single_dataset(
    models: &[TrainedTwin],
    ds: &Dataset,
    margin: f64,
) -> Result<DatasetEval> {
    let n_ep = ds.episodes.len();
    let mut per_episode_by_repeat = Vec::with_capacity(models.len());
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for model in models {
        let rows: Vec<(f64, f64, f64)> = ds
            .episodes
            .par_iter()
            .map(|ep| {
                let pred = twin_ssf_series(model, ep)?;
                let mse = episode_mse(&pred, &ep.ssf)?;
                let (h, l) = excursions(&pred, &ep.ssf)?;
                Ok((mse, h, l))
            })
            .collect::<Result<_>>()?;
        hi = hi.max(rows.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max));
        lo = lo.min(rows.iter().map(|r| r.2).fold(f64::INFINITY, f64::min));
        per_episode_by_repeat.push(rows.iter().map(|r| r.0).collect::<Vec<f64>>());
    }
    let per_episode_mse: Vec<f64> = (0..n_ep)
        .map(|i| mean(&per_episode_by_repeat.iter().map(|r| r[i]).collect::<Vec<f64>>()))
        .collect();
    let per_repeat_mean: Vec<f64> =
        per_episode_by_repeat.iter().map(|r| mean(r)).collect();
    let (m, cl, ch) = capture_interval(&per_repeat_mean);
    Ok(DatasetEval {
        label: ds.label,
        mean_mse: m,
        per_episode_mse,
        excursion_positive: hi,
        excursion_negative: lo,
        within_margin: within(margin, hi, lo),
        per_twin_mse: None,
        repeat_stats: Some(RepeatStats {
            repeats: models.len(),
            mean: m,
            capture_low: cl,
            capture_high: ch,
            per_repeat_mean,
        }),
    })
}

/// Run one comparison case.
pub fn run_case(spec: &ExperimentSpec, rc: &RunContext) -> Result<CaseReport> {
    let fail = |e: Error| Error::CaseFailed {
        case_id: spec.case_id.clone(),
        source: Box::new(e),
    };
    spec.validate().map_err(fail)?;
    let mut evals = Vec::with_capacity(spec.eval.len());
    match &spec.source {
        ModelSource::Ensemble { extended } => {
            let mut twins: Vec<TrainedTwin> = rc.base.to_vec();
            if *extended {
                if rc.extension.is_empty() {
                    return Err(fail(Error::EmptyLibrary(
                        "extension twins requested but none provided".into(),
                    )));
                }
                twins.extend(rc.extension.iter().cloned());
            }
            if twins.is_empty() {
                return Err(fail(Error::EmptyLibrary("base library is empty".into())));
            }
            for &label in &spec.eval {
                evals.push(
                    evaluate_ensemble(&twins, rc.data.dataset(label), rc.tracking, rc.margin)
                        .map_err(fail)?,
                );
            }
        }
        ModelSource::Single { coverage, labels } => {
            let models: Vec<TrainedTwin> = (0..spec.repeats as u64)
                .map(|r| {
                    let subset = coverage_subset(
                        rc.data,
                        labels,
                        *coverage,
                        derive_seed(spec.seed, "repeat_subsample", r),
                    )?;
                    let tc = TrainConfig {
                        seed: derive_seed(spec.seed, "repeat_train", r),
                        ..rc.train.clone()
                    };
                    train_twin(&subset, &tc)
                })
                .collect::<Result<_>>()
                .map_err(fail)?;
            for &label in &spec.eval {
                evals.push(
                    eval_single_dataset(&models, rc.data.dataset(label), rc.margin)
                        .map_err(fail)?,
                );
            }
        }
    }
    Ok(CaseReport { spec: spec.clone(), evals })
}

/// The six standard comparison cases: base ensemble, extended ensemble,
/// and four single-model baselines at growing coverage.
pub fn standard_cases(cfg: &AppConfig) -> Vec<ExperimentSpec> {
    let c = cfg.experiments.single_coverage;
    let eval = vec![SplitLabel::Intp, SplitLabel::Extp];
    let seed = |i: u64| derive_seed(cfg.master_seed, "case", i);
    let single = |cov: f64, labels: Vec<SplitLabel>| ModelSource::Single {
        coverage: cov.min(1.0),
        labels,
    };
    vec![
        ExperimentSpec {
            case_id: "case1_ensemble".into(),
            source: ModelSource::Ensemble { extended: false },
            eval: eval.clone(),
            repeats: 1,
            seed: seed(1),
        },
        ExperimentSpec {
            case_id: "case2_ensemble_extended".into(),
            source: ModelSource::Ensemble { extended: true },
            eval: eval.clone(),
            repeats: 1,
            seed: seed(2),
        },
        ExperimentSpec {
            case_id: "case3_single_train".into(),
            source: single(c, vec![SplitLabel::Train]),
            eval: eval.clone(),
            repeats: cfg.experiments.repeats,
            seed: seed(3),
        },
        ExperimentSpec {
            case_id: "case4_single_train_ext".into(),
            source: single(c, vec![SplitLabel::Train, SplitLabel::ExtTrain]),
            eval: eval.clone(),
            repeats: cfg.experiments.repeats,
            seed: seed(4),
        },
        ExperimentSpec {
            case_id: "case5_single_train_2x".into(),
            source: single(2.0 * c, vec![SplitLabel::Train]),
            eval: eval.clone(),
            repeats: cfg.experiments.repeats,
            seed: seed(5),
        },
        ExperimentSpec {
            case_id: "case6_single_train_ext_8x".into(),
            source: single(8.0 * c, vec![SplitLabel::Train, SplitLabel::ExtTrain]),
            eval,
            repeats: cfg.experiments.repeats,
            seed: seed(6),
        },
    ]
}

/// Run every standard case and assemble the comparison report.
pub fn compare_all(cfg: &AppConfig, rc: &RunContext) -> Result<ComparisonReport> {
    let mut cases = Vec::new();
    for spec in standard_cases(cfg) {
        cases.push(run_case(&spec, rc)?);
    }
    Ok(ComparisonReport {
        schema_version: REPORT_SCHEMA_VERSION,
        master_seed: cfg.master_seed,
        excursion_margin: rc.margin,
        cases,
    })
}

// ======================================================================
// Per-twin breakdown and context switch
// ======================================================================

/// Standalone per-twin MSE plus the aggregated MSE for one episode.
pub fn per_twin_breakdown(
    twins: &[TrainedTwin],
    episode: &Episode,
    tracking: &TrackingConfig,
) -> Result<(Vec<f64>, f64)> {
    let steps = run_ensemble(twins, episode, tracking)?;
    let y_hat: Vec<f64> = steps.iter().map(|s| s.y_hat).collect();
    let ensemble_mse = episode_mse(&y_hat, &episode.ssf)?;
    let mut per_twin = vec![0.0; twins.len()];
    for (i, step) in steps.iter().enumerate() {
        for (k, ts) in step.twins.iter().enumerate() {
            let d = ts.ssf - episode.ssf[i];
            per_twin[k] += d * d;
        }
    }
    for v in per_twin.iter_mut() {
        *v /= steps.len() as f64;
    }
    Ok((per_twin, ensemble_mse))
}

/// Whole-trace prediction quality summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub mse: f64,
    pub excursion_positive: f64,
    pub excursion_negative: f64,
    pub within_margin: bool,
}

fn summarize_trace(steps: &[EnsembleStep], truth: &[f64], margin: f64) -> Result<TraceSummary> {
    let y_hat: Vec<f64> = steps.iter().map(|s| s.y_hat).collect();
    let mse = episode_mse(&y_hat, truth)?;
    let (hi, lo) = excursions(&y_hat, truth)?;
    Ok(TraceSummary {
        mse,
        excursion_positive: hi,
        excursion_negative: lo,
        within_margin: within(margin, hi, lo),
    })
}

/// Report for the paired baseline/switched run. Carries prediction
/// quality on both traces and nothing else about the switch itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSwitchReport {
    pub schema_version: u32,
    pub switch: ControlAction,
    pub margin: f64,
    pub baseline: TraceSummary,
    pub switched: TraceSummary,
    /// Whether |prediction - truth| stays within the margin on the
    /// switched trace from the switch onward.
    pub post_switch_within_margin: bool,
}

/// Full output of the context-switch study: report plus both episodes
/// and ensemble traces for export.
pub struct ContextSwitchRun {
    pub report: ContextSwitchReport,
    pub baseline_episode: Episode,
    pub baseline_steps: Vec<EnsembleStep>,
    pub switched_episode: Episode,
    pub switched_steps: Vec<EnsembleStep>,
}

/// Run the ensemble over a baseline transient and over the same transient
/// with an unannounced mid-run control action injected.
pub fn context_switch_experiment(
    twins: &[TrainedTwin],
    profile: &PumpProfile,
    actions: &[ControlAction],
    plant: &PlantConfig,
    switch: ControlAction,
    tracking: &TrackingConfig,
    margin: f64,
) -> Result<ContextSwitchRun> {
    let baseline_episode = simulate_episode(profile, actions, plant)?;
    let switched_episode = inject_context_switch(profile, actions, plant, switch.clone())?;
    let baseline_steps = run_ensemble(twins, &baseline_episode, tracking)?;
    let switched_steps = run_ensemble(twins, &switched_episode, tracking)?;

    let baseline = summarize_trace(&baseline_steps, &baseline_episode.ssf, margin)?;
    let switched = summarize_trace(&switched_steps, &switched_episode.ssf, margin)?;
    let post_switch_within_margin = switched_steps
        .iter()
        .zip(&switched_episode.ssf)
        .filter(|(s, _)| s.t >= switch.t_start)
        .all(|(s, &truth)| (s.y_hat - truth).abs() <= margin);

    Ok(ContextSwitchRun {
        report: ContextSwitchReport {
            schema_version: REPORT_SCHEMA_VERSION,
            switch,
            margin,
            baseline,
            switched,
            post_switch_within_margin,
        },
        baseline_episode,
        baseline_steps,
        switched_episode,
        switched_steps,
    })
}

// ======================================================================
// Report writers
// ======================================================================

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Table-shaped CSV: one row per case, metric columns per eval split.
/// Capture bounds stay empty for ensemble rows.
pub fn write_table_csv(report: &ComparisonReport, path: &Path) -> Result<()> {
    let labels: Vec<SplitLabel> = report
        .cases
        .first()
        .map(|c| c.evals.iter().map(|e| e.label).collect())
        .unwrap_or_default();
    let mut out = String::from("case,source,coverage,coverage_labels,repeats");
    for label in &labels {
        let l = label.as_str().to_lowercase();
        out.push_str(&format!(
            ",{l}_mean_mse,{l}_capture_low,{l}_capture_high,{l}_excursion_pos,{l}_excursion_neg"
        ));
    }
    out.push('\n');
    for case in &report.cases {
        let (source, coverage, cov_labels) = match &case.spec.source {
            ModelSource::Ensemble { extended } => (
                if *extended { "ensemble_extended" } else { "ensemble" },
                String::new(),
                String::new(),
            ),
            ModelSource::Single { coverage, labels } => (
                "single",
                format_f64(*coverage),
                labels.iter().map(|l| l.as_str()).collect::<Vec<_>>().join("+"),
            ),
        };
        out.push_str(&format!(
            "{},{},{},{},{}",
            case.spec.case_id, source, coverage, cov_labels, case.spec.repeats
        ));
        for eval in &case.evals {
            let (cl, ch) = match &eval.repeat_stats {
                Some(rs) => (format_f64(rs.capture_low), format_f64(rs.capture_high)),
                None => (String::new(), String::new()),
            };
            out.push_str(&format!(
                ",{},{},{},{},{}",
                format_f64(eval.mean_mse),
                cl,
                ch,
                format_f64(eval.excursion_positive),
                format_f64(eval.excursion_negative)
            ));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PlanSpec;

    #[test]
    fn episode_mse_examples() {
        let a = vec![500.0, 510.0];
        assert_eq!(episode_mse(&a, &a).unwrap(), 0.0);
        let truth = vec![501.0, 507.0];
        assert!((episode_mse(&a, &truth).unwrap() - 5.0).abs() < 1e-12);
        let offset: Vec<f64> = truth.iter().map(|v| v + 2.0).collect();
        assert!((episode_mse(&offset, &truth).unwrap() - 4.0).abs() < 1e-12);
        assert!(episode_mse(&a, &[1.0]).is_err());
        assert!(episode_mse(&[], &[]).is_err());
    }

    #[test]
    fn excursion_examples() {
        let truth = vec![0.0, 0.0, 0.0, 0.0];
        assert_eq!(excursions(&truth, &truth).unwrap(), (0.0, 0.0));
        let pred = vec![0.0, 3.0, -5.0, 0.0];
        assert_eq!(excursions(&pred, &truth).unwrap(), (3.0, -5.0));
        // Uniform over-prediction keeps the smallest positive difference
        // in the negative slot; nothing is clamped to zero.
        let pred = vec![2.0, 5.0, 3.0];
        let truth = vec![0.0, 0.0, 0.0];
        assert_eq!(excursions(&pred, &truth).unwrap(), (5.0, 2.0));
    }

    #[test]
    fn capture_interval_examples() {
        let (m, lo, hi) = capture_interval(&[7.5]);
        assert_eq!((m, lo, hi), (7.5, 7.5, 7.5));
        let (m, lo, hi) = capture_interval(&[1.0, 2.0, 3.0]);
        assert!((m - 2.0).abs() < 1e-12);
        assert!((lo - (2.0 - 1.96)).abs() < 1e-12);
        assert!((hi - (2.0 + 1.96)).abs() < 1e-12);
    }

    #[test]
    fn subsample_is_deterministic_and_sized() {
        let mut rng = rng_for(9, "sub", 0);
        let a = subsample_indices(40, 0.25, &mut rng);
        assert_eq!(a.len(), 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        let mut rng = rng_for(9, "sub", 0);
        let b = subsample_indices(40, 0.25, &mut rng);
        assert_eq!(a, b);

        let mut rng = rng_for(9, "sub", 1);
        assert_eq!(subsample_indices(5, 1.0, &mut rng), vec![0, 1, 2, 3, 4]);
        let mut rng = rng_for(9, "sub", 2);
        assert_eq!(subsample_indices(200, 1e-9, &mut rng).len(), 1);
        let mut rng = rng_for(9, "sub", 3);
        assert_eq!(subsample_indices(7, 0.3, &mut rng).len(), 3);
    }

    #[test]
    fn standard_case_roster_shape() {
        let cfg = AppConfig::default();
        let cases = standard_cases(&cfg);
        assert_eq!(cases.len(), 6);
        let mut ids: Vec<&str> = cases.iter().map(|c| c.case_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 6);
        assert!(matches!(cases[0].source, ModelSource::Ensemble { extended: false }));
        assert!(matches!(cases[1].source, ModelSource::Ensemble { extended: true }));
        let c = cfg.experiments.single_coverage;
        for (i, mult) in [(2usize, 1.0), (3, 1.0), (4, 2.0), (5, 8.0)] {
            match &cases[i].source {
                ModelSource::Single { coverage, .. } => {
                    assert!((coverage - (mult * c).min(1.0)).abs() < 1e-12)
                }
                _ => panic!("case {i} should be single"),
            }
        }
        for case in &cases {
            case.validate().unwrap();
        }
    }

    // ------------------------------------------------------------------
    // Tiny end-to-end fixture
    // ------------------------------------------------------------------

    fn tiny_config() -> AppConfig {
        let mut cfg = AppConfig::default();
        cfg.master_seed = 5;
        cfg.plant.dt = 1.0;
        cfg.plant.n_steps = 40;
        cfg.plant.t_acc = 5.0;
        cfg.sampling.train =
            PlanSpec { sample_count: Some(12), t_ramp: Some(25.0), w_end_range: Some([51.6, 100.0]) };
        cfg.sampling.intp =
            PlanSpec { sample_count: Some(4), t_ramp: Some(25.0), w_end_range: Some([51.6, 100.0]) };
        cfg.sampling.extp =
            PlanSpec { sample_count: Some(4), t_ramp: Some(25.0), w_end_range: Some([0.0, 38.7]) };
        cfg.sampling.ext_train =
            PlanSpec { sample_count: Some(4), t_ramp: Some(25.0), w_end_range: Some([0.0, 38.7]) };
        cfg.partition = PartitionSection { n_ranges: 2, overlap: 0.5, seeds_per_range: 1 };
        cfg.extension = PartitionSection { n_ranges: 1, overlap: 0.5, seeds_per_range: 1 };
        cfg.train.hidden_sizes = vec![6];
        cfg.train.max_epochs = 2;
        cfg.train.k_folds = 2;
        cfg.train.batch_size = 64;
        cfg.experiments.repeats = 2;
        cfg.experiments.single_coverage = 0.5;
        cfg
    }

    #[test]
    fn tiny_pipeline_runs_and_reports() {
        let cfg = tiny_config();
        let data = build_all_datasets(&cfg).unwrap();
        assert!(!data.train.feature_names.is_empty());
        assert_eq!(data.train.norm_stats, data.intp.norm_stats);
        assert_eq!(data.train.feature_names, data.extp.feature_names);
        assert_eq!(data.train.episodes.len(), 12);

        let base = train_library(&data.train, &cfg.partition, &cfg, "base").unwrap();
        assert_eq!(base.len(), 2);
        for twin in &base {
            assert!(twin.regime.w_end_range[0] >= 51.6 - 1e-9);
            assert!(twin.regime.w_end_range[1] <= 100.0 + 1e-9);
        }
        let extension = train_library(&data.extp, &cfg.extension, &cfg, "extension").unwrap();
        assert_eq!(extension.len(), 1);

        let rc = RunContext {
            data: &data,
            base: &base,
            extension: &extension,
            train: &cfg.train,
            tracking: &cfg.tracking,
            margin: cfg.experiments.excursion_margin,
        };

        let spec = ExperimentSpec {
            case_id: "ens".into(),
            source: ModelSource::Ensemble { extended: false },
            eval: vec![SplitLabel::Intp, SplitLabel::Extp],
            repeats: 1,
            seed: 3,
        };
        let report = run_case(&spec, &rc).unwrap();
        assert_eq!(report.evals.len(), 2);
        for eval in &report.evals {
            assert_eq!(eval.per_episode_mse.len(), 4);
            assert!((eval.mean_mse - mean(&eval.per_episode_mse)).abs() < 1e-12);
            assert_eq!(eval.per_twin_mse.as_ref().unwrap().len(), 2);
            assert!(eval.repeat_stats.is_none());
            assert!(eval.excursion_negative <= eval.excursion_positive);
        }
        let again = run_case(&spec, &rc).unwrap();
        assert_eq!(report, again);

        let spec = ExperimentSpec {
            case_id: "single".into(),
            source: ModelSource::Single { coverage: 0.5, labels: vec![SplitLabel::Train] },
            eval: vec![SplitLabel::Intp],
            repeats: 2,
            seed: 4,
        };
        let report = run_case(&spec, &rc).unwrap();
        let eval = &report.evals[0];
        assert!(eval.per_twin_mse.is_none());
        let rs = eval.repeat_stats.as_ref().unwrap();
        assert_eq!(rs.repeats, 2);
        assert_eq!(rs.per_repeat_mean.len(), 2);
        assert!(rs.capture_low <= rs.mean && rs.mean <= rs.capture_high);
    }

    #[test]
    fn table_csv_shape_matches_cases() {
        let cfg = tiny_config();
        let data = build_all_datasets(&cfg).unwrap();
        let base = train_library(&data.train, &cfg.partition, &cfg, "base").unwrap();
        let rc = RunContext {
            data: &data,
            base: &base,
            extension: &[],
            train: &cfg.train,
            tracking: &cfg.tracking,
            margin: cfg.experiments.excursion_margin,
        };
        let specs = vec![
            ExperimentSpec {
                case_id: "a".into(),
                source: ModelSource::Ensemble { extended: false },
                eval: vec![SplitLabel::Intp],
                repeats: 1,
                seed: 1,
            },
            ExperimentSpec {
                case_id: "b".into(),
                source: ModelSource::Single { coverage: 0.5, labels: vec![SplitLabel::Train] },
                eval: vec![SplitLabel::Intp],
                repeats: 1,
                seed: 2,
            },
        ];
        let mut cases = Vec::new();
        for s in &specs {
            cases.push(run_case(s, &rc).unwrap());
        }
        let report = ComparisonReport {
            schema_version: REPORT_SCHEMA_VERSION,
            master_seed: cfg.master_seed,
            excursion_margin: rc.margin,
            cases,
        };
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("table.csv");
        write_table_csv(&report, &csv).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("case,source,coverage,coverage_labels,repeats"));
        assert!(lines[0].contains("intp_mean_mse"));
        // Ensemble row leaves the capture columns empty.
        let cols: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(cols[1], "ensemble");
        assert_eq!(cols[6], "");
        assert_eq!(cols[7], "");
        let cols: Vec<&str> = lines[2].split(',').collect();
        assert_eq!(cols[1], "single");
        assert!(!cols[6].is_empty());

        let json = dir.path().join("report.json");
        write_json(&report, &json).unwrap();
        let back: ComparisonReport =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn single_twin_breakdown_equals_ensemble() {
        let cfg = tiny_config();
        let data = build_all_datasets(&cfg).unwrap();
        let part = PartitionSection { n_ranges: 1, overlap: 0.5, seeds_per_range: 1 };
        let lib = train_library(&data.train, &part, &cfg, "base").unwrap();
        assert_eq!(lib.len(), 1);
        let ep = &data.intp.episodes[0];
        let (per_twin, ensemble) = per_twin_breakdown(&lib, ep, &cfg.tracking).unwrap();
        assert_eq!(per_twin.len(), 1);
        assert!((per_twin[0] - ensemble).abs() < 1e-9);
    }

    #[test]
    fn noop_switch_changes_nothing() {
        let cfg = tiny_config();
        let data = build_all_datasets(&cfg).unwrap();
        let base = train_library(&data.train, &cfg.partition, &cfg, "base").unwrap();
        let profile = PumpProfile::new(1.0, 0.6, 25.0, 5.0);
        let switch = ControlAction {
            kind: crate::plant::ActionKind::ContextSwitch,
            t_start: 15.0,
            pump2_target: 1.0,
            ramp_duration: 5.0,
        };
        let run = context_switch_experiment(
            &base,
            &profile,
            &[],
            &cfg.plant,
            switch,
            &cfg.tracking,
            cfg.experiments.excursion_margin,
        )
        .unwrap();
        assert_eq!(run.report.baseline, run.report.switched);
        assert_eq!(run.baseline_steps, run.switched_steps);
        assert_eq!(run.baseline_episode.channels, run.switched_episode.channels);
    }

    #[test]
    fn real_switch_diverges_only_after_onset() {
        let cfg = tiny_config();
        let data = build_all_datasets(&cfg).unwrap();
        let base = train_library(&data.train, &cfg.partition, &cfg, "base").unwrap();
        let profile = PumpProfile::new(1.0, 0.6, 25.0, 5.0);
        let switch = ControlAction {
            kind: crate::plant::ActionKind::ContextSwitch,
            t_start: 20.0,
            pump2_target: 1.4,
            ramp_duration: 5.0,
        };
        let run = context_switch_experiment(
            &base,
            &profile,
            &[],
            &cfg.plant,
            switch.clone(),
            &cfg.tracking,
            cfg.experiments.excursion_margin,
        )
        .unwrap();
        let n = run.baseline_episode.n_steps();
        let mut diverged = false;
        for i in 0..n {
            let t = run.baseline_episode.time(i);
            let same = run
                .baseline_episode
                .channels
                .iter()
                .zip(&run.switched_episode.channels)
                .all(|(a, b)| a[i] == b[i]);
            if t <= switch.t_start {
                assert!(same, "traces must agree at t = {t}");
            } else if !same {
                diverged = true;
            }
        }
        assert!(diverged, "switch must perturb the trajectory");
    }
}

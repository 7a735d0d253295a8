//! Dataset construction, feature selection, normalization and regime
//! partitioning.
//!
//! A dataset is a labelled collection of simulated episodes. The training
//! split drives everything derived: pooled Pearson correlations pick input
//! features, pooled moments provide the z-score statistics, and the pump
//! end-speed axis is cut into overlapping regimes, one group of twins per
//! regime. The interpolation and extrapolation splits always carry the
//! training statistics, never their own.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::plant::{
    load_episode, save_episode, simulate_episode, Episode, PlantConfig, PumpProfile, CHANNEL_NAMES,
    SSF_NAME,
};
use crate::seed::{derive_seed, rng_for};
use crate::{Error, Result};

const MANIFEST_SCHEMA_VERSION: u32 = 1;

// ======================================================================
// Sampling plans and labels
// ======================================================================

/// Which split a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLabel {
    Train,
    Intp,
    Extp,
    /// Training pool for extension twins, sampled from the Extp regime
    /// with its own seed so the Extp evaluation split stays held out.
    ExtTrain,
}

impl SplitLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitLabel::Train => "train",
            SplitLabel::Intp => "intp",
            SplitLabel::Extp => "extp",
            SplitLabel::ExtTrain => "ext_train",
        }
    }
}

impl std::fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How to sample one split: episode count, fixed ramp duration, and the
/// pump end-speed range in percent of nominal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub label: SplitLabel,
    pub sample_count: usize,
    /// Ramp duration in seconds, shared by every episode of the split.
    pub t_ramp: f64,
    /// End-speed range `[low, high]` in percent of nominal speed.
    pub w_end_range: [f64; 2],
    pub seed: u64,
}

impl SamplingPlan {
    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::InvalidConfig("sample_count must be > 0".into()));
        }
        let [lo, hi] = self.w_end_range;
        if !(0.0 <= lo && lo <= hi && hi <= 100.0) {
            return Err(Error::InvalidConfig(format!(
                "w_end_range [{lo}, {hi}] must satisfy 0 <= low <= high <= 100"
            )));
        }
        if self.t_ramp <= 0.0 {
            return Err(Error::InvalidConfig("t_ramp must be > 0".into()));
        }
        Ok(())
    }
}

// ======================================================================
// Normalization statistics
// ======================================================================

/// Per-series mean and standard deviation, keyed by name. Computed on the
/// training split only and copied into every consumer.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NormStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn lookup(&self, name: &str) -> Result<(f64, f64)> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingChannel(name.to_string()))?;
        Ok((self.mean[i], self.std[i]))
    }
}

/// Z-score a value.
pub fn normalize(value: f64, mean: f64, std: f64) -> f64 {
    (value - mean) / std
}

/// Invert [`normalize`].
pub fn denormalize(value: f64, mean: f64, std: f64) -> f64 {
    value * std + mean
}

/// Pooled mean/std over all steps of all episodes, for every sensor
/// channel and the hidden series. Errors on channels with zero variance
/// are deferred to the consumer: std is stored as-is (possibly 0).
pub fn compute_norm_stats(episodes: &[Episode]) -> Result<NormStats> {
    if episodes.is_empty() {
        return Err(Error::InvalidConfig("cannot compute statistics of zero episodes".into()));
    }
    let n_channels = episodes[0].channel_names.len();
    let mut names: Vec<String> = episodes[0].channel_names.clone();
    names.push(SSF_NAME.to_string());

    let mut mean = vec![0.0f64; n_channels + 1];
    let mut m2 = vec![0.0f64; n_channels + 1];
    let mut count = 0u64;
    for ep in episodes {
        for i in 0..ep.n_steps() {
            count += 1;
            let inv = 1.0 / count as f64;
            for c in 0..n_channels {
                let v = ep.channels[c][i];
                let delta = v - mean[c];
                mean[c] += delta * inv;
                m2[c] += delta * (v - mean[c]);
            }
            let v = ep.ssf[i];
            let delta = v - mean[n_channels];
            mean[n_channels] += delta * inv;
            m2[n_channels] += delta * (v - mean[n_channels]);
        }
    }
    let std = m2.iter().map(|&s| (s / count as f64).sqrt()).collect();
    Ok(NormStats { names, mean, std })
}

// ======================================================================
// Dataset
// ======================================================================

/// A labelled episode collection plus the derived feature list and
/// normalization statistics (both always from the training split).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub label: SplitLabel,
    pub plan: SamplingPlan,
    pub episodes: Vec<Episode>,
    pub feature_names: Vec<String>,
    pub norm_stats: NormStats,
}

/// Build one split: `sample_count` episodes with end speeds drawn
/// uniformly from the plan's range and the plan's fixed ramp duration.
/// Feature names and statistics are left empty; the caller attaches the
/// training-derived versions afterwards.
pub fn build_dataset(plan: &SamplingPlan, cfg: &PlantConfig) -> Result<Dataset> {
    plan.validate()?;
    cfg.validate()?;

    let mut draw_rng = rng_for(plan.seed, "w_end_draw", plan.label as u64);
    let [lo, hi] = plan.w_end_range;
    let params: Vec<(usize, f64, u64)> = (0..plan.sample_count)
        .map(|i| {
            let pct = if lo == hi { lo } else { draw_rng.random_range(lo..=hi) };
            (i, pct / 100.0, derive_seed(plan.seed, "episode_noise", i as u64))
        })
        .collect();

    let episodes: Result<Vec<Episode>> = params
        .par_iter()
        .map(|&(i, w_end, noise_seed)| {
            let profile = PumpProfile::new(1.0, w_end, plan.t_ramp, cfg.t_acc);
            let ep_cfg = PlantConfig { seed: noise_seed, ..cfg.clone() };
            let mut ep = simulate_episode(&profile, &[], &ep_cfg).map_err(|e| {
                Error::SampleRejected { index: i, source: Box::new(e) }
            })?;
            ep.tags.label = Some(plan.label.as_str().to_string());
            ep.tags.sample_index = Some(i as u64);
            Ok(ep)
        })
        .collect();

    Ok(Dataset {
        label: plan.label,
        plan: plan.clone(),
        episodes: episodes?,
        feature_names: Vec::new(),
        norm_stats: NormStats::default(),
    })
}

// ======================================================================
// Pearson correlation and feature selection
// ======================================================================

/// Pearson correlation coefficient with population (1/N) moments,
/// accumulated in one pass via Welford-style co-moments.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::InvalidConfig("pearson needs at least 2 points".into()));
    }
    let mut mean_x = 0.0f64;
    let mut mean_y = 0.0f64;
    let mut m2x = 0.0f64;
    let mut m2y = 0.0f64;
    let mut cxy = 0.0f64;
    for (i, (&xi, &yi)) in x.iter().zip(y).enumerate() {
        let inv = 1.0 / (i + 1) as f64;
        let dx = xi - mean_x;
        mean_x += dx * inv;
        let dx2 = xi - mean_x;
        let dy = yi - mean_y;
        mean_y += dy * inv;
        let dy2 = yi - mean_y;
        m2x += dx * dx2;
        m2y += dy * dy2;
        cxy += dx * dy2;
    }
    if m2x == 0.0 {
        return Err(Error::ZeroVariance("x".into()));
    }
    if m2y == 0.0 {
        return Err(Error::ZeroVariance("y".into()));
    }
    Ok(cxy / (m2x.sqrt() * m2y.sqrt()))
}

/// Pooled correlation of one channel against the hidden series over a set
/// of episodes, treating the concatenation of all episodes as one series.
pub fn pooled_channel_correlation(episodes: &[Episode], channel: &str) -> Result<f64> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for ep in episodes {
        xs.extend_from_slice(ep.channel(channel)?);
        ys.extend_from_slice(&ep.ssf);
    }
    pearson(&xs, &ys)
}

/// Select input channels: everything whose pooled |correlation| against
/// the hidden series reaches `threshold`, united with the expert list.
/// Channels with undefined correlation (zero variance) are treated as
/// uninformative and can only enter through the expert list. Order is
/// descending |correlation| with name ties broken alphabetically;
/// expert-only channels with undefined correlation sort last by name.
pub fn select_features(
    episodes: &[Episode],
    threshold: f64,
    expert_includes: &[String],
) -> Result<Vec<String>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidConfig(format!("threshold {threshold} outside [0, 1]")));
    }
    let mut scored: Vec<(String, Option<f64>)> = Vec::new();
    for &name in CHANNEL_NAMES.iter() {
        let rho = match pooled_channel_correlation(episodes, name) {
            Ok(r) => Some(r.abs()),
            Err(Error::ZeroVariance(_)) => None,
            Err(e) => return Err(e),
        };
        scored.push((name.to_string(), rho));
    }
    let mut picked: Vec<(String, Option<f64>)> = scored
        .iter()
        .filter(|(name, rho)| {
            rho.map(|r| r >= threshold).unwrap_or(false) || expert_includes.contains(name)
        })
        .cloned()
        .collect();
    picked.sort_by(|a, b| {
        let ra = a.1.unwrap_or(-1.0);
        let rb = b.1.unwrap_or(-1.0);
        rb.total_cmp(&ra).then_with(|| a.0.cmp(&b.0))
    });
    let names: Vec<String> = picked.into_iter().map(|(n, _)| n).collect();
    if names.is_empty() {
        return Err(Error::EmptyFeatureSet);
    }
    Ok(names)
}

// ======================================================================
// Regime partitioning
// ======================================================================

/// How to cut the training end-speed range into twin regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimePartition {
    /// End-speed intervals `[low, high]` in percent; may overlap.
    pub sub_ranges: Vec<[f64; 2]>,
    /// Twins trained per interval (distinct init/shuffle seeds).
    pub seeds_per_range: usize,
}

impl RegimePartition {
    /// `n` equal-width windows over `[low, high]` where each window
    /// overlaps its neighbour by `overlap` of its width (0.5 = half).
    pub fn equal_width(range: [f64; 2], n: usize, overlap: f64, seeds_per_range: usize) -> Self {
        assert!(n >= 1 && (0.0..1.0).contains(&overlap));
        let span = range[1] - range[0];
        let width = span / (1.0 + (n as f64 - 1.0) * (1.0 - overlap));
        let step = width * (1.0 - overlap);
        let sub_ranges = (0..n)
            .map(|i| {
                let lo = range[0] + i as f64 * step;
                [lo, (lo + width).min(range[1])]
            })
            .collect();
        RegimePartition { sub_ranges, seeds_per_range }
    }

    pub fn validate(&self, train_range: [f64; 2]) -> Result<()> {
        if self.sub_ranges.is_empty() || self.seeds_per_range == 0 {
            return Err(Error::InvalidConfig("partition needs >= 1 range and >= 1 seed".into()));
        }
        let mut ranges = self.sub_ranges.clone();
        ranges.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let eps = 1e-9;
        if ranges[0][0] > train_range[0] + eps {
            return Err(Error::InvalidConfig("partition does not reach the range low end".into()));
        }
        let mut covered = ranges[0][1];
        for r in &ranges[1..] {
            if r[0] > covered + eps {
                return Err(Error::InvalidConfig(format!(
                    "partition gap between {covered} and {}",
                    r[0]
                )));
            }
            covered = covered.max(r[1]);
        }
        if covered < train_range[1] - eps {
            return Err(Error::InvalidConfig("partition does not reach the range high end".into()));
        }
        Ok(())
    }
}

/// Episodes of one regime: the interval plus indices into the training
/// episode list.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSubset {
    /// End-speed interval in percent.
    pub range: [f64; 2],
    pub episode_indices: Vec<usize>,
}

/// Assign every training episode to each interval containing its end
/// speed. Every episode must land in at least one interval and no
/// interval may be empty.
pub fn partition_regimes(train: &Dataset, part: &RegimePartition) -> Result<Vec<RegimeSubset>> {
    part.validate(train.plan.w_end_range)?;
    let mut subsets: Vec<RegimeSubset> = part
        .sub_ranges
        .iter()
        .map(|&range| RegimeSubset { range, episode_indices: Vec::new() })
        .collect();
    for (i, ep) in train.episodes.iter().enumerate() {
        let pct = ep.profile.w_end * 100.0;
        let mut hit = false;
        for s in subsets.iter_mut() {
            if pct >= s.range[0] && pct <= s.range[1] {
                s.episode_indices.push(i);
                hit = true;
            }
        }
        if !hit {
            return Err(Error::InvalidConfig(format!(
                "episode {i} (w_end {pct:.3} %) not covered by the partition"
            )));
        }
    }
    for s in &subsets {
        if s.episode_indices.is_empty() {
            return Err(Error::EmptyRegime { low: s.range[0], high: s.range[1] });
        }
    }
    Ok(subsets)
}

// ======================================================================
// Persistence
// ======================================================================

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    seed: u64,
    w_end: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    schema_version: u32,
    plan: SamplingPlan,
    feature_names: Vec<String>,
    norm_stats: NormStats,
    episodes: Vec<ManifestEntry>,
}

/// Write the split into `dir`: one CSV + JSON pair per episode plus a
/// `manifest.json` with the plan, feature list and statistics.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut entries = Vec::with_capacity(ds.episodes.len());
    for (i, ep) in ds.episodes.iter().enumerate() {
        let stem = format!("ep_{i:05}");
        save_episode(ep, &dir.join(&stem))?;
        entries.push(ManifestEntry { file: stem, seed: ep.seed, w_end: ep.profile.w_end });
    }
    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        plan: ds.plan.clone(),
        feature_names: ds.feature_names.clone(),
        norm_stats: ds.norm_stats.clone(),
        episodes: entries,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Load a split written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text =
        std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: manifest.schema_version,
            expected: MANIFEST_SCHEMA_VERSION,
        });
    }
    let episodes: Result<Vec<Episode>> = manifest
        .episodes
        .par_iter()
        .map(|entry| load_episode(&dir.join(&entry.file)))
        .collect();
    Ok(Dataset {
        label: manifest.plan.label,
        plan: manifest.plan,
        episodes: episodes?,
        feature_names: manifest.feature_names,
        norm_stats: manifest.norm_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> PlantConfig {
        PlantConfig { n_steps: 300, dt: 1.0, t_acc: 20.0, ..PlantConfig::default() }
    }

    fn small_train(count: usize) -> Dataset {
        let plan = SamplingPlan {
            label: SplitLabel::Train,
            sample_count: count,
            t_ramp: 467.81,
            w_end_range: [51.6, 100.0],
            seed: 11,
        };
        build_dataset(&plan, &small_cfg()).unwrap()
    }

    #[test]
    fn build_dataset_honors_plan() {
        let ds = small_train(16);
        assert_eq!(ds.episodes.len(), 16);
        for ep in &ds.episodes {
            let pct = ep.profile.w_end * 100.0;
            assert!((51.6..=100.0).contains(&pct));
            assert!((ep.profile.t_ramp - 467.81).abs() < 1e-12);
            assert_eq!(ep.tags.label.as_deref(), Some("train"));
        }
        let again = small_train(16);
        assert_eq!(ds.episodes, again.episodes);
    }

    #[test]
    fn extp_plan_stays_in_range() {
        let plan = SamplingPlan {
            label: SplitLabel::Extp,
            sample_count: 8,
            t_ramp: 467.81,
            w_end_range: [0.0, 38.7],
            seed: 3,
        };
        let ds = build_dataset(&plan, &small_cfg()).unwrap();
        assert_eq!(ds.episodes.len(), 8);
        for ep in &ds.episodes {
            assert!(ep.profile.w_end * 100.0 <= 38.7);
        }
    }

    #[test]
    fn degenerate_range_gives_steady_episodes() {
        let plan = SamplingPlan {
            label: SplitLabel::Intp,
            sample_count: 3,
            t_ramp: 467.81,
            w_end_range: [100.0, 100.0],
            seed: 5,
        };
        let cfg = PlantConfig { noise_sigma: 0.0, ..small_cfg() };
        let ds = build_dataset(&plan, &cfg).unwrap();
        for ep in &ds.episodes {
            let first = ep.ssf[0];
            for &v in &ep.ssf {
                assert!((v - first).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pearson_known_values() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        let neg = [-1.0, -2.0, -3.0, -4.0];
        assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-15);
        let y = [2.0, 1.0, 4.0, 3.0];
        assert!((pearson(&a, &y).unwrap() - 0.6).abs() < 1e-15);
    }

    #[test]
    fn pearson_is_symmetric_and_affine_invariant() {
        let mut rng = rng_for(21, "pearson_props", 0);
        for _ in 0..50 {
            let n = rng.random_range(3..200);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y: Vec<f64> = x
                .iter()
                .map(|v| v * rng.random_range(-1.0..1.0) + rng.random_range(-1.0..1.0))
                .collect();
            if pearson(&x, &y).is_err() {
                continue;
            }
            let rxy = pearson(&x, &y).unwrap();
            let ryx = pearson(&y, &x).unwrap();
            assert!((rxy - ryx).abs() < 1e-12);
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rxy));
            let scaled: Vec<f64> = x.iter().map(|v| 3.5 * v + 11.0).collect();
            let rs = pearson(&scaled, &y).unwrap();
            assert!((rxy - rs).abs() < 1e-9);
        }
    }

    #[test]
    fn pearson_rejects_degenerate_input() {
        let flat = [2.0, 2.0, 2.0];
        let x = [1.0, 2.0, 3.0];
        assert!(matches!(pearson(&flat, &x), Err(Error::ZeroVariance(_))));
        assert!(matches!(pearson(&x, &flat), Err(Error::ZeroVariance(_))));
        assert!(pearson(&x[..1], &flat[..1]).is_err());
        assert!(pearson(&x, &flat[..2]).is_err());
    }

    #[test]
    fn feature_selection_picks_surrogates_at_default_threshold() {
        let ds = small_train(24);
        let expert = vec!["pump1_speed".to_string(), "pump2_speed".to_string()];
        let features = select_features(&ds.episodes, 0.7, &expert).unwrap();
        assert!(features.iter().any(|f| f == "upper_plenum_temp"));
        assert!(features.iter().any(|f| f == "core_flow"));
        assert!(features.iter().any(|f| f == "pump2_speed"));
        assert!(!features.iter().any(|f| f == "lower_plenum_temp"));
    }

    #[test]
    fn feature_selection_threshold_zero_takes_everything_defined() {
        let ds = small_train(6);
        let features = select_features(&ds.episodes, 0.0, &[]).unwrap();
        assert_eq!(features.len(), CHANNEL_NAMES.len());
    }

    #[test]
    fn expert_override_survives_impossible_threshold() {
        let ds = small_train(6);
        let expert = vec!["core_flow".to_string()];
        let features = select_features(&ds.episodes, 1.0, &expert).unwrap();
        assert_eq!(features, vec!["core_flow".to_string()]);
    }

    #[test]
    fn selection_order_is_deterministic() {
        let ds = small_train(10);
        let expert = vec!["pump1_speed".to_string(), "pump2_speed".to_string()];
        let a = select_features(&ds.episodes, 0.7, &expert).unwrap();
        let b = select_features(&ds.episodes, 0.7, &expert).unwrap();
        assert_eq!(a, b);
        let mut rhos: Vec<f64> = Vec::new();
        for name in &a {
            let rho = pooled_channel_correlation(&ds.episodes, name).map(|r| r.abs()).unwrap_or(-1.0);
            rhos.push(rho);
        }
        for w in rhos.windows(2) {
            assert!(w[0] >= w[1] - 1e-12);
        }
    }

    #[test]
    fn norm_stats_round_trip_values() {
        let ds = small_train(4);
        let stats = compute_norm_stats(&ds.episodes).unwrap();
        assert_eq!(stats.names.len(), CHANNEL_NAMES.len() + 1);
        let (m, s) = stats.lookup("core_flow").unwrap();
        assert!(s > 0.0);
        let mut rng = rng_for(4, "norm_roundtrip", 0);
        for _ in 0..100 {
            let v = rng.random_range(-1e4..1e4);
            let back = denormalize(normalize(v, m, s), m, s);
            assert!((back - v).abs() <= 1e-12 * v.abs().max(1.0));
        }
    }

    #[test]
    fn extrapolation_exceeds_training_z_range() {
        let train = small_train(24);
        let stats = compute_norm_stats(&train.episodes).unwrap();
        let plan = SamplingPlan {
            label: SplitLabel::Extp,
            sample_count: 4,
            t_ramp: 467.81,
            w_end_range: [0.0, 38.7],
            seed: 9,
        };
        let extp = build_dataset(&plan, &small_cfg()).unwrap();
        let (m, s) = stats.lookup(SSF_NAME).unwrap();
        let worst = extp
            .episodes
            .iter()
            .flat_map(|ep| ep.ssf.iter())
            .map(|&v| normalize(v, m, s))
            .fold(0.0f64, |acc, z| acc.max(z.abs()));
        assert!(worst > 3.0, "max |z| = {worst}");
    }

    #[test]
    fn equal_width_partition_covers_range_with_overlap() {
        let part = RegimePartition::equal_width([51.6, 100.0], 6, 0.5, 3);
        assert_eq!(part.sub_ranges.len(), 6);
        part.validate([51.6, 100.0]).unwrap();
        assert!((part.sub_ranges[0][0] - 51.6).abs() < 1e-9);
        assert!((part.sub_ranges[5][1] - 100.0).abs() < 1e-9);
        for w in part.sub_ranges.windows(2) {
            let overlap = w[0][1] - w[1][0];
            let width = w[0][1] - w[0][0];
            assert!((overlap / width - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn partition_assigns_every_episode() {
        let ds = small_train(64);
        let part = RegimePartition::equal_width([51.6, 100.0], 6, 0.5, 3);
        let subsets = partition_regimes(&ds, &part).unwrap();
        assert_eq!(subsets.len(), 6);
        let mut seen = vec![false; ds.episodes.len()];
        for s in &subsets {
            assert!(!s.episode_indices.is_empty());
            for &i in &s.episode_indices {
                seen[i] = true;
                let pct = ds.episodes[i].profile.w_end * 100.0;
                assert!(pct >= s.range[0] && pct <= s.range[1]);
            }
        }
        assert!(seen.iter().all(|&b| b));
    }

    #[test]
    fn disjoint_partition_counts_sum_to_total() {
        let ds = small_train(64);
        let part = RegimePartition::equal_width([51.6, 100.0], 6, 0.0, 1);
        let subsets = partition_regimes(&ds, &part).unwrap();
        let total: usize = subsets.iter().map(|s| s.episode_indices.len()).sum();
        // Boundary hits can double-count because interval edges touch;
        // with continuous draws they occur with probability zero.
        assert_eq!(total, 64);
    }

    #[test]
    fn single_range_partition_is_whole_set() {
        let ds = small_train(12);
        let part = RegimePartition { sub_ranges: vec![[51.6, 100.0]], seeds_per_range: 1 };
        let subsets = partition_regimes(&ds, &part).unwrap();
        assert_eq!(subsets.len(), 1);
        assert_eq!(subsets[0].episode_indices.len(), 12);
    }

    #[test]
    fn gappy_partition_is_rejected() {
        let part = RegimePartition { sub_ranges: vec![[51.6, 60.0], [70.0, 100.0]], seeds_per_range: 1 };
        assert!(part.validate([51.6, 100.0]).is_err());
    }

    #[test]
    fn dataset_round_trips_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = small_train(5);
        ds.feature_names = vec!["core_flow".into(), "upper_plenum_temp".into()];
        ds.norm_stats = compute_norm_stats(&ds.episodes).unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, loaded);
    }
}

//! Structured run configuration.
//!
//! One TOML file drives the whole pipeline: plant constants, sampling
//! plans for the three dataset splits, feature selection, regime
//! partitioning, twin training, tracking coefficients and experiment
//! defaults. Every field has a default, so a partial file overrides just
//! the keys it names and an absent file means the built-in defaults.
//!
//! Per-split and per-twin seeds are derived from a single master seed so
//! a whole run is reproducible from one number.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{SamplingPlan, SplitLabel};
use crate::fnn::TrainConfig;
use crate::plant::PlantConfig;
use crate::pva::TrackingConfig;
use crate::seed::derive_seed;
use crate::{Error, Result};

// ======================================================================
// Sections
// ======================================================================

/// Episode counts and end-speed range for one dataset split. The split
/// seed is derived from the master seed at plan-build time.
/// Unset fields inherit the split's own canonical values, so a partial
/// `[sampling.extp]` table never falls back to the train-split numbers.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_ramp: Option<f64>,
    /// End-speed range `[low, high]` in percent of nominal speed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w_end_range: Option<[f64; 2]>,
}

/// Canonical per-split values used when a [`PlanSpec`] field is unset.
fn split_defaults(label: SplitLabel) -> (usize, f64, [f64; 2]) {
    match label {
        SplitLabel::Train => (1024, 467.81, [51.6, 100.0]),
        SplitLabel::Intp => (250, 467.81, [51.6, 100.0]),
        SplitLabel::Extp => (250, 467.81, [0.0, 38.7]),
        SplitLabel::ExtTrain => (250, 467.81, [0.0, 38.7]),
    }
}

/// The three split plans.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingSection {
    pub train: PlanSpec,
    pub intp: PlanSpec,
    pub extp: PlanSpec,
    pub ext_train: PlanSpec,
}

/// Correlation threshold and the always-kept expert channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSection {
    pub threshold: f64,
    pub expert: Vec<String>,
}

impl Default for FeatureSection {
    fn default() -> Self {
        FeatureSection {
            threshold: 0.7,
            expert: vec!["pump1_speed".to_string(), "pump2_speed".to_string()],
        }
    }
}

/// Shape of a regime partition: equal-width overlapping sub-ranges, each
/// trained with several seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionSection {
    pub n_ranges: usize,
    pub overlap: f64,
    pub seeds_per_range: usize,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection { n_ranges: 6, overlap: 0.5, seeds_per_range: 3 }
    }
}

/// Defaults for the comparison experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSection {
    /// Subsample fraction for the baseline single-model cases.
    pub single_coverage: f64,
    /// Single-model retrainings per case for the capture interval.
    pub repeats: usize,
    /// Reporting threshold for one-step excursions, deg C.
    pub excursion_margin: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection { single_coverage: 0.05, repeats: 25, excursion_margin: 10.0 }
    }
}

// ======================================================================
// Top-level config
// ======================================================================

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AppConfig {
    pub master_seed: u64,
    pub plant: PlantConfig,
    pub sampling: SamplingSection,
    pub features: FeatureSection,
    /// Partition of the Train end-speed range for the base library.
    pub partition: PartitionSection,
    /// Partition of the Extp end-speed range for library extension.
    pub extension: PartitionSection,
    pub train: TrainConfig,
    pub tracking: TrackingConfig,
    pub experiments: ExperimentSection,
}

impl AppConfig {
    /// Read a TOML file, overlaying its keys on the defaults. `None`
    /// yields the defaults unchanged.
    pub fn load(path: Option<&Path>) -> Result<AppConfig> {
        let cfg = match path {
            None => AppConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::io(p.display().to_string(), e))?;
                toml::from_str(&text).map_err(|e| Error::Malformed {
                    path: p.display().to_string(),
                    reason: e.to_string(),
                })?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Override the master seed (CLI flag wins over the file).
    pub fn with_seed(mut self, seed: Option<u64>) -> AppConfig {
        if let Some(s) = seed {
            self.master_seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.train.validate()?;
        self.tracking.validate()?;
        for label in
            [SplitLabel::Train, SplitLabel::Intp, SplitLabel::Extp, SplitLabel::ExtTrain]
        {
            let plan = self.plan(label);
            plan.validate()
                .map_err(|e| Error::InvalidConfig(format!("sampling.{label}: {e}")))?;
            if plan.sample_count == 0 {
                return Err(Error::InvalidConfig(format!(
                    "sampling.{label}: sample_count must be >= 1"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.features.threshold) {
            return Err(Error::InvalidConfig("features.threshold must lie in [0, 1]".into()));
        }
        for (name, part) in [("partition", &self.partition), ("extension", &self.extension)] {
            if part.n_ranges == 0 || part.seeds_per_range == 0 {
                return Err(Error::InvalidConfig(format!(
                    "{name}: n_ranges and seeds_per_range must be >= 1"
                )));
            }
            if !(0.0..1.0).contains(&part.overlap) {
                return Err(Error::InvalidConfig(format!("{name}: overlap must lie in [0, 1)")));
            }
        }
        if !(self.experiments.single_coverage > 0.0 && self.experiments.single_coverage <= 1.0) {
            return Err(Error::InvalidConfig(
                "experiments.single_coverage must lie in (0, 1]".into(),
            ));
        }
        if self.experiments.repeats == 0 {
            return Err(Error::InvalidConfig("experiments.repeats must be >= 1".into()));
        }
        if self.experiments.excursion_margin <= 0.0 {
            return Err(Error::InvalidConfig("experiments.excursion_margin must be > 0".into()));
        }
        Ok(())
    }

    /// Materialize the sampling plan for one split, deriving its seed
    /// from the master seed.
    pub fn plan(&self, label: SplitLabel) -> SamplingPlan {
        let spec = match label {
            SplitLabel::Train => &self.sampling.train,
            SplitLabel::Intp => &self.sampling.intp,
            SplitLabel::Extp => &self.sampling.extp,
            SplitLabel::ExtTrain => &self.sampling.ext_train,
        };
        let (count, t_ramp, range) = split_defaults(label);
        SamplingPlan {
            label,
            sample_count: spec.sample_count.unwrap_or(count),
            t_ramp: spec.t_ramp.unwrap_or(t_ramp),
            w_end_range: spec.w_end_range.unwrap_or(range),
            seed: derive_seed(self.master_seed, "sampling", label as u64),
        }
    }

    /// Seed for the `idx`-th twin training run in the named group.
    pub fn twin_seed(&self, group: &str, idx: u64) -> u64 {
        derive_seed(self.master_seed, group, idx)
    }
}

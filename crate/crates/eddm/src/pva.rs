//! Probabilistic voting over the twin library.
//!
//! Each twin's surrogate predictions are tracked against the measured
//! surrogate channels with a discrete PID error: proportional (current
//! offset), integral (rectangular accumulation from episode start) and
//! derivative (backward-difference slope mismatch). The per-twin total
//! errors are normalized across the library at each timestep, turned into
//! weights through a negative log, and the weights blend the twin
//! centerline predictions into the ensemble estimate.
//!
//! Tracking runs in z-score units (the twins' training statistics), so
//! the two surrogates are commensurate before the weight vector applies.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::normalize;
use crate::fnn::TrainedTwin;
use crate::plant::{format_f64, Episode};
use crate::{Error, Result};

// ======================================================================
// Configuration and state
// ======================================================================

/// PID coefficients, surrogate weight vector and the error floor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackingConfig {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// One weight per surrogate, in twin output order.
    pub omega: Vec<f64>,
    /// Floor applied to |error| before normalization; keeps the log total.
    pub epsilon: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig { a: 10.0, b: 0.5, c: 0.8, omega: vec![0.5, 0.8], epsilon: 1e-9 }
    }
}

impl TrackingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.a < 0.0 || self.b < 0.0 || self.c < 0.0 {
            return Err(Error::InvalidConfig("PID coefficients must be >= 0".into()));
        }
        if self.a == 0.0 && self.b == 0.0 && self.c == 0.0 {
            return Err(Error::InvalidConfig("PID coefficients cannot all be zero".into()));
        }
        if self.omega.is_empty()
            || self.omega.iter().any(|&w| w < 0.0)
            || self.omega.iter().all(|&w| w == 0.0)
        {
            return Err(Error::InvalidConfig(
                "omega needs >= 1 entry, all >= 0, at least one > 0".into(),
            ));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-twin tracking memory: the running integral per surrogate and the
/// previous measured/predicted vectors for the derivative term.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackingState {
    integral: Vec<f64>,
    prev_measured: Option<Vec<f64>>,
    prev_predicted: Option<Vec<f64>>,
    step: usize,
}

impl TrackingState {
    pub fn new(n_surrogates: usize) -> Self {
        TrackingState {
            integral: vec![0.0; n_surrogates],
            prev_measured: None,
            prev_predicted: None,
            step: 0,
        }
    }

    pub fn step(&self) -> usize {
        self.step
    }
}

// ======================================================================
// Error chain
// ======================================================================

/// Advance one twin's tracking state by one timestep and return the
/// proportional, integral and derivative error components. The integral
/// includes the current step (rectangular rule); the derivative is a
/// backward difference and is zero at the first step.
pub fn component_errors(
    state: &mut TrackingState,
    measured: &[f64],
    predicted: &[f64],
    dt: f64,
    cfg: &TrackingConfig,
) -> Result<(f64, f64, f64)> {
    let n = cfg.omega.len();
    if measured.len() != n {
        return Err(Error::LengthMismatch { left: measured.len(), right: n });
    }
    if predicted.len() != n {
        return Err(Error::LengthMismatch { left: predicted.len(), right: n });
    }
    if dt <= 0.0 {
        return Err(Error::InvalidConfig("dt must be > 0".into()));
    }

    let mut e_p = 0.0;
    for j in 0..n {
        let diff = measured[j] - predicted[j];
        e_p += cfg.omega[j] * diff;
        state.integral[j] += diff * dt;
    }
    let mut e_i = 0.0;
    for j in 0..n {
        e_i += cfg.omega[j] * state.integral[j];
    }
    let e_d = match (&state.prev_measured, &state.prev_predicted) {
        (Some(pm), Some(pp)) => {
            let mut acc = 0.0;
            for j in 0..n {
                let slope_m = (measured[j] - pm[j]) / dt;
                let slope_p = (predicted[j] - pp[j]) / dt;
                acc += cfg.omega[j] * (slope_m - slope_p);
            }
            acc
        }
        _ => 0.0,
    };
    state.prev_measured = Some(measured.to_vec());
    state.prev_predicted = Some(predicted.to_vec());
    state.step += 1;
    Ok((e_p, e_i, e_d))
}

/// Scalar total error: `a*e_p + b*e_i + c*e_d`.
pub fn total_error(e_p: f64, e_i: f64, e_d: f64, cfg: &TrackingConfig) -> f64 {
    cfg.a * e_p + cfg.b * e_i + cfg.c * e_d
}

/// Convert the per-twin total errors into voting weights.
///
/// Each |error| is floored at epsilon, normalized across the library, and
/// scored by its negative log; the scores are renormalized onto the
/// simplex. A single-twin library always gets weight 1.
pub fn weights_from_errors(errors: &[f64], cfg: &TrackingConfig) -> Vec<f64> {
    let k = errors.len();
    if k == 0 {
        return Vec::new();
    }
    let floored: Vec<f64> = errors.iter().map(|e| e.abs().max(cfg.epsilon)).collect();
    let total: f64 = floored.iter().sum();
    let raw: Vec<f64> = floored.iter().map(|f| -(f / total).ln()).collect();
    let raw_sum: f64 = raw.iter().sum();
    if raw_sum <= 0.0 {
        return vec![1.0 / k as f64; k];
    }
    raw.iter().map(|r| r / raw_sum).collect()
}

/// Weighted blend of the centerline predictions.
pub fn aggregate(ssf_preds: &[f64], weights: &[f64]) -> Result<f64> {
    if ssf_preds.len() != weights.len() {
        return Err(Error::LengthMismatch { left: ssf_preds.len(), right: weights.len() });
    }
    Ok(ssf_preds.iter().zip(weights).map(|(y, p)| p * y).sum())
}

// ======================================================================
// Ensemble run over an episode
// ======================================================================

/// One twin's record within a timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinStep {
    /// Predicted surrogates in z-score units.
    pub surrogates: Vec<f64>,
    /// Denormalized centerline prediction, deg C.
    pub ssf: f64,
    pub e_p: f64,
    pub e_i: f64,
    pub e_d: f64,
    pub e_total: f64,
    pub weight: f64,
}

/// The ensemble record of one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStep {
    pub t: f64,
    pub twins: Vec<TwinStep>,
    /// Weighted centerline estimate, deg C.
    pub y_hat: f64,
}

/// Run the voting ensemble over one episode, producing one record per
/// timestep. Twins read only measured channels; the hidden centerline
/// series is never consulted.
pub fn run_ensemble(
    twins: &[TrainedTwin],
    episode: &Episode,
    cfg: &TrackingConfig,
) -> Result<Vec<EnsembleStep>> {
    cfg.validate()?;
    if twins.is_empty() {
        return Err(Error::InvalidConfig("ensemble needs at least one twin".into()));
    }
    let n_surr = cfg.omega.len();

    struct TwinRuntime<'a> {
        twin: &'a TrainedTwin,
        feature_series: Vec<&'a [f64]>,
        feature_stats: Vec<(f64, f64)>,
        surrogate_series: Vec<&'a [f64]>,
        surrogate_stats: Vec<(f64, f64)>,
        ssf_stats: (f64, f64),
        state: TrackingState,
    }

    let mut runtimes = Vec::with_capacity(twins.len());
    for twin in twins {
        if twin.outputs.len() != n_surr + 1 {
            return Err(Error::InvalidConfig(format!(
                "twin outputs ({}) do not match omega ({} surrogates)",
                twin.outputs.len(),
                n_surr
            )));
        }
        let feature_series: Vec<&[f64]> = twin
            .features
            .iter()
            .map(|n| episode.channel(n))
            .collect::<Result<_>>()?;
        let feature_stats: Vec<(f64, f64)> = twin
            .features
            .iter()
            .map(|n| twin.norm_stats.lookup(n))
            .collect::<Result<_>>()?;
        let surrogate_series: Vec<&[f64]> = twin.outputs[1..]
            .iter()
            .map(|n| episode.channel(n))
            .collect::<Result<_>>()?;
        let surrogate_stats: Vec<(f64, f64)> = twin.outputs[1..]
            .iter()
            .map(|n| twin.norm_stats.lookup(n))
            .collect::<Result<_>>()?;
        let ssf_stats = twin.norm_stats.lookup(&twin.outputs[0])?;
        runtimes.push(TwinRuntime {
            twin,
            feature_series,
            feature_stats,
            surrogate_series,
            surrogate_stats,
            ssf_stats,
            state: TrackingState::new(n_surr),
        });
    }

    let n_steps = episode.n_steps();
    let mut steps = Vec::with_capacity(n_steps);
    let mut x = Vec::new();
    let mut measured = vec![0.0; n_surr];
    for i in 0..n_steps {
        let mut twin_steps = Vec::with_capacity(runtimes.len());
        let mut errors = Vec::with_capacity(runtimes.len());
        let mut ssf_preds = Vec::with_capacity(runtimes.len());
        for rt in runtimes.iter_mut() {
            x.clear();
            x.extend(
                rt.feature_series
                    .iter()
                    .zip(&rt.feature_stats)
                    .map(|(s, &(m, sd))| normalize(s[i], m, sd)),
            );
            let out = crate::fnn::forward(&rt.twin.params, &x)?;
            let predicted = &out[1..];
            for (j, (s, &(m, sd))) in
                rt.surrogate_series.iter().zip(&rt.surrogate_stats).enumerate()
            {
                measured[j] = normalize(s[i], m, sd);
            }
            let (e_p, e_i, e_d) =
                component_errors(&mut rt.state, &measured, predicted, episode.dt, cfg)?;
            let e_total = total_error(e_p, e_i, e_d, cfg);
            let ssf = out[0] * rt.ssf_stats.1 + rt.ssf_stats.0;
            errors.push(e_total);
            ssf_preds.push(ssf);
            twin_steps.push(TwinStep {
                surrogates: predicted.to_vec(),
                ssf,
                e_p,
                e_i,
                e_d,
                e_total,
                weight: 0.0,
            });
        }
        let weights = weights_from_errors(&errors, cfg);
        for (ts, w) in twin_steps.iter_mut().zip(&weights) {
            ts.weight = *w;
        }
        let y_hat = aggregate(&ssf_preds, &weights)?;
        steps.push(EnsembleStep { t: episode.time(i), twins: twin_steps, y_hat });
    }
    Ok(steps)
}

/// Export an ensemble trace as CSV:
/// `t, e_1..e_K, P_1..P_K, y_1..y_K, y_hat, ssf_true`.
pub fn write_trace_csv(steps: &[EnsembleStep], ssf_true: &[f64], path: &Path) -> Result<()> {
    if steps.len() != ssf_true.len() {
        return Err(Error::LengthMismatch { left: steps.len(), right: ssf_true.len() });
    }
    let k = steps.first().map(|s| s.twins.len()).unwrap_or(0);
    let mut out = String::from("t");
    for i in 1..=k {
        out.push_str(&format!(",e_{i}"));
    }
    for i in 1..=k {
        out.push_str(&format!(",p_{i}"));
    }
    for i in 1..=k {
        out.push_str(&format!(",y_{i}"));
    }
    out.push_str(",y_hat,ssf_true\n");
    for (step, &truth) in steps.iter().zip(ssf_true) {
        out.push_str(&format_f64(step.t));
        for ts in &step.twins {
            out.push(',');
            out.push_str(&format_f64(ts.e_total));
        }
        for ts in &step.twins {
            out.push(',');
            out.push_str(&format_f64(ts.weight));
        }
        for ts in &step.twins {
            out.push(',');
            out.push_str(&format_f64(ts.ssf));
        }
        out.push(',');
        out.push_str(&format_f64(step.y_hat));
        out.push(',');
        out.push_str(&format_f64(truth));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

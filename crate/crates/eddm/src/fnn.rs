//! Small dense ReLU networks trained from scratch.
//!
//! Each digital twin is a feed-forward net mapping the selected sensor
//! channels at one timestep to `[fuel_centerline_temp, upper_plenum_temp,
//! core_flow]` at the same timestep, all in z-score units. Training is
//! mini-batch SGD with momentum and L2 weight decay; the epoch count is
//! chosen by k-fold cross-validation at episode granularity, and the
//! final fit stops early once the denormalized centerline MSE reaches the
//! configured target.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{denormalize, normalize, Dataset, NormStats, RegimeSubset};
use crate::plant::SSF_NAME;
use crate::seed::rng_for;
use crate::{Error, Result};

/// Fixed output order for every twin: the hidden target first, then the
/// two observable surrogates used by the voting stage.
pub const OUTPUT_NAMES: [&str; 3] = [SSF_NAME, "upper_plenum_temp", "core_flow"];

const LIBRARY_SCHEMA_VERSION: u32 = 1;

// ======================================================================
// Network parameters
// ======================================================================

/// Dense network weights. `layer_sizes` is `[n_in, h..., n_out]`;
/// `weights[l]` is row-major `(layer_sizes[l+1] x layer_sizes[l])`.
/// Hidden activations are ReLU, the output layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl NetworkParams {
    /// Glorot-uniform init: U(+-sqrt(6/(fan_in+fan_out))), biases zero.
    pub fn init(layer_sizes: &[usize], rng: &mut impl Rng) -> Self {
        assert!(layer_sizes.len() >= 2, "need at least input and output layers");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..layer_sizes.len() - 1 {
            let (n_in, n_out) = (layer_sizes[l], layer_sizes[l + 1]);
            let r = (6.0 / (n_in + n_out) as f64).sqrt();
            weights.push((0..n_in * n_out).map(|_| rng.random_range(-r..r)).collect());
            biases.push(vec![0.0; n_out]);
        }
        NetworkParams { layer_sizes: layer_sizes.to_vec(), weights, biases }
    }

    pub fn zeros(layer_sizes: &[usize]) -> Self {
        let weights = (0..layer_sizes.len() - 1)
            .map(|l| vec![0.0; layer_sizes[l] * layer_sizes[l + 1]])
            .collect();
        let biases = (1..layer_sizes.len()).map(|l| vec![0.0; layer_sizes[l]]).collect();
        NetworkParams { layer_sizes: layer_sizes.to_vec(), weights, biases }
    }

    pub fn n_in(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_out(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidConfig("network needs >= 2 layers".into()));
        }
        for l in 0..self.layer_sizes.len() - 1 {
            let expect = self.layer_sizes[l] * self.layer_sizes[l + 1];
            if self.weights[l].len() != expect || self.biases[l].len() != self.layer_sizes[l + 1] {
                return Err(Error::InvalidConfig(format!("layer {l} dimensions do not chain")));
            }
        }
        let finite = self
            .weights
            .iter()
            .chain(self.biases.iter())
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !finite {
            return Err(Error::InvalidConfig("non-finite network parameter".into()));
        }
        Ok(())
    }
}

/// Forward pass.
pub fn forward(params: &NetworkParams, input: &[f64]) -> Result<Vec<f64>> {
    if input.len() != params.n_in() {
        return Err(Error::LengthMismatch { left: input.len(), right: params.n_in() });
    }
    let n_layers = params.layer_sizes.len() - 1;
    let mut act = input.to_vec();
    for l in 0..n_layers {
        let n_in = params.layer_sizes[l];
        let n_out = params.layer_sizes[l + 1];
        let w = &params.weights[l];
        let b = &params.biases[l];
        let mut next = vec![0.0; n_out];
        for o in 0..n_out {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut z = b[o];
            for (wi, ai) in row.iter().zip(&act) {
                z += wi * ai;
            }
            next[o] = if l + 1 < n_layers { z.max(0.0) } else { z };
        }
        act = next;
    }
    Ok(act)
}

/// Forward pass keeping pre-activations and activations per layer, for
/// backprop and for locating ReLU kinks in gradient checks. Entry 0 of
/// `activations` is the input itself.
pub fn forward_trace(params: &NetworkParams, input: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if input.len() != params.n_in() {
        return Err(Error::LengthMismatch { left: input.len(), right: params.n_in() });
    }
    let n_layers = params.layer_sizes.len() - 1;
    let mut preacts = Vec::with_capacity(n_layers);
    let mut acts = Vec::with_capacity(n_layers + 1);
    acts.push(input.to_vec());
    for l in 0..n_layers {
        let n_in = params.layer_sizes[l];
        let n_out = params.layer_sizes[l + 1];
        let w = &params.weights[l];
        let b = &params.biases[l];
        let mut z = vec![0.0; n_out];
        for o in 0..n_out {
            let row = &w[o * n_in..(o + 1) * n_in];
            let mut s = b[o];
            for (wi, ai) in row.iter().zip(&acts[l]) {
                s += wi * ai;
            }
            z[o] = s;
        }
        let a = if l + 1 < n_layers {
            z.iter().map(|&v| v.max(0.0)).collect()
        } else {
            z.clone()
        };
        preacts.push(z);
        acts.push(a);
    }
    Ok((preacts, acts))
}

// ======================================================================
// Loss and gradients
// ======================================================================

/// Mean squared error over all outputs and samples, plus
/// `l2_lambda * sum(weights^2)` (biases excluded).
pub fn loss(params: &NetworkParams, xs: &[Vec<f64>], ys: &[Vec<f64>], l2_lambda: f64) -> Result<f64> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::LengthMismatch { left: xs.len(), right: ys.len() });
    }
    let mut sse = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let out = forward(params, x)?;
        if out.len() != y.len() {
            return Err(Error::LengthMismatch { left: out.len(), right: y.len() });
        }
        for (o, t) in out.iter().zip(y) {
            let d = o - t;
            sse += d * d;
        }
    }
    let mse = sse / (xs.len() * params.n_out()) as f64;
    let reg: f64 = params.weights.iter().flatten().map(|w| w * w).sum();
    Ok(mse + l2_lambda * reg)
}

/// Gradient of [`loss`] with respect to every weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

pub fn backprop(
    params: &NetworkParams,
    xs: &[Vec<f64>],
    ys: &[Vec<f64>],
    l2_lambda: f64,
) -> Result<Gradients> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::LengthMismatch { left: xs.len(), right: ys.len() });
    }
    let n_layers = params.layer_sizes.len() - 1;
    let mut gw: Vec<Vec<f64>> = params.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut gb: Vec<Vec<f64>> = params.biases.iter().map(|b| vec![0.0; b.len()]).collect();
    let scale = 1.0 / (xs.len() * params.n_out()) as f64;

    for (x, y) in xs.iter().zip(ys) {
        let (preacts, acts) = forward_trace(params, x)?;
        if y.len() != params.n_out() {
            return Err(Error::LengthMismatch { left: y.len(), right: params.n_out() });
        }
        // Output layer error: d(mse)/d(out) = 2 (out - y) * scale.
        let mut delta: Vec<f64> = acts[n_layers]
            .iter()
            .zip(y)
            .map(|(o, t)| 2.0 * (o - t) * scale)
            .collect();
        for l in (0..n_layers).rev() {
            let n_in = params.layer_sizes[l];
            let n_out = params.layer_sizes[l + 1];
            let a_prev = &acts[l];
            for o in 0..n_out {
                let d = delta[o];
                gb[l][o] += d;
                let grow = &mut gw[l][o * n_in..(o + 1) * n_in];
                for (g, ai) in grow.iter_mut().zip(a_prev) {
                    *g += d * ai;
                }
            }
            if l > 0 {
                let w = &params.weights[l];
                let mut prev = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    let row = &w[o * n_in..(o + 1) * n_in];
                    for (p, wi) in prev.iter_mut().zip(row) {
                        *p += d * wi;
                    }
                }
                // ReLU gate of the layer below (derivative 0 at z <= 0).
                for (p, z) in prev.iter_mut().zip(&preacts[l - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }
    for (gwl, wl) in gw.iter_mut().zip(&params.weights) {
        for (g, w) in gwl.iter_mut().zip(wl) {
            *g += 2.0 * l2_lambda * w;
        }
    }
    Ok(Gradients { weights: gw, biases: gb })
}

// ======================================================================
// Training
// ======================================================================

/// Hyperparameters for one twin training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub l2_lambda: f64,
    pub k_folds: usize,
    /// Early-stop threshold on the denormalized centerline MSE, deg C^2.
    pub target_mse: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden_sizes: vec![32, 32, 16],
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 256,
            max_epochs: 200,
            l2_lambda: 1e-4,
            k_folds: 5,
            target_mse: 2.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0
            || self.batch_size == 0
            || self.max_epochs == 0
            || self.l2_lambda < 0.0
            || self.target_mse <= 0.0
            || !(0.0..1.0).contains(&self.momentum)
        {
            return Err(Error::InvalidConfig("train config fields must be positive".into()));
        }
        if self.k_folds < 2 {
            return Err(Error::InvalidConfig("k_folds must be >= 2".into()));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("hidden_sizes must be non-empty and positive".into()));
        }
        Ok(())
    }
}

/// Which slice of the pump-degradation space a twin was trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeInfo {
    /// End-speed interval in percent of nominal.
    pub w_end_range: [f64; 2],
    /// Which of the per-regime seeds this twin used.
    pub seed_index: u64,
}

/// Per-timestep supervised pairs of one episode, in z-score units.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedEpisode {
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<Vec<f64>>,
}

/// Normalized training material for one twin.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSubset {
    pub features: Vec<String>,
    pub episodes: Vec<SupervisedEpisode>,
    pub norm_stats: NormStats,
    pub regime: RegimeInfo,
}

/// Assemble the normalized supervised pairs for one regime subset of a
/// dataset. Inputs are the dataset's selected features as measured
/// (noisy); targets are the fixed output triple taken from the true plant
/// state, so a twin cannot score zero by echoing a noisy input channel.
/// Everything is z-scored with the dataset's (training) statistics.
pub fn make_subset(ds: &Dataset, subset: &RegimeSubset, seed_index: u64) -> Result<TrainSubset> {
    make_subset_from_indices(ds, &subset.episode_indices, subset.range, seed_index)
}

/// As [`make_subset`] but for an arbitrary episode index list (used for
/// coverage subsampling, where the regime is the whole plan range).
pub fn make_subset_from_indices(
    ds: &Dataset,
    indices: &[usize],
    range: [f64; 2],
    seed_index: u64,
) -> Result<TrainSubset> {
    if ds.feature_names.is_empty() {
        return Err(Error::EmptyFeatureSet);
    }
    if indices.is_empty() {
        return Err(Error::EmptyRegime { low: range[0], high: range[1] });
    }
    let feat_stats: Vec<(f64, f64)> = ds
        .feature_names
        .iter()
        .map(|n| ds.norm_stats.lookup(n))
        .collect::<Result<_>>()?;
    let out_stats: Vec<(f64, f64)> = OUTPUT_NAMES
        .iter()
        .map(|n| ds.norm_stats.lookup(n))
        .collect::<Result<_>>()?;

    let mut episodes = Vec::with_capacity(indices.len());
    for &idx in indices {
        let ep = &ds.episodes[idx];
        let feat_series: Vec<&[f64]> = ds
            .feature_names
            .iter()
            .map(|n| ep.channel(n))
            .collect::<Result<_>>()?;
        let surrogate_series: Vec<&[f64]> = OUTPUT_NAMES[1..]
            .iter()
            .map(|n| ep.surrogate_clean(n))
            .collect::<Result<_>>()?;
        let n = ep.n_steps();
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for i in 0..n {
            let x: Vec<f64> = feat_series
                .iter()
                .zip(&feat_stats)
                .map(|(s, &(m, sd))| normalize(s[i], m, sd))
                .collect();
            let mut y = Vec::with_capacity(OUTPUT_NAMES.len());
            y.push(normalize(ep.ssf[i], out_stats[0].0, out_stats[0].1));
            for (s, &(m, sd)) in surrogate_series.iter().zip(&out_stats[1..]) {
                y.push(normalize(s[i], m, sd));
            }
            xs.push(x);
            ys.push(y);
        }
        episodes.push(SupervisedEpisode { xs, ys });
    }
    Ok(TrainSubset {
        features: ds.feature_names.clone(),
        episodes,
        norm_stats: ds.norm_stats.clone(),
        regime: RegimeInfo { w_end_range: range, seed_index },
    })
}

/// Loss history of one training run.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean validation MSE per epoch across the k folds.
    pub cv_val_mse: Vec<f64>,
    /// Epoch count picked by cross-validation (argmin of `cv_val_mse`).
    pub chosen_epochs: usize,
    /// Full-set training MSE per epoch of the final fit (z-score units).
    pub final_train_mse: Vec<f64>,
    /// Whether the final fit stopped at the target MSE before
    /// `chosen_epochs` ran out.
    pub stopped_at_target: bool,
}

/// A trained digital twin plus everything needed to run it standalone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedTwin {
    pub params: NetworkParams,
    pub features: Vec<String>,
    pub outputs: Vec<String>,
    pub norm_stats: NormStats,
    pub regime: RegimeInfo,
    pub history: TrainHistory,
    /// Denormalized centerline MSE on the twin's own training subset.
    pub train_mse: f64,
}

impl TrainedTwin {
    /// Predict `[centerline, plenum, flow]` in z-score units from a
    /// normalized input row.
    pub fn predict_normalized(&self, x: &[f64]) -> Result<Vec<f64>> {
        forward(&self.params, x)
    }

    /// Denormalized centerline prediction from a normalized input row.
    pub fn predict_ssf(&self, x: &[f64]) -> Result<f64> {
        let out = forward(&self.params, x)?;
        let (m, s) = self.norm_stats.lookup(&self.outputs[0])?;
        Ok(denormalize(out[0], m, s))
    }
}

/// Split episode indices into k folds with sizes differing by at most 1.
fn make_folds(n: usize, k: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let base = n / k;
    let extra = n % k;
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(order[at..at + len].to_vec());
        at += len;
    }
    folds
}

struct SgdState {
    velocity_w: Vec<Vec<f64>>,
    velocity_b: Vec<Vec<f64>>,
}

impl SgdState {
    fn new(params: &NetworkParams) -> Self {
        SgdState {
            velocity_w: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            velocity_b: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn apply(&mut self, params: &mut NetworkParams, grads: &Gradients, cfg: &TrainConfig) {
        for l in 0..params.weights.len() {
            for (v, (w, g)) in self.velocity_w[l]
                .iter_mut()
                .zip(params.weights[l].iter_mut().zip(&grads.weights[l]))
            {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *w += *v;
            }
            for (v, (b, g)) in self.velocity_b[l]
                .iter_mut()
                .zip(params.biases[l].iter_mut().zip(&grads.biases[l]))
            {
                *v = cfg.momentum * *v - cfg.learning_rate * g;
                *b += *v;
            }
        }
    }
}

/// One SGD epoch over the flattened sample list. Returns an error on
/// non-finite loss.
fn run_epoch(
    params: &mut NetworkParams,
    state: &mut SgdState,
    xs: &[&Vec<f64>],
    ys: &[&Vec<f64>],
    order: &mut [usize],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    epoch: usize,
) -> Result<()> {
    order.shuffle(rng);
    let mut bx: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);
    let mut by: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);
    for chunk in order.chunks(cfg.batch_size) {
        bx.clear();
        by.clear();
        for &i in chunk {
            bx.push(xs[i].clone());
            by.push(ys[i].clone());
        }
        let grads = backprop(params, &bx, &by, cfg.l2_lambda)?;
        state.apply(params, &grads, cfg);
        let sane = params.weights.iter().flatten().all(|w| w.is_finite());
        if !sane {
            return Err(Error::TrainDiverged { epoch });
        }
    }
    Ok(())
}

/// Plain MSE (no regularizer) of the net over a sample list, z-score units.
fn plain_mse(params: &NetworkParams, xs: &[&Vec<f64>], ys: &[&Vec<f64>]) -> Result<f64> {
    let mut sse = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let out = forward(params, x)?;
        for (o, t) in out.iter().zip(y.iter()) {
            let d = o - t;
            sse += d * d;
        }
    }
    Ok(sse / (xs.len() * params.n_out()) as f64)
}

/// MSE of the centerline output only, converted to deg C^2.
fn denorm_ssf_mse(
    params: &NetworkParams,
    xs: &[&Vec<f64>],
    ys: &[&Vec<f64>],
    ssf_std: f64,
) -> Result<f64> {
    let mut sse = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        let out = forward(params, x)?;
        let d = out[0] - y[0];
        sse += d * d;
    }
    Ok(sse / xs.len() as f64 * ssf_std * ssf_std)
}

fn flatten<'a>(
    episodes: &'a [SupervisedEpisode],
    indices: &[usize],
) -> (Vec<&'a Vec<f64>>, Vec<&'a Vec<f64>>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for &i in indices {
        xs.extend(episodes[i].xs.iter());
        ys.extend(episodes[i].ys.iter());
    }
    (xs, ys)
}

/// Train one twin: k-fold cross-validation picks the epoch count, then a
/// final fit on the whole subset stops early once the denormalized
/// centerline MSE reaches `cfg.target_mse`. A non-finite target disables
/// the early stop. Fully reproducible from `cfg.seed`.
pub fn train_twin(subset: &TrainSubset, cfg: &TrainConfig) -> Result<TrainedTwin> {
    cfg.validate()?;
    let n_ep = subset.episodes.len();
    if n_ep == 0 {
        return Err(Error::InvalidConfig("training subset is empty".into()));
    }
    if n_ep < cfg.k_folds {
        return Err(Error::InvalidConfig(format!(
            "k_folds {} exceeds the {} episodes available",
            cfg.k_folds, n_ep
        )));
    }
    let n_in = subset.features.len();
    let mut layer_sizes = Vec::with_capacity(cfg.hidden_sizes.len() + 2);
    layer_sizes.push(n_in);
    layer_sizes.extend_from_slice(&cfg.hidden_sizes);
    layer_sizes.push(OUTPUT_NAMES.len());

    let (ssf_mean, ssf_std) = subset.norm_stats.lookup(OUTPUT_NAMES[0])?;
    let _ = ssf_mean;

    // Cross-validation: per-epoch validation MSE averaged over folds.
    let mut fold_rng = rng_for(cfg.seed, "folds", 0);
    let folds = make_folds(n_ep, cfg.k_folds, &mut fold_rng);
    let all: Vec<usize> = (0..n_ep).collect();
    let mut val_sum = vec![0.0f64; cfg.max_epochs];
    for (f, fold) in folds.iter().enumerate() {
        let train_idx: Vec<usize> = all.iter().copied().filter(|i| !fold.contains(i)).collect();
        let (txs, tys) = flatten(&subset.episodes, &train_idx);
        let (vxs, vys) = flatten(&subset.episodes, fold);
        let mut params =
            NetworkParams::init(&layer_sizes, &mut rng_for(cfg.seed, "cv_init", f as u64));
        let mut state = SgdState::new(&params);
        let mut shuffle_rng = rng_for(cfg.seed, "cv_shuffle", f as u64);
        let mut order: Vec<usize> = (0..txs.len()).collect();
        for epoch in 0..cfg.max_epochs {
            run_epoch(&mut params, &mut state, &txs, &tys, &mut order, cfg, &mut shuffle_rng, epoch)?;
            val_sum[epoch] += plain_mse(&params, &vxs, &vys)?;
        }
    }
    let cv_val_mse: Vec<f64> = val_sum.iter().map(|s| s / cfg.k_folds as f64).collect();
    let chosen_epochs = cv_val_mse
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i + 1)
        .unwrap();

    // Final fit on everything, early stop at the target MSE.
    let (xs, ys) = flatten(&subset.episodes, &all);
    let mut params = NetworkParams::init(&layer_sizes, &mut rng_for(cfg.seed, "final_init", 0));
    let mut state = SgdState::new(&params);
    let mut shuffle_rng = rng_for(cfg.seed, "final_shuffle", 0);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut final_train_mse = Vec::with_capacity(chosen_epochs);
    let mut stopped_at_target = false;
    for epoch in 0..chosen_epochs {
        run_epoch(&mut params, &mut state, &xs, &ys, &mut order, cfg, &mut shuffle_rng, epoch)?;
        final_train_mse.push(plain_mse(&params, &xs, &ys)?);
        if cfg.target_mse.is_finite()
            && denorm_ssf_mse(&params, &xs, &ys, ssf_std)? <= cfg.target_mse
        {
            stopped_at_target = true;
            break;
        }
    }
    let train_mse = denorm_ssf_mse(&params, &xs, &ys, ssf_std)?;

    Ok(TrainedTwin {
        params,
        features: subset.features.clone(),
        outputs: OUTPUT_NAMES.iter().map(|s| s.to_string()).collect(),
        norm_stats: subset.norm_stats.clone(),
        regime: subset.regime.clone(),
        history: TrainHistory { cv_val_mse, chosen_epochs, final_train_mse, stopped_at_target },
        train_mse,
    })
}

// ======================================================================
// Model library persistence
// ======================================================================

#[derive(Debug, Serialize, Deserialize)]
struct LibraryIndex {
    schema_version: u32,
    twin_files: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TwinFile {
    schema_version: u32,
    twin: TrainedTwin,
}

/// Write one JSON file per twin plus an `index.json` into `dir`.
pub fn save_library(twins: &[TrainedTwin], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut files = Vec::with_capacity(twins.len());
    for (i, twin) in twins.iter().enumerate() {
        let name = format!("twin_{i:03}.json");
        let path = dir.join(&name);
        let file = TwinFile { schema_version: LIBRARY_SCHEMA_VERSION, twin: twin.clone() };
        let text = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        files.push(name);
    }
    let index = LibraryIndex { schema_version: LIBRARY_SCHEMA_VERSION, twin_files: files };
    let path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Load a library written by [`save_library`].
pub fn load_library(dir: &Path) -> Result<Vec<TrainedTwin>> {
    let index_path = dir.join("index.json");
    let text = match std::fs::read_to_string(&index_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::EmptyLibrary(dir.display().to_string()))
        }
        Err(e) => return Err(Error::io(index_path.display().to_string(), e)),
    };
    let index: LibraryIndex =
        serde_json::from_str(&text).map_err(|e| Error::json(index_path.display().to_string(), e))?;
    if index.schema_version != LIBRARY_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: index.schema_version,
            expected: LIBRARY_SCHEMA_VERSION,
        });
    }
    if index.twin_files.is_empty() {
        return Err(Error::EmptyLibrary(dir.display().to_string()));
    }
    let mut twins = Vec::with_capacity(index.twin_files.len());
    for name in &index.twin_files {
        let path = dir.join(name);
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: TwinFile =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if file.schema_version != LIBRARY_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: file.schema_version,
                expected: LIBRARY_SCHEMA_VERSION,
            });
        }
        file.twin.params.validate()?;
        twins.push(file.twin);
    }
    Ok(twins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::NormStats;

    fn identity_stats() -> NormStats {
        let mut names = vec!["f0".to_string()];
        names.extend(OUTPUT_NAMES.iter().map(|s| s.to_string()));
        NormStats { mean: vec![0.0; names.len()], std: vec![1.0; names.len()], names }
    }

    /// Synthetic subset where every output is an exact linear function of
    /// the single input feature.
    fn linear_subset(n_episodes: usize, steps: usize) -> TrainSubset {
        let mut rng = rng_for(100, "linear_task", 0);
        let episodes = (0..n_episodes)
            .map(|_| {
                let mut xs = Vec::with_capacity(steps);
                let mut ys = Vec::with_capacity(steps);
                for _ in 0..steps {
                    let x: f64 = rng.random_range(-1.5..1.5);
                    xs.push(vec![x]);
                    ys.push(vec![0.7 * x - 0.2, 0.3 * x + 0.1, -0.5 * x]);
                }
                SupervisedEpisode { xs, ys }
            })
            .collect();
        TrainSubset {
            features: vec!["f0".into()],
            episodes,
            norm_stats: identity_stats(),
            regime: RegimeInfo { w_end_range: [0.0, 100.0], seed_index: 0 },
        }
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            hidden_sizes: vec![8, 8, 8],
            learning_rate: 5e-3,
            batch_size: 64,
            max_epochs: 120,
            l2_lambda: 0.0,
            k_folds: 2,
            target_mse: 0.05,
            seed: 7,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_network_maps_to_zero() {
        let params = NetworkParams::zeros(&[4, 3, 3, 3, 2]);
        let out = forward(&params, &[1.0, -2.0, 3.0, 4.0]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn identity_chain_passes_positive_input() {
        let mut params = NetworkParams::zeros(&[1, 1, 1, 1, 1]);
        for w in params.weights.iter_mut() {
            w[0] = 1.0;
        }
        let out = forward(&params, &[2.5]).unwrap();
        assert!((out[0] - 2.5).abs() < 1e-15);
        // Negative input dies at the first ReLU.
        let out = forward(&params, &[-2.5]).unwrap();
        assert_eq!(out[0], 0.0);
    }

    // Straight-line oracle: unrolled matrix-vector chain with explicit
    // loops, no shared code with `forward`.
    fn forward_oracle(params: &NetworkParams, input: &[f64]) -> Vec<f64> {
        let sizes = &params.layer_sizes;
        let n_layers = sizes.len() - 1;
        let mut a: Vec<f64> = input.to_vec();
        for l in 0..n_layers {
            let mut next = Vec::with_capacity(sizes[l + 1]);
            for o in 0..sizes[l + 1] {
                let mut z = params.biases[l][o];
                for i in 0..sizes[l] {
                    z += params.weights[l][o * sizes[l] + i] * a[i];
                }
                if l + 1 < n_layers && z < 0.0 {
                    z = 0.0;
                }
                next.push(z);
            }
            a = next;
        }
        a
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let mut rng = rng_for(13, "forward_oracle", 0);
        for _ in 0..50 {
            let params = NetworkParams::init(&[4, 2, 2, 2, 3], &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = forward(&params, &x).unwrap();
            let want = forward_oracle(&params, &x);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let params = NetworkParams::zeros(&[3, 2, 2]);
        assert!(forward(&params, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn loss_on_perfect_predictions_is_zero() {
        let params = NetworkParams::zeros(&[2, 2, 2, 2, 1]);
        let xs = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        let ys = vec![vec![0.0], vec![0.0]];
        assert_eq!(loss(&params, &xs, &ys, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn loss_of_zero_net_is_mean_square_target() {
        let params = NetworkParams::zeros(&[1, 2, 2, 2, 2]);
        let xs = vec![vec![0.3], vec![-0.4], vec![1.1]];
        let ys = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let want: f64 = ys.iter().flatten().map(|t| t * t).sum::<f64>() / 6.0;
        assert!((loss(&params, &xs, &ys, 0.0).unwrap() - want).abs() < 1e-12);
    }

    // Scalar recomputation of the loss, independent of `loss`.
    fn loss_oracle(params: &NetworkParams, xs: &[Vec<f64>], ys: &[Vec<f64>], l2: f64) -> f64 {
        let mut sse = 0.0;
        let mut count = 0usize;
        for (x, y) in xs.iter().zip(ys) {
            let out = forward_oracle(params, x);
            for (o, t) in out.iter().zip(y) {
                sse += (o - t) * (o - t);
                count += 1;
            }
        }
        let mut reg = 0.0;
        for layer in &params.weights {
            for w in layer {
                reg += w * w;
            }
        }
        sse / count as f64 + l2 * reg
    }

    #[test]
    fn loss_matches_independent_recomputation() {
        let mut rng = rng_for(14, "loss_oracle", 0);
        for _ in 0..30 {
            let params = NetworkParams::init(&[3, 4, 4, 4, 2], &mut rng);
            let n = rng.random_range(1..10);
            let xs: Vec<Vec<f64>> =
                (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let ys: Vec<Vec<f64>> =
                (0..n).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let l2 = rng.random_range(0.0..0.01);
            let got = loss(&params, &xs, &ys, l2).unwrap();
            let want = loss_oracle(&params, &xs, &ys, l2);
            assert!((got - want).abs() <= 1e-10);
        }
    }

    #[test]
    fn zero_error_zero_lambda_gives_zero_gradient() {
        // A zero network predicting zero targets has zero error.
        let params = NetworkParams::zeros(&[2, 3, 3, 3, 2]);
        let xs = vec![vec![0.5, -0.5]];
        let ys = vec![vec![0.0, 0.0]];
        let g = backprop(&params, &xs, &ys, 0.0).unwrap();
        assert!(g.weights.iter().flatten().all(|&v| v == 0.0));
        assert!(g.biases.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn pure_regularizer_gradient_is_two_lambda_w() {
        // Zero error comes from matching targets exactly: use an identity
        // path with positive input.
        let mut params = NetworkParams::zeros(&[1, 1, 1, 1, 1]);
        for w in params.weights.iter_mut() {
            w[0] = 1.0;
        }
        let xs = vec![vec![2.0]];
        let ys = vec![vec![2.0]];
        let lambda = 0.01;
        let g = backprop(&params, &xs, &ys, lambda).unwrap();
        for (gl, wl) in g.weights.iter().zip(&params.weights) {
            for (gv, wv) in gl.iter().zip(wl) {
                assert!((gv - 2.0 * lambda * wv).abs() < 1e-12);
            }
        }
        assert!(g.biases.iter().flatten().all(|&v| v.abs() < 1e-12));
    }

    /// Central finite differences of the loss for every parameter, with
    /// near-kink coordinates skipped: a weight/bias is excluded when the
    /// unit it drives sits within `kink_tol` of a ReLU corner for any
    /// sample in the batch.
    pub(crate) fn gradient_check(
        params: &NetworkParams,
        xs: &[Vec<f64>],
        ys: &[Vec<f64>],
        l2: f64,
        step: f64,
        kink_tol: f64,
    ) -> (f64, usize, usize) {
        let n_layers = params.layer_sizes.len() - 1;
        let mut near_kink = vec![vec![false; 0]; n_layers];
        for (l, sizes) in params.layer_sizes[1..].iter().enumerate() {
            near_kink[l] = vec![false; *sizes];
        }
        for x in xs {
            let (preacts, _) = forward_trace(params, x).unwrap();
            for l in 0..n_layers - 1 {
                for (u, &z) in preacts[l].iter().enumerate() {
                    if z.abs() < kink_tol {
                        near_kink[l][u] = true;
                    }
                }
            }
        }
        let analytic = backprop(params, xs, ys, l2).unwrap();
        let mut worst = 0.0f64;
        let mut checked = 0usize;
        let mut skipped = 0usize;
        let mut probe = params.clone();
        for l in 0..n_layers {
            let n_in = params.layer_sizes[l];
            for o in 0..params.layer_sizes[l + 1] {
                if l < n_layers - 1 && near_kink[l][o] {
                    skipped += n_in + 1;
                    continue;
                }
                for i in 0..n_in {
                    let idx = o * n_in + i;
                    let orig = probe.weights[l][idx];
                    probe.weights[l][idx] = orig + step;
                    let up = loss(&probe, xs, ys, l2).unwrap();
                    probe.weights[l][idx] = orig - step;
                    let down = loss(&probe, xs, ys, l2).unwrap();
                    probe.weights[l][idx] = orig;
                    let numeric = (up - down) / (2.0 * step);
                    let a = analytic.weights[l][idx];
                    let denom = a.abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max((a - numeric).abs() / denom);
                    checked += 1;
                }
                let orig = probe.biases[l][o];
                probe.biases[l][o] = orig + step;
                let up = loss(&probe, xs, ys, l2).unwrap();
                probe.biases[l][o] = orig - step;
                let down = loss(&probe, xs, ys, l2).unwrap();
                probe.biases[l][o] = orig;
                let numeric = (up - down) / (2.0 * step);
                let a = analytic.biases[l][o];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((a - numeric).abs() / denom);
                checked += 1;
            }
        }
        (worst, checked, skipped)
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = rng_for(15, "gradcheck_unit", 0);
        for round in 0..25 {
            let sizes = [
                rng.random_range(2..5),
                rng.random_range(2..6),
                rng.random_range(2..6),
                rng.random_range(2..6),
                rng.random_range(1..4),
            ];
            let params = NetworkParams::init(&sizes, &mut rng);
            let n = rng.random_range(1..8);
            let xs: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..sizes[0]).map(|_| rng.random_range(-1.5..1.5)).collect())
                .collect();
            let ys: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..sizes[4]).map(|_| rng.random_range(-1.5..1.5)).collect())
                .collect();
            let l2 = if round % 2 == 0 { 0.0 } else { 1e-3 };
            let (worst, checked, _) = gradient_check(&params, &xs, &ys, l2, 1e-5, 1e-6);
            assert!(checked > 0);
            assert!(worst <= 1e-4, "round {round}: worst relative error {worst}");
        }
    }

    #[test]
    fn folds_are_disjoint_cover_and_balanced() {
        let mut rng = rng_for(16, "folds", 0);
        for _ in 0..30 {
            let n = rng.random_range(5..60);
            let k = rng.random_range(2..=5.min(n));
            let folds = make_folds(n, k, &mut rng);
            assert_eq!(folds.len(), k);
            let mut seen = vec![false; n];
            for fold in &folds {
                for &i in fold {
                    assert!(!seen[i], "index {i} appears twice");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&b| b));
            let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            assert!(hi - lo <= 1);
        }
    }

    #[test]
    fn linear_task_reaches_tiny_mse() {
        let subset = linear_subset(6, 60);
        let twin = train_twin(&subset, &quick_cfg()).unwrap();
        assert!(twin.train_mse <= 0.1, "denormalized MSE {}", twin.train_mse);
    }

    #[test]
    fn infinite_target_runs_to_selected_epochs() {
        let subset = linear_subset(4, 30);
        let cfg = TrainConfig { target_mse: f64::INFINITY, max_epochs: 15, ..quick_cfg() };
        let twin = train_twin(&subset, &cfg).unwrap();
        assert!(!twin.history.stopped_at_target);
        assert_eq!(twin.history.final_train_mse.len(), twin.history.chosen_epochs);
    }

    #[test]
    fn identical_seeds_identical_twins() {
        let subset = linear_subset(4, 30);
        let cfg = TrainConfig { max_epochs: 10, ..quick_cfg() };
        let a = train_twin(&subset, &cfg).unwrap();
        let b = train_twin(&subset, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_batch_small_lr_loss_never_increases() {
        let subset = linear_subset(2, 40);
        let (xs, ys) = flatten(&subset.episodes, &[0, 1]);
        let cfg = TrainConfig {
            learning_rate: 1e-4,
            momentum: 0.0,
            batch_size: xs.len(),
            ..quick_cfg()
        };
        let mut params =
            NetworkParams::init(&[1, 8, 8, 8, 3], &mut rng_for(17, "monotone", 0));
        let mut state = SgdState::new(&params);
        let mut order: Vec<usize> = (0..xs.len()).collect();
        let mut rng = rng_for(17, "monotone_shuffle", 0);
        let mut prev = plain_mse(&params, &xs, &ys).unwrap();
        for epoch in 0..60 {
            run_epoch(&mut params, &mut state, &xs, &ys, &mut order, &cfg, &mut rng, epoch).unwrap();
            let now = plain_mse(&params, &xs, &ys).unwrap();
            assert!(now <= prev + 1e-12, "epoch {epoch}: {prev} -> {now}");
            prev = now;
        }
    }

    #[test]
    fn l2_shrinks_weight_norm() {
        let subset = linear_subset(4, 40);
        let base = TrainConfig { target_mse: f64::INFINITY, max_epochs: 60, ..quick_cfg() };
        let with_l2 = TrainConfig { l2_lambda: 1e-2, ..base.clone() };
        let plain = train_twin(&subset, &base).unwrap();
        let shrunk = train_twin(&subset, &with_l2).unwrap();
        let norm = |t: &TrainedTwin| -> f64 {
            t.params.weights.iter().flatten().map(|w| w * w).sum()
        };
        assert!(norm(&shrunk) < norm(&plain));
    }

    #[test]
    fn library_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let subset = linear_subset(4, 20);
        let cfg = TrainConfig { max_epochs: 5, ..quick_cfg() };
        let twins: Vec<TrainedTwin> = (0..3)
            .map(|i| train_twin(&subset, &TrainConfig { seed: i, ..cfg.clone() }).unwrap())
            .collect();
        save_library(&twins, dir.path()).unwrap();
        let loaded = load_library(dir.path()).unwrap();
        assert_eq!(twins, loaded);
        // Predictions survive the round trip bit for bit.
        let x = vec![0.37];
        for (a, b) in twins.iter().zip(&loaded) {
            let pa = a.predict_normalized(&x).unwrap();
            let pb = b.predict_normalized(&x).unwrap();
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn empty_directory_is_an_empty_library() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_library(dir.path()).unwrap_err();
        assert!(matches!(err, Error::EmptyLibrary(_)));
    }
}

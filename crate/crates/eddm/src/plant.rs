//! Lumped-parameter plant simulator for loss-of-flow transients.
//!
//! The model is a deliberately small stand-in for a full thermal-hydraulic
//! code: two primary pumps each carry half of rated flow, the coolant rise
//! follows a steady energy balance, and two first-order lags (upper plenum,
//! fuel centerline) capture the thermal inertia that makes the transient
//! interesting. Episodes record 15 sensor channels with optional Gaussian
//! noise plus a noise-free hidden fuel-centerline series used only for
//! scoring.

use std::fmt;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::seed::rng_for;
use crate::{Error, Result};

/// Number of observable sensor channels per episode.
pub const N_CHANNELS: usize = 15;

/// Channel names, in the fixed column order used everywhere.
pub const CHANNEL_NAMES: [&str; N_CHANNELS] = [
    "pump1_speed",
    "pump2_speed",
    "core_flow",
    "inlet_temp",
    "outlet_temp",
    "upper_plenum_temp",
    "lower_plenum_temp",
    "iloop_inlet_temp",
    "iloop_outlet_temp",
    "clad_temp",
    "reactor_power",
    "tank_level",
    "pump1_discharge_pressure",
    "pump2_discharge_pressure",
    "secondary_flow",
];

/// Name of the hidden fuel-centerline temperature series.
pub const SSF_NAME: &str = "fuel_centerline_temp";

/// The two observable channels used by the voting stage to score twins,
/// in the order matching the tracking weight vector.
pub const SURROGATE_NAMES: [&str; 2] = ["upper_plenum_temp", "core_flow"];

const EPISODE_SCHEMA_VERSION: u32 = 1;

/// Index of a channel name in [`CHANNEL_NAMES`].
pub fn channel_index(name: &str) -> Result<usize> {
    CHANNEL_NAMES
        .iter()
        .position(|&c| c == name)
        .ok_or_else(|| Error::MissingChannel(name.to_string()))
}

// ======================================================================
// Pump profile and control actions
// ======================================================================

/// Primary-pump coast-down profile: full speed until `t_acc`, then a
/// linear ramp of duration `t_ramp` down to `w0 * w_end`, constant after.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PumpProfile {
    /// Nominal speed as a fraction of rated (1.0 = rated).
    pub w0: f64,
    /// End speed as a fraction of `w0`.
    pub w_end: f64,
    /// Ramp duration in seconds.
    pub t_ramp: f64,
    /// Transient onset time in seconds.
    pub t_acc: f64,
}

impl PumpProfile {
    pub fn new(w0: f64, w_end: f64, t_ramp: f64, t_acc: f64) -> Self {
        PumpProfile { w0, w_end, t_ramp, t_acc }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w_end) {
            return Err(Error::InvalidConfig(format!(
                "pump profile w_end {} outside [0, 1]",
                self.w_end
            )));
        }
        if self.t_ramp <= 0.0 || self.t_acc < 0.0 || self.w0 <= 0.0 {
            return Err(Error::InvalidConfig(
                "pump profile requires w0 > 0, t_ramp > 0, t_acc >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Speed at time `t`, piecewise linear in elapsed time since `t_acc`.
    pub fn speed(&self, t: f64) -> f64 {
        pump_speed(self, t)
    }
}

/// Pump speed at time `t` for the given profile.
///
/// The ramp term uses elapsed time `(t - t_acc) / t_ramp`, so the value is
/// continuous at both breakpoints: `w0` at ramp start, `w0 * w_end` at ramp
/// end.
pub fn pump_speed(profile: &PumpProfile, t: f64) -> f64 {
    if t < profile.t_acc {
        profile.w0
    } else if t < profile.t_acc + profile.t_ramp {
        let frac = (t - profile.t_acc) / profile.t_ramp;
        profile.w0 * (1.0 - (1.0 - profile.w_end) * frac)
    } else {
        profile.w0 * profile.w_end
    }
}

/// What a mid-episode action represents. The dynamics are identical for
/// both kinds; the kind only tags provenance in episode metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    /// Planned second-pump assist during the coast-down.
    Pump2Compensation,
    /// Unannounced regime change injected mid-transient.
    ContextSwitch,
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionKind::Pump2Compensation => write!(f, "pump2_compensation"),
            ActionKind::ContextSwitch => write!(f, "context_switch"),
        }
    }
}

/// A second-pump speed ramp starting at `t_start`: the pump moves linearly
/// from its current speed to `pump2_target` over `ramp_duration` seconds
/// and holds the target afterwards. Overspeed above rated is allowed for
/// compensation scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlAction {
    pub kind: ActionKind,
    pub t_start: f64,
    pub pump2_target: f64,
    pub ramp_duration: f64,
}

impl ControlAction {
    pub fn validate(&self) -> Result<()> {
        if self.t_start < 0.0 {
            return Err(Error::InvalidConfig("action t_start must be >= 0".into()));
        }
        if !(0.0..=1.5).contains(&self.pump2_target) {
            return Err(Error::InvalidConfig(format!(
                "action pump2_target {} outside [0, 1.5]",
                self.pump2_target
            )));
        }
        if self.ramp_duration <= 0.0 {
            return Err(Error::InvalidConfig("action ramp_duration must be > 0".into()));
        }
        Ok(())
    }
}

/// Second-pump speed at time `t` under a sorted action list. The base
/// schedule is constant rated speed; each action ramps from the speed the
/// schedule had at its start time.
pub fn pump2_speed(actions: &[ControlAction], t: f64) -> f64 {
    let speed_at = |time: f64| -> f64 {
        let mut s = 1.0;
        for a in actions {
            if time < a.t_start {
                break;
            }
            let start_speed = s;
            let elapsed = time - a.t_start;
            if elapsed < a.ramp_duration {
                let frac = elapsed / a.ramp_duration;
                s = start_speed + (a.pump2_target - start_speed) * frac;
            } else {
                s = a.pump2_target;
            }
        }
        s
    };
    speed_at(t)
}

// ======================================================================
// Plant configuration
// ======================================================================

/// Physical and numerical parameters of the synthetic plant.
///
/// Temperatures are in deg C, flow in kg/s, power in MW. `noise_sigma` is
/// a fraction of each channel's steady value (0.001 = 0.1 % noise); the
/// hidden fuel-centerline series is always noise-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantConfig {
    /// Timestep in seconds.
    pub dt: f64,
    /// Steps per episode.
    pub n_steps: usize,
    /// Transient onset time used for generated profiles, seconds.
    pub t_acc: f64,
    /// Rated thermal power, MW.
    pub rated_power: f64,
    /// Rated total core flow, kg/s.
    pub rated_flow: f64,
    /// Coolant heat-capacity coefficient: temperature rise = power /
    /// (heat_capacity_coeff * flow).
    pub heat_capacity_coeff: f64,
    /// Core inlet temperature, deg C.
    pub inlet_temp: f64,
    /// Fuel thermal resistance scaling the centerline rise above plenum.
    pub fuel_resistance: f64,
    /// Upper-plenum first-order lag time constant, seconds.
    pub tau_plenum: f64,
    /// Fuel centerline first-order lag time constant, seconds.
    pub tau_fuel: f64,
    /// Sensor noise scale as a fraction of each channel's steady value.
    pub noise_sigma: f64,
    /// Seed for the sensor-noise stream.
    pub seed: u64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        PlantConfig {
            dt: 0.5,
            n_steps: 2000,
            t_acc: 50.0,
            rated_power: 62.5,
            rated_flow: 485.0,
            heat_capacity_coeff: 0.00127,
            inlet_temp: 371.0,
            fuel_resistance: 2.88,
            tau_plenum: 20.0,
            tau_fuel: 10.0,
            noise_sigma: 0.001,
            seed: 0,
        }
    }
}

impl PlantConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dt <= 0.0 {
            return Err(Error::InvalidConfig("dt must be > 0".into()));
        }
        if self.n_steps < 2 {
            return Err(Error::InvalidConfig("n_steps must be >= 2".into()));
        }
        if self.tau_plenum <= 0.0 || self.tau_fuel <= 0.0 {
            return Err(Error::InvalidConfig("lag time constants must be > 0".into()));
        }
        if self.rated_power <= 0.0 || self.rated_flow <= 0.0 || self.heat_capacity_coeff <= 0.0 {
            return Err(Error::InvalidConfig("thermal parameters must be > 0".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

// ======================================================================
// Episode
// ======================================================================

/// Provenance metadata attached to an episode.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeTags {
    /// Dataset label the episode belongs to, if any.
    pub label: Option<String>,
    /// Sample index within its dataset, if any.
    pub sample_index: Option<u64>,
    /// The injected switch action, when the episode contains one.
    pub context_switch: Option<ControlAction>,
}

/// One simulated transient: 15 named sensor series plus the hidden
/// fuel-centerline temperature, all of length `n_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub dt: f64,
    pub seed: u64,
    pub profile: PumpProfile,
    pub actions: Vec<ControlAction>,
    pub channel_names: Vec<String>,
    /// One series per channel, indexed like `channel_names`.
    pub channels: Vec<Vec<f64>>,
    /// Hidden fuel-centerline temperature series (never a sensor channel).
    pub ssf: Vec<f64>,
    /// Noise-free series of the surrogate channels, indexed like
    /// [`SURROGATE_NAMES`]. Training targets come from here; the noisy
    /// `channels` rows are what the tracking stage measures at run time.
    pub surrogates_clean: Vec<Vec<f64>>,
    pub tags: EpisodeTags,
}

impl Episode {
    pub fn n_steps(&self) -> usize {
        self.ssf.len()
    }

    /// Borrow a channel series by name.
    pub fn channel(&self, name: &str) -> Result<&[f64]> {
        let idx = self
            .channel_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingChannel(name.to_string()))?;
        Ok(&self.channels[idx])
    }

    /// Time of step `i` in seconds.
    pub fn time(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    /// Borrow the noise-free series of a surrogate channel by name.
    pub fn surrogate_clean(&self, name: &str) -> Result<&[f64]> {
        let idx = SURROGATE_NAMES
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::MissingChannel(name.to_string()))?;
        self.surrogates_clean
            .get(idx)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::MissingChannel(name.to_string()))
    }
}

// ======================================================================
// Simulation
// ======================================================================

/// Steady-state channel values for the speeds at t = 0; also the scale
/// reference for sensor noise.
fn steady_channels(cfg: &PlantConfig, w1: f64, w2: f64) -> Result<[f64; N_CHANNELS]> {
    let flow = cfg.rated_flow * (w1 + w2) / 2.0;
    if flow <= 0.0 {
        return Err(Error::ZeroFlow { step: 0 });
    }
    let outlet = cfg.inlet_temp + cfg.rated_power / (cfg.heat_capacity_coeff * flow);
    let plenum = outlet;
    let rise = fuel_rise(cfg, flow);
    Ok(channel_row(cfg, w1, w2, flow, outlet, plenum, rise))
}

/// Centerline rise above plenum at the given flow.
fn fuel_rise(cfg: &PlantConfig, flow: f64) -> f64 {
    cfg.rated_power * cfg.fuel_resistance * (cfg.rated_flow / flow).powf(0.8)
}

/// Instantaneous values of the 15 channels from the current plant state.
fn channel_row(
    cfg: &PlantConfig,
    w1: f64,
    w2: f64,
    flow: f64,
    outlet: f64,
    plenum: f64,
    rise: f64,
) -> [f64; N_CHANNELS] {
    [
        w1,
        w2,
        flow,
        cfg.inlet_temp,
        outlet,
        plenum,
        cfg.inlet_temp - 2.0 + 0.004 * flow,
        0.92 * plenum + 30.0,
        0.85 * cfg.inlet_temp + 0.01 * flow + 20.0,
        plenum + 0.35 * rise,
        cfg.rated_power,
        6.2 - 0.0004 * flow,
        120.0 + 430.0 * w1,
        120.0 + 430.0 * w2,
        0.88 * flow + 55.0,
    ]
}

/// Simulate one episode under the given coast-down profile and action list.
///
/// Channels are sampled before each state update, so row `i` reflects the
/// plant at `t = i * dt`. The sensor-noise stream depends only on
/// `cfg.seed`, never on the trajectory, so two runs with the same seed see
/// identical noise draws step for step.
pub fn simulate_episode(
    profile: &PumpProfile,
    actions: &[ControlAction],
    cfg: &PlantConfig,
) -> Result<Episode> {
    cfg.validate()?;
    profile.validate()?;
    for a in actions {
        a.validate()?;
    }
    if actions.windows(2).any(|w| w[0].t_start > w[1].t_start) {
        return Err(Error::InvalidConfig("actions must be sorted by t_start".into()));
    }

    let w1_0 = pump_speed(profile, 0.0);
    let w2_0 = pump2_speed(actions, 0.0);
    let steady = steady_channels(cfg, w1_0, w2_0)?;

    let flow0 = cfg.rated_flow * (w1_0 + w2_0) / 2.0;
    let mut plenum = cfg.inlet_temp + cfg.rated_power / (cfg.heat_capacity_coeff * flow0);
    let mut fcl = plenum + fuel_rise(cfg, flow0);

    let mut noise_rng = rng_for(cfg.seed, "sensor_noise", 0);
    let mut channels = vec![Vec::with_capacity(cfg.n_steps); N_CHANNELS];
    let mut ssf = Vec::with_capacity(cfg.n_steps);
    let mut surrogates_clean = vec![Vec::with_capacity(cfg.n_steps); SURROGATE_NAMES.len()];

    for i in 0..cfg.n_steps {
        let t = i as f64 * cfg.dt;
        let w1 = pump_speed(profile, t);
        let w2 = pump2_speed(actions, t);
        let flow = cfg.rated_flow * (w1 + w2) / 2.0;
        if flow <= 0.0 {
            return Err(Error::ZeroFlow { step: i });
        }
        let outlet = cfg.inlet_temp + cfg.rated_power / (cfg.heat_capacity_coeff * flow);
        let rise = fuel_rise(cfg, flow);

        let row = channel_row(cfg, w1, w2, flow, outlet, plenum, rise);
        for (c, &value) in row.iter().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut noise_rng);
            channels[c].push(value + cfg.noise_sigma * steady[c].abs() * noise);
        }
        ssf.push(fcl);
        surrogates_clean[0].push(plenum);
        surrogates_clean[1].push(flow);

        let d_plenum = (outlet - plenum) / cfg.tau_plenum;
        let d_fcl = (plenum + rise - fcl) / cfg.tau_fuel;
        plenum += cfg.dt * d_plenum;
        fcl += cfg.dt * d_fcl;
    }

    Ok(Episode {
        dt: cfg.dt,
        seed: cfg.seed,
        profile: *profile,
        actions: actions.to_vec(),
        channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        channels,
        ssf,
        surrogates_clean,
        tags: EpisodeTags::default(),
    })
}

/// Simulate the same scenario with an extra action injected mid-episode.
///
/// The returned episode is bit-identical to the unswitched one on every
/// step strictly before `switch.t_start` because the dynamics agree up to
/// that time and the noise stream is seeded identically.
pub fn inject_context_switch(
    profile: &PumpProfile,
    actions: &[ControlAction],
    cfg: &PlantConfig,
    switch: ControlAction,
) -> Result<Episode> {
    switch.validate()?;
    let duration = cfg.n_steps as f64 * cfg.dt;
    if switch.t_start >= duration {
        return Err(Error::InvalidConfig(format!(
            "switch at t = {} s lies outside the {} s episode",
            switch.t_start, duration
        )));
    }
    let mut all: Vec<ControlAction> = actions.to_vec();
    all.push(switch);
    all.sort_by(|a, b| a.t_start.total_cmp(&b.t_start));
    let mut ep = simulate_episode(profile, &all, cfg)?;
    ep.tags.context_switch = Some(switch);
    Ok(ep)
}

// ======================================================================
// Serialization: CSV series + JSON sidecar
// ======================================================================

/// Format a float with 17 significant digits so the decimal text
/// round-trips to the exact same bits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Serialize, Deserialize)]
struct EpisodeSidecar {
    schema_version: u32,
    dt: f64,
    seed: u64,
    profile: PumpProfile,
    actions: Vec<ControlAction>,
    surrogates_clean: Vec<Vec<f64>>,
    tags: EpisodeTags,
}

/// Write `base.csv` (header `t,<channels...>,ssf`) and `base.json`
/// (profile, actions, seed, dt, clean surrogate series, tags) for the
/// episode.
pub fn save_episode(ep: &Episode, base: &Path) -> Result<()> {
    let csv_path = base.with_extension("csv");
    let json_path = base.with_extension("json");

    let mut out = String::new();
    out.push('t');
    for name in &ep.channel_names {
        out.push(',');
        out.push_str(name);
    }
    out.push(',');
    out.push_str(SSF_NAME);
    out.push('\n');
    for i in 0..ep.n_steps() {
        out.push_str(&format_f64(ep.time(i)));
        for series in &ep.channels {
            out.push(',');
            out.push_str(&format_f64(series[i]));
        }
        out.push(',');
        out.push_str(&format_f64(ep.ssf[i]));
        out.push('\n');
    }
    std::fs::write(&csv_path, out).map_err(|e| Error::io(csv_path.display().to_string(), e))?;

    let sidecar = EpisodeSidecar {
        schema_version: EPISODE_SCHEMA_VERSION,
        dt: ep.dt,
        seed: ep.seed,
        profile: ep.profile,
        actions: ep.actions.clone(),
        surrogates_clean: ep.surrogates_clean.clone(),
        tags: ep.tags.clone(),
    };
    let text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::json(json_path.display().to_string(), e))?;
    std::fs::write(&json_path, text).map_err(|e| Error::io(json_path.display().to_string(), e))?;
    Ok(())
}

/// Load an episode written by [`save_episode`].
pub fn load_episode(base: &Path) -> Result<Episode> {
    let csv_path = base.with_extension("csv");
    let json_path = base.with_extension("json");
    let malformed = |reason: &str| Error::Malformed {
        path: csv_path.display().to_string(),
        reason: reason.to_string(),
    };

    let sidecar_text = std::fs::read_to_string(&json_path)
        .map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let sidecar: EpisodeSidecar = serde_json::from_str(&sidecar_text)
        .map_err(|e| Error::json(json_path.display().to_string(), e))?;
    if sidecar.schema_version != EPISODE_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: sidecar.schema_version,
            expected: EPISODE_SCHEMA_VERSION,
        });
    }

    let text = std::fs::read_to_string(&csv_path)
        .map_err(|e| Error::io(csv_path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed("empty file"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "t" || cols[cols.len() - 1] != SSF_NAME {
        return Err(malformed("expected header t,<channels...>,ssf"));
    }
    let channel_names: Vec<String> = cols[1..cols.len() - 1].iter().map(|s| s.to_string()).collect();

    let mut channels = vec![Vec::new(); channel_names.len()];
    let mut ssf = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(malformed("row width differs from header"));
        }
        for (c, field) in fields[1..fields.len() - 1].iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| malformed("unparsable float"))?;
            channels[c].push(v);
        }
        let v: f64 = fields[fields.len() - 1].parse().map_err(|_| malformed("unparsable float"))?;
        ssf.push(v);
    }
    if ssf.is_empty() {
        return Err(malformed("no data rows"));
    }

    Ok(Episode {
        dt: sidecar.dt,
        seed: sidecar.seed,
        profile: sidecar.profile,
        actions: sidecar.actions,
        channel_names,
        channels,
        ssf,
        surrogates_clean: sidecar.surrogates_clean,
        tags: sidecar.tags,
    })
}

//! Deterministic fixed-step simulation of the probed force loop.
//!
//! Per tick: surface motion, traverse position, environment force, sensor
//! noise, normal filtering, probe sample and estimator update, controller
//! and inner loop.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{Unit, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::contact::{
    surface_state, ContactLaw, HertzParams, NormalTracker, Patch, Region, SpringDamperParams, StiffnessField,
    SurfaceMotion, DEFAULT_FORCE_FLOOR,
};
use crate::control::{ForceLoop, ForceLoopConfig};
use crate::error::{config, Error, Result};
use crate::estimator::{EstimatorConfig, ImpedanceEstimate};
use crate::probe::{probe_displacement, probe_velocity, ProbeConfig, ProbeIdentifier};
use crate::signal::{design_lowpass, FirFilter, DEFAULT_LOWPASS_TAPS};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub field: StiffnessField,
    #[serde(default)]
    pub surface: SurfaceMotion,
    /// Replaces the field's spring law with Hertz contact when present.
    #[serde(default)]
    pub hertz: Option<HertzParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraverseConfig {
    /// m
    pub x_start: f64,
    /// Motion stops here, m.
    pub x_end: f64,
    pub y: f64,
    /// m/s
    pub speed: f64,
    /// Time at `x_start` before moving, s.
    pub dwell: f64,
}

impl Default for TraverseConfig {
    fn default() -> Self {
        Self {
            x_start: 0.0,
            x_end: 0.0,
            y: 0.0,
            speed: 0.0,
            dwell: 0.0,
        }
    }
}

impl TraverseConfig {
    pub fn x_at(&self, t: f64) -> f64 {
        (self.x_start + self.speed * (t - self.dwell).max(0.0)).min(self.x_end.max(self.x_start))
    }

    /// Time at which the path reaches `x`, if it does.
    pub fn time_at(&self, x: f64) -> Option<f64> {
        if x < self.x_start || x > self.x_end.max(self.x_start) {
            return None;
        }
        if x == self.x_start {
            return Some(0.0);
        }
        (self.speed > 0.0).then(|| self.dwell + (x - self.x_start) / self.speed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    #[serde(rename = "loop")]
    pub force_loop: ForceLoopConfig,
    /// Use the live probe estimate for the compliance.
    pub adaptation: bool,
    /// K̂ when adaptation is off, N/m.
    pub fixed_stiffness: f64,
    /// K̂ used until the estimate is trusted, N/m.
    pub initial_stiffness: f64,
    /// Time before the live estimate is used, s.
    pub warmup: f64,
    /// Low-pass cutoff for the force-direction estimate, Hz.
    pub normal_cutoff: f64,
    /// A forgetting factor above this marks a disturbance; estimates are then
    /// ignored for one band-pass length.
    pub max_mu: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            force_loop: ForceLoopConfig::default(),
            adaptation: true,
            fixed_stiffness: 3200.0,
            initial_stiffness: 3200.0,
            warmup: 1.5,
            normal_cutoff: 8.0,
            max_mu: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    /// s
    pub duration: f64,
    /// s
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub environment: EnvironmentConfig,
    /// Probe off when absent.
    #[serde(default)]
    pub probe: Option<ProbeConfig>,
    #[serde(default = "EstimatorConfig::probe")]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub traverse: TraverseConfig,
    /// F_d, N.
    pub force_setpoint: f64,
    /// Force-sensor noise σ per axis, N.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Abort once |F| exceeds this multiple of F_d.
    #[serde(default = "default_abort_factor")]
    pub abort_factor: f64,
    /// Leading fraction of the run left out of steady-state metrics.
    #[serde(default = "default_skip")]
    pub metrics_skip: f64,
    /// Padding around each stiffness transition left out of metrics, s.
    #[serde(default = "default_transition_margin")]
    pub transition_margin: f64,
}

fn default_dt() -> f64 {
    1e-3
}
fn default_abort_factor() -> f64 {
    10.0
}
fn default_skip() -> f64 {
    0.2
}
fn default_transition_margin() -> f64 {
    0.1
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(config("duration must be positive"));
        }
        if !(self.dt > 0.0 && self.dt < self.duration) {
            return Err(config("dt must be positive and shorter than the run"));
        }
        if let Some(p) = &self.probe {
            if self.dt > 1.0 / (10.0 * p.frequency) {
                return Err(config(format!(
                    "dt {} s is too coarse for a {} Hz probe",
                    self.dt, p.frequency
                )));
            }
            p.validate(1.0 / self.dt)?;
        }
        self.environment.field.validate()?;
        self.environment.surface.validate()?;
        if let Some(h) = &self.environment.hertz {
            h.validate()?;
        }
        self.estimator.validate()?;
        if !(self.force_setpoint >= 0.0 && self.noise_sigma >= 0.0 && self.abort_factor > 0.0) {
            return Err(config("force setpoint, noise and abort factor must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.metrics_skip) {
            return Err(config("metrics_skip must lie in [0, 1)"));
        }
        let c = &self.controller;
        if !(c.fixed_stiffness > 0.0 && c.initial_stiffness > 0.0 && c.warmup >= 0.0) {
            return Err(config("controller stiffness values must be positive"));
        }
        if c.adaptation && self.probe.is_none() {
            return Err(config("adaptation needs the probe enabled"));
        }
        let b = self.environment.field.bounds();
        let t = &self.traverse;
        for x in [t.x_start, t.x_end.max(t.x_start)] {
            if x < b.x_min || x > b.x_max || t.y < b.y_min || t.y > b.y_max {
                return Err(config(format!("traverse point ({x}, {}) leaves the field", t.y)));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    /// Time spans around each interior stiffness border crossing: the
    /// blend zone plus `transition_margin` either side.
    pub fn transition_windows(&self) -> Vec<(f64, f64)> {
        let f = &self.environment.field;
        let t = &self.traverse;
        let mut borders: Vec<f64> = Vec::new();
        for (i, a) in f.patches.iter().enumerate() {
            for b in &f.patches[i + 1..] {
                for (x, other) in [(a.region.x_max, b.region.x_min), (a.region.x_min, b.region.x_max)] {
                    if (x - other).abs() < 1e-12 && a.params != b.params {
                        borders.push(x);
                    }
                }
            }
        }
        borders.sort_by(f64::total_cmp);
        borders.dedup();
        borders
            .into_iter()
            .filter_map(|x| {
                let lo = t.time_at((x - f.blend_width).max(t.x_start))?;
                let hi = t.time_at((x + f.blend_width).min(t.x_end.max(t.x_start)))?;
                Some((lo - self.transition_margin, hi + self.transition_margin))
            })
            .collect()
    }

    /// Sliding across four patches on a static surface.
    pub fn static_slider() -> Self {
        let field = patch_strip(&[0.0, 0.05, 0.1, 0.15, 0.2], &[400.0, 800.0, 1600.0, 3200.0], 0.002);
        Self {
            schema_version: SCHEMA_VERSION,
            name: "static_slider".into(),
            duration: 44.0,
            dt: 1e-3,
            environment: EnvironmentConfig {
                field,
                surface: SurfaceMotion::fixed(0.0),
                hertz: None,
            },
            probe: Some(ProbeConfig::default()),
            estimator: EstimatorConfig::probe(),
            controller: ControllerConfig::default(),
            traverse: TraverseConfig {
                x_start: 0.01,
                x_end: 0.195,
                y: 0.0,
                speed: 0.005,
                dwell: 4.0,
            },
            force_setpoint: 5.0,
            noise_sigma: 0.02,
            seed: 1,
            abort_factor: 10.0,
            metrics_skip: 0.2,
            transition_margin: 0.1,
        }
    }

    /// The slider over a surface heaving at 0.5 Hz.
    pub fn pulsating() -> Self {
        let mut s = Self::static_slider();
        s.name = "pulsating".into();
        s.environment.field = patch_strip(&[0.0, 0.05, 0.1, 0.15, 0.2], &[250.0, 400.0, 600.0, 800.0], 0.002);
        s.environment.surface = SurfaceMotion {
            amplitude: 0.005,
            frequency: 0.5,
            rest_height: 0.0,
        };
        s.controller.fixed_stiffness = 800.0;
        s.controller.initial_stiffness = 800.0;
        s
    }

    /// Light-contact traverse for checking the estimate against the field.
    pub fn estimation_validation() -> Self {
        let mut s = Self::static_slider();
        s.name = "estimation_validation".into();
        s.force_setpoint = 2.0;
        s
    }

    /// Short pure-spring scenario for quick checks.
    pub fn quick(stiffness: f64, duration: f64) -> Self {
        let p = SpringDamperParams { stiffness, damping: 0.0 };
        let field = StiffnessField::uniform(Region::new(-0.1, 0.1, -0.1, 0.1).expect("quick region"), p);
        Self {
            schema_version: SCHEMA_VERSION,
            name: "quick".into(),
            duration,
            dt: 1e-3,
            environment: EnvironmentConfig {
                field,
                surface: SurfaceMotion::fixed(0.0),
                hertz: None,
            },
            probe: None,
            estimator: EstimatorConfig::probe(),
            controller: ControllerConfig {
                adaptation: false,
                fixed_stiffness: stiffness,
                ..Default::default()
            },
            traverse: TraverseConfig::default(),
            force_setpoint: 5.0,
            noise_sigma: 0.0,
            seed: 0,
            abort_factor: 10.0,
            metrics_skip: 0.2,
            transition_margin: 0.1,
        }
    }
}

/// Adjacent patches along x with the given edges and stiffnesses, light
/// damping and a 40 mm wide strip.
fn patch_strip(edges: &[f64], stiffness: &[f64], blend: f64) -> StiffnessField {
    let patches = edges
        .windows(2)
        .zip(stiffness)
        .map(|(e, &k)| {
            Patch::uniform(
                Region::new(e[0], e[1], -0.02, 0.02).expect("strip region"),
                SpringDamperParams { stiffness: k, damping: 2.0 },
            )
        })
        .collect();
    StiffnessField::new(patches, blend).expect("strip field")
}

/// Flat → linear gradient → flat field for probing traverses.
pub fn gradient_field(k0: f64, gradient: f64, lead: f64, ramp: f64, tail: f64, blend: f64) -> Result<StiffnessField> {
    let p = |k: f64| SpringDamperParams { stiffness: k, damping: 0.0 };
    let y = (-0.01, 0.01);
    StiffnessField::new(
        vec![
            Patch::uniform(Region::new(0.0, lead, y.0, y.1)?, p(k0)),
            Patch {
                region: Region::new(lead, lead + ramp, y.0, y.1)?,
                params: p(k0),
                stiffness_gradient: [gradient, 0.0],
            },
            Patch::uniform(Region::new(lead + ramp, lead + ramp + tail, y.0, y.1)?, p(k0 + gradient * ramp)),
        ],
        blend,
    )
}

/// One row of the trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRecord {
    pub t: f64,
    /// Lateral tool position along the traverse, m.
    pub x_e: f64,
    /// Surface displacement along the normal, m.
    pub z_s: f64,
    /// Total indentation including the probe, m.
    pub delta: f64,
    /// Sensed normal force, noise included, N.
    #[serde(rename = "F_raw")]
    pub f_raw: f64,
    /// Low-pass filtered force magnitude, N.
    #[serde(rename = "F_filt")]
    pub f_filt: f64,
    /// Contact force without sensor noise, N.
    #[serde(rename = "F_env")]
    pub f_env: f64,
    #[serde(rename = "F_d")]
    pub f_d: f64,
    #[serde(rename = "K_true")]
    pub k_true: f64,
    /// NaN until the estimator has produced a value.
    #[serde(rename = "K_hat")]
    pub k_hat: f64,
    #[serde(rename = "D_hat")]
    pub d_hat: f64,
    pub mu: f64,
    pub residual: f64,
    #[serde(rename = "F_meas")]
    pub f_meas: f64,
    pub e: f64,
    #[serde(rename = "dF")]
    pub delta_f: f64,
    pub x_ref: f64,
    /// Tool indentation coordinate, m.
    pub x: f64,
    #[serde(rename = "K_hat_used")]
    pub k_hat_used: f64,
    pub flags: Flags,
}

/// Per-tick event bits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Flags(u8);

impl Flags {
    pub const NO_CONTACT: Flags = Flags(1);
    pub const PROBE_INVALID: Flags = Flags(2);
    pub const STIFFNESS_CLAMPED: Flags = Flags(4);
    pub const NORMAL_STALE: Flags = Flags(8);
    pub const ESTIMATE_UNPHYSICAL: Flags = Flags(16);
    pub const UNSTABLE: Flags = Flags(32);

    const NAMES: [(Flags, &'static str); 6] = [
        (Self::NO_CONTACT, "no_contact"),
        (Self::PROBE_INVALID, "probe_invalid"),
        (Self::STIFFNESS_CLAMPED, "clamped"),
        (Self::NORMAL_STALE, "normal_stale"),
        (Self::ESTIMATE_UNPHYSICAL, "unphysical"),
        (Self::UNSTABLE, "unstable"),
    ];

    pub fn contains(self, other: Flags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn set(&mut self, other: Flags, on: bool) {
        if on {
            self.0 |= other.0;
        }
    }

    pub fn names(self) -> String {
        Self::NAMES
            .iter()
            .filter(|(f, _)| self.contains(*f))
            .map(|(_, n)| *n)
            .collect::<Vec<_>>()
            .join("|")
    }
}

impl Serialize for Flags {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.names())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Force limit exceeded; trace ends at the offending tick.
    Unstable { t: f64, force: f64, limit: f64 },
}

/// Simulation state.
pub struct World {
    cfg: ScenarioConfig,
    k: usize,
    identifier: Option<ProbeIdentifier>,
    lowpass: [FirFilter; 3],
    tracker: NormalTracker,
    controller: ForceLoop,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    estimate: Option<ImpedanceEstimate>,
    /// Last estimate the controller accepted.
    k_live: Option<f64>,
    /// Time of the last disturbance seen by the estimator.
    disturbed_at: f64,
    holdoff: f64,
}

const SURFACE_NORMAL: Vector3<f64> = Vector3::new(0.0, 0.0, 1.0);

impl World {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let fs = 1.0 / cfg.dt;
        let identifier = cfg
            .probe
            .clone()
            .map(|p| ProbeIdentifier::new(p, &cfg.estimator, fs))
            .transpose()?;
        let lp = design_lowpass(cfg.controller.normal_cutoff, fs, DEFAULT_LOWPASS_TAPS)?;
        let controller = ForceLoop::new(&cfg.controller.force_loop, cfg.dt, 0.0)?;
        let holdoff = identifier.as_ref().map_or(0.0, |id| id.probe().group_delay() * 2.0);
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| config(e.to_string()))?;
        Ok(Self {
            k: 0,
            identifier,
            lowpass: [FirFilter::new(lp.clone()), FirFilter::new(lp.clone()), FirFilter::new(lp)],
            tracker: NormalTracker::new(Unit::new_unchecked(SURFACE_NORMAL), DEFAULT_FORCE_FLOOR),
            controller,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            noise,
            estimate: None,
            k_live: None,
            disturbed_at: f64::NEG_INFINITY,
            holdoff,
            cfg,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn controller(&self) -> &ForceLoop {
        &self.controller
    }

    fn law_at(&self, x: f64, t: f64) -> Result<ContactLaw> {
        let env = &self.cfg.environment;
        Ok(match env.hertz {
            Some(h) => ContactLaw::Hertz(h),
            None => ContactLaw::SpringDamper(env.field.sample(x, self.cfg.traverse.y, t)?),
        })
    }

    /// Advances one tick and returns its record.
    pub fn step(&mut self) -> Result<TraceRecord> {
        let cfg = &self.cfg;
        let t = self.k as f64 * cfg.dt;
        let mut flags = Flags::default();

        let (z, zdot) = surface_state(&cfg.environment.surface, t);
        let z_s = z - cfg.environment.surface.rest_height;
        let x_e = cfg.traverse.x_at(t);

        let (d, ddot) = match &cfg.probe {
            Some(p) => (probe_displacement(p, t), probe_velocity(p, t)),
            None => (0.0, 0.0),
        };
        let x = self.controller.position();
        let depth = x + d + z_s;
        let rate = self.controller.velocity() + ddot + zdot;
        let law = self.law_at(x_e, t)?;
        let f_env = law.force(depth, rate);
        let in_contact = depth > 0.0;
        flags.set(Flags::NO_CONTACT, !in_contact);
        let k_true = law.tangent_stiffness(depth.max(1e-9))?;

        let noise = Vector3::from_fn(|_, _| if cfg.noise_sigma > 0.0 { self.noise.sample(&mut self.rng) } else { 0.0 });
        let f_vec = SURFACE_NORMAL * f_env + noise;
        let filtered = Vector3::from_fn(|i, _| self.lowpass[i].step(f_vec[i]));
        let normal = self.tracker.update(&filtered);
        flags.set(Flags::NORMAL_STALE, !self.tracker.is_fresh());
        let f_raw = normal.dot(&f_vec);

        let mut mu = f64::NAN;
        if let Some(id) = &mut self.identifier {
            let tick = id.step(t, x + d, f_raw, in_contact)?;
            flags.set(Flags::PROBE_INVALID, !tick.sample.valid);
            mu = tick.mu;
            if let Some(e) = tick.estimate {
                self.estimate = Some(e);
                // The controller keeps its last good stiffness through bad
                // estimates and while the innovation is large.
                flags.set(Flags::ESTIMATE_UNPHYSICAL, !e.physical);
                let floor = cfg.controller.force_loop.stiffness_floor;
                if mu > cfg.controller.max_mu {
                    self.disturbed_at = t;
                }
                if e.stiffness >= floor && t - self.disturbed_at >= self.holdoff {
                    self.k_live = Some(e.stiffness);
                }
            }
        }

        let c = &cfg.controller;
        let k_hat_cmd = if !c.adaptation {
            c.fixed_stiffness
        } else {
            match self.k_live {
                Some(k) if t >= c.warmup => k,
                _ => c.initial_stiffness,
            }
        };
        let tick = self.controller.step(cfg.force_setpoint, f_raw, k_hat_cmd)?;
        flags.set(Flags::STIFFNESS_CLAMPED, tick.clamped);

        self.k += 1;
        Ok(TraceRecord {
            t,
            x_e,
            z_s,
            delta: depth,
            f_raw,
            f_filt: filtered.norm(),
            f_env,
            f_d: cfg.force_setpoint,
            k_true,
            k_hat: self.estimate.map_or(f64::NAN, |e| e.stiffness),
            d_hat: self.estimate.map_or(f64::NAN, |e| e.damping),
            mu,
            residual: self.estimate.map_or(f64::NAN, |e| e.residual),
            f_meas: tick.f_meas,
            e: tick.e,
            delta_f: tick.delta_f,
            x_ref: tick.x_ref,
            x: tick.x,
            k_hat_used: tick.k_hat_used,
            flags,
        })
    }
}

/// Free-function form of [`World::step`].
pub fn step(world: &mut World) -> Result<TraceRecord> {
    world.step()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    /// N
    pub rms_force_error: f64,
    /// max(F − F_d) over the steady window, N.
    pub max_overshoot: f64,
    /// First time after which |F − F_d| stays under 2 % of F_d, s.
    pub settling_time: Option<f64>,
    /// RMS of (K̂ − K)/K where an estimate exists.
    pub estimate_rel_error_rms: Option<f64>,
    /// Samples in the steady window.
    pub samples: usize,
}

/// Metrics over the trace, skipping the first `skip` fraction of the run
/// and any tick inside `exclude`.
pub fn compute_metrics(trace: &[TraceRecord], skip: f64, exclude: &[(f64, f64)]) -> Result<Metrics> {
    let (first, last) = match (trace.first(), trace.last()) {
        (Some(a), Some(b)) => (a.t, b.t),
        _ => return Err(config("cannot compute metrics of an empty trace")),
    };
    let start = first + skip * (last - first);
    let window: Vec<&TraceRecord> = trace
        .iter()
        .filter(|r| r.t >= start && !exclude.iter().any(|(a, b)| r.t >= *a && r.t <= *b))
        .collect();
    if window.is_empty() {
        return Err(config("metrics window is empty"));
    }
    let n = window.len() as f64;
    let rms = (window.iter().map(|r| (r.f_env - r.f_d).powi(2)).sum::<f64>() / n).sqrt();
    let overshoot = window.iter().map(|r| r.f_env - r.f_d).fold(0.0f64, f64::max);
    let est: Vec<f64> = window
        .iter()
        .filter(|r| r.k_hat.is_finite() && r.k_true > 0.0)
        .map(|r| (r.k_hat - r.k_true) / r.k_true)
        .collect();
    let settling_time = {
        let band = |r: &TraceRecord| (r.f_env - r.f_d).abs() < 0.02 * r.f_d.abs();
        match trace.iter().rposition(|r| !band(r)) {
            None => Some(first),
            Some(i) if i + 1 < trace.len() => Some(trace[i + 1].t),
            Some(_) => None,
        }
    };
    Ok(Metrics {
        rms_force_error: rms,
        max_overshoot: overshoot,
        settling_time,
        estimate_rel_error_rms: (!est.is_empty())
            .then(|| (est.iter().map(|e| e * e).sum::<f64>() / est.len() as f64).sqrt()),
        samples: window.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub metrics: Metrics,
    pub status: RunStatus,
    pub transition_windows: Vec<(f64, f64)>,
}

/// Runs a scenario to completion or until the force limit trips.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput> {
    let mut world = World::new(cfg.clone())?;
    let steps = cfg.steps();
    let limit = cfg.abort_factor * cfg.force_setpoint.max(f64::MIN_POSITIVE);
    let mut trace = Vec::with_capacity(steps);
    let mut status = RunStatus::Completed;
    for _ in 0..steps {
        let mut r = world.step()?;
        if !(r.f_env.is_finite() && r.x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite state at t = {}", r.t)));
        }
        if cfg.force_setpoint > 0.0 && r.f_env.abs() > limit {
            r.flags.set(Flags::UNSTABLE, true);
            status = RunStatus::Unstable {
                t: r.t,
                force: r.f_env,
                limit,
            };
            trace.push(r);
            break;
        }
        trace.push(r);
    }
    let windows = cfg.transition_windows();
    let metrics = compute_metrics(&trace, cfg.metrics_skip, &windows)?;
    Ok(RunOutput {
        trace,
        metrics,
        status,
        transition_windows: windows,
    })
}

/// Static-surface slide; errors if the run went unstable.
pub fn run_static_slider(cfg: &ScenarioConfig) -> Result<RunOutput> {
    if cfg.traverse.speed <= 0.0 || cfg.environment.field.patches.len() < 2 {
        return Err(config("the slider needs a moving traverse over several patches"));
    }
    finish(run(cfg)?)
}

/// Slide over a heaving surface.
pub fn run_pulsating(cfg: &ScenarioConfig) -> Result<RunOutput> {
    if cfg.environment.surface.frequency <= 0.0 && cfg.environment.surface.amplitude > 0.0 {
        return Err(config("pulsating surface needs a positive frequency"));
    }
    finish(run(cfg)?)
}

fn finish(out: RunOutput) -> Result<RunOutput> {
    match out.status {
        RunStatus::Unstable { t, force, limit } => Err(Error::Unstable { t, force, limit }),
        RunStatus::Completed => Ok(out),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatchError {
    /// Nominal patch stiffness, N/m.
    pub stiffness: f64,
    /// Mean of (K̂ − K)/K over the patch interior.
    pub mean_rel_error: f64,
    pub rms_rel_error: f64,
    pub samples: usize,
}

/// Per-patch estimate error. Only ticks whose estimate refers to a point
/// at least `guard` (m) inside a patch, and after `settle` seconds in it,
/// are scored.
pub fn patch_errors(cfg: &ScenarioConfig, trace: &[TraceRecord], guard: f64, settle: f64) -> Vec<PatchError> {
    let lag = cfg
        .probe
        .as_ref()
        .and_then(|p| p.bandpass(1.0 / cfg.dt).ok())
        .map_or(0.0, |s| s.group_delay());
    cfg.environment
        .field
        .patches
        .iter()
        .map(|p| {
            let r = &p.region;
            let entry = cfg.traverse.time_at(r.x_min.max(cfg.traverse.x_start)).unwrap_or(f64::INFINITY);
            let errs: Vec<f64> = trace
                .iter()
                .filter(|rec| rec.k_hat.is_finite())
                .filter(|rec| {
                    let x = cfg.traverse.x_at((rec.t - lag).max(0.0));
                    x >= r.x_min + guard && x <= r.x_max - guard && rec.t - lag >= entry + settle
                })
                .map(|rec| (rec.k_hat - p.params.stiffness) / p.params.stiffness)
                .collect();
            let n = errs.len().max(1) as f64;
            PatchError {
                stiffness: p.params.stiffness,
                mean_rel_error: errs.iter().sum::<f64>() / n,
                rms_rel_error: (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
                samples: errs.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationOutput {
    pub run: RunOutput,
    pub patches: Vec<PatchError>,
}

/// Slides with the probe running and scores the estimate per patch.
pub fn run_estimation_validation(cfg: &ScenarioConfig) -> Result<ValidationOutput> {
    if cfg.probe.is_none() {
        return Err(config("estimation validation needs the probe enabled"));
    }
    let run = finish(run(cfg)?)?;
    let patches = patch_errors(cfg, &run.trace, cfg.environment.field.blend_width + 0.003, 1.0);
    Ok(ValidationOutput { run, patches })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralPeak {
    /// Frequency of the largest bin in the searched range, Hz.
    pub peak_frequency: f64,
    pub peak_amplitude: f64,
    /// Amplitude of the bin nearest the probed frequency.
    pub target_amplitude: f64,
    /// Target amplitude over the median amplitude in range.
    pub prominence: f64,
}

/// Single-sided amplitude spectrum (Hann window) of `x` sampled at `dt`,
/// searched over [f_lo, f_hi] Hz.
pub fn spectral_peak(x: &[f64], dt: f64, target: f64, f_lo: f64, f_hi: f64) -> Result<SpectralPeak> {
    let n = x.len();
    if n < 16 {
        return Err(config("signal too short for a spectrum"));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let w = 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
            Complex::new((v - mean) * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let df = 1.0 / (n as f64 * dt);
    let amp = |k: usize| 4.0 * buf[k].norm() / n as f64;
    let lo = (f_lo / df).ceil() as usize;
    let hi = ((f_hi / df).floor() as usize).min(n / 2);
    if lo >= hi {
        return Err(config("spectral range holds no bins"));
    }
    let (kmax, amax) = (lo..=hi).map(|k| (k, amp(k))).fold((lo, 0.0), |b, c| if c.1 > b.1 { c } else { b });
    let mut all: Vec<f64> = (lo..=hi).map(amp).collect();
    all.sort_by(f64::total_cmp);
    let median = all[all.len() / 2];
    let kt = (target / df).round() as usize;
    let target_amplitude = (kt.saturating_sub(1)..=kt + 1).map(amp).fold(0.0, f64::max);
    Ok(SpectralPeak {
        peak_frequency: kmax as f64 * df,
        peak_amplitude: amax,
        target_amplitude,
        prominence: target_amplitude / median.max(f64::MIN_POSITIVE),
    })
}

/// Column order of the trace CSV.
pub const TRACE_COLUMNS: [&str; 20] = [
    "t", "x_e", "z_s", "delta", "F_raw", "F_filt", "F_env", "F_d", "K_true", "K_hat", "D_hat", "mu", "residual",
    "F_meas", "e", "dF", "x_ref", "x", "K_hat_used", "flags",
];

pub fn write_trace_csv<W: Write>(trace: &[TraceRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    if trace.is_empty() {
        wtr.write_record(TRACE_COLUMNS).map_err(io_err)?;
    }
    for r in trace {
        wtr.serialize(r).map_err(io_err)?;
    }
    wtr.flush().map_err(|e| Error::Numerical(e.to_string()))?;
    Ok(())
}

fn io_err(e: csv::Error) -> Error {
    Error::Numerical(format!("trace write failed: {e}"))
}

pub fn trace_csv_string(trace: &[TraceRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_trace_csv(trace, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Numerical(e.to_string()))
}

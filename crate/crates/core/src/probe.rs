//! The stiffness probe: a small raised-cosine indentation superimposed on
//! the tool pose, read back through matched band-pass filters and fed to the
//! online estimator.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::contact::{probe_scale, ContactLaw, StiffnessField};
use crate::error::{config, domain, Result};
use crate::estimator::{make_regressor, EstimatorConfig, ImpedanceEstimate, RlsState};
use crate::signal::{design_bandpass, FirFilter, FirSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Hz
    pub frequency: f64,
    /// Peak indentation, m.
    pub amplitude: f64,
    /// r, m.
    pub probe_radius: f64,
    /// R, m.
    pub tool_radius: f64,
    /// Pass band in Hz. Defaults to [0.4, 1.1]·frequency.
    pub band: Option<(f64, f64)>,
    /// Band-pass length. Defaults to twelve excitation periods, made odd.
    pub taps: Option<usize>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            frequency: 20.0,
            amplitude: 5e-5,
            probe_radius: 0.005,
            tool_radius: 0.005,
            band: None,
            taps: None,
        }
    }
}

impl ProbeConfig {
    pub fn band_edges(&self) -> (f64, f64) {
        self.band
            .unwrap_or((0.4 * self.frequency, 1.1 * self.frequency))
    }

    pub fn filter_taps(&self, sample_rate: f64) -> usize {
        self.taps
            .unwrap_or_else(|| 2 * (12.0 * sample_rate / (2.0 * self.frequency)).round() as usize + 1)
    }

    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        if !(self.frequency > 0.0 && self.frequency.is_finite()) {
            return Err(config("probe frequency must be positive"));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(config("probe amplitude must be positive"));
        }
        if !(self.probe_radius > 0.0 && self.tool_radius > 0.0) {
            return Err(config("probe and tool radii must be positive"));
        }
        if self.frequency > sample_rate / 10.0 {
            return Err(config(format!(
                "probe frequency {} Hz needs a sample rate of at least {} Hz",
                self.frequency,
                10.0 * self.frequency
            )));
        }
        let (lo, hi) = self.band_edges();
        if !(lo > 0.0 && lo < hi && hi < sample_rate / 2.0) {
            return Err(config(format!(
                "probe band ({lo}, {hi}) Hz must exclude DC and stay below Nyquist"
            )));
        }
        Ok(())
    }

    pub fn bandpass(&self, sample_rate: f64) -> Result<FirSpec> {
        self.validate(sample_rate)?;
        let (lo, hi) = self.band_edges();
        design_bandpass(lo, hi, sample_rate, self.filter_taps(sample_rate))
    }
}

/// d(t) = a/2·(1 − cos 2πft), within [0, a].
pub fn probe_displacement(c: &ProbeConfig, t: f64) -> f64 {
    0.5 * c.amplitude * (1.0 - (2.0 * PI * c.frequency * t).cos())
}

pub fn probe_velocity(c: &ProbeConfig, t: f64) -> f64 {
    PI * c.frequency * c.amplitude * (2.0 * PI * c.frequency * t).sin()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeSample {
    /// Time the filtered values refer to (tick time minus group delay), s.
    pub t: f64,
    /// Band-passed indentation, m.
    #[serde(rename = "delta")]
    pub displacement: f64,
    /// Band-passed normal force, N.
    pub force: f64,
    pub valid: bool,
}

/// Streaming measurement path: two identical band-pass filters.
#[derive(Debug, Clone)]
pub struct Probe {
    cfg: ProbeConfig,
    displacement: FirFilter,
    force: FirFilter,
    group_delay: f64,
    in_contact_run: usize,
}

impl Probe {
    pub fn new(cfg: ProbeConfig, sample_rate: f64) -> Result<Self> {
        let spec = cfg.bandpass(sample_rate)?;
        Ok(Self {
            group_delay: spec.group_delay(),
            displacement: FirFilter::new(spec.clone()),
            force: FirFilter::new(spec),
            cfg,
            in_contact_run: 0,
        })
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.cfg
    }

    pub fn group_delay(&self) -> f64 {
        self.group_delay
    }

    /// Feeds one tick. `indentation` is the robot-side indentation
    /// coordinate (any constant offset is removed by the filter), `force`
    /// the sensed normal force.
    pub fn step(&mut self, t: f64, indentation: f64, force: f64, in_contact: bool) -> ProbeSample {
        let displacement = self.displacement.step(indentation);
        let force = self.force.step(force);
        self.in_contact_run = if in_contact { self.in_contact_run + 1 } else { 0 };
        // Only trust the output once the whole filter window saw contact.
        let valid = self.in_contact_run >= self.displacement.spec().len()
            && displacement.is_finite()
            && force.is_finite();
        ProbeSample {
            t: t - self.group_delay,
            displacement,
            force,
            valid,
        }
    }
}

/// Drives the probe against a known contact law at a fixed base depth.
pub fn probe_sample(
    c: &ProbeConfig,
    law: &ContactLaw,
    base_depth: f64,
    t: f64,
    probe: &mut Probe,
) -> Result<ProbeSample> {
    if !(base_depth >= 0.0) || t < 0.0 {
        return Err(domain("probe needs non-negative base depth and time"));
    }
    let depth = base_depth + probe_displacement(c, t);
    let force = law.force(depth, probe_velocity(c, t));
    Ok(probe.step(t, depth, force, depth > 0.0))
}

/// Probe measurement chained into the recursive estimator.
#[derive(Debug, Clone)]
pub struct ProbeIdentifier {
    probe: Probe,
    rls: RlsState,
    prev: Option<ProbeSample>,
    latest: Option<ImpedanceEstimate>,
}

/// Per-tick output of [`ProbeIdentifier::step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentifierTick {
    pub sample: ProbeSample,
    /// Most recent estimate, scaled to the tool contact.
    pub estimate: Option<ImpedanceEstimate>,
    pub mu: f64,
    pub updated: bool,
}

impl ProbeIdentifier {
    pub fn new(probe: ProbeConfig, estimator: &EstimatorConfig, sample_rate: f64) -> Result<Self> {
        Ok(Self {
            probe: Probe::new(probe, sample_rate)?,
            rls: RlsState::new(estimator, 1.0 / sample_rate)?,
            prev: None,
            latest: None,
        })
    }

    pub fn probe(&self) -> &Probe {
        &self.probe
    }

    pub fn rls(&self) -> &RlsState {
        &self.rls
    }

    pub fn step(&mut self, t: f64, indentation: f64, force: f64, in_contact: bool) -> Result<IdentifierTick> {
        let sample = self.probe.step(t, indentation, force, in_contact);
        let mut updated = false;
        if sample.valid {
            if let Some(prev) = self.prev {
                let reg = make_regressor(sample.force, prev.force, sample.displacement, prev.displacement)?;
                let info = self.rls.update(&reg);
                let mut e = self.rls.estimate(sample.t, info.innovation);
                let cfg = self.probe.config();
                e.stiffness = probe_scale(e.stiffness, cfg.tool_radius, cfg.probe_radius)?;
                e.damping = probe_scale(e.damping, cfg.tool_radius, cfg.probe_radius)?;
                self.latest = Some(e);
                updated = true;
            }
            self.prev = Some(sample);
        } else {
            // Regressor pairs must be consecutive valid samples.
            self.prev = None;
        }
        Ok(IdentifierTick {
            sample,
            estimate: self.latest,
            mu: self.rls.mu,
            updated,
        })
    }
}

/// Settings for an open-loop probing run (tool held still).
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopProbe {
    pub probe: ProbeConfig,
    pub estimator: EstimatorConfig,
    pub sample_rate: f64,
    pub duration: f64,
    pub base_depth: f64,
    /// Standard deviation of additive force noise, N.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for OpenLoopProbe {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            estimator: EstimatorConfig::probe(),
            sample_rate: 1000.0,
            duration: 2.0,
            base_depth: 1e-3,
            noise_sigma: 0.0,
            seed: 0,
        }
    }
}

/// Runs the probe against a time-varying contact law and returns every
/// tick's output.
pub fn run_open_loop(
    run: &OpenLoopProbe,
    mut law_at: impl FnMut(f64) -> Result<ContactLaw>,
) -> Result<Vec<IdentifierTick>> {
    let mut id = ProbeIdentifier::new(run.probe.clone(), &run.estimator, run.sample_rate)?;
    let noise = Normal::new(0.0, run.noise_sigma.max(0.0)).map_err(|e| config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let steps = (run.duration * run.sample_rate).round() as usize;
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = k as f64 / run.sample_rate;
        let depth = run.base_depth + probe_displacement(&run.probe, t);
        let law = law_at(t)?;
        let mut force = law.force(depth, probe_velocity(&run.probe, t));
        if run.noise_sigma > 0.0 {
            force += noise.sample(&mut rng);
        }
        out.push(id.step(t, depth, force, depth > 0.0)?);
    }
    Ok(out)
}

/// Outcome of a probing traverse over a field with a stiffness gradient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HighFreqReport {
    pub frequency: f64,
    /// RMS of (K̂ − K)/K over the evaluation window.
    pub rel_error_rms: f64,
    pub rel_error_max: f64,
    /// Largest |dK/dt|·δ/(2πf·K·a/2) met along the path: the gradient
    /// force term relative to the probe force it is dropped against.
    pub neglected_ratio: f64,
    pub samples: usize,
}

/// Straight-line traverse along x at constant height.
#[derive(Debug, Clone, PartialEq)]
pub struct Traverse {
    pub x_start: f64,
    pub y: f64,
    /// m/s
    pub speed: f64,
    /// Time spent at `x_start` before moving, s.
    pub dwell: f64,
    /// x range whose ground truth is scored.
    pub score_range: (f64, f64),
}

impl Traverse {
    pub fn x_at(&self, t: f64) -> f64 {
        self.x_start + self.speed * (t - self.dwell).max(0.0)
    }
}

/// Traverses `field` with the probe running and compares the estimate with
/// the field's own stiffness at the position each sample refers to.
pub fn validate_high_freq_reduction(
    field: &StiffnessField,
    path: &Traverse,
    run: &OpenLoopProbe,
) -> Result<HighFreqReport> {
    field.validate()?;
    let ticks = run_open_loop(run, |t| {
        Ok(ContactLaw::SpringDamper(field.sample(path.x_at(t), path.y, t)?))
    })?;
    let scale = probe_scale(1.0, run.probe.tool_radius, run.probe.probe_radius)?;
    let truth = |t: f64| -> Result<f64> {
        Ok(scale * field.sample(path.x_at(t), path.y, t)?.stiffness)
    };

    let mut sq = 0.0;
    let mut max = 0.0f64;
    let mut n = 0usize;
    for tick in &ticks {
        let (Some(e), true) = (tick.estimate, tick.updated) else {
            continue;
        };
        let x = path.x_at(e.timestamp.max(0.0));
        if x < path.score_range.0 || x > path.score_range.1 {
            continue;
        }
        let k = truth(e.timestamp.max(0.0))?;
        let rel = (e.stiffness - k) / k;
        sq += rel * rel;
        max = max.max(rel.abs());
        n += 1;
    }
    if n == 0 {
        return Err(config("traverse produced no scored samples"));
    }

    // dK/dt by central differences along the path.
    let dt = 1.0 / run.sample_rate;
    let steps = (run.duration * run.sample_rate).round() as usize;
    let w = 2.0 * PI * run.probe.frequency;
    let half = run.probe.amplitude / 2.0;
    let depth = run.base_depth + half;
    let mut neglected = 0.0f64;
    for k in 1..steps.saturating_sub(1) {
        let t = k as f64 * dt;
        let kdot = (truth(t + dt)? - truth(t - dt)?) / (2.0 * dt);
        neglected = neglected.max(kdot.abs() * depth / (w * truth(t)? * half));
    }

    Ok(HighFreqReport {
        frequency: run.probe.frequency,
        rel_error_rms: (sq / n as f64).sqrt(),
        rel_error_max: max,
        neglected_ratio: neglected,
        samples: n,
    })
}

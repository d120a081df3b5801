//! Force loop: PI on the force error, compliance-scaled admittance, a
//! second-order inner position loop, lumped measurement delay, and the
//! Cartesian-to-joint increment through a Jacobian pseudo-inverse.

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};
use crate::signal::DelayLine;
use crate::stability::{compose_open_loop, LoopModel};

/// Default PI zero time constant kp/ki, s.
pub const DEFAULT_PI_ZERO_TIME: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiGains {
    pub kp: f64,
    /// 1/s
    pub ki: f64,
    /// Anti-windup clamp on the integral, N·s.
    pub integral_limit: f64,
}

impl PiGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.kp >= 0.0 && self.ki >= 0.0 && self.integral_limit > 0.0) {
            return Err(config("PI gains must be non-negative with a positive integral limit"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PiState {
    pub integral: f64,
}

/// δF = kp·e + ki·∫e, with the integral clamped to ±integral_limit.
pub fn pi_step(g: &PiGains, state: &mut PiState, f_d: f64, f_meas: f64, dt: f64) -> f64 {
    let e = f_d - f_meas;
    state.integral = (state.integral + e * dt).clamp(-g.integral_limit, g.integral_limit);
    g.kp * e + g.ki * state.integral
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdmittanceConfig {
    /// C, m/N.
    pub compliance: f64,
    /// K_min, N/m.
    pub stiffness_floor: f64,
    /// The estimate fell below the floor.
    pub clamped: bool,
}

impl AdmittanceConfig {
    /// C = 1/max(K̂, K_min).
    pub fn from_estimate(k_hat: f64, stiffness_floor: f64) -> Result<Self> {
        if !(stiffness_floor > 0.0) {
            return Err(config("stiffness floor must be positive"));
        }
        let clamped = !(k_hat >= stiffness_floor);
        Ok(Self {
            compliance: 1.0 / if clamped { stiffness_floor } else { k_hat },
            stiffness_floor,
            clamped,
        })
    }
}

/// δx = C·δF.
pub fn admittance_step(a: &AdmittanceConfig, delta_f: f64) -> f64 {
    a.compliance * delta_f
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerLoopModel {
    /// ω, rad/s.
    pub natural_frequency: f64,
    /// ζ
    pub damping_ratio: f64,
}

impl Default for InnerLoopModel {
    fn default() -> Self {
        Self {
            natural_frequency: 300.0,
            damping_ratio: 0.9,
        }
    }
}

impl InnerLoopModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.natural_frequency > 0.0 && self.damping_ratio > 0.0) {
            return Err(config("inner loop ω and ζ must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct InnerLoopState {
    pub position: f64,
    pub velocity: f64,
}

/// Advances ẍ = ω²(x_ref − x) − 2ζω·ẋ by one RK4 step.
pub fn inner_loop_step(m: &InnerLoopModel, s: &mut InnerLoopState, x_ref: f64, dt: f64) -> Result<f64> {
    let w = m.natural_frequency;
    if !(dt > 0.0) || dt * w >= 0.5 {
        return Err(Error::Resolution(format!(
            "inner loop needs dt·ω < 0.5, got {dt}·{w}"
        )));
    }
    let z = m.damping_ratio;
    let f = |x: f64, v: f64| (v, w * w * (x_ref - x) - 2.0 * z * w * v);
    let (x, v) = (s.position, s.velocity);
    let k1 = f(x, v);
    let k2 = f(x + 0.5 * dt * k1.0, v + 0.5 * dt * k1.1);
    let k3 = f(x + 0.5 * dt * k2.0, v + 0.5 * dt * k2.1);
    let k4 = f(x + dt * k3.0, v + dt * k3.1);
    s.position = x + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
    s.velocity = v + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
    Ok(s.position)
}

/// PI gains that put the matched loop (C·K_E = 1) at critical damping:
/// the largest ki whose slowest closed-loop pole is still real, with
/// kp = ki·zero_time.
pub fn tune_critical(inner: &InnerLoopModel, delay: f64, zero_time: f64) -> Result<PiGains> {
    let gains = |ki: f64| PiGains {
        kp: ki * zero_time,
        ki,
        integral_limit: 1e3,
    };
    let slowest_is_real = |ki: f64| -> Result<bool> {
        let model = LoopModel {
            pi: gains(ki),
            compliance_est: 1.0,
            true_stiffness: 1.0,
            inner: *inner,
            delay,
        };
        let poles = compose_open_loop(&model)?.closed_loop_poles();
        let slowest = poles
            .iter()
            .max_by(|a, b| a.re.total_cmp(&b.re))
            .ok_or_else(|| Error::Numerical("closed loop has no poles".into()))?;
        Ok(slowest.im.abs() <= 1e-6 * slowest.norm())
    };
    let (mut lo, mut hi) = (1e-6, 1.0);
    while slowest_is_real(hi)? {
        hi *= 2.0;
        if hi > 1e6 {
            return Err(Error::Numerical("no oscillatory gain found while tuning".into()));
        }
    }
    while hi / lo - 1.0 > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if slowest_is_real(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(gains(lo))
}

/// Settings of the 1-DOF force loop along the contact normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForceLoopConfig {
    /// Tuned to critical damping when absent.
    pub pi: Option<PiGains>,
    pub integral_limit: f64,
    pub inner: InnerLoopModel,
    /// Lumped measurement delay T_d, s.
    pub delay: f64,
    /// K_min, N/m.
    pub stiffness_floor: f64,
    /// PI zero time used when tuning, s.
    pub pi_zero_time: f64,
}

impl Default for ForceLoopConfig {
    fn default() -> Self {
        Self {
            pi: None,
            integral_limit: 100.0,
            inner: InnerLoopModel::default(),
            delay: 0.1,
            stiffness_floor: 1.0,
            pi_zero_time: DEFAULT_PI_ZERO_TIME,
        }
    }
}

impl ForceLoopConfig {
    pub fn gains(&self) -> Result<PiGains> {
        let g = match self.pi {
            Some(g) => g,
            None => PiGains {
                integral_limit: self.integral_limit,
                ..tune_critical(&self.inner, self.delay, self.pi_zero_time)?
            },
        };
        g.validate()?;
        Ok(g)
    }
}

/// Telemetry of one controller tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LoopTick {
    pub f_d: f64,
    pub f_meas: f64,
    pub e: f64,
    pub delta_f: f64,
    pub x_ref: f64,
    pub x: f64,
    pub k_hat_used: f64,
    pub clamped: bool,
}

/// Closed force loop along one axis. Positions are indentation
/// coordinates: larger means deeper into the environment.
#[derive(Debug, Clone)]
pub struct ForceLoop {
    gains: PiGains,
    pi: PiState,
    inner: InnerLoopModel,
    state: InnerLoopState,
    delay: DelayLine,
    floor: f64,
    dt: f64,
    x_ref: f64,
    last_delta_f: f64,
}

impl ForceLoop {
    pub fn new(cfg: &ForceLoopConfig, dt: f64, x0: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(domain("controller period must be positive"));
        }
        cfg.inner.validate()?;
        Ok(Self {
            gains: cfg.gains()?,
            pi: PiState::default(),
            inner: cfg.inner,
            state: InnerLoopState {
                position: x0,
                velocity: 0.0,
            },
            delay: DelayLine::new(cfg.delay, 1.0 / dt)?,
            floor: cfg.stiffness_floor,
            dt,
            x_ref: x0,
            last_delta_f: 0.0,
        })
    }

    pub fn gains(&self) -> &PiGains {
        &self.gains
    }

    pub fn position(&self) -> f64 {
        self.state.position
    }

    pub fn velocity(&self) -> f64 {
        self.state.velocity
    }

    /// Starts at rest with the loop already holding `force` at `x0`, the
    /// integral preloaded to match.
    pub fn preload(&mut self, force: f64, x0: f64) {
        self.delay.fill(force);
        self.state = InnerLoopState {
            position: x0,
            velocity: 0.0,
        };
        self.x_ref = x0;
        self.pi.integral = 0.0;
        self.last_delta_f = 0.0;
    }

    /// One tick: delayed measurement, PI, admittance increment, inner loop.
    ///
    /// The admittance map is applied to increments of δF, so the commanded
    /// position only moves when the force residual does; with C fixed this
    /// is the same loop as x_ref = C·δF.
    pub fn step(&mut self, f_d: f64, f_sensed: f64, k_hat: f64) -> Result<LoopTick> {
        let f_meas = self.delay.step(f_sensed);
        let delta_f = pi_step(&self.gains, &mut self.pi, f_d, f_meas, self.dt);
        let adm = AdmittanceConfig::from_estimate(k_hat, self.floor)?;
        self.x_ref += admittance_step(&adm, delta_f - self.last_delta_f);
        self.last_delta_f = delta_f;
        let x = inner_loop_step(&self.inner, &mut self.state, self.x_ref, self.dt)?;
        Ok(LoopTick {
            f_d,
            f_meas,
            e: f_d - f_meas,
            delta_f,
            x_ref: self.x_ref,
            x,
            k_hat_used: 1.0 / adm.compliance,
            clamped: adm.clamped,
        })
    }
}

/// Free-function form of [`ForceLoop::step`].
pub fn closed_loop_step(l: &mut ForceLoop, f_d: f64, f_sensed: f64, k_hat: f64) -> Result<LoopTick> {
    l.step(f_d, f_sensed, k_hat)
}

/// Condition number above which the damped inverse is used.
pub const CONDITION_LIMIT: f64 = 1e8;
pub const PINV_DAMPING: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct JointIncrement {
    pub dq: DVector<f64>,
    pub condition: f64,
    /// Ill-conditioned Jacobian, damped inverse used.
    pub damped: bool,
}

/// δq = J†·C·δF. Falls back to Jᵀ(JJᵀ + λ²I)⁻¹ when cond(J) > 1e8.
pub fn joint_increment(jacobian: &DMatrix<f64>, compliance: f64, delta_f: &DVector<f64>) -> Result<JointIncrement> {
    if jacobian.nrows() != delta_f.len() {
        return Err(domain(format!(
            "Jacobian has {} rows but the force has {} components",
            jacobian.nrows(),
            delta_f.len()
        )));
    }
    if !jacobian.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("Jacobian is not finite".into()));
    }
    let target = delta_f * compliance;
    let svd = jacobian.clone().svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let smin = sv.min();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition <= CONDITION_LIMIT {
        let dq = svd
            .solve(&target, smax * f64::EPSILON * jacobian.nrows().max(jacobian.ncols()) as f64)
            .map_err(|e| Error::Numerical(e.to_string()))?;
        return Ok(JointIncrement {
            dq,
            condition,
            damped: false,
        });
    }
    let m = jacobian.nrows();
    let jjt = jacobian * jacobian.transpose() + DMatrix::identity(m, m) * PINV_DAMPING * PINV_DAMPING;
    let y = jjt
        .cholesky()
        .ok_or_else(|| Error::Singular("damped JJᵀ is not positive definite".into()))?
        .solve(&target);
    Ok(JointIncrement {
        dq: jacobian.transpose() * y,
        condition,
        damped: true,
    })
}

/// Standard Denavit–Hartenberg row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DhRow {
    pub a: f64,
    pub alpha: f64,
    pub d: f64,
    #[serde(default)]
    pub offset: f64,
}

/// Revolute serial arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SerialArm {
    pub links: Vec<DhRow>,
}

impl SerialArm {
    /// Seven-joint arm with the proportions of a common collaborative
    /// manipulator.
    pub fn seven_dof() -> Self {
        use std::f64::consts::FRAC_PI_2;
        let row = |d: f64, alpha: f64| DhRow { a: 0.0, alpha, d, offset: 0.0 };
        Self {
            links: vec![
                row(0.34, -FRAC_PI_2),
                row(0.0, FRAC_PI_2),
                row(0.40, FRAC_PI_2),
                row(0.0, -FRAC_PI_2),
                row(0.40, -FRAC_PI_2),
                row(0.0, FRAC_PI_2),
                row(0.126, 0.0),
            ],
        }
    }

    /// Planar arm with unit-free link lengths, all joints about z.
    pub fn planar(lengths: &[f64]) -> Self {
        Self {
            links: lengths
                .iter()
                .map(|&a| DhRow { a, alpha: 0.0, d: 0.0, offset: 0.0 })
                .collect(),
        }
    }

    pub fn dof(&self) -> usize {
        self.links.len()
    }

    /// Joint axes and origins, base first, then the tool point.
    fn frames(&self, q: &[f64]) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>, Vector3<f64>) {
        let mut rot = nalgebra::Matrix3::<f64>::identity();
        let mut pos = Vector3::zeros();
        let mut axes = Vec::with_capacity(q.len());
        let mut origins = Vec::with_capacity(q.len());
        for (row, &qi) in self.links.iter().zip(q) {
            axes.push(rot.column(2).into_owned());
            origins.push(pos);
            let th = qi + row.offset;
            let (st, ct) = th.sin_cos();
            let (sa, ca) = row.alpha.sin_cos();
            let local = nalgebra::Matrix3::new(ct, -st * ca, st * sa, st, ct * ca, -ct * sa, 0.0, sa, ca);
            pos += rot * Vector3::new(row.a * ct, row.a * st, row.d);
            rot *= local;
        }
        (axes, origins, pos)
    }

    pub fn tool_position(&self, q: &[f64]) -> Result<Vector3<f64>> {
        self.check(q)?;
        Ok(self.frames(q).2)
    }

    /// 3×n translational Jacobian.
    pub fn position_jacobian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        self.check(q)?;
        let (axes, origins, tool) = self.frames(q);
        let mut j = DMatrix::zeros(3, q.len());
        for i in 0..q.len() {
            j.set_column(i, &axes[i].cross(&(tool - origins[i])));
        }
        Ok(j)
    }

    fn check(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.dof() {
            return Err(domain(format!("expected {} joint angles, got {}", self.dof(), q.len())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: Vec<f64>,
    pub arm: SerialArm,
    /// Per-joint (min, max), rad.
    pub limits: Vec<(f64, f64)>,
}

impl JointState {
    pub fn new(arm: SerialArm, q: Vec<f64>, limits: Vec<(f64, f64)>) -> Result<Self> {
        if q.len() != arm.dof() || limits.len() != arm.dof() {
            return Err(domain("joint vector and limits must match the arm"));
        }
        if q.iter().zip(&limits).any(|(qi, (lo, hi))| qi < lo || qi > hi) {
            return Err(domain("joint configuration outside limits"));
        }
        Ok(Self { q, arm, limits })
    }

    /// Joint increment for a Cartesian force residual at the tool.
    pub fn increment(&self, compliance: f64, delta_f: &Vector3<f64>) -> Result<JointIncrement> {
        let j = self.arm.position_jacobian(&self.q)?;
        joint_increment(&j, compliance, &DVector::from_column_slice(delta_f.as_slice()))
    }
}

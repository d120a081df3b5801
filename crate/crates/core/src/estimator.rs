//! Online impedance identification.
//!
//! The spring-damper environment F = K·δ + D·δ̇ is discretised with the
//! bilinear transform, giving
//!
//! ```text
//! F_k + F_{k-1} = A·δ_k + B·δ_{k-1},   A = (2D + T·K)/T,   B = (−2D + T·K)/T
//! ```
//!
//! which is identified with recursive least squares. The covariance is
//! reset every step, `P ← μ·P̄ + g·J`, with the forgetting weight μ driven by
//! the size of the current prediction error.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Error, Result};

/// One row of the regression y = φ·θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressorSample {
    /// F_k + F_{k−1}, N.
    pub y: f64,
    /// [δ_k, δ_{k−1}], m.
    pub phi: Vector2<f64>,
}

pub fn make_regressor(f_k: f64, f_km1: f64, d_k: f64, d_km1: f64) -> Result<RegressorSample> {
    if ![f_k, f_km1, d_k, d_km1].iter().all(|v| v.is_finite()) {
        return Err(domain("regressor inputs must be finite"));
    }
    Ok(RegressorSample {
        y: f_k + f_km1,
        phi: Vector2::new(d_k, d_km1),
    })
}

/// Bilinear-model parameters [A, B] for a spring-damper at sample period T.
pub fn bilinear_theta(stiffness: f64, damping: f64, period: f64) -> Vector2<f64> {
    Vector2::new(
        (2.0 * damping + period * stiffness) / period,
        (-2.0 * damping + period * stiffness) / period,
    )
}

/// Forces that satisfy the discrete model exactly for a displacement
/// sequence, starting from rest (F_{−1} = δ_{−1} = 0).
pub fn bilinear_response(stiffness: f64, damping: f64, period: f64, displacement: &[f64]) -> Vec<f64> {
    let theta = bilinear_theta(stiffness, damping, period);
    let mut prev_f = 0.0;
    let mut prev_d = 0.0;
    displacement
        .iter()
        .map(|&d| {
            let f = theta[0] * d + theta[1] * prev_d - prev_f;
            prev_f = f;
            prev_d = d;
            f
        })
        .collect()
}

/// How the covariance is carried from one step to the next.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "lambda")]
pub enum Forgetting {
    /// μ = tanh(s_e·|e|) and P ← μ·P̄ + g·J.
    Adaptive,
    /// Classical exponential forgetting, P ← P̄/λ, no resetting term.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub theta0: [f64; 2],
    /// P₀ = p0·I.
    pub p0: f64,
    /// Reset gain g.
    pub reset_gain: f64,
    /// Upper bound ḡ on the reset gain.
    pub reset_gain_bound: f64,
    /// J = reset_scale·I.
    pub reset_scale: f64,
    /// s_e, 1/N, multiplying the innovation inside tanh.
    pub innovation_scale: f64,
    pub forgetting: Forgetting,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            theta0: [0.0, 0.0],
            p0: 1e6,
            reset_gain: 1e3,
            reset_gain_bound: 1e12,
            reset_scale: 1.0,
            innovation_scale: 1.0,
            forgetting: Forgetting::Adaptive,
        }
    }
}

impl EstimatorConfig {
    /// Gains scaled for probe data: sub-millimetre indentation, force in
    /// the tens of millinewtons.
    pub fn probe() -> Self {
        Self::probe_with_gain(5e6)
    }

    /// [`Self::probe`] with a different reset gain; larger tracks faster
    /// and passes more sensor noise.
    pub fn probe_with_gain(reset_gain: f64) -> Self {
        Self {
            p0: 1e10,
            reset_gain,
            innovation_scale: 10.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p0 > 0.0 && self.p0.is_finite()) {
            return Err(config("estimator p0 must be positive"));
        }
        if !(self.reset_gain > 0.0 && self.reset_gain <= self.reset_gain_bound) {
            return Err(config("estimator reset gain must satisfy 0 < g ≤ ḡ"));
        }
        if !(self.reset_scale > 0.0) {
            return Err(config("estimator reset matrix must be positive definite"));
        }
        if !(self.innovation_scale > 0.0 && self.innovation_scale.is_finite()) {
            return Err(config("innovation scale must be positive"));
        }
        if let Forgetting::Fixed(lambda) = self.forgetting {
            if !(lambda > 0.0 && lambda <= 1.0) {
                return Err(config("fixed forgetting factor must lie in (0, 1]"));
            }
        }
        if !self.theta0.iter().all(|v| v.is_finite()) {
            return Err(config("theta0 must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RlsState {
    pub theta: Vector2<f64>,
    pub p: Matrix2<f64>,
    pub mu: f64,
    pub g: f64,
    pub j: Matrix2<f64>,
    pub sample_period: f64,
    p0: Matrix2<f64>,
    innovation_scale: f64,
    forgetting: Forgetting,
}

/// What a single update did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateInfo {
    /// Prior innovation y − φθ̄_k, N.
    pub innovation: f64,
    pub mu: f64,
    /// Covariance lost positive definiteness and was reset to P₀.
    pub reset: bool,
}

const MU_MAX: f64 = 1.0 - f64::EPSILON;

fn is_spd(p: &Matrix2<f64>) -> bool {
    p.iter().all(|v| v.is_finite()) && p[(0, 0)] > 0.0 && p.determinant() > 0.0
}

fn symmetrize(p: &Matrix2<f64>) -> Matrix2<f64> {
    (p + p.transpose()) * 0.5
}

impl RlsState {
    pub fn new(cfg: &EstimatorConfig, sample_period: f64) -> Result<Self> {
        cfg.validate()?;
        if !(sample_period > 0.0) {
            return Err(domain("sample period must be positive"));
        }
        let p0 = Matrix2::identity() * cfg.p0;
        Ok(Self {
            theta: Vector2::from(cfg.theta0),
            p: p0,
            mu: 0.0,
            g: cfg.reset_gain,
            j: Matrix2::identity() * cfg.reset_scale,
            sample_period,
            p0,
            innovation_scale: cfg.innovation_scale,
            forgetting: cfg.forgetting,
        })
    }

    pub fn update(&mut self, s: &RegressorSample) -> UpdateInfo {
        let phi = s.phi;
        let innovation = s.y - phi.dot(&self.theta);

        // P̄ = (P⁻¹ + φᵀφ)⁻¹ via the matrix inversion lemma.
        let p_phi = self.p * phi;
        let denom = 1.0 + phi.dot(&p_phi);
        let p_bar = symmetrize(&(self.p - p_phi * p_phi.transpose() / denom));
        let mut reset = false;
        let p_bar = if is_spd(&p_bar) {
            p_bar
        } else {
            reset = true;
            self.p0
        };

        self.theta += p_bar * phi * innovation;

        let (mu, next) = match self.forgetting {
            Forgetting::Adaptive => {
                let mu = (self.innovation_scale * innovation.abs()).tanh().min(MU_MAX);
                (mu, p_bar * mu + self.j * self.g)
            }
            Forgetting::Fixed(lambda) => (lambda, p_bar / lambda),
        };
        let next = symmetrize(&next);
        self.p = if is_spd(&next) {
            next
        } else {
            reset = true;
            self.p0
        };
        self.mu = mu;
        UpdateInfo {
            innovation,
            mu,
            reset,
        }
    }

    pub fn estimate(&self, timestamp: f64, residual: f64) -> ImpedanceEstimate {
        let mut e = recover(&self.theta, self.sample_period);
        e.timestamp = timestamp;
        e.residual = residual;
        e
    }
}

/// Pure form of [`RlsState::update`].
pub fn rls_update(s: &RlsState, sample: &RegressorSample) -> (RlsState, UpdateInfo) {
    let mut next = s.clone();
    let info = next.update(sample);
    (next, info)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ImpedanceEstimate {
    /// K_E, N/m.
    pub stiffness: f64,
    /// D_E, N·s/m.
    pub damping: f64,
    pub residual: f64,
    pub timestamp: f64,
    /// False when either recovered parameter is negative.
    pub physical: bool,
}

fn recover(theta: &Vector2<f64>, period: f64) -> ImpedanceEstimate {
    let stiffness = (theta[0] + theta[1]) / 2.0;
    let damping = period * (theta[0] - theta[1]) / 4.0;
    ImpedanceEstimate {
        stiffness,
        damping,
        residual: 0.0,
        timestamp: 0.0,
        physical: stiffness >= 0.0 && damping >= 0.0,
    }
}

/// K = (A + B)/2, D = T·(A − B)/4.
pub fn recover_impedance(theta: &Vector2<f64>, period: f64) -> Result<ImpedanceEstimate> {
    if !(period > 0.0) {
        return Err(domain("sample period must be positive"));
    }
    Ok(recover(theta, period))
}

/// Least-squares θ over a batch of samples (Householder QR).
pub fn batch_ls(samples: &[RegressorSample]) -> Result<Vector2<f64>> {
    if samples.len() < 2 {
        return Err(Error::Singular(format!(
            "need at least 2 samples, got {}",
            samples.len()
        )));
    }
    let n = samples.len();
    let a = DMatrix::from_fn(n, 2, |i, j| samples[i].phi[j]);
    let mut y = DVector::from_iterator(n, samples.iter().map(|s| s.y));
    let qr = a.qr();
    let r = qr.r();
    let scale = r[(0, 0)].abs().max(r[(1, 1)].abs());
    if scale == 0.0 || r[(1, 1)].abs() <= 1e-12 * scale || r[(0, 0)].abs() <= 1e-12 * scale {
        return Err(Error::Singular("regressor columns are linearly dependent".into()));
    }
    qr.q_tr_mul(&mut y);
    let b = y[1] / r[(1, 1)];
    let a0 = (y[0] - r[(0, 1)] * b) / r[(0, 0)];
    Ok(Vector2::new(a0, b))
}

//! Frequency-domain analysis of the force loop.
//!
//! The loop is opened at the force-error junction:
//! `L(s) = PI(s)·C·G_inner(s)·K_E·Padé₂(T_d s)`.

use std::f64::consts::PI;
use std::ops::{Add, Mul};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::control::{InnerLoopModel, PiGains};
use crate::error::{config, domain, Error, Result};

/// Real polynomial, coefficients in descending degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poly(pub Vec<f64>);

impl Poly {
    pub fn new(mut coeffs: Vec<f64>) -> Self {
        let lead = coeffs.iter().position(|c| *c != 0.0).unwrap_or(coeffs.len().saturating_sub(1));
        coeffs.drain(..lead);
        if coeffs.is_empty() {
            coeffs.push(0.0);
        }
        Self(coeffs)
    }

    pub fn constant(c: f64) -> Self {
        Self(vec![c])
    }

    pub fn degree(&self) -> usize {
        self.0.len() - 1
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|c| *c == 0.0)
    }

    pub fn eval(&self, s: Complex64) -> Complex64 {
        self.0.iter().fold(Complex64::new(0.0, 0.0), |acc, c| acc * s + c)
    }

    pub fn scale(&self, k: f64) -> Self {
        Self::new(self.0.iter().map(|c| c * k).collect())
    }

    /// Roots from the eigenvalues of the companion matrix.
    pub fn roots(&self) -> Vec<Complex64> {
        let n = self.degree();
        if n == 0 {
            return Vec::new();
        }
        let lead = self.0[0];
        let mut m = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            m[(0, j)] = -self.0[j + 1] / lead;
        }
        for i in 1..n {
            m[(i, i - 1)] = 1.0;
        }
        m.complex_eigenvalues().iter().copied().collect()
    }
}

impl<'a> Mul<&'a Poly> for &'a Poly {
    type Output = Poly;
    fn mul(self, rhs: &Poly) -> Poly {
        let mut out = vec![0.0; self.0.len() + rhs.0.len() - 1];
        for (i, a) in self.0.iter().enumerate() {
            for (j, b) in rhs.0.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Poly::new(out)
    }
}

impl<'a> Add<&'a Poly> for &'a Poly {
    type Output = Poly;
    fn add(self, rhs: &Poly) -> Poly {
        let n = self.0.len().max(rhs.0.len());
        let pad = |p: &Poly| {
            let mut v = vec![0.0; n - p.0.len()];
            v.extend_from_slice(&p.0);
            v
        };
        Poly::new(pad(self).iter().zip(pad(rhs)).map(|(a, b)| a + b).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationalTF {
    pub num: Poly,
    pub den: Poly,
}

impl RationalTF {
    pub fn new(num: Vec<f64>, den: Vec<f64>) -> Result<Self> {
        let tf = Self {
            num: Poly::new(num),
            den: Poly::new(den),
        };
        if tf.den.is_zero() {
            return Err(domain("transfer function denominator is zero"));
        }
        if !tf.num.0.iter().chain(&tf.den.0).all(|c| c.is_finite()) {
            return Err(domain("transfer function coefficients must be finite"));
        }
        Ok(tf)
    }

    pub fn gain(k: f64) -> Self {
        Self {
            num: Poly::constant(k),
            den: Poly::constant(1.0),
        }
    }

    pub fn eval(&self, s: Complex64) -> Complex64 {
        self.num.eval(s) / self.den.eval(s)
    }

    /// Response at `f` Hz.
    pub fn at_hz(&self, f: f64) -> Complex64 {
        self.eval(Complex64::new(0.0, 2.0 * PI * f))
    }

    pub fn series(&self, other: &RationalTF) -> RationalTF {
        RationalTF {
            num: &self.num * &other.num,
            den: &self.den * &other.den,
        }
    }

    /// Roots of den + num: the poles of L/(1 + L).
    pub fn closed_loop_poles(&self) -> Vec<Complex64> {
        (&self.den + &self.num).roots()
    }
}

/// (T²s² − 6Ts + 12)/(T²s² + 6Ts + 12).
pub fn pade2(delay: f64) -> Result<RationalTF> {
    if !(delay >= 0.0 && delay.is_finite()) {
        return Err(domain(format!("delay {delay} s must be non-negative")));
    }
    let t2 = delay * delay;
    RationalTF::new(vec![t2, -6.0 * delay, 12.0], vec![t2, 6.0 * delay, 12.0])
}

/// PI(s) = (kp·s + ki)/s.
pub fn pi_tf(g: &PiGains) -> RationalTF {
    RationalTF {
        num: Poly::new(vec![g.kp, g.ki]),
        den: Poly::new(vec![1.0, 0.0]),
    }
}

/// ω²/(s² + 2ζωs + ω²).
pub fn inner_tf(m: &InnerLoopModel) -> RationalTF {
    let w = m.natural_frequency;
    RationalTF {
        num: Poly::constant(w * w),
        den: Poly::new(vec![1.0, 2.0 * m.damping_ratio * w, w * w]),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopModel {
    pub pi: PiGains,
    /// C, m/N.
    pub compliance_est: f64,
    /// K_E, N/m.
    pub true_stiffness: f64,
    pub inner: InnerLoopModel,
    /// Lumped loop delay T_d, s.
    pub delay: f64,
}

impl Default for LoopModel {
    fn default() -> Self {
        let inner = InnerLoopModel::default();
        Self {
            pi: crate::control::tune_critical(&inner, 0.1, crate::control::DEFAULT_PI_ZERO_TIME)
                .expect("default loop tunes"),
            compliance_est: 1.0 / 1000.0,
            true_stiffness: 1000.0,
            inner,
            delay: 0.1,
        }
    }
}

impl LoopModel {
    pub fn validate(&self) -> Result<()> {
        self.pi.validate()?;
        self.inner.validate()?;
        if !(self.compliance_est > 0.0 && self.true_stiffness > 0.0 && self.delay >= 0.0) {
            return Err(config("loop compliance and stiffness must be positive, delay non-negative"));
        }
        Ok(())
    }

    /// Same loop with the stiffness estimate at `ratio`·K_E.
    pub fn with_ratio(&self, ratio: f64) -> Self {
        Self {
            compliance_est: 1.0 / (ratio * self.true_stiffness),
            ..self.clone()
        }
    }

    /// K̂/K_E implied by the configured compliance.
    pub fn ratio(&self) -> f64 {
        1.0 / (self.compliance_est * self.true_stiffness)
    }
}

pub fn compose_open_loop(m: &LoopModel) -> Result<RationalTF> {
    m.validate()?;
    Ok(pi_tf(&m.pi)
        .series(&RationalTF::gain(m.compliance_est * m.true_stiffness))
        .series(&inner_tf(&m.inner))
        .series(&pade2(m.delay)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BodePoint {
    /// Hz
    pub f: f64,
    pub magnitude_db: f64,
    pub phase_deg: f64,
    /// Evaluated on a pole; magnitude is infinite and phase carried over.
    pub at_pole: bool,
}

fn unwrap_near(raw_deg: f64, reference: f64) -> f64 {
    raw_deg + 360.0 * ((reference - raw_deg) / 360.0).round()
}

/// Magnitude and continuously unwrapped phase at each frequency (Hz).
pub fn bode(tf: &RationalTF, freqs: &[f64]) -> Result<Vec<BodePoint>> {
    if freqs.iter().any(|f| !(*f > 0.0)) {
        return Err(domain("Bode frequencies must be positive"));
    }
    let mut prev: Option<f64> = None;
    Ok(freqs
        .iter()
        .map(|&f| {
            let h = tf.at_hz(f);
            if !h.is_finite() {
                return BodePoint {
                    f,
                    magnitude_db: f64::INFINITY,
                    phase_deg: prev.unwrap_or(0.0),
                    at_pole: true,
                };
            }
            let raw = h.arg().to_degrees();
            let phase = prev.map_or(raw, |p| unwrap_near(raw, p));
            prev = Some(phase);
            BodePoint {
                f,
                magnitude_db: 20.0 * h.norm().log10(),
                phase_deg: phase,
                at_pole: false,
            }
        })
        .collect())
}

pub fn logspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let (a, b) = (lo.log10(), hi.log10());
    (0..points)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (points.max(2) - 1) as f64))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    /// Hz
    pub f_lo: f64,
    /// Hz
    pub f_hi: f64,
    pub points: usize,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            f_lo: 0.01,
            f_hi: 1000.0,
            points: 2000,
        }
    }
}

/// Margins and crossovers. `None` means no crossing exists (unbounded
/// margin) within the expanded sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginReport {
    pub gain_margin_db: Option<f64>,
    pub phase_margin_deg: Option<f64>,
    /// Hz, where |L| = 1.
    pub gain_crossover: Option<f64>,
    /// Hz, where the phase passes −180° (mod 360°).
    pub phase_crossover: Option<f64>,
    pub stable: bool,
}

const EXPANSION_LIMIT: f64 = 1e6;

fn bisect(mut lo: f64, mut hi: f64, mut g: impl FnMut(f64) -> f64) -> f64 {
    let glo = g(lo);
    // Geometric bisection to 1e-9 relative; well inside the 1e-6 target.
    while hi / lo - 1.0 > 1e-9 {
        let mid = (lo * hi).sqrt();
        if (g(mid) > 0.0) == (glo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

/// Gain and phase margins by sweep plus bisection refinement.
pub fn margins(tf: &RationalTF, sweep: Sweep) -> Result<MarginReport> {
    if !(sweep.f_lo > 0.0 && sweep.f_hi > sweep.f_lo && sweep.points >= 2) {
        return Err(domain("sweep needs 0 < f_lo < f_hi and at least two points"));
    }
    let (mut lo, mut hi) = (sweep.f_lo, sweep.f_hi);
    // Points per decade stay fixed as the range grows.
    let density = sweep.points as f64 / (hi / lo).log10();
    loop {
        let n = ((hi / lo).log10() * density).ceil() as usize + 1;
        let pts = bode(tf, &logspace(lo, hi, n))?;
        let mut gm: Option<(f64, f64)> = None;
        let mut pm: Option<(f64, f64)> = None;
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if a.at_pole || b.at_pole {
                continue;
            }
            if (a.magnitude_db > 0.0) != (b.magnitude_db > 0.0) {
                let f = bisect(a.f, b.f, |f| tf.at_hz(f).norm().log10());
                let phase = unwrap_near(tf.at_hz(f).arg().to_degrees(), a.phase_deg);
                let margin = 180.0 + phase - 360.0 * ((180.0 + phase) / 360.0).round();
                if pm.is_none_or(|(m, _)| margin < m) {
                    pm = Some((margin, f));
                }
            }
            // Offset so that every −180 + 360k line sits on a multiple of 360.
            let k = ((a.phase_deg + 180.0) / 360.0).floor();
            for line in [k, k + 1.0].map(|k| 360.0 * k - 180.0) {
                let (da, db) = (a.phase_deg - line, b.phase_deg - line);
                if da != 0.0 && (da > 0.0) != (db > 0.0) {
                    let f = bisect(a.f, b.f, |f| unwrap_near(tf.at_hz(f).arg().to_degrees(), a.phase_deg) - line);
                    let margin = -20.0 * tf.at_hz(f).norm().log10();
                    if gm.is_none_or(|(m, _)| margin < m) {
                        gm = Some((margin, f));
                    }
                }
            }
        }
        let bracketed = gm.is_some() && pm.is_some();
        let can_grow = lo > sweep.f_lo / EXPANSION_LIMIT || hi < sweep.f_hi * EXPANSION_LIMIT;
        if bracketed || !can_grow {
            let stable = gm.is_none_or(|(m, _)| m > 0.0) && pm.is_none_or(|(m, _)| m > 0.0);
            return Ok(MarginReport {
                gain_margin_db: gm.map(|g| g.0),
                phase_margin_deg: pm.map(|p| p.0),
                gain_crossover: pm.map(|p| p.1),
                phase_crossover: gm.map(|g| g.1),
                stable,
            });
        }
        lo = (lo / 10.0).max(sweep.f_lo / EXPANSION_LIMIT);
        hi = (hi * 10.0).min(sweep.f_hi * EXPANSION_LIMIT);
    }
}

/// True when every closed-loop pole lies in the open left half-plane.
pub fn closed_loop_stable(tf: &RationalTF) -> bool {
    tf.closed_loop_poles().iter().all(|p| p.re < 0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MarginRow {
    /// K̂/K_E
    pub ratio: f64,
    #[serde(flatten)]
    pub report: MarginReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MarginTable {
    pub rows: Vec<MarginRow>,
    /// Gain margin nondecreasing along the (sorted) ratio grid.
    pub gain_margin_monotone: bool,
}

pub fn margin_sweep(m: &LoopModel, ratios: &[f64], sweep: Sweep) -> Result<MarginTable> {
    if ratios.is_empty() {
        return Err(config("ratio grid is empty"));
    }
    if ratios.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
        return Err(domain("stiffness ratios must be positive"));
    }
    let rows = ratios
        .iter()
        .map(|&ratio| {
            Ok(MarginRow {
                ratio,
                report: margins(&compose_open_loop(&m.with_ratio(ratio))?, sweep)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sorted: Vec<_> = rows.iter().collect();
    sorted.sort_by(|a, b| a.ratio.total_cmp(&b.ratio));
    let gm = |r: &MarginRow| r.report.gain_margin_db.unwrap_or(f64::INFINITY);
    let gain_margin_monotone = sorted.windows(2).all(|w| gm(w[1]) >= gm(w[0]) - 1e-9);
    Ok(MarginTable {
        rows,
        gain_margin_monotone,
    })
}

/// Smallest K̂/K_E that keeps the loop stable, to `rel_tol`.
pub fn stability_boundary(m: &LoopModel, lo: f64, hi: f64, rel_tol: f64, sweep: Sweep) -> Result<f64> {
    let stable = |r: f64| -> Result<bool> { Ok(margins(&compose_open_loop(&m.with_ratio(r))?, sweep)?.stable) };
    let (mut lo, mut hi) = (lo, hi);
    if stable(lo)? || !stable(hi)? {
        return Err(Error::Numerical(format!(
            "stability boundary not bracketed by ratios [{lo}, {hi}]"
        )));
    }
    while hi / lo - 1.0 > rel_tol {
        let mid = (lo * hi).sqrt();
        if stable(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

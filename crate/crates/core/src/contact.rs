//! Compliant environment models.
//!
//! Force laws (Hertz, unilateral spring-damper), spatially blended stiffness
//! fields, surface motion and force-based normal estimation. Everything here
//! is a pure function of immutable values.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Force magnitude below which the contact normal is considered undefined.
pub const DEFAULT_FORCE_FLOOR: f64 = 0.05;

/// Sphere-on-half-space elastic contact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HertzParams {
    /// Effective contact radius, m.
    pub effective_radius: f64,
    /// Young's modulus, Pa.
    pub young_modulus: f64,
    pub poisson_ratio: f64,
}

impl HertzParams {
    pub fn new(effective_radius: f64, young_modulus: f64, poisson_ratio: f64) -> Result<Self> {
        let p = Self {
            effective_radius,
            young_modulus,
            poisson_ratio,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.effective_radius > 0.0 && self.effective_radius.is_finite()) {
            return Err(domain("effective radius must be positive"));
        }
        if !(self.young_modulus > 0.0 && self.young_modulus.is_finite()) {
            return Err(domain("Young's modulus must be positive"));
        }
        if !(0.0..1.0).contains(&self.poisson_ratio) {
            return Err(domain("Poisson ratio must lie in [0, 1)"));
        }
        Ok(())
    }

    fn reduced_modulus(&self) -> f64 {
        self.young_modulus / (1.0 - self.poisson_ratio * self.poisson_ratio)
    }
}

/// Normal force for an indentation `depth` (m): 4·√R·E·δ^1.5 / (3(1−ν²)).
pub fn hertz_force(p: &HertzParams, depth: f64) -> Result<f64> {
    if depth.is_nan() || depth < 0.0 {
        return Err(domain(format!("indentation depth {depth} must be non-negative")));
    }
    Ok(4.0 * p.effective_radius.sqrt() * p.reduced_modulus() * depth.powf(1.5) / 3.0)
}

/// Local stiffness dF/dδ = 2·√R·E·√δ / (1−ν²). Undefined at zero depth.
pub fn hertz_tangent_stiffness(p: &HertzParams, depth: f64) -> Result<f64> {
    if depth.is_nan() || depth <= 0.0 {
        return Err(domain(format!(
            "tangent stiffness needs positive depth, got {depth}"
        )));
    }
    Ok(2.0 * p.effective_radius.sqrt() * p.reduced_modulus() * depth.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpringDamperParams {
    /// N/m
    pub stiffness: f64,
    /// N·s/m
    pub damping: f64,
}

impl SpringDamperParams {
    pub fn new(stiffness: f64, damping: f64) -> Result<Self> {
        if !(stiffness >= 0.0 && stiffness.is_finite()) {
            return Err(domain("stiffness must be non-negative"));
        }
        if !(damping >= 0.0 && damping.is_finite()) {
            return Err(domain("damping must be non-negative"));
        }
        Ok(Self { stiffness, damping })
    }
}

/// Unilateral spring-damper: K·δ + D·δ̇ while indented, zero once separated.
pub fn spring_damper_force(p: &SpringDamperParams, depth: f64, depth_rate: f64) -> f64 {
    if depth < 0.0 {
        0.0
    } else {
        p.stiffness * depth + p.damping * depth_rate
    }
}

/// Normal force law evaluated at one contact point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ContactLaw {
    SpringDamper(SpringDamperParams),
    Hertz(HertzParams),
}

impl ContactLaw {
    /// Compressive force for indentation `depth`; zero when separated.
    pub fn force(&self, depth: f64, depth_rate: f64) -> f64 {
        match self {
            Self::SpringDamper(p) => spring_damper_force(p, depth, depth_rate),
            Self::Hertz(p) => hertz_force(p, depth.max(0.0)).unwrap_or(0.0),
        }
    }

    /// Local dF/dδ at `depth`.
    pub fn tangent_stiffness(&self, depth: f64) -> Result<f64> {
        match self {
            Self::SpringDamper(p) => Ok(p.stiffness),
            Self::Hertz(p) => hertz_tangent_stiffness(p, depth),
        }
    }
}

/// Axis-aligned rectangle in surface coordinates (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Region {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64) -> Result<Self> {
        let r = Self {
            x_min,
            x_max,
            y_min,
            y_max,
        };
        r.validate()?;
        Ok(r)
    }

    fn validate(&self) -> Result<()> {
        if !(self.x_min < self.x_max && self.y_min < self.y_max) {
            return Err(domain(format!("degenerate region {self:?}")));
        }
        Ok(())
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Patch {
    pub region: Region,
    pub params: SpringDamperParams,
    /// Linear stiffness slope (N/m per m) along x and y, measured from the
    /// region's lower corner. Zero for a uniform patch.
    #[serde(default)]
    pub stiffness_gradient: [f64; 2],
}

impl Patch {
    pub fn uniform(region: Region, params: SpringDamperParams) -> Self {
        Self {
            region,
            params,
            stiffness_gradient: [0.0, 0.0],
        }
    }

    fn local_params(&self, x: f64, y: f64) -> SpringDamperParams {
        let [gx, gy] = self.stiffness_gradient;
        let k = self.params.stiffness
            + gx * (x - self.region.x_min)
            + gy * (y - self.region.y_min);
        SpringDamperParams {
            stiffness: k.max(0.0),
            damping: self.params.damping,
        }
    }
}

/// Periodic scaling of the whole field: 1 + depth·sin(2πft).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemporalModulation {
    pub depth: f64,
    pub frequency: f64,
}

impl TemporalModulation {
    pub fn scale(&self, t: f64) -> f64 {
        1.0 + self.depth * (2.0 * PI * self.frequency * t).sin()
    }
}

/// Piecewise environment impedance K(x, y, t), D(x, y, t).
///
/// Neighbouring patches are blended with a smoothstep that spans
/// `blend_width` on either side of a shared border, so the field is
/// continuous and equals the patch value further than `blend_width` from
/// any border. A zero blend width reproduces hard borders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StiffnessField {
    pub patches: Vec<Patch>,
    pub blend_width: f64,
    #[serde(default)]
    pub temporal_modulation: Option<TemporalModulation>,
}

impl StiffnessField {
    pub fn new(patches: Vec<Patch>, blend_width: f64) -> Result<Self> {
        let f = Self {
            patches,
            blend_width,
            temporal_modulation: None,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn uniform(region: Region, params: SpringDamperParams) -> Self {
        Self {
            patches: vec![Patch::uniform(region, params)],
            blend_width: 0.0,
            temporal_modulation: None,
        }
    }

    /// Equal-width patches laid side by side along x.
    pub fn strip(
        x_start: f64,
        patch_length: f64,
        y_range: (f64, f64),
        params: &[SpringDamperParams],
        blend_width: f64,
    ) -> Result<Self> {
        let patches = params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let x0 = x_start + i as f64 * patch_length;
                Ok(Patch::uniform(
                    Region::new(x0, x0 + patch_length, y_range.0, y_range.1)?,
                    *p,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(patches, blend_width)
    }

    pub fn with_modulation(mut self, m: TemporalModulation) -> Result<Self> {
        self.temporal_modulation = Some(m);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patches.is_empty() {
            return Err(domain("stiffness field needs at least one patch"));
        }
        if !(self.blend_width >= 0.0 && self.blend_width.is_finite()) {
            return Err(domain("blend width must be non-negative"));
        }
        for p in &self.patches {
            p.region.validate()?;
            SpringDamperParams::new(p.params.stiffness, p.params.damping)?;
        }
        if let Some(m) = &self.temporal_modulation {
            if !(0.0..=1.0).contains(&m.depth) || !(m.frequency >= 0.0) {
                return Err(domain("temporal modulation depth must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Bounding box of all patches.
    pub fn bounds(&self) -> Region {
        self.patches.iter().skip(1).fold(self.patches[0].region, |b, p| Region {
            x_min: b.x_min.min(p.region.x_min),
            x_max: b.x_max.max(p.region.x_max),
            y_min: b.y_min.min(p.region.y_min),
            y_max: b.y_max.max(p.region.y_max),
        })
    }

    /// Largest minus smallest nominal patch stiffness.
    pub fn stiffness_range(&self) -> f64 {
        let (lo, hi) = self
            .patches
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.params.stiffness), hi.max(p.params.stiffness))
            });
        hi - lo
    }

    pub fn sample(&self, x: f64, y: f64, t: f64) -> Result<SpringDamperParams> {
        field_sample(self, x, y, t)
    }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Membership weight of coordinate `v` in the interval [lo, hi].
fn interval_weight(v: f64, lo: f64, hi: f64, half_width: f64) -> f64 {
    if half_width == 0.0 {
        let edge = |d: f64| match d.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Equal) => 0.5,
            _ => 0.0,
        };
        edge(v - lo) * edge(hi - v)
    } else {
        let span = 2.0 * half_width;
        smoothstep((v - lo) / span + 0.5) * smoothstep((hi - v) / span + 0.5)
    }
}

/// Impedance at surface point (x, y) and time t.
pub fn field_sample(f: &StiffnessField, x: f64, y: f64, t: f64) -> Result<SpringDamperParams> {
    let b = f.bounds();
    if !b.contains(x, y) {
        return Err(Error::Range(format!(
            "({x}, {y}) lies outside the field bounds [{}, {}]x[{}, {}]",
            b.x_min, b.x_max, b.y_min, b.y_max
        )));
    }
    let mut total = 0.0;
    let mut k = 0.0;
    let mut d = 0.0;
    for p in &f.patches {
        let r = &p.region;
        // Normalising by the total weight keeps outer field edges at full patch value.
        let w = interval_weight(x, r.x_min, r.x_max, f.blend_width)
            * interval_weight(y, r.y_min, r.y_max, f.blend_width);
        if w > 0.0 {
            let local = p.local_params(x, y);
            total += w;
            k += w * local.stiffness;
            d += w * local.damping;
        }
    }
    if total <= 0.0 {
        return Err(Error::Range(format!("({x}, {y}) is not covered by any patch")));
    }
    let scale = f.temporal_modulation.map_or(1.0, |m| m.scale(t));
    Ok(SpringDamperParams {
        stiffness: (k / total * scale).max(0.0),
        damping: (d / total * scale).max(0.0),
    })
}

/// Sinusoidal surface heave along the contact normal.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceMotion {
    pub amplitude: f64,
    pub frequency: f64,
    pub rest_height: f64,
}

impl SurfaceMotion {
    pub fn fixed(rest_height: f64) -> Self {
        Self {
            amplitude: 0.0,
            frequency: 0.0,
            rest_height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.frequency >= 0.0) {
            return Err(domain("surface amplitude and frequency must be non-negative"));
        }
        Ok(())
    }
}

/// Surface position and velocity at time t.
pub fn surface_state(m: &SurfaceMotion, t: f64) -> (f64, f64) {
    let w = 2.0 * PI * m.frequency;
    (
        m.rest_height + m.amplitude * (w * t).sin(),
        m.amplitude * w * (w * t).cos(),
    )
}

/// Kinematic contact configuration in 3-D.
#[derive(Debug, Clone, PartialEq)]
pub struct ContactState {
    pub end_effector_pos: Vector3<f64>,
    pub end_effector_vel: Vector3<f64>,
    pub surface_pos: Vector3<f64>,
    pub surface_vel: Vector3<f64>,
    /// Points from the environment into the tool.
    pub normal: Unit<Vector3<f64>>,
}

impl ContactState {
    /// N = n̄n̄ᵀ.
    pub fn projection(&self) -> Matrix3<f64> {
        self.normal.into_inner() * self.normal.transpose()
    }

    /// Penetration of the tool below the surface along the normal.
    pub fn depth(&self) -> f64 {
        -self.normal.dot(&(self.end_effector_pos - self.surface_pos))
    }

    pub fn depth_rate(&self) -> f64 {
        -self.normal.dot(&(self.end_effector_vel - self.surface_vel))
    }

    /// Force on the tool: −N(K(x_e − z_s) + D(ẋ_e − ż_s)) while indented.
    pub fn force(&self, p: &SpringDamperParams) -> Vector3<f64> {
        if self.depth() < 0.0 {
            return Vector3::zeros();
        }
        let rel = p.stiffness * (self.end_effector_pos - self.surface_pos)
            + p.damping * (self.end_effector_vel - self.surface_vel);
        -(self.projection() * rel)
    }
}

/// Unit contact normal from a (low-pass filtered) force reading.
///
/// Follows the direction of the force acting on the tool, i.e. from the
/// environment into the end-effector. Returns [`Error::NoContact`] when the
/// force is too small to define a direction.
pub fn estimate_normal(filtered_force: &Vector3<f64>, force_floor: f64) -> Result<Unit<Vector3<f64>>> {
    let magnitude = filtered_force.norm();
    if !(magnitude > force_floor) {
        return Err(Error::NoContact {
            magnitude,
            floor: force_floor,
        });
    }
    Ok(Unit::new_normalize(*filtered_force))
}

/// Holds the last valid normal across no-contact intervals.
#[derive(Debug, Clone)]
pub struct NormalTracker {
    floor: f64,
    current: Unit<Vector3<f64>>,
    valid: bool,
}

impl NormalTracker {
    pub fn new(initial: Unit<Vector3<f64>>, floor: f64) -> Self {
        Self {
            floor,
            current: initial,
            valid: false,
        }
    }

    pub fn update(&mut self, filtered_force: &Vector3<f64>) -> Unit<Vector3<f64>> {
        match estimate_normal(filtered_force, self.floor) {
            Ok(n) => {
                self.current = n;
                self.valid = true;
            }
            Err(_) => self.valid = false,
        }
        self.current
    }

    pub fn normal(&self) -> Unit<Vector3<f64>> {
        self.current
    }

    /// Whether the last update produced a fresh estimate.
    pub fn is_fresh(&self) -> bool {
        self.valid
    }
}

/// Scales a probe-derived stiffness to the tool contact: (R/r)·K̂.
pub fn probe_scale(estimated: f64, tool_radius: f64, probe_radius: f64) -> Result<f64> {
    if !(tool_radius > 0.0 && probe_radius > 0.0) {
        return Err(domain(format!(
            "contact radii must be positive (tool {tool_radius}, probe {probe_radius})"
        )));
    }
    Ok(tool_radius / probe_radius * estimated)
}

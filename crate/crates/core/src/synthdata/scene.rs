//! Implicit colon-like tube: a curved cylinder around a sinusoidal
//! centerline, optionally with flat water pools along its floor.
//!
//! World frame: the tube runs along +z, +y points down (towards the floor).

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Synthetic,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub radius: f64,
    /// Lateral amplitude of the centerline.
    pub curvature_amplitude: f64,
    /// Angular frequency of the centerline along z, radians per scene unit.
    pub curvature_frequency: f64,
    pub texture_seed: u64,
    /// Exponent `k` of the `1/distance^k` light falloff.
    pub light_falloff: f64,
    pub light_gain: f64,
    pub style: Style,
    pub resolution: usize,
    pub depth_min: f64,
    pub depth_max: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            radius: 1.0,
            curvature_amplitude: 0.6,
            curvature_frequency: 0.35,
            texture_seed: 0,
            light_falloff: 1.0,
            light_gain: 1.6,
            style: Style::Synthetic,
            resolution: 64,
            depth_min: 0.05,
            depth_max: 10.0,
        }
    }
}

/// Period of the water-pool pattern along z, in radii.
const POOL_PERIOD: f64 = 7.0;
/// Largest rise of the water surface above the tube floor, in radii.
const POOL_RISE: f64 = 0.3;
/// Start of the first pool along z, in radii.
const POOL_OFFSET: f64 = 2.5;
/// Width of the soft transition at the waterline, in radii.
const WATERLINE_BAND: f64 = 0.15;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |d: String| Err(Error::invalid("SceneSpec", d));
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return fail(format!("radius {}", self.radius));
        }
        if !(self.curvature_amplitude >= 0.0 && self.curvature_frequency >= 0.0) {
            return fail("curvature parameters must be >= 0".into());
        }
        if self.curvature_amplitude * self.curvature_frequency > 0.5 {
            return fail("centerline too steep (amplitude * frequency > 0.5)".into());
        }
        if !(self.light_falloff >= 0.0 && self.light_gain > 0.0) {
            return fail("light falloff must be >= 0 and gain > 0".into());
        }
        if self.resolution < 2 {
            return fail(format!("resolution {}", self.resolution));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min && self.depth_max.is_finite()) {
            return fail(format!("depth range [{}, {}]", self.depth_min, self.depth_max));
        }
        Ok(())
    }

    pub fn with_style(mut self, style: Style) -> Self {
        self.style = style;
        self
    }

    /// Centerline point at height `z`.
    pub fn centerline(&self, z: f64) -> Vector3<f64> {
        let (a, w) = (self.curvature_amplitude, self.curvature_frequency);
        Vector3::new(a * (w * z).sin(), 0.5 * a * (0.7 * w * z + 1.0).sin(), z)
    }

    /// Derivative of the centerline with respect to `z`.
    pub fn centerline_tangent(&self, z: f64) -> Vector3<f64> {
        let (a, w) = (self.curvature_amplitude, self.curvature_frequency);
        Vector3::new(a * w * (w * z).cos(), 0.35 * a * w * (0.7 * w * z + 1.0).cos(), 1.0)
    }

    /// How far the water surface sits above the floor at `z`, in `[0, POOL_RISE·r]`.
    fn pool_rise(&self, z: f64) -> f64 {
        if self.style != Style::Real {
            return 0.0;
        }
        let phase = 2.0 * std::f64::consts::PI * (z / self.radius - POOL_OFFSET) / POOL_PERIOD;
        let s = phase.sin().max(0.0);
        POOL_RISE * self.radius * s * s * s
    }

    /// Signed distance bound: positive inside the lumen, zero on the wall or
    /// water surface.
    pub fn field(&self, p: &Vector3<f64>) -> f64 {
        self.field_parts(p).0
    }

    /// `(field, wetness)`: wetness is 1 on open water and fades to 0 over a
    /// short band approaching the waterline.
    pub(crate) fn field_parts(&self, p: &Vector3<f64>) -> (f64, f64) {
        let c = self.centerline(p.z);
        let (dx, dy) = (p.x - c.x, p.y - c.y);
        let wall = self.radius - (dx * dx + dy * dy).sqrt();
        let rise = self.pool_rise(p.z);
        if rise > 0.0 {
            let water = (self.radius - rise) - dy;
            if water < wall {
                let t = ((wall - water) / (WATERLINE_BAND * self.radius)).min(1.0);
                return (water, t * t * (3.0 - 2.0 * t));
            }
        }
        (wall, 0.0)
    }

    /// Upper bound on the gradient norm of [`Self::field`].
    pub fn lipschitz(&self) -> f64 {
        let slope = self.curvature_amplitude * self.curvature_frequency;
        let pool_slope = if self.style == Style::Real {
            POOL_RISE * 3.0 * 2.0 * std::f64::consts::PI / POOL_PERIOD
        } else {
            0.0
        };
        1.0 + 2.0 * slope + pool_slope
    }

    /// Outward-facing unit normal of the wall (pointing into the lumen).
    pub fn normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let h = 1e-6 * self.radius;
        let g = Vector3::new(
            self.field(&(p + Vector3::x() * h)) - self.field(&(p - Vector3::x() * h)),
            self.field(&(p + Vector3::y() * h)) - self.field(&(p - Vector3::y() * h)),
            self.field(&(p + Vector3::z() * h)) - self.field(&(p - Vector3::z() * h)),
        );
        g.normalize()
    }
}

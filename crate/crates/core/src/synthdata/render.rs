//! Per-pixel ray marching of the tube with co-located point-light shading.

use nalgebra::Vector3;

use super::scene::{SceneSpec, Style};
use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose6D, Se3};
use crate::tensor::Tensor;

/// Rendered image, ground-truth depth and camera-to-world pose.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[1, 3, H, W]` RGB in `[0, 1]`, quantized to 8 bits.
    pub image: Tensor,
    /// `[1, 1, H, W]` camera-frame z-depth in scene units, stored at `f32` precision.
    pub depth: Tensor,
    /// Camera-to-world motion in axis-angle form, exactly as written to disk.
    pub pose: Pose6D,
}

impl SyntheticSample {
    pub fn camera_to_world(&self) -> Se3 {
        self.pose.to_se3()
    }
}

/// Minimum clearance between the camera and the wall, in radii.
const MIN_CLEARANCE: f64 = 0.05;
const MIN_STEP: f64 = 2e-3;
const MAX_MARCH_STEPS: usize = 4000;
const BISECTIONS: usize = 48;
const GLARE_LO: f64 = 0.72;
const GLARE_FREQ: f64 = 1.8;
const GLARE_RAMP: f64 = 0.3;
const GLARE_PEAK: f64 = 1.4;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn lattice_value(seed: u64, ix: i64, iy: i64, iz: i64) -> f64 {
    let h = splitmix(seed ^ splitmix((ix as u64).wrapping_mul(0x1f1f_1f1f) ^ splitmix((iy as u64) ^ splitmix(iz as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Smooth value noise in `[0, 1]` with unit lattice spacing.
fn value_noise(seed: u64, p: &Vector3<f64>) -> f64 {
    let fl = p.map(f64::floor);
    let f = p - fl;
    let s = f.map(|t| t * t * (3.0 - 2.0 * t));
    let (ix, iy, iz) = (fl.x as i64, fl.y as i64, fl.z as i64);
    let mut acc = 0.0;
    for corner in 0..8 {
        let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, (corner >> 2) & 1);
        let w = (if dx == 1 { s.x } else { 1.0 - s.x })
            * (if dy == 1 { s.y } else { 1.0 - s.y })
            * (if dz == 1 { s.z } else { 1.0 - s.z });
        acc += w * lattice_value(seed, ix + dx, iy + dy, iz + dz);
    }
    acc
}

fn fractal(seed: u64, p: &Vector3<f64>, freq: f64) -> f64 {
    0.65 * value_noise(seed, &(p * freq)) + 0.35 * value_noise(splitmix(seed), &(p * (2.0 * freq)))
}

/// Surface reflectance at world point `p`.
fn albedo(scene: &SceneSpec, p: &Vector3<f64>, wetness: f64) -> [f64; 3] {
    let seed = scene.texture_seed;
    let inv_r = 1.0 / scene.radius;
    let tone = fractal(seed, p, 1.6 * inv_r);
    let v = 0.55 + 0.45 * tone;
    let mut c = [0.78 * v, 0.62 * v, 0.58 * v];
    if scene.style == Style::Real {
        let vessel_field = value_noise(seed ^ 0xa5a5, &(p * (2.2 * inv_r)));
        let vessel = (-((vessel_field - 0.5) / 0.1).powi(2)).exp();
        let dark = [1.0 - 0.45 * vessel, 1.0 - 0.6 * vessel, 1.0 - 0.55 * vessel];
        let tint = [0.35, 0.3, 0.32];
        for ((v, d), t) in c.iter_mut().zip(dark).zip(tint) {
            *v *= d * (1.0 - wetness * (1.0 - t));
        }
    }
    c
}

/// Coverage in `[0, 1]` of the surface-attached specular blobs at `p`.
fn glare(scene: &SceneSpec, p: &Vector3<f64>) -> f64 {
    if scene.style != Style::Real {
        return 0.0;
    }
    let spot = value_noise(scene.texture_seed ^ 0x5151, &(p * (GLARE_FREQ / scene.radius)));
    let g = ((spot - GLARE_LO) / GLARE_RAMP).clamp(0.0, 1.0);
    g * g * (3.0 - 2.0 * g)
}

/// First hit of the ray `origin + t·dir` with the tube, as `t`, if it lies
/// before `t_max`.
fn march(scene: &SceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>, t_max: f64) -> Option<(f64, f64)> {
    let lip = scene.lipschitz() * dir.norm();
    let mut t = 0.0;
    let mut f = scene.field(origin);
    for _ in 0..MAX_MARCH_STEPS {
        let step = (f / lip).max(MIN_STEP * scene.radius);
        let next = t + step;
        let fn_ = scene.field(&(origin + dir * next));
        if fn_ <= 0.0 {
            let (mut lo, mut hi) = (t, next);
            for _ in 0..BISECTIONS {
                let mid = 0.5 * (lo + hi);
                if scene.field(&(origin + dir * mid)) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let hit = 0.5 * (lo + hi);
            if hit > t_max {
                return None;
            }
            let wetness = scene.field_parts(&(origin + dir * hit)).1;
            return Some((hit, wetness));
        }
        if next > t_max {
            return None;
        }
        t = next;
        f = fn_;
    }
    None
}

/// Rounds to the nearest 8-bit level, as stored on disk.
pub fn quantize_u8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders one frame: ground-truth z-depth clipped to
/// `[depth_min, depth_max]` and a shaded RGB image.
pub fn render_frame(scene: &SceneSpec, camera_to_world: &Se3, k: &CameraIntrinsics) -> Result<SyntheticSample> {
    scene.validate()?;
    let n = scene.resolution;
    let origin = camera_to_world.translation;
    if scene.field(&origin) < MIN_CLEARANCE * scene.radius {
        return Err(Error::CameraOutsideTube {
            position: origin.into(),
        });
    }
    let rot = camera_to_world.rotation;
    let plane = n * n;
    let mut image = vec![0.0; 3 * plane];
    let mut depth = vec![0.0; plane];
    let half = 0.5 * (n as f64 - 1.0);
    let vignette_norm = 2.0 * half * half;
    for v in 0..n {
        for u in 0..n {
            let cam_dir = Vector3::new((u as f64 - k.cx) / k.fx, (v as f64 - k.cy) / k.fy, 1.0);
            let t_max = scene.depth_max;
            let world_dir = rot * cam_dir;
            // With cam_dir.z = 1 the ray parameter equals camera z-depth.
            let idx = v * n + u;
            let Some((t, wetness)) = march(scene, &origin, &world_dir, t_max) else {
                depth[idx] = scene.depth_max;
                continue;
            };
            depth[idx] = t.clamp(scene.depth_min, scene.depth_max);
            let p = origin + world_dir * t;
            let to_cam = -world_dir.normalize();
            let cos = scene.normal(&p).dot(&to_cam).max(0.0);
            let dist = (p - origin).norm();
            let light = scene.light_gain * cos / dist.powf(scene.light_falloff);
            let mut rgb = albedo(scene, &p, wetness).map(|a| a * light);
            if scene.style == Style::Real {
                let r2 = ((u as f64 - half).powi(2) + (v as f64 - half).powi(2)) / vignette_norm;
                rgb = rgb.map(|c| c * (1.0 - 0.25 * r2));
            }
            // Highlights blend towards over-white so their cores saturate.
            let g = glare(scene, &p) * (2.0 / dist.powf(scene.light_falloff)).min(1.0);
            rgb = rgb.map(|c| c * (1.0 - g) + GLARE_PEAK * g);
            for (ch, c) in rgb.iter().enumerate() {
                image[ch * plane + idx] = quantize_u8(*c);
            }
        }
    }
    Ok(SyntheticSample {
        image: Tensor::new([1, 3, n, n], image)?,
        depth: Tensor::new([1, 1, n, n], depth.into_iter().map(|d| d as f32 as f64).collect())?,
        pose: Pose6D::from_se3(camera_to_world),
    })
}

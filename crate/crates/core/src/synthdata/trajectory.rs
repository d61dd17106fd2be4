//! Camera paths advancing along the tube centerline.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::scene::SceneSpec;
use crate::error::Result;
use crate::geometry::{Pose6D, Se3};

/// Mean forward advance per frame, in radii.
pub const FORWARD_STEP: f64 = 0.035;
/// Bound on the lateral camera offset from the centerline, in radii.
const MAX_OFFSET: f64 = 0.3;
/// Bound on the accumulated orientation jitter, in radians.
const MAX_JITTER: f64 = 0.12;
/// Per-frame increment bounds.
const OFFSET_STEP: f64 = 0.006;
const JITTER_STEP: f64 = 0.008;

/// Camera-to-world frame looking along the centerline tangent at `z`,
/// image y as close to world +y as possible.
fn base_frame(scene: &SceneSpec, z: f64) -> Matrix3<f64> {
    let forward = scene.centerline_tangent(z).normalize();
    let down = (Vector3::y() - forward * forward.y).normalize();
    let right = down.cross(&forward);
    Matrix3::from_columns(&[right, down, forward])
}

/// `n` camera-to-world poses starting on the centerline at `z = 0`. Each
/// step advances about `0.035·radius` with bounded random lateral offsets
/// and orientation jitter.
pub fn generate_trajectory(scene: &SceneSpec, n: usize, seed: u64) -> Result<Vec<Se3>> {
    scene.validate()?;
    let r = scene.radius;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = 0.0;
    let mut offset = [0.0f64; 2];
    let mut jitter = [0.0f64; 3];
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            z += FORWARD_STEP * r * rng.gen_range(0.85..1.15);
            for o in &mut offset {
                *o = (0.97 * *o + rng.gen_range(-OFFSET_STEP..OFFSET_STEP) * r).clamp(-MAX_OFFSET * r, MAX_OFFSET * r);
            }
            for j in &mut jitter {
                *j = (0.97 * *j + rng.gen_range(-JITTER_STEP..JITTER_STEP)).clamp(-MAX_JITTER, MAX_JITTER);
            }
        }
        let c = scene.centerline(z);
        let position = c + Vector3::new(offset[0], offset[1], 0.0);
        let wobble = Rotation3::from_scaled_axis(Vector3::from(jitter)).into_inner();
        poses.push(Se3 {
            rotation: base_frame(scene, z) * wobble,
            translation: position,
        });
    }
    Ok(poses)
}

/// Motion taking frame-`a` camera coordinates into frame-`b` camera
/// coordinates, given both camera-to-world poses.
pub fn relative_pose(a: &Se3, b: &Se3) -> Pose6D {
    Pose6D::from_se3(&b.inverse().compose(a))
}

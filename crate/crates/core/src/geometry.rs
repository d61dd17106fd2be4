//! Pinhole camera, rigid motion, and differentiable inverse warping.
//!
//! Pose convention: a [`Pose6D`] maps frame-`t` camera coordinates into
//! frame-`t+1` camera coordinates, `X_{t+1} = R X_t + t`. Camera frames are
//! x right, y down, z forward. Pixel `(u, v)` has its center at integer
//! coordinates.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Projected z is clamped below at this value before dividing.
pub const MIN_PROJECT_Z: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return Err(Error::invalid("CameraIntrinsics", format!("{k:?}")));
        }
        Ok(k)
    }

    /// Centered intrinsics with the given horizontal field of view.
    pub fn centered(height: usize, width: usize, hfov_rad: f64) -> Result<Self> {
        let fx = width as f64 / 2.0 / (hfov_rad / 2.0).tan();
        Self::new(fx, fx, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0)
    }

    /// Checks the principal point lies inside an `height × width` image.
    pub fn validate_for(&self, height: usize, width: usize) -> Result<()> {
        let ok = self.cx > 0.0 && self.cx < width as f64 && self.cy > 0.0 && self.cy < height as f64;
        if !ok {
            return Err(Error::invalid(
                "CameraIntrinsics",
                format!("principal point ({}, {}) outside {width}x{height}", self.cx, self.cy),
            ));
        }
        Ok(())
    }
}

/// Translation plus axis-angle rotation (direction = axis, norm = angle in
/// radians). The rotation norm is kept at most π.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose6D {
    pub t: [f64; 3],
    pub r: [f64; 3],
}

impl Pose6D {
    pub fn new(t: [f64; 3], r: [f64; 3]) -> Result<Self> {
        if t.iter().chain(&r).any(|v| !v.is_finite()) {
            return Err(Error::invalid("Pose6D", format!("non-finite pose t={t:?} r={r:?}")));
        }
        Ok(Self { t, r: wrap_rotation(r) })
    }

    pub fn identity() -> Self {
        Self { t: [0.0; 3], r: [0.0; 3] }
    }

    /// `[tx, ty, tz, rx, ry, rz]`.
    pub fn to_array(&self) -> [f64; 6] {
        [self.t[0], self.t[1], self.t[2], self.r[0], self.r[1], self.r[2]]
    }

    pub fn from_array(v: [f64; 6]) -> Result<Self> {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }

    pub fn angle(&self) -> f64 {
        Vector3::from(self.r).norm()
    }

    /// Rodrigues: `R = I + A[r]× + B[r]×²` with `A = sin θ/θ`,
    /// `B = (1 − cos θ)/θ²`.
    pub fn to_se3(&self) -> Se3 {
        let r = Vector3::from(self.r);
        let s = r.norm_squared();
        let (a, b) = if s.sqrt() < 1e-8 {
            (1.0 - s / 6.0, 0.5 - s / 24.0)
        } else {
            (
                crate::autodiff::sin_over_angle(s),
                crate::autodiff::versine_over_angle_sq(s),
            )
        };
        let k = r.cross_matrix();
        Se3 {
            rotation: Matrix3::identity() + k * a + k * k * b,
            translation: Vector3::from(self.t),
        }
    }

    pub fn from_se3(se3: &Se3) -> Self {
        let rot = Rotation3::from_matrix_unchecked(se3.rotation);
        let r = rot.scaled_axis();
        Self {
            t: se3.translation.into(),
            r: wrap_rotation(r.into()),
        }
    }
}

fn wrap_rotation(r: [f64; 3]) -> [f64; 3] {
    let v = Vector3::from(r);
    let theta = v.norm();
    if theta <= PI {
        return r;
    }
    let turns = (theta / (2.0 * PI)).round();
    let wrapped = theta - 2.0 * PI * turns;
    (v * (wrapped / theta)).into()
}

/// Rigid motion `x ↦ R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Se3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se3 {
        let rt = self.rotation.transpose();
        Se3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Max deviation of `RᵀR` from identity and of `det R` from 1.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        e.max((self.rotation.determinant() - 1.0).abs())
    }
}

/// `[N, H, W, 2]` tensor whose entry `(n, v, u)` is `(u, v)`.
pub fn pixel_lattice(n: usize, h: usize, w: usize) -> Tensor {
    let mut d = Vec::with_capacity(n * h * w * 2);
    for _ in 0..n {
        for v in 0..h {
            for u in 0..w {
                d.push(u as f64);
                d.push(v as f64);
            }
        }
    }
    Tensor::new([n, h, w, 2], d).expect("lattice size")
}

fn ray_factors(k: &CameraIntrinsics, h: usize, w: usize) -> (Tensor, Tensor) {
    let qx = Tensor::from_fn([1, 1, h, w], |i| ((i % w) as f64 - k.cx) / k.fx);
    let qy = Tensor::from_fn([1, 1, h, w], |i| ((i / w) as f64 - k.cy) / k.fy);
    (qx, qy)
}

/// Back-projects a depth map `[N, 1, H, W]` to camera points `[N, 3, H, W]`:
/// `depth · ((u − cx)/fx, (v − cy)/fy, 1)`.
pub fn unproject<'t>(depth: Var<'t>, k: &CameraIntrinsics) -> Result<Var<'t>> {
    let [_, c, h, w] = depth.value().dims4()?;
    if c != 1 {
        return Err(Error::shape("unproject", format!("depth needs 1 channel, got {c}")));
    }
    let tape = depth.tape();
    let (qx, qy) = ray_factors(k, h, w);
    let x = depth.mul(tape.constant(qx))?;
    let y = depth.mul(tape.constant(qy))?;
    Var::concat(&[x, y, depth], 1)
}

/// Output of [`project`].
pub struct Projection<'t> {
    /// `[N, H, W, 2]` pixel coordinates `(u, v)`.
    pub coords: Var<'t>,
    /// `[N, 1, H, W]` point depth `z` (unclamped).
    pub depth: Var<'t>,
    /// `[N, 1, H, W]` constant mask, 1 where `z > 0`.
    pub z_positive: Tensor,
}

/// Pinhole projection of `[N, 3, H, W]` points.
pub fn project<'t>(points: Var<'t>, k: &CameraIntrinsics) -> Result<Projection<'t>> {
    let [n, c, h, w] = points.value().dims4()?;
    if c != 3 {
        return Err(Error::shape("project", format!("points need 3 channels, got {c}")));
    }
    let x = points.slice(1, 0, 1)?;
    let y = points.slice(1, 1, 1)?;
    let z = points.slice(1, 2, 1)?;
    let z_positive = z.value().map(|v| if v > 0.0 { 1.0 } else { 0.0 });
    let zc = z.clamp(MIN_PROJECT_Z, f64::INFINITY)?;
    let u = x.div(zc)?.mul_scalar(k.fx)?.add_scalar(k.cx)?;
    let v = y.div(zc)?.mul_scalar(k.fy)?.add_scalar(k.cy)?;
    let coords = Var::concat(&[u, v], 1)?.permute(&[0, 2, 3, 1])?;
    debug_assert_eq!(coords.shape(), vec![n, h, w, 2]);
    Ok(Projection {
        coords,
        depth: z,
        z_positive,
    })
}

/// Rotation and translation entries of a batch of poses, each `[N, 1, 1, 1]`.
pub struct RigidVars<'t> {
    pub rotation: [[Var<'t>; 3]; 3],
    pub translation: [Var<'t>; 3],
}

/// Differentiable Rodrigues map from a `[N, 6]` pose tensor
/// (`tx ty tz rx ry rz`). Smooth through zero rotation.
pub fn pose_to_rigid<'t>(pose: Var<'t>) -> Result<RigidVars<'t>> {
    let n = match pose.shape().as_slice() {
        &[n, 6] => n,
        other => return Err(Error::shape("pose_to_rigid", format!("pose must be [N, 6], got {other:?}"))),
    };
    let col = |i: usize| pose.slice(1, i, 1).and_then(|v| v.reshape(&[n, 1, 1, 1]));
    let (tx, ty, tz) = (col(0)?, col(1)?, col(2)?);
    let (rx, ry, rz) = (col(3)?, col(4)?, col(5)?);
    let (xx, yy, zz) = (rx.square()?, ry.square()?, rz.square()?);
    let s = xx.add(yy)?.add(zz)?;
    let a = s.sin_over_angle()?;
    let b = s.versine_over_angle_sq()?;
    let (xy, xz, yz) = (rx.mul(ry)?, rx.mul(rz)?, ry.mul(rz)?);
    // R = I + A K + B (r rᵀ − s I)
    let diag = |sq: Var<'t>| sq.sub(s).and_then(|d| d.mul(b)).and_then(|d| d.add_scalar(1.0));
    let off = |lin: Var<'t>, sign: f64, quad: Var<'t>| -> Result<Var<'t>> {
        lin.mul(a)?.mul_scalar(sign)?.add(quad.mul(b)?)
    };
    let rotation = [
        [diag(xx)?, off(rz, -1.0, xy)?, off(ry, 1.0, xz)?],
        [off(rz, 1.0, xy)?, diag(yy)?, off(rx, -1.0, yz)?],
        [off(ry, -1.0, xz)?, off(rx, 1.0, yz)?, diag(zz)?],
    ];
    Ok(RigidVars {
        rotation,
        translation: [tx, ty, tz],
    })
}

/// Applies a batch of `[N, 6]` poses to `[N, 3, H, W]` points.
pub fn transform_points<'t>(points: Var<'t>, pose: Var<'t>) -> Result<Var<'t>> {
    let rigid = pose_to_rigid(pose)?;
    let comps = [points.slice(1, 0, 1)?, points.slice(1, 1, 1)?, points.slice(1, 2, 1)?];
    let mut out = Vec::with_capacity(3);
    for (row, t) in rigid.rotation.iter().zip(rigid.translation) {
        let mut acc = comps[0].mul(row[0])?;
        acc = acc.add(comps[1].mul(row[1])?)?;
        acc = acc.add(comps[2].mul(row[2])?)?;
        out.push(acc.add(t)?);
    }
    Var::concat(&out, 1)
}

/// Everything the photometric and geometric-consistency losses consume.
pub struct WarpArtifacts<'t> {
    /// Frame `t+1` resampled onto the frame-`t` grid.
    pub warped_image: Var<'t>,
    /// Depth of frame-`t` points expressed in frame `t+1`, on the frame-`t` grid.
    pub projected_depth: Var<'t>,
    /// Frame-`t+1` depth bilinearly sampled at the projected coordinates.
    pub resampled_depth: Var<'t>,
    /// `[N, 1, H, W]`: 1 where the projection is in bounds with positive depth.
    pub validity_mask: Tensor,
    /// `[N, H, W, 2]` sampling coordinates in frame `t+1`.
    pub coords: Var<'t>,
}

impl WarpArtifacts<'_> {
    pub fn valid_count(&self) -> usize {
        self.validity_mask.data().iter().filter(|&&m| m > 0.0).count()
    }
}

/// Inverse-warps frame `t+1` into frame `t` using `depth_t` and the batch of
/// poses `[N, 6]` taking frame-`t` coordinates to frame `t+1`.
pub fn compute_warp<'t>(
    depth_t: Var<'t>,
    image_t1: Var<'t>,
    depth_t1: Var<'t>,
    pose: Var<'t>,
    k: &CameraIntrinsics,
) -> Result<WarpArtifacts<'t>> {
    let [n, _, h, w] = depth_t.value().dims4()?;
    let [ni, _, hi, wi] = image_t1.value().dims4()?;
    let [nd, _, hd, wd] = depth_t1.value().dims4()?;
    if (ni, hi, wi) != (n, h, w) || (nd, hd, wd) != (n, h, w) {
        return Err(Error::shape("compute_warp", "frames and depths must share [N, _, H, W]"));
    }
    let tape: &'t Tape = depth_t.tape();
    let points = unproject(depth_t, k)?;
    let moved = transform_points(points, pose)?;
    let here = project(points, k)?;
    let there = project(moved, k)?;
    // Written as an offset from the pixel lattice so identity motion
    // reproduces the lattice exactly.
    let offset = there.coords.sub(here.coords)?;
    let coords = tape.constant(pixel_lattice(n, h, w)).add(offset)?;
    let (warped_image, in_bounds) = image_t1.grid_sample(coords)?;
    let (resampled_depth, _) = depth_t1.grid_sample(coords)?;
    let mask: Vec<f64> = in_bounds
        .data()
        .iter()
        .zip(there.z_positive.data())
        .map(|(&a, &b)| a * b)
        .collect();
    Ok(WarpArtifacts {
        warped_image,
        projected_depth: there.depth,
        resampled_depth,
        validity_mask: Tensor::new([n, 1, h, w], mask)?,
        coords,
    })
}

/// Stacks poses into the `[N, 6]` layout used by [`compute_warp`].
pub fn poses_tensor(poses: &[Pose6D]) -> Tensor {
    let data = poses.iter().flat_map(|p| p.to_array()).collect();
    Tensor::new([poses.len(), 6], data).expect("six values per pose")
}

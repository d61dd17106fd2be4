use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use taskgap::autodiff::Tape;
use taskgap::geometry::{compute_warp, pixel_lattice, poses_tensor, project, unproject, CameraIntrinsics, Pose6D, Se3};
use taskgap::gradcheck::{finite_diff_check, DEFAULT_EPS};
use taskgap::tensor::Tensor;

fn k16() -> CameraIntrinsics {
    CameraIntrinsics::centered(16, 16, std::f64::consts::FRAC_PI_2).unwrap()
}

/// Matrix exponential of the skew matrix by a 30-term power series.
fn exp_series(r: [f64; 3]) -> Matrix3<f64> {
    let k = Vector3::from(r).cross_matrix();
    let mut term = Matrix3::identity();
    let mut sum = Matrix3::identity();
    for n in 1..30 {
        term = term * k / n as f64;
        sum += term;
    }
    sum
}

fn max_diff(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (a - b).abs().max()
}

fn vec3() -> impl Strategy<Value = [f64; 3]> {
    prop::array::uniform3(-1.0f64..1.0)
}

fn pose() -> impl Strategy<Value = Pose6D> {
    (vec3(), prop::array::uniform3(-1.5f64..1.5)).prop_map(|(t, r)| Pose6D::new(t, r).unwrap())
}

#[test]
fn zero_pose_is_identity() {
    let se3 = Pose6D::identity().to_se3();
    assert_eq!(se3.rotation, Matrix3::identity());
    assert_eq!(se3.translation, Vector3::zeros());
}

#[test]
fn quarter_turn_about_z() {
    let se3 = Pose6D::new([0.0; 3], [0.0, 0.0, std::f64::consts::FRAC_PI_2]).unwrap().to_se3();
    let p = se3.apply(&Vector3::new(1.0, 0.0, 0.0));
    assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
}

#[test]
fn non_finite_pose_is_rejected() {
    assert!(Pose6D::new([f64::NAN, 0.0, 0.0], [0.0; 3]).is_err());
    assert!(Pose6D::new([0.0; 3], [0.0, f64::INFINITY, 0.0]).is_err());
}

proptest! {
    #[test]
    fn rodrigues_matches_power_series(p in pose()) {
        let se3 = p.to_se3();
        prop_assert!(max_diff(&se3.rotation, &exp_series(p.r)) < 1e-10);
        prop_assert!(se3.orthonormality_error() < 1e-10);
        prop_assert!((se3.rotation.determinant() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn small_angles_match_power_series(r in prop::array::uniform3(-1e-7f64..1e-7)) {
        let se3 = Pose6D::new([0.0; 3], r).unwrap().to_se3();
        prop_assert!(max_diff(&se3.rotation, &exp_series(r)) < 1e-12);
    }

    #[test]
    fn compose_with_inverse_is_identity(p in pose()) {
        let a = p.to_se3();
        let id = Se3::identity();
        for c in [a.compose(&a.inverse()), a.inverse().compose(&a)] {
            prop_assert!(max_diff(&c.rotation, &id.rotation) < 1e-12);
            prop_assert!(c.translation.norm() < 1e-12);
        }
        let back = a.inverse().inverse();
        prop_assert!(max_diff(&back.rotation, &a.rotation) < 1e-12);
        prop_assert!((back.translation - a.translation).norm() < 1e-12);
    }

    #[test]
    fn composition_applies_right_to_left(pa in pose(), pb in pose(), x in vec3()) {
        let (a, b) = (pa.to_se3(), pb.to_se3());
        let x = Vector3::from(x);
        let lhs = a.compose(&b).apply(&x);
        let rhs = a.apply(&b.apply(&x));
        prop_assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn pose_survives_se3_round_trip(p in pose()) {
        let back = Pose6D::from_se3(&p.to_se3());
        for (u, v) in p.to_array().iter().zip(back.to_array()) {
            prop_assert!((u - v).abs() < 1e-10);
        }
    }

    #[test]
    fn project_inverts_unproject(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let depth = Tensor::from_fn([2, 1, 16, 16], |_| rng.gen_range(0.05..10.0));
        let tape = Tape::new();
        let points = unproject(tape.constant(depth.clone()), &k16()).unwrap();
        let proj = project(points, &k16()).unwrap();
        let lattice = pixel_lattice(2, 16, 16);
        for (a, b) in proj.coords.value().data().iter().zip(lattice.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in proj.depth.value().data().iter().zip(depth.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn unproject_inverts_project(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pts = Tensor::from_fn([1, 3, 4, 4], |i| {
            if i / 16 == 2 { rng.gen_range(0.5..5.0) } else { rng.gen_range(-2.0..2.0) }
        });
        let k = k16();
        let tape = Tape::new();
        let proj = project(tape.constant(pts.clone()), &k).unwrap();
        // Re-assemble points from the projected pixel coordinates.
        let coords = proj.coords.value();
        let z = proj.depth.value();
        for p in 0..16 {
            let (u, v, zz) = (coords.data()[2 * p], coords.data()[2 * p + 1], z.data()[p]);
            let x = (u - k.cx) / k.fx * zz;
            let y = (v - k.cy) / k.fy * zz;
            prop_assert!((x - pts.data()[p]).abs() < 1e-10);
            prop_assert!((y - pts.data()[16 + p]).abs() < 1e-10);
        }
    }
}

#[test]
fn identity_warp_is_bit_exact() {
    let img = Tensor::from_fn([1, 3, 16, 16], |i| ((i * 37) % 101) as f64 / 100.0);
    let depth = Tensor::from_fn([1, 1, 16, 16], |i| 0.5 + (i % 7) as f64);
    let tape = Tape::new();
    let warp = compute_warp(
        tape.constant(depth.clone()),
        tape.constant(img.clone()),
        tape.constant(depth.clone()),
        tape.constant(poses_tensor(&[Pose6D::identity()])),
        &k16(),
    )
    .unwrap();
    assert_eq!(warp.warped_image.value().data(), img.data());
    assert_eq!(warp.projected_depth.value().data(), depth.data());
    assert_eq!(warp.resampled_depth.value().data(), depth.data());
    assert!(warp.validity_mask.data().iter().all(|&m| m == 1.0));
}

#[test]
fn moving_toward_a_plane_reduces_depth_by_tz() {
    let d = 4.0;
    let tz = -0.75;
    let depth = Tensor::full([1, 1, 16, 16], d);
    let img = Tensor::full([1, 3, 16, 16], 0.5);
    let tape = Tape::new();
    let pose = Pose6D::new([0.0, 0.0, tz], [0.0; 3]).unwrap();
    let warp = compute_warp(
        tape.constant(depth.clone()),
        tape.constant(img),
        tape.constant(depth),
        tape.constant(poses_tensor(&[pose])),
        &k16(),
    )
    .unwrap();
    for &z in warp.projected_depth.value().data() {
        assert!((z - (d + tz)).abs() < 1e-12);
    }
    // The camera moves forward, so the frame-t view magnifies in t+1 and
    // border pixels leave the image.
    assert!(warp.valid_count() < 256);
}

#[test]
fn warp_gradients_pass_finite_differences() {
    let img = Tensor::from_fn([1, 3, 8, 8], |i| 0.5 + 0.4 * ((i as f64) * 0.37).sin());
    let depth = Tensor::from_fn([1, 1, 8, 8], |i| 2.0 + 0.3 * ((i as f64) * 0.21).cos());
    let k = CameraIntrinsics::centered(8, 8, 1.2).unwrap();
    let pose = poses_tensor(&[Pose6D::new([0.031, -0.017, 0.043], [0.021, -0.013, 0.008]).unwrap()]);
    let (i0, d0) = (img.clone(), depth.clone());
    let err = finite_diff_check(
        move |t, p| {
            let w = compute_warp(t.constant(d0.clone()), t.constant(i0.clone()), t.constant(d0.clone()), p, &k)?;
            w.warped_image.square()?.sum()?.add(w.projected_depth.sum()?)
        },
        &pose,
        DEFAULT_EPS,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

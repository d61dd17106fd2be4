use std::collections::BTreeSet;

use taskgap::autodiff::Tape;
use taskgap::geometry::{compute_warp, poses_tensor, CameraIntrinsics, Pose6D};
use taskgap::losses::photometric_loss;
use taskgap::synthdata::*;
use taskgap::Error;

fn tiny(seed: u64) -> DatasetConfig {
    DatasetConfig {
        seed,
        scene: SceneSpec {
            resolution: 16,
            ..SceneSpec::default()
        },
        synthetic_count: 6,
        real_pairs: 6,
        heldout_fraction: 0.34,
        fov_degrees: 90.0,
    }
}

#[test]
fn straight_tube_axis_reaches_the_far_clip() {
    let scene = SceneSpec {
        curvature_amplitude: 0.0,
        resolution: 15,
        ..SceneSpec::default()
    };
    let k = CameraIntrinsics::centered(15, 15, 90f64.to_radians()).unwrap();
    let pose = generate_trajectory(&scene, 1, 0).unwrap().remove(0);
    let f = render_frame(&scene, &pose, &k).unwrap();
    assert_eq!(f.depth.at4(0, 0, 7, 7), scene.depth_max);
    assert!(f.depth.data().iter().all(|&d| d >= scene.depth_min && d <= scene.depth_max));
}

#[test]
fn single_pose_trajectory_starts_on_the_centerline() {
    let scene = SceneSpec::default();
    let poses = generate_trajectory(&scene, 1, 42).unwrap();
    assert_eq!(poses.len(), 1);
    assert!((poses[0].translation - scene.centerline(0.0)).norm() < 1e-12);
}

#[test]
fn trajectory_steps_are_bounded() {
    let scene = SceneSpec::default();
    let poses = generate_trajectory(&scene, 300, 7).unwrap();
    for w in poses.windows(2) {
        let rel = relative_pose(&w[0], &w[1]);
        assert!(rel.angle() <= 0.05, "{}", rel.angle());
        let step = (w[1].translation - w[0].translation).norm();
        assert!(step <= 0.05 * scene.radius + 1e-12, "{step}");
    }
}

#[test]
fn rendering_is_deterministic_and_in_range() {
    let a = generate_dataset(&tiny(3)).unwrap();
    let b = generate_dataset(&tiny(3)).unwrap();
    let c = generate_dataset(&tiny(4)).unwrap();
    assert_eq!(a.synthetic, b.synthetic);
    assert_eq!(a.real, b.real);
    assert_ne!(a.real[0].image, c.real[0].image);
    assert_ne!(a.synthetic[0].image, c.synthetic[0].image);
    let scene = tiny(3).scene;
    for f in a.synthetic.iter().chain(&a.real) {
        assert!(f.depth.data().iter().all(|&d| d >= scene.depth_min && d <= scene.depth_max));
        assert!(f.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn splits_are_disjoint() {
    let ds = generate_dataset(&tiny(5)).unwrap();
    let m = &ds.manifest;
    let syn_train: BTreeSet<_> = m.synthetic_in(Split::Train).iter().collect();
    let syn_held: BTreeSet<_> = m.synthetic_in(Split::Heldout).iter().collect();
    assert!(!syn_train.is_empty() && !syn_held.is_empty());
    assert!(syn_train.is_disjoint(&syn_held));
    let frames = |split| {
        m.pairs_in(split)
            .iter()
            .flat_map(|p| [p.frame_t, p.frame_t1])
            .collect::<BTreeSet<_>>()
    };
    let (train, held) = (frames(Split::Train), frames(Split::Heldout));
    assert!(!held.is_empty());
    assert!(train.is_disjoint(&held));
    for p in &m.pairs {
        assert_eq!(p.frame_t1, p.frame_t + 1);
        assert!(p.frame_t1 < ds.real.len());
    }
}

#[test]
fn disk_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let written = make_dataset(&tiny(6), dir.path()).unwrap();
    let read = load_dataset(dir.path()).unwrap();
    assert_eq!(read.manifest, written.manifest);
    for (a, b) in written.synthetic.iter().chain(&written.real).zip(read.synthetic.iter().chain(&read.real)) {
        assert!(a.image.data().iter().zip(b.image.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.depth.data().iter().zip(b.depth.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.pose, b.pose);
    }
}

#[test]
fn corruption_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(&tiny(7), dir.path()).unwrap();
    let depth = dir.path().join("real/depth/000001.pfm");
    let mut bytes = std::fs::read(&depth).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&depth, bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Checksum { .. })));

    std::fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
    assert!(load_dataset(dir.path()).is_err());
    std::fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

#[test]
fn ground_truth_warp_explains_real_pairs() {
    let ds = generate_dataset(&DatasetConfig {
        scene: SceneSpec {
            resolution: 64,
            ..SceneSpec::default()
        },
        ..tiny(8)
    })
    .unwrap();
    for pair in ds.pairs(Split::Train).iter().chain(&ds.pairs(Split::Heldout)) {
        let tape = Tape::new();
        let c = |t: &taskgap::tensor::Tensor| tape.constant(t.clone());
        let pose = |p: Pose6D| c(&poses_tensor(&[p]));
        let gt = compute_warp(c(&pair.depth_t), c(&pair.image_t1), c(&pair.depth_t1), pose(pair.relative_pose_gt), &pair.intrinsics).unwrap();
        let photo = photometric_loss(c(&pair.image_t), &gt).unwrap().item().unwrap();
        assert!(photo < 0.02, "pair {}: {photo}", pair.id);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(generate_dataset(&DatasetConfig { heldout_fraction: 0.0, ..tiny(0) }).is_err());
    assert!(generate_dataset(&DatasetConfig { synthetic_count: 1, ..tiny(0) }).is_err());
    let scene = SceneSpec {
        radius: -1.0,
        ..SceneSpec::default()
    };
    assert!(generate_trajectory(&scene, 3, 0).is_err());
}

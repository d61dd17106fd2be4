use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskgap::autodiff::Tape;
use taskgap::networks::{NetConfig, NetKind, NetworkParams, NetworkSet};
use taskgap::tensor::Tensor;

fn small() -> NetConfig {
    NetConfig {
        resolution: 16,
        base_width: 4,
        depth: 2,
        ..NetConfig::default()
    }
}

fn image(seed: u64, n: usize, side: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([n, 3, side, side], |_| rng.gen_range(0.0..1.0))
}

#[test]
fn generator_is_identity_at_init() {
    let nets = NetworkSet::build(&NetConfig::default()).unwrap();
    let tape = Tape::new();
    let g = nets.generator.bind(&tape, false);
    for (seed, side) in [(1, 64), (2, 32)] {
        let x = image(seed, 2, side);
        let y = g.translate(tape.constant(x.clone())).unwrap().value();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }
}

#[test]
fn warpnet_predicts_zero_pose_at_init() {
    let nets = NetworkSet::build(&NetConfig::default()).unwrap();
    let tape = Tape::new();
    let w = nets.warp_net.bind(&tape, false);
    let p = w.pose(tape.constant(image(3, 2, 64)), tape.constant(image(4, 2, 64))).unwrap().value();
    assert_eq!(p.shape(), &[2, 6]);
    assert!(p.data().iter().all(|&v| v == 0.0));
}

#[test]
fn swapping_frames_changes_the_pose() {
    let mut nets = NetworkSet::build(&small()).unwrap();
    // Move the pose head off zero so the rest of the network is visible.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in nets.warp_net.tensors.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    let tape = Tape::new();
    let w = nets.warp_net.bind(&tape, false);
    let (a, b) = (tape.constant(image(6, 1, 16)), tape.constant(image(7, 1, 16)));
    let ab = w.pose(a, b).unwrap().value();
    let ba = w.pose(b, a).unwrap().value();
    assert_ne!(ab.data(), ba.data());
}

#[test]
fn output_shapes_and_depth_range() {
    let nets = NetworkSet::build(&small()).unwrap();
    let tape = Tape::new();
    let x = tape.constant(image(8, 3, 16));
    let d = nets.depth_net.bind(&tape, false).depth(x).unwrap().value();
    assert_eq!(d.shape(), &[3, 1, 16, 16]);
    assert!(d.data().iter().all(|&v| v > 0.0 && v < 1.0));
    let c = nets.critic.bind(&tape, false).critic(x).unwrap().value();
    assert_eq!(c.shape(), &[3]);
    let extreme = tape.constant(Tensor::from_fn([1, 3, 16, 16], |i| if i % 2 == 0 { 1e3 } else { -1e3 }));
    let d = nets.depth_net.bind(&tape, false).depth(extreme).unwrap().value();
    assert!(d.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
}

#[test]
fn bad_inputs_and_configs_are_rejected() {
    let nets = NetworkSet::build(&small()).unwrap();
    let tape = Tape::new();
    let g = nets.generator.bind(&tape, false);
    assert!(g.translate(tape.constant(Tensor::zeros([1, 3, 10, 10]))).is_err());
    assert!(g.translate(tape.constant(Tensor::zeros([1, 1, 16, 16]))).is_err());
    assert!(g.depth(tape.constant(Tensor::zeros([1, 3, 16, 16]))).is_err());
    let bad = NetConfig {
        resolution: 18,
        ..small()
    };
    assert!(NetworkSet::build(&bad).is_err());
}

#[test]
fn build_is_seed_deterministic() {
    let a = NetworkSet::build(&small()).unwrap();
    let b = NetworkSet::build(&small()).unwrap();
    let c = NetworkSet::build(&NetConfig { seed: 1, ..small() }).unwrap();
    for kind in NetKind::ALL {
        assert_eq!(a.get(kind).tensors, b.get(kind).tensors);
        assert_ne!(a.get(kind).tensors, c.get(kind).tensors);
    }
}

#[test]
fn default_networks_stay_desk_scale() {
    let nets = NetworkSet::build(&NetConfig::default()).unwrap();
    for kind in NetKind::ALL {
        let p = nets.get(kind);
        assert!(p.param_count() < 500_000, "{}: {}", kind.name(), p.param_count());
        assert_eq!(p.tensors.len(), 2 * p.layers.len());
        let shapes: Vec<Vec<usize>> = p.tensors.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, NetworkParams::tensor_shapes(kind, &NetConfig::default()));
    }
    assert!(nets.critic.receptive_field() < 64);
}

#[test]
fn from_tensors_checks_the_manifest() {
    let cfg = small();
    let nets = NetworkSet::build(&cfg).unwrap();
    let ok = NetworkParams::from_tensors(NetKind::Critic, &cfg, nets.critic.tensors.clone()).unwrap();
    assert_eq!(ok.tensors, nets.critic.tensors);
    let mut short = nets.critic.tensors.clone();
    short.pop();
    assert!(NetworkParams::from_tensors(NetKind::Critic, &cfg, short).is_err());
    let mut nonfinite = nets.critic.tensors.clone();
    nonfinite[0].data_mut()[0] = f64::NAN;
    assert!(NetworkParams::from_tensors(NetKind::Critic, &cfg, nonfinite).is_err());
}

#[test]
fn clip_examples() {
    let mut nets = NetworkSet::build(&small()).unwrap();
    nets.critic.tensors[0].data_mut()[0] = 0.5;
    nets.critic.tensors[0].data_mut()[1] = -0.5;
    nets.critic.clip_weights(0.01);
    assert_eq!(nets.critic.tensors[0].data()[0], 0.01);
    assert_eq!(nets.critic.tensors[0].data()[1], -0.01);
    assert!(nets.critic.max_abs_param() <= 0.01);
    let once = nets.critic.tensors.clone();
    nets.critic.clip_weights(0.01);
    assert_eq!(once, nets.critic.tensors);
}

#[test]
fn every_parameter_gets_gradient() {
    let mut nets = NetworkSet::build(&small()).unwrap();
    // Zero-init heads block gradient to everything upstream; perturb them.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for kind in [NetKind::Generator, NetKind::WarpNet] {
        for t in nets.get_mut(kind).tensors.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
        }
    }
    let tape = Tape::new();
    let g = nets.generator.bind(&tape, true);
    let d = nets.depth_net.bind(&tape, true);
    let w = nets.warp_net.bind(&tape, true);
    let c = nets.critic.bind(&tape, true);
    let x = tape.constant(image(10, 2, 16).map(|v| 0.25 + 0.5 * v));
    let y = tape.constant(image(11, 2, 16).map(|v| 0.25 + 0.5 * v));
    let gx = g.translate(x).unwrap();
    let loss = d
        .depth(gx)
        .unwrap()
        .square()
        .unwrap()
        .mean()
        .unwrap()
        .add(w.pose(gx, y).unwrap().square().unwrap().sum().unwrap())
        .unwrap()
        .add(c.critic(gx).unwrap().mean().unwrap())
        .unwrap();
    let grads = tape.backward(loss).unwrap();
    for bound in [&g, &d, &w, &c] {
        for (i, v) in bound.vars.iter().enumerate() {
            let gr = grads.get(*v).unwrap();
            assert!(gr.data().iter().any(|&e| e != 0.0), "{} tensor {i}", bound.net.kind.name());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generator_identity_holds_for_any_image(seed in any::<u64>()) {
        let nets = NetworkSet::build(&small()).unwrap();
        let tape = Tape::new();
        let x = image(seed, 1, 16);
        let y = nets.generator.bind(&tape, false).translate(tape.constant(x.clone())).unwrap().value();
        prop_assert_eq!(y.data(), x.data());
    }
}

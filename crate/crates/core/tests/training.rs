use std::sync::OnceLock;

use taskgap::losses::LossReport;
use taskgap::networks::{NetConfig, NetKind};
use taskgap::synthdata::{generate_dataset, DatasetConfig, SceneSpec, Split};
use taskgap::tensor::Tensor;
use taskgap::training::*;

fn net() -> NetConfig {
    NetConfig {
        resolution: 16,
        base_width: 4,
        depth: 2,
        ..NetConfig::default()
    }
}

fn data() -> &'static TrainData {
    static DATA: OnceLock<TrainData> = OnceLock::new();
    DATA.get_or_init(|| {
        let ds = generate_dataset(&DatasetConfig {
            scene: SceneSpec {
                resolution: 16,
                ..SceneSpec::default()
            },
            synthetic_count: 10,
            real_pairs: 10,
            ..DatasetConfig::default()
        })
        .unwrap();
        TrainData::from_dataset(&ds, Split::Train, &net()).unwrap()
    })
}

fn cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 2,
        learning_rate: 1e-3,
        log_every: 1,
        ..TrainConfig::default()
    }
}

fn bits(r: &LossReport) -> [u64; 8] {
    [r.l_gan, r.l_r, r.l_s, r.l_w, r.photo, r.geo, r.smooth, r.total].map(f64::to_bits)
}

#[test]
fn adam_ignores_zero_gradients() {
    let mut params = vec![Tensor::from_fn([3], |i| i as f64)];
    let before = params.clone();
    let mut state = AdamState::new(&params);
    adam_step(&mut params, &[Tensor::zeros([3])], &mut state, 0.1, (0.9, 0.999), 1e-8).unwrap();
    assert_eq!(params, before);
    assert_eq!(state.t, 1);
}

#[test]
fn adam_first_step_moves_against_the_gradient_by_lr() {
    let mut params = vec![Tensor::zeros([4])];
    let mut state = AdamState::new(&params);
    let g = Tensor::new([4], vec![3.0, -0.5, 1e-3, -20.0]).unwrap();
    adam_step(&mut params, &[g.clone()], &mut state, 0.01, (0.5, 0.999), 1e-8).unwrap();
    for (p, gi) in params[0].data().iter().zip(g.data()) {
        assert!((p + 0.01 * gi.signum()).abs() < 1e-7, "{p} for {gi}");
    }
    assert!(adam_step(&mut params, &[Tensor::zeros([5])], &mut state, 0.01, (0.5, 0.999), 1e-8).is_err());
}

#[test]
fn sampler_visits_each_index_once_per_epoch() {
    let mut s = EpochSampler::new(7, 3);
    let mut seen: Vec<usize> = (0..7).flat_map(|_| s.next_batch(1)).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..7).collect::<Vec<_>>());
}

#[test]
fn identical_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run_once = |name: &str| {
        let c = TrainConfig {
            log_path: Some(dir.path().join(name)),
            ..cfg(4)
        };
        let out = train(&c, &net(), data()).unwrap();
        (out, std::fs::read(dir.path().join(name)).unwrap())
    };
    let (a, log_a) = run_once("a.csv");
    let (b, log_b) = run_once("b.csv");
    assert_eq!(log_a, log_b);
    assert_eq!(a.history.iter().map(bits).collect::<Vec<_>>(), b.history.iter().map(bits).collect::<Vec<_>>());
    assert_eq!(a.checkpoint.networks, b.checkpoint.networks);
    assert_eq!(a.checkpoint.optimizer, b.checkpoint.optimizer);
    let text = String::from_utf8(log_a).unwrap();
    assert_eq!(text.lines().next(), Some(LOG_HEADER));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn resume_reproduces_the_next_step() {
    let c = cfg(3);
    let mut straight = Checkpoint::new(&c, &net(), data()).unwrap();
    run(&mut straight, data(), 2, |_, _| Ok(())).unwrap();
    let bytes = straight.to_bytes();
    let expected = straight.step(data()).unwrap();

    let mut resumed = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(resumed.step, 2);
    let got = resumed.step(data()).unwrap();
    assert_eq!(bits(&got), bits(&expected));
    assert_eq!(resumed, straight);
}

#[test]
fn checkpoint_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let c = TrainConfig {
        checkpoint_path: Some(path.clone()),
        ..cfg(2)
    };
    let out = train(&c, &net(), data()).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    assert_eq!(loaded.step, 2);
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let ck = Checkpoint::new(&cfg(1), &net(), data()).unwrap();
    let bytes = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..20]).is_err());
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 1;
    assert!(Checkpoint::from_bytes(&bad_magic).is_err());
    let mut bad_version = bytes.clone();
    bad_version[8] = 99;
    assert!(Checkpoint::from_bytes(&bad_version).is_err());
    let mut bad_header = bytes.clone();
    bad_header[20] = b'#';
    assert!(Checkpoint::from_bytes(&bad_header).is_err());
    let mut extra = bytes;
    extra.extend_from_slice(&[0; 8]);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}

#[test]
fn warpnet_is_untouched_without_warp_loss() {
    let mut c = cfg(2);
    c.weights.omega_w = 0.0;
    let start = Checkpoint::new(&c, &net(), data()).unwrap();
    let out = train(&c, &net(), data()).unwrap();
    let end = &out.checkpoint;
    assert_eq!(end.networks.warp_net, start.networks.warp_net);
    assert_eq!(end.optimizer.get(NetKind::WarpNet), start.optimizer.get(NetKind::WarpNet));
    assert_ne!(end.networks.depth_net, start.networks.depth_net);
    assert!(out.history.iter().all(|r| r.l_w == 0.0 && r.photo == 0.0));
}

#[test]
fn disabling_every_term_changes_nothing() {
    let c = TrainConfig {
        disable_gan: true,
        disable_recon: true,
        disable_synthetic: true,
        disable_warp: true,
        ..cfg(2)
    };
    let start = Checkpoint::new(&c, &net(), data()).unwrap();
    let out = train(&c, &net(), data()).unwrap();
    assert_eq!(out.checkpoint.networks, start.networks);
    assert!(out.history.iter().all(|r| *r == LossReport::default()));
}

#[test]
fn critic_stays_clipped_and_total_matches_parts() {
    let c = cfg(3);
    let weights = c.effective_weights();
    let mut ck = Checkpoint::new(&c, &net(), data()).unwrap();
    let history = run(&mut ck, data(), 3, |state, _| {
        assert!(state.networks.critic.max_abs_param() <= c.clip);
        Ok(())
    })
    .unwrap();
    for r in &history {
        let expect = weights.combine(r.l_gan, r.l_r, r.l_s, r.l_w);
        assert!((r.total - expect).abs() < 1e-12);
        let warp = taskgap::losses::combine_warp_terms(r.photo, r.geo, r.smooth);
        assert!((r.l_w - warp).abs() < 1e-12);
    }
}

#[test]
fn baseline_gan_runs() {
    let c = TrainConfig {
        use_baseline_gan: true,
        ..cfg(2)
    };
    let out = train(&c, &net(), data()).unwrap();
    assert!(out.history.iter().all(|r| r.total.is_finite() && r.l_gan < 0.0));
}

#[test]
fn invalid_train_configs_are_rejected() {
    for c in [
        TrainConfig { steps: 0, ..cfg(1) },
        TrainConfig { learning_rate: -1.0, ..cfg(1) },
        TrainConfig { beta1: 1.0, ..cfg(1) },
        TrainConfig { clip: 0.0, ..cfg(1) },
    ] {
        assert!(Checkpoint::new(&c, &net(), data()).is_err());
    }
}

#[test]
fn log_appends_on_resume() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    let ckp = dir.path().join("ck.bin");
    let c = TrainConfig {
        log_path: Some(log.clone()),
        checkpoint_path: Some(ckp.clone()),
        ..cfg(2)
    };
    train(&c, &net(), data()).unwrap();
    let mut resumed = Checkpoint::load(&ckp).unwrap();
    run(&mut resumed, data(), 3, |_, _| Ok(())).unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    let steps: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "1", "2"]);
}

use std::path::Path;
use std::process::{Command, Output};

fn taskgap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taskgap"))
        .args(args)
        .env("TASKGAP_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = "
[data]
synthetic_count = 6
real_pairs = 6
heldout_fraction = 0.5

[train]
batch_size = 2
";

#[test]
fn render_train_eval_and_diffmap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.path().join("data");
    let out = taskgap(&["render-data", "--config", path(&cfg), "--out", path(&data), "--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("manifest.json").is_file());
    assert!(data.join("config.resolved.toml").is_file());

    let out = taskgap(&["warp-check", "--data", path(&data)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));

    let run = dir.path().join("run");
    let out = taskgap(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run), "--steps", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("step,"));
    let ckpt = run.join("checkpoint.bin");
    assert!(ckpt.is_file());
    assert!(run.join("config.resolved.toml").is_file());

    let out = taskgap(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run), "--steps", "2", "--resume", path(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let metrics = run.join("metrics.csv");
    let out = taskgap(&["eval", "--checkpoint", path(&ckpt), "--data", path(&data), "--out", path(&metrics)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(&metrics).unwrap();
    assert!(csv.starts_with("pair_id,photo,geo,ssim,valid_px_fraction"));
    assert_eq!(csv.lines().count(), 1 + 3 + 1);

    let png = dir.path().join("diff.png");
    let image = data.join("real/images/000000.png");
    let out = taskgap(&["diffmap", "--checkpoint", path(&ckpt), "--image", path(&image), "--out", path(&png)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(png.is_file() && dir.path().join("diff.pfm").is_file());
}

#[test]
fn gradcheck_passes() {
    let out = taskgap(&["gradcheck", "--points", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("all "));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nstepz = 3\n").unwrap();
    let out = taskgap(&["render-data", "--config", path(&bad), "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stepz"));

    let missing = dir.path().join("nope");
    assert_eq!(taskgap(&["warp-check", "--data", path(&missing)]).status.code(), Some(1));
    assert_eq!(taskgap(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(taskgap(&["gradcheck", "--points", "0"]).status.code(), Some(1));
    assert_eq!(taskgap(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_inputs_exit_one_and_io_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("garbage.bin");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let img = dir.path().join("img.png");
    std::fs::write(&img, b"not a png").unwrap();
    let out = taskgap(&["diffmap", "--checkpoint", path(&ckpt), "--image", path(&img), "--out", path(&dir.path().join("o.png"))]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let under_file = ckpt.join("data");
    let out = taskgap(&["render-data", "--config", path(&cfg), "--out", path(&under_file)]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

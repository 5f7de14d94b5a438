use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dispnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dispnet"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env("DISPNET_WORKERS", "2")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn write_cloud(path: &Path, n: usize) {
    let mut s = format!(
        "ply\nformat ascii 1.0\nelement vertex {n}\nproperty float x\nproperty float y\nproperty float z\nend_header\n"
    );
    for i in 0..n {
        let t = i as f64 / n as f64;
        s.push_str(&format!("{} {} {}\n", (7.0 * t).sin(), (3.0 * t).cos(), t));
    }
    fs::write(path, s).unwrap();
}

#[test]
fn gradcheck_passes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gradcheck", "--scope", "loss", "--instances", "5", "--seed", "7"];
    let a = dispnet(dir.path(), &args);
    assert_eq!(code(&a), 0, "{}", text(&a.stdout));
    assert!(text(&a.stdout).contains("worst_rel"));
    let b = dispnet(dir.path(), &args);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn gradcheck_names_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = dispnet(
        dir.path(),
        &["gradcheck", "--scope", "primitive", "--instances", "3", "--inject-fault", "tanh"],
    );
    assert_ne!(code(&o), 0);
    let out = text(&o.stdout);
    let failed = out.lines().find(|l| l.starts_with("failed:")).expect("failure line");
    assert_eq!(failed, "failed: tanh");
}

#[test]
fn train_is_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = "[train]\nsteps = 4\ncheckpoint_every = 2\nmatching = \"assignment\"\n[train.optimizer]\nlr = 0.001\n";
    fs::write(d.join("run.toml"), cfg).unwrap();
    for out in ["a", "b"] {
        let o = dispnet(d, &["train", "--config", "run.toml", "--seed", "5", "--out", out]);
        assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    }
    let curve = fs::read_to_string(d.join("a/loss_curve.txt")).unwrap();
    assert_eq!(curve.lines().count(), 4);
    assert_eq!(curve, fs::read_to_string(d.join("b/loss_curve.txt")).unwrap());
    assert!(d.join("a/checkpoints/step-000002.ckpt").is_file());
    assert!(d.join("a/model.ckpt").is_file());
    let report = fs::read_to_string(d.join("a/report.txt")).unwrap();
    assert!(report.contains("chamfer_l2_raw=") && report.contains("fscore_at_1pct="));
    let echoed = fs::read_to_string(d.join("a/config.toml")).unwrap();
    assert!(echoed.contains("seed = 5"), "{echoed}");

    // two steps, then resume for the remaining two
    let o = dispnet(d, &["train", "--config", "run.toml", "--seed", "5", "--out", "c", "--steps", "2"]);
    assert_eq!(code(&o), 0);
    let o = dispnet(
        d,
        &["train", "--config", "run.toml", "--seed", "5", "--out", "c", "--checkpoint", "c/model.ckpt"],
    );
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert_eq!(fs::read_to_string(d.join("c/loss_curve.txt")).unwrap(), curve);
    assert_eq!(fs::read(d.join("c/model.ckpt")).unwrap(), fs::read(d.join("a/model.ckpt")).unwrap());
}

#[test]
fn missing_dataset_root_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "[data]\nsource = \"dataset\"\nroot = \"no-such-root\"\nsplit = \"train\"\n",
    )
    .unwrap();
    let o = dispnet(dir.path(), &["train", "--config", "run.toml", "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("no-such-root"));
}

#[test]
fn numeric_fault_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "[train]\nsteps = 5\n[train.optimizer]\nlr = 1e300\n",
    )
    .unwrap();
    let o = dispnet(dir.path(), &["train", "--config", "run.toml", "--out", "x"]);
    assert_eq!(code(&o), 3, "{}", text(&o.stderr));
}

#[test]
fn eval_reports_and_rejects_mismatched_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = dispnet(d, &["train", "--preset", "overfit", "--steps", "2", "--out", "t"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));

    let o = dispnet(d, &["eval", "--preset", "overfit", "--checkpoint", "t/model.ckpt", "--out", "e"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let json = fs::read_to_string(d.join("e/report.json")).unwrap();
    assert!(json.contains("\"chamfer_l2_scaled\""));
    assert!(d.join("e/samples/synthetic-1.txt").is_file());

    let o = dispnet(
        d,
        &["eval", "--preset", "overfit-semantic", "--checkpoint", "t/model.ckpt", "--out", "m"],
    );
    assert_eq!(code(&o), 4);

    fs::create_dir_all(d.join("data/test")).unwrap();
    fs::write(
        d.join("empty.toml"),
        "[data]\nsource = \"dataset\"\nroot = \"data\"\nsplit = \"train\"\n",
    )
    .unwrap();
    let o = dispnet(
        d,
        &["eval", "--config", "empty.toml", "--checkpoint", "t/model.ckpt", "--split", "test", "--out", "z"],
    );
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(fs::read_to_string(d.join("z/report.txt")).unwrap().contains("empty=true"));

    fs::write(d.join("broken.ckpt"), b"DSPNCKPT garbage").unwrap();
    let o = dispnet(d, &["eval", "--preset", "overfit", "--checkpoint", "broken.ckpt", "--out", "b"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn complete_resamples_and_writes_plot_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = dispnet(d, &["train", "--preset", "overfit-semantic", "--steps", "1", "--out", "s"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    write_cloud(&d.join("in.ply"), 999);

    let o = Command::new(env!("CARGO_BIN_EXE_dispnet"))
        .args(["complete", "--checkpoint", "s/model.ckpt", "in.ply", "out.ply", "--ascii"])
        .current_dir(d)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("999 points resampled to 256"));
    let ply = fs::read_to_string(d.join("out.ply")).unwrap();
    assert!(ply.contains("element vertex 1024") && ply.contains("property int class"));
    let xyz = fs::read_to_string(d.join("out.xyz")).unwrap();
    assert_eq!(xyz.lines().count(), 1024);
    assert!(xyz.lines().all(|l| l.split_whitespace().count() == 4));

    fs::write(d.join("bad.ply"), "not a ply").unwrap();
    let o = dispnet(d, &["complete", "--checkpoint", "s/model.ckpt", "bad.ply", "x.ply"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn unknown_config_key_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), "sed = 1\n").unwrap();
    let o = dispnet(dir.path(), &["train", "--config", "run.toml"]);
    assert_eq!(code(&o), 4);
}

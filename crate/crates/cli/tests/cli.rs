use std::path::Path;
use std::process::{Command, Output};

use jointseg::worldgen::sample_dir_name;

const TINY: [&str; 13] = [
    "encoder.channels=4,6,8,8",
    "stereo.d_max=8",
    "stereo.aggregation_hidden=4",
    "stereo.refine_hidden=4",
    "decoder.num_classes=3",
    "decoder.stem_channels=4",
    "data.scenes=2",
    "data.width=32",
    "data.height=32",
    "data.num_classes=3",
    "data.disparity_max=8",
    "train.crop_w=24",
    "train.crop_h=16",
];

fn jointseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointseg")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn with_tiny<'a>(mut args: Vec<&'a str>, extra: &[&'a str]) -> Vec<&'a str> {
    for kv in TINY.iter().chain(extra) {
        args.extend(["--set", kv]);
    }
    args
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_flag_prints_usage_and_fails() {
    let o = jointseg(&["train", "--bogus"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = jointseg(&["frobnicate"]);
    assert!(!o.status.success());
}

#[test]
fn bad_override_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = jointseg(&["train", "--set", "loss.gamma=1", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("loss.gamma"), "{}", stderr(&o));
}

#[test]
fn gen_writes_one_directory_per_scene() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = jointseg(&["gen", "--n", "8", "--seed", "1", "--out", out.to_str().unwrap(), "--set", "data.width=32"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dirs = std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, 8);
    assert!(out.join(sample_dir_name(7)).is_dir());
}

#[test]
fn gradcheck_passes() {
    let o = jointseg(&["gradcheck", "--seed", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains(" 0 failed"));
}

fn checkpoints(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.starts_with("ckpt_"))
        .collect();
    v.sort();
    v
}

#[test]
fn train_then_eval_on_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = jointseg(&with_tiny(vec!["train", "--out", run.to_str().unwrap()], &["train.iterations=3"]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("miou"));
    assert_eq!(checkpoints(&run), ["ckpt_000000.bin", "ckpt_000003.bin"]);
    assert!(run.join("record.jsonl").is_file() && run.join("config.txt").is_file());

    let ck = run.join("ckpt_000003.bin");
    let again = jointseg(&["eval", "--checkpoint", ck.to_str().unwrap()]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(stdout(&again), stdout(&o));

    let data = dir.path().join("d");
    let g = jointseg(&with_tiny(vec!["gen", "--n", "2", "--seed", "9", "--out", data.to_str().unwrap()], &[]));
    assert!(g.status.success(), "{}", stderr(&g));
    let other = jointseg(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(other.status.success(), "{}", stderr(&other));
    assert!(stdout(&other).lines().any(|l| l.starts_with("n ") && l.trim_end().ends_with('2')));

    // The saved config reloads as a config file.
    let cfg = run.join("config.txt");
    let o = jointseg(&["train", "--config", cfg.to_str().unwrap(), "--set", "train.iterations=0", "--out", dir.path().join("r2").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn ablate_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("alpha.json");
    let o = jointseg(&with_tiny(
        vec!["ablate", "--grid", "alpha", "--seeds", "0", "--scenes", "3", "--holdout", "1", "--out", table.to_str().unwrap()],
        &["train.iterations=1"],
    ));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 2 + 5);

    let run = dir.path().join("run");
    let t = jointseg(&with_tiny(vec!["train", "--out", run.to_str().unwrap()], &["train.iterations=4"]));
    assert!(t.status.success(), "{}", stderr(&t));

    let plots = dir.path().join("plots");
    let record = run.join("record.jsonl");
    let p = jointseg(&[
        "plot",
        "--record",
        record.to_str().unwrap(),
        "--table",
        table.to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert!(p.status.success(), "{}", stderr(&p));
    for name in ["loss.svg", "alpha.svg"] {
        let svg = std::fs::read_to_string(plots.join(name)).unwrap();
        assert!(svg.starts_with("<svg"), "{name}");
    }

    let o = jointseg(&["plot", "--out", plots.to_str().unwrap()]);
    assert!(!o.status.success());
    let o = jointseg(&["ablate", "--grid", "table9"]);
    assert!(!o.status.success());
}

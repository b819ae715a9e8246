use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_d3desk"));
    c.env_remove("D3DESK_DATA");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn d3desk")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn read(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A temporary directory holding a tiny dataset in `ds` and a short
/// training configuration in `train.json`.
fn workspace() -> tempfile::TempDir {
    let t = tempfile::tempdir().unwrap();
    let data = json!({
        "seed": 11, "train": 4, "val": 2, "extra": 3,
        "gen": {"max_objects": 4, "max_points_per_object": 120, "floor_points": 120}
    });
    let train = json!({
        "seed": 5,
        "iterations": {"stage1": 3, "stage2": 2, "stage3": 2, "stage4": 2},
        "score_warmup": 1, "scenes_per_batch": 2, "descriptions_per_scene": 2,
        "checkpoint_every": 2, "eval_every": 2
    });
    std::fs::write(t.path().join("data.json"), data.to_string()).unwrap();
    std::fs::write(t.path().join("train.json"), train.to_string()).unwrap();
    ok(&["synth", "--config", "data.json", "--out", "ds"], t.path());
    t
}

fn train(dir: &Path, stage: u8, extra: &[&str]) -> String {
    let s = stage.to_string();
    let mut args = vec![
        "train",
        "--stage",
        &s,
        "--data",
        "ds",
        "--config",
        "train.json",
        "--out",
        "run",
    ];
    args.extend_from_slice(extra);
    ok(&args, dir)
}

fn latest(dir: &Path) -> PathBuf {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .max_by_key(|p| p.file_stem().unwrap().to_str().unwrap().parse::<u64>().unwrap())
        .unwrap()
}

#[test]
fn synth_is_deterministic_and_records_its_run() {
    let t = workspace();
    ok(&["synth", "--config", "data.json", "--out", "again"], t.path());
    let a = read(t.path().join("ds/manifest.json"));
    let b = read(t.path().join("again/manifest.json"));
    assert_eq!(a["hash"], b["hash"]);
    assert_eq!(a["run"]["dataset_hash"], a["hash"]);
    assert_eq!(a["run"]["seed"], 11);
    ok(
        &["synth", "--config", "data.json", "--seed", "12", "--out", "other"],
        t.path(),
    );
    assert_ne!(read(t.path().join("other/manifest.json"))["hash"], a["hash"]);
}

#[test]
fn synth_objects_flag_fixes_scene_size() {
    let t = workspace();
    ok(
        &["synth", "--config", "data.json", "--objects", "1", "--out", "three"],
        t.path(),
    );
    let m = read(t.path().join("three/manifest.json"));
    assert_eq!(m["config"]["gen"]["min_objects"], 1);
    assert_eq!(m["config"]["gen"]["max_objects"], 1);
}

#[test]
fn nonempty_outputs_need_force() {
    let t = workspace();
    let e = err(&["synth", "--config", "data.json", "--out", "ds"], t.path());
    assert!(e.contains("--force"), "{e}");
    ok(&["synth", "--config", "data.json", "--out", "ds", "--force"], t.path());

    train(t.path(), 1, &[]);
    let e = err(
        &[
            "train",
            "--stage",
            "1",
            "--data",
            "ds",
            "--config",
            "train.json",
            "--out",
            "run",
        ],
        t.path(),
    );
    assert!(e.contains("--resume or --force"), "{e}");
    train(t.path(), 1, &["--force"]);
}

#[test]
fn joint_stage_requires_stage3() {
    let t = workspace();
    let out = run(
        &[
            "train",
            "--stage",
            "4",
            "--data",
            "ds",
            "--config",
            "train.json",
            "--out",
            "run",
        ],
        t.path(),
    );
    assert!(!out.status.success());
    let e = String::from_utf8_lossy(&out.stderr);
    assert!(e.contains("stage3"), "{e}");
}

#[test]
fn pipeline_records_flags_and_evaluates() {
    let t = workspace();
    let dir = t.path();
    let before = std::fs::read_dir(dir.join("ds")).unwrap().count();
    for s in 1..=3 {
        train(dir, s, &[]);
    }
    train(dir, 4, &["--extra-ratio", "0.5"]);

    let m = read(dir.join("run/stage4/manifest.json"));
    assert_eq!(m["config"]["extra_ratio"], 0.5);
    assert_eq!(m["config"]["reward"]["alpha"], 0.1);
    assert_eq!(m["config"]["reward"]["beta"], 1.0);
    assert_eq!(m["dataset_hash"], read(dir.join("ds/manifest.json"))["hash"]);
    assert!(dir.join("run/stage4/rewards.jsonl").is_file());

    let ckpt = latest(&dir.join("run/stage3"));
    let ckpt = ckpt.to_str().unwrap();
    let table = ok(
        &[
            "eval",
            "--task",
            "grounding",
            "--ckpt",
            ckpt,
            "--data",
            "ds",
            "--out",
            "ev",
        ],
        dir,
    );
    for col in ["Unique", "Multiple", "Overall"] {
        assert!(table.contains(col), "{table}");
    }
    let report = read(dir.join("ev/report.json"));
    assert!(report["grounding"]["overall"].is_number());
    assert!(report["captioning"].is_null());
    assert!(dir.join("ev/manifest.json").is_file());

    let stage1 = latest(&dir.join("run/stage1"));
    let e = err(
        &[
            "eval",
            "--task",
            "captioning",
            "--ckpt",
            stage1.to_str().unwrap(),
            "--data",
            "ds",
        ],
        dir,
    );
    assert!(e.contains("stage2"), "{e}");
    ok(
        &[
            "eval",
            "--task",
            "detection",
            "--ckpt",
            stage1.to_str().unwrap(),
            "--data",
            "ds",
        ],
        dir,
    );

    assert_eq!(std::fs::read_dir(dir.join("ds")).unwrap().count(), before);
}

#[test]
fn stages_refuse_a_different_dataset() {
    let t = workspace();
    train(t.path(), 1, &[]);
    ok(
        &[
            "synth",
            "--config",
            "data.json",
            "--seed",
            "99",
            "--out",
            "ds",
            "--force",
        ],
        t.path(),
    );
    let e = err(
        &[
            "train",
            "--stage",
            "2",
            "--data",
            "ds",
            "--config",
            "train.json",
            "--out",
            "run",
        ],
        t.path(),
    );
    assert!(e.contains("dataset"), "{e}");
}

#[test]
fn data_root_comes_from_the_environment() {
    let t = workspace();
    let out = bin()
        .args(["train", "--stage", "1", "--config", "train.json", "--out", "run"])
        .env("D3DESK_DATA", t.path().join("ds"))
        .current_dir(t.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

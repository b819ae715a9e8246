//! Two identically seeded runs of every stage must log the same numbers.

use std::path::Path;

use d3desk::scene::{build_dataset, DatasetConfig, GenConfig};
use d3desk::tensor::Checkpoint;
use d3desk::trainer::{
    latest_checkpoint, train_stage, Stage, StageBudgets, TrainConfig, EVAL_LOG, EVAL_REPORT, METRICS_LOG, REWARD_LOG,
};
use serde_json::Value;

pub const TOLERANCE: f64 = 1e-9;

pub fn tiny_dataset() -> DatasetConfig {
    DatasetConfig {
        seed: 11,
        train: 6,
        val: 3,
        extra: 4,
        gen: GenConfig {
            max_objects: 5,
            max_points_per_object: 150,
            floor_points: 150,
            ..GenConfig::default()
        },
        ..DatasetConfig::default()
    }
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        seed: 5,
        iterations: StageBudgets {
            stage1: 6,
            stage2: 4,
            stage3: 4,
            stage4: 4,
        },
        score_warmup: 2,
        scenes_per_batch: 2,
        descriptions_per_scene: 2,
        extra_ratio: 0.5,
        checkpoint_every: 3,
        eval_every: 2,
        ..TrainConfig::default()
    }
}

/// Largest absolute difference between two JSON documents of identical
/// shape, or `None` when their structure or non-numeric content differs.
fn json_diff(a: &Value, b: &Value) -> Option<f64> {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => Some((x.as_f64()? - y.as_f64()?).abs()),
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => x
            .iter()
            .zip(y)
            .try_fold(0.0f64, |m, (p, q)| Some(m.max(json_diff(p, q)?))),
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => x
            .iter()
            .try_fold(0.0f64, |m, (k, p)| Some(m.max(json_diff(p, y.get(k)?)?))),
        _ => (a == b).then_some(0.0),
    }
}

fn file_diff(a: &Path, b: &Path) -> Result<f64, String> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()));
    let (x, y) = (read(a)?, read(b)?);
    let parse = |s: &str| -> Result<Vec<Value>, String> {
        s.lines()
            .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
            .collect()
    };
    let (x, y) = if a.extension().is_some_and(|e| e == "jsonl") {
        (parse(&x)?, parse(&y)?)
    } else {
        let one = |s: &str| {
            serde_json::from_str::<Value>(s)
                .map(|v| vec![v])
                .map_err(|e| e.to_string())
        };
        (one(&x)?, one(&y)?)
    };
    if x.is_empty() || x.len() != y.len() {
        return Err(format!("{}: {} vs {} records", a.display(), x.len(), y.len()));
    }
    x.iter()
        .zip(&y)
        .try_fold(0.0f64, |m, (p, q)| json_diff(p, q).map(|d| m.max(d)))
        .ok_or_else(|| format!("{}: records differ in structure", a.display()))
}

fn checkpoint_diff(a: &Path, b: &Path) -> Result<f64, String> {
    let load = |p: &Path| Checkpoint::load(p).map_err(|e| e.to_string());
    let (x, y) = (load(a)?, load(b)?);
    if x.params.len() != y.params.len() {
        return Err("checkpoints hold different parameters".into());
    }
    let mut worst = 0.0f64;
    for (p, q) in x.params.iter().zip(&y.params) {
        if p.name != q.name || p.shape != q.shape {
            return Err(format!("parameter {} differs in name or shape", p.name));
        }
        worst = p.data.iter().zip(&q.data).fold(worst, |m, (u, v)| m.max((u - v).abs()));
    }
    Ok(worst)
}

pub fn run() -> Result<String, String> {
    let ds = build_dataset(&tiny_dataset()).map_err(|e| e.to_string())?;
    let cfg = tiny_config();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs = [root.path().join("a"), root.path().join("b")];
    for run in &runs {
        for n in 1..=4 {
            train_stage(&cfg, &ds, Stage::new(n).unwrap(), run, None, false).map_err(|e| format!("stage {n}: {e}"))?;
        }
    }
    let mut worst = 0.0f64;
    let mut compared = 0;
    for n in 1..=4 {
        let stage = Stage::new(n).unwrap();
        let [a, b] = [&runs[0], &runs[1]].map(|r| r.join(stage.dir_name()));
        let mut logs = vec![METRICS_LOG, EVAL_LOG, EVAL_REPORT];
        if stage == Stage::JOINT {
            logs.push(REWARD_LOG);
        }
        for name in logs {
            worst = worst.max(file_diff(&a.join(name), &b.join(name))?);
            compared += 1;
        }
        let ck = |r: &Path| -> Result<std::path::PathBuf, String> {
            latest_checkpoint(r, stage)
                .map_err(|e| e.to_string())?
                .map(|(_, p)| p)
                .ok_or_else(|| format!("stage {n}: no checkpoint"))
        };
        worst = worst.max(checkpoint_diff(&ck(&runs[0])?, &ck(&runs[1])?)?);
        compared += 1;
    }
    let detail = format!("{compared} logs and checkpoints over 4 stages, max |diff| {worst:.1e}");
    if worst <= TOLERANCE {
        Ok(detail)
    } else {
        Err(detail)
    }
}

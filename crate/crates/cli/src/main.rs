mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use d3desk::scene::{build_dataset, load_dataset, save_dataset, Dataset, DatasetConfig};
use d3desk::tensor::Checkpoint;
use d3desk::trainer::{evaluate, load_model, train_stage, EvalOptions, EvalTasks, Stage, TrainConfig};
use d3desk::Scene;

use manifest::{check_dataset, RunManifest};

#[derive(Parser)]
#[command(name = "d3desk", version, about = "Synthetic 3D dense captioning and grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train one stage of the pipeline.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Objects per scene (sets both the minimum and the maximum).
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    extra: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Replace a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory written by `synth`.
    #[arg(long, env = "D3DESK_DATA")]
    data: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    stage: u8,
    #[command(flatten)]
    data: DataArg,
    /// Training configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; stage outputs go to `<out>/stage<N>`.
    #[arg(long)]
    out: PathBuf,
    /// Run directory holding the previous stage, when it is not `--out`.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    extra_ratio: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// REINFORCE samples per described object.
    #[arg(long)]
    beam: Option<usize>,
    /// Continue from the latest checkpoint of this stage.
    #[arg(long, conflicts_with = "force")]
    resume: bool,
    /// Retrain a stage that already has outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Detection,
    Captioning,
    Grounding,
    Probe,
    All,
}

impl Task {
    fn tasks(self) -> EvalTasks {
        let only = |f: fn(&mut EvalTasks)| {
            let mut t = EvalTasks::NONE;
            f(&mut t);
            t
        };
        match self {
            Task::Detection => only(|t| t.detection = true),
            Task::Captioning => only(|t| t.captioning = true),
            Task::Grounding => only(|t| t.grounding = true),
            Task::Probe => only(|t| t.probe = true),
            Task::All => EvalTasks::ALL,
        }
    }

    /// Earliest stage whose checkpoint holds the trained modules of the task.
    fn needed(self) -> Stage {
        match self {
            Task::Detection => Stage::DETECTOR,
            Task::Captioning => Stage::SPEAKER,
            Task::Grounding | Task::Probe | Task::All => Stage::LISTENER,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArg,
    #[arg(long, value_enum, default_value = "val")]
    split: Split,
    /// Model configuration; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Beam width for caption decoding; 1 decodes greedily.
    #[arg(long, default_value_t = 1)]
    beam: usize,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Directory for `report.json`, per-item dumps and the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let result = match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn is_nonempty_dir(dir: &Path) -> bool {
    std::fs::read_dir(dir).is_ok_and(|mut d| d.next().is_some())
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force` is set,
/// in which case its contents are removed.
fn fresh_dir(dir: &Path, force: bool) -> Result<()> {
    if is_nonempty_dir(dir) {
        if !force {
            bail!("{} is not empty; pass --force to replace it", dir.display());
        }
        std::fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg: DatasetConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => DatasetConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.objects {
        cfg.gen.min_objects = n;
        cfg.gen.max_objects = n;
    }
    cfg.train = a.train.unwrap_or(cfg.train);
    cfg.val = a.val.unwrap_or(cfg.val);
    cfg.extra = a.extra.unwrap_or(cfg.extra);
    fresh_dir(&a.out, a.force)?;
    let manifest = RunManifest::new(serde_json::to_value(&cfg)?, cfg.seed, String::new());
    let ds = build_dataset(&cfg)?;
    let manifest = RunManifest {
        dataset_hash: ds.hash(),
        ..manifest
    }
    .finish(vec![a.out.join("scenes"), a.out.join("vocab.json")]);
    save_dataset(&ds, &a.out, Some(serde_json::to_value(&manifest)?))?;
    println!(
        "wrote {} train, {} val, {} extra scenes to {} (hash {})",
        ds.split.train.len(),
        ds.split.val.len(),
        ds.split.extra.len(),
        a.out.display(),
        ds.hash()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let stage = Stage::new(a.stage)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iterations {
        match a.stage {
            1 => cfg.iterations.stage1 = n,
            2 => cfg.iterations.stage2 = n,
            3 => cfg.iterations.stage3 = n,
            _ => cfg.iterations.stage4 = n,
        }
    }
    if let Some(r) = a.extra_ratio {
        cfg.extra_ratio = r;
    }
    if let Some(x) = a.alpha {
        cfg.reward.alpha = x;
    }
    if let Some(x) = a.beta {
        cfg.reward.beta = x;
    }
    if let Some(b) = a.beam {
        cfg.beam = b;
    }
    cfg.validate()?;

    let ds = load_dataset(&a.data.data)?;
    let hash = ds.hash();
    let dir = a.out.join(stage.dir_name());
    if a.resume {
        check_dataset(&dir, &hash)?;
    } else if is_nonempty_dir(&dir) && !a.force {
        bail!(
            "{} already holds {stage} outputs; pass --resume or --force",
            dir.display()
        );
    }
    if let Some(prev) = stage.previous() {
        check_dataset(&a.init.as_deref().unwrap_or(&a.out).join(prev.dir_name()), &hash)?;
    }
    let manifest = RunManifest::new(serde_json::to_value(&cfg)?, cfg.seed, hash);
    let summary = train_stage(&cfg, &ds, stage, &a.out, a.init.as_deref(), a.resume)?;
    let outputs = ["metrics.jsonl", "eval.jsonl", "eval.json", "rewards.jsonl"]
        .iter()
        .map(|f| dir.join(f))
        .filter(|p| p.is_file())
        .chain(std::iter::once(summary.checkpoint.clone()))
        .collect();
    manifest.finish(outputs).write(&dir)?;
    println!(
        "{stage}: {} iterations, checkpoint {}",
        summary.iterations,
        summary.checkpoint.display()
    );
    print!("{}", summary.report.table());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ds = load_dataset(&a.data.data)?;
    let ck = Checkpoint::load(&a.ckpt)?;
    let cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => ck
            .meta
            .get("config")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .unwrap_or_default(),
    };
    let gen = &ds.config.gen;
    let (model, _) = load_model(
        &cfg,
        &a.ckpt,
        gen.num_classes,
        gen.feature_dim,
        ds.vocab.len(),
        a.task.needed(),
    )?;
    let (name, ids) = match a.split {
        Split::Train => ("train", &ds.split.train),
        Split::Val => ("val", &ds.split.val),
    };
    let scenes: Vec<&Scene> = ds.split_scenes(ids).collect();
    let opts = EvalOptions {
        iou_threshold: a.iou,
        beam: a.beam,
        tasks: a.task.tasks(),
    };
    let out = evaluate(&model, &scenes, &ds.vocab, name, &opts)?;
    print!("{}", out.report.table());
    if let Some(dir) = &a.out {
        write_eval(dir, a.force, &ds, &cfg, &out)?;
    }
    Ok(())
}

fn write_eval(
    dir: &Path,
    force: bool,
    ds: &Dataset,
    cfg: &TrainConfig,
    out: &d3desk::trainer::EvalOutput,
) -> Result<()> {
    fresh_dir(dir, force)?;
    let manifest = RunManifest::new(serde_json::to_value(cfg)?, cfg.seed, ds.hash());
    let files: [(&str, serde_json::Value); 5] = [
        ("report.json", serde_json::to_value(&out.report)?),
        ("captions.json", serde_json::to_value(&out.captions)?),
        ("grounding.json", serde_json::to_value(&out.grounding)?),
        ("proposals.json", serde_json::to_value(&out.proposals)?),
        ("probe.json", serde_json::to_value(&out.probe)?),
    ];
    let mut written = Vec::new();
    for (name, value) in files {
        let path = dir.join(name);
        std::fs::write(&path, serde_json::to_string_pretty(&value)?)
            .with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    manifest.finish(written).write(dir)
}

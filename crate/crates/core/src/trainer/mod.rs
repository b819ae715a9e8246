//! Stage-wise training: detector pretraining, captioning, grounding, and
//! joint speaker-listener fine-tuning with REINFORCE.

mod augment;
mod evaluate;
mod stages;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::detector::{Detector, DetectorConfig, DetectorError, GEOMETRY_DIMS};
use crate::eval::EvalError;
use crate::listener::{Listener, ListenerConfig, PREFIX as LISTENER_PREFIX, PROBE_PREFIX};
use crate::reward::{RewardError, RewardWeights};
use crate::rng;
use crate::scene::{SceneError, EOS};
use crate::speaker::{Speaker, SpeakerConfig};
use crate::tensor::{Adam, Checkpoint, ParamStore, TensorError};

pub use augment::{augment, AugmentConfig};
pub use evaluate::{evaluate, CaptionDump, EvalOptions, EvalOutput, EvalTasks, GroundingDump, ProbeDump};
pub use stages::{train_stage, StageSummary, EVAL_LOG, EVAL_REPORT, METRICS_LOG, REWARD_LOG};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("stage {stage} diverged at iteration {iter}: {detail}")]
    Diverged { stage: u8, iter: usize, detail: String },
    #[error("missing prerequisite checkpoint for {stage} under {dir}")]
    MissingStage { stage: String, dir: PathBuf },
    #[error("checkpoint {path} was written by stage {found}, {needed} required")]
    StageMismatch { path: PathBuf, found: u8, needed: String },
    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Training stage, 1 through 4.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Stage(u8);

impl Stage {
    pub const DETECTOR: Stage = Stage(1);
    pub const SPEAKER: Stage = Stage(2);
    pub const LISTENER: Stage = Stage(3);
    pub const JOINT: Stage = Stage(4);

    pub fn new(n: u8) -> Result<Self> {
        if (1..=4).contains(&n) {
            Ok(Stage(n))
        } else {
            Err(TrainError::Config(format!("stage {n} outside 1..=4")))
        }
    }

    pub fn number(self) -> u8 {
        self.0
    }

    pub fn dir_name(self) -> String {
        format!("stage{}", self.0)
    }

    pub fn previous(self) -> Option<Stage> {
        (self.0 > 1).then(|| Stage(self.0 - 1))
    }
}

impl TryFrom<u8> for Stage {
    type Error = TrainError;

    fn try_from(n: u8) -> Result<Self> {
        Stage::new(n)
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s.0
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageBudgets {
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
    pub stage4: usize,
}

impl Default for StageBudgets {
    fn default() -> Self {
        Self {
            stage1: 2000,
            stage2: 1000,
            stage3: 1000,
            stage4: 500,
        }
    }
}

impl StageBudgets {
    pub fn get(&self, s: Stage) -> usize {
        match s.0 {
            1 => self.stage1,
            2 => self.stage2,
            3 => self.stage3,
            _ => self.stage4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub stage1: f64,
    pub stage2: f64,
    pub stage3: f64,
    pub stage4: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            stage1: 2e-3,
            stage2: 1e-3,
            stage3: 1e-3,
            stage4: 1e-4,
        }
    }
}

impl LearningRates {
    pub fn get(&self, s: Stage) -> f64 {
        match s.0 {
            1 => self.stage1,
            2 => self.stage2,
            3 => self.stage3,
            _ => self.stage4,
        }
    }
}

/// How joint training draws the captions scored by REINFORCE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    /// The `beam` hypotheses of beam search.
    Beam,
    /// `beam` independent ancestral samples.
    #[default]
    Multinomial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub detector: DetectorConfig,
    pub speaker: SpeakerConfig,
    pub listener: ListenerConfig,
    pub lr: LearningRates,
    /// Global gradient-norm clip applied before every Adam step.
    pub clip_norm: f64,
    pub scenes_per_batch: usize,
    pub descriptions_per_scene: usize,
    pub iterations: StageBudgets,
    /// Stage-1 iterations trained without the cluster scoring loss.
    pub score_warmup: usize,
    /// Unannotated scenes per annotated scene in joint training.
    pub extra_ratio: f64,
    pub reward: RewardWeights,
    /// Number of REINFORCE samples per described object.
    pub beam: usize,
    pub sampling: SampleMode,
    pub ori_weight: f64,
    pub ori_in_stage2: bool,
    pub freeze_detector_stage2: bool,
    pub augment: AugmentConfig,
    pub iou_threshold: f64,
    pub checkpoint_every: usize,
    /// Validation runs every this many iterations; 0 evaluates only at the
    /// end of the stage.
    pub eval_every: usize,
    /// Validation scenes used by in-training evaluation; `None` uses all.
    pub eval_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            detector: DetectorConfig::default(),
            speaker: SpeakerConfig::default(),
            listener: ListenerConfig::default(),
            lr: LearningRates::default(),
            clip_norm: 10.0,
            scenes_per_batch: 4,
            descriptions_per_scene: 8,
            iterations: StageBudgets::default(),
            score_warmup: 1000,
            extra_ratio: 0.0,
            reward: RewardWeights::default(),
            beam: 3,
            sampling: SampleMode::default(),
            ori_weight: 0.3,
            ori_in_stage2: true,
            freeze_detector_stage2: false,
            augment: AugmentConfig::default(),
            iou_threshold: 0.5,
            checkpoint_every: 1000,
            eval_every: 0,
            eval_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.extra_ratio) {
            return bad("extra_ratio must lie in [0, 1]");
        }
        if self.reward.alpha < 0.0 || self.reward.beta < 0.0 {
            return bad("reward weights must be nonnegative");
        }
        let lrs = [self.lr.stage1, self.lr.stage2, self.lr.stage3, self.lr.stage4];
        if lrs.iter().any(|&x| !(x > 0.0)) || !(self.clip_norm > 0.0) {
            return bad("learning rates and clip norm must be positive");
        }
        if self.scenes_per_batch == 0 || self.descriptions_per_scene == 0 || self.beam == 0 {
            return bad("batch sizes and beam width must be positive");
        }
        if self.speaker.max_len < 2 {
            return bad("speaker max_len must be at least 2");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(io_err(path))?;
        let cfg: TrainConfig = serde_json::from_str(&s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// All trainable modules sharing one parameter store. Each module draws its
/// initialization from its own seed stream, so adding a module never changes
/// the others.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub detector: Detector,
    pub speaker: Speaker,
    pub listener: Listener,
    pub probe: Listener,
    /// Copy of the detector taken when listener training starts; supplies
    /// the GT object features seen by the probe.
    pub probe_detector: Detector,
    pub num_classes: usize,
    pub vocab_size: usize,
}

impl Model {
    pub fn new(cfg: &TrainConfig, num_classes: usize, point_feature_dim: usize, vocab_size: usize) -> Self {
        let mut store = ParamStore::new();
        let stream = |tag: &str| rng::rng(rng::derive_str(cfg.seed, tag), &[]);
        let detector = Detector::new(
            &mut store,
            cfg.detector.clone(),
            num_classes,
            point_feature_dim,
            &mut stream("init.detector"),
        );
        let input = cfg.detector.feature_dim + GEOMETRY_DIMS;
        let speaker = Speaker::new(
            &mut store,
            cfg.speaker.clone(),
            input,
            vocab_size,
            &mut stream("init.speaker"),
        );
        let listener = Listener::new(
            &mut store,
            LISTENER_PREFIX,
            cfg.listener.clone(),
            input,
            vocab_size,
            num_classes,
            &mut stream("init.listener"),
        );
        let probe = Listener::new(
            &mut store,
            PROBE_PREFIX,
            cfg.listener.clone(),
            input,
            vocab_size,
            num_classes,
            &mut stream("init.probe"),
        );
        let probe_detector = Detector::with_prefix(
            &mut store,
            FROZEN_DETECTOR_PREFIX,
            cfg.detector.clone(),
            num_classes,
            point_feature_dim,
            &mut stream("init.frozen"),
        );
        Self {
            store,
            detector,
            speaker,
            listener,
            probe,
            probe_detector,
            num_classes,
            vocab_size,
        }
    }

    /// Marks exactly the modules named by `prefixes` as trainable.
    pub fn train_only(&mut self, prefixes: &[&str]) {
        for p in [
            crate::detector::PREFIX,
            crate::speaker::PREFIX,
            LISTENER_PREFIX,
            PROBE_PREFIX,
            FROZEN_DETECTOR_PREFIX,
        ] {
            self.store.set_frozen_prefix(p, !prefixes.contains(&p));
        }
    }

    /// Overwrites the probe's detector copy with the current detector.
    pub fn snapshot_detector(&mut self) -> Result<()> {
        self.store
            .copy_renamed(crate::detector::PREFIX, FROZEN_DETECTOR_PREFIX)?;
        Ok(())
    }
}

/// Parameter prefix of the probe's detector copy.
pub const FROZEN_DETECTOR_PREFIX: &str = "frozen.det.";

/// Listener input for a description: its words followed by eos, so even an
/// empty caption has one token.
pub fn listener_tokens(words: &[u32]) -> Vec<u32> {
    let mut t = words.to_vec();
    t.push(EOS);
    t
}

/// Key of one GT object in caption corpora.
pub fn object_key(scene_id: &str, instance_id: usize) -> String {
    format!("{scene_id}/{instance_id}")
}

pub const META_STAGE: &str = "stage";
pub const META_ITER: &str = "iteration";
pub const META_COMPLETE: &str = "complete";

/// Checkpoint path of `stage` at `iter` under a run directory.
pub fn checkpoint_path(run: &Path, stage: Stage, iter: usize) -> PathBuf {
    run.join(stage.dir_name()).join(format!("{iter}.ckpt"))
}

/// Highest-iteration checkpoint of a stage, if any.
pub fn latest_checkpoint(run: &Path, stage: Stage) -> Result<Option<(usize, PathBuf)>> {
    let dir = run.join(stage.dir_name());
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
        let path = entry.map_err(io_err(&dir))?.path();
        let iter = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(i) = iter {
            if best.as_ref().is_none_or(|(b, _)| i > *b) {
                best = Some((i, path));
            }
        }
    }
    Ok(best)
}

/// Final checkpoint of a finished stage.
pub fn completed_checkpoint(run: &Path, stage: Stage) -> Result<Checkpoint> {
    let missing = || TrainError::MissingStage {
        stage: stage.to_string(),
        dir: run.to_path_buf(),
    };
    let (_, path) = latest_checkpoint(run, stage)?.ok_or_else(missing)?;
    let ck = Checkpoint::load(&path)?;
    if ck.meta.get(META_COMPLETE) != Some(&Value::Bool(true)) {
        return Err(missing());
    }
    Ok(ck)
}

/// Stage recorded in a checkpoint.
pub fn checkpoint_stage(ck: &Checkpoint) -> Option<u8> {
    ck.meta.get(META_STAGE).and_then(Value::as_u64).map(|s| s as u8)
}

pub(crate) fn save_checkpoint(
    model: &Model,
    adam: &Adam,
    path: &Path,
    stage: Stage,
    iter: usize,
    complete: bool,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut ck = model.store.to_checkpoint();
    ck.meta.insert(META_STAGE.into(), Value::from(stage.number()));
    ck.meta.insert(META_ITER.into(), Value::from(iter));
    ck.meta.insert(META_COMPLETE.into(), Value::Bool(complete));
    ck.meta.insert("config".into(), serde_json::to_value(cfg)?);
    ck.extra = adam.export_state();
    ck.save(path)?;
    Ok(())
}

/// Loads a trained model from a checkpoint file, checking that it was
/// produced by at least stage `needed`.
pub fn load_model(
    cfg: &TrainConfig,
    path: &Path,
    num_classes: usize,
    point_feature_dim: usize,
    vocab_size: usize,
    needed: Stage,
) -> Result<(Model, Stage)> {
    let ck = Checkpoint::load(path)?;
    let found = checkpoint_stage(&ck).unwrap_or(0);
    if found < needed.number() {
        return Err(TrainError::StageMismatch {
            path: path.to_path_buf(),
            found,
            needed: needed.to_string(),
        });
    }
    let mut model = Model::new(cfg, num_classes, point_feature_dim, vocab_size);
    model.store.load_checkpoint(&ck)?;
    Ok((model, Stage::new(found)?))
}

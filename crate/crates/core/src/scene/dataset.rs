use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{generate_descriptions, generate_scene, load_scene, save_scene, scene_to_json, GenConfig, LangConfig};
use super::{Scene, SceneError, Vocab};
use crate::rng;

pub const DATASET_FORMAT: &str = "d3desk-dataset-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub extra: usize,
    pub gen: GenConfig,
    pub lang: LangConfig,
    /// Attempts per scene before a placement failure aborts the build.
    pub attempts: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: 500,
            val: 100,
            extra: 500,
            gen: GenConfig::default(),
            lang: LangConfig::default(),
            attempts: 16,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub extra: Vec<String>,
}

impl DatasetSplit {
    pub fn validate(&self) -> Result<(), SceneError> {
        let mut seen = BTreeSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.extra) {
            if !seen.insert(id) {
                return Err(SceneError::Config(format!("scene {id} appears in more than one split")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub vocab: Vocab,
    pub split: DatasetSplit,
    pub scenes: BTreeMap<String, Scene>,
}

impl Dataset {
    pub fn scene(&self, id: &str) -> Result<&Scene, SceneError> {
        self.scenes
            .get(id)
            .ok_or_else(|| SceneError::Config(format!("unknown scene {id}")))
    }

    pub fn split_scenes<'a>(&'a self, ids: &'a [String]) -> impl Iterator<Item = &'a Scene> + 'a {
        ids.iter().filter_map(|id| self.scenes.get(id))
    }

    pub fn train(&self) -> impl Iterator<Item = &Scene> + '_ {
        self.split_scenes(&self.split.train)
    }

    pub fn val(&self) -> impl Iterator<Item = &Scene> + '_ {
        self.split_scenes(&self.split.val)
    }

    pub fn extra(&self) -> impl Iterator<Item = &Scene> + '_ {
        self.split_scenes(&self.split.extra)
    }

    /// Content hash over the vocabulary and every scene in split order.
    pub fn hash(&self) -> String {
        dataset_hash(&self.vocab, &self.split, &self.scenes)
    }
}

pub fn dataset_hash(vocab: &Vocab, split: &DatasetSplit, scenes: &BTreeMap<String, Scene>) -> String {
    let mut h = Sha256::new();
    for (id, tok) in vocab.words() {
        h.update(format!("{id}:{tok};"));
    }
    for (tag, ids) in [("train", &split.train), ("val", &split.val), ("extra", &split.extra)] {
        h.update(tag.as_bytes());
        for id in ids {
            h.update(id.as_bytes());
            if let Some(s) = scenes.get(id) {
                h.update(scene_to_json(s).to_string().as_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn build_one(cfg: &DatasetConfig, vocab: &Vocab, tag: &str, index: usize, annotate: bool) -> Result<Scene, SceneError> {
    let base = rng::derive_str(cfg.seed, tag);
    let mut last = None;
    for attempt in 0..cfg.attempts.max(1) {
        match generate_scene(rng::derive(base, &[index as u64, attempt as u64]), &cfg.gen) {
            Ok(mut s) => {
                s.scene_id = format!("{tag}-{index:04}");
                let lang = LangConfig {
                    seed: cfg.seed,
                    ..cfg.lang.clone()
                };
                return Ok(if annotate {
                    generate_descriptions(s, vocab, &lang)
                } else {
                    s
                });
            }
            Err(e @ SceneError::Generation(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Generates the annotated train/val splits and the unannotated extra pool.
pub fn build_dataset(cfg: &DatasetConfig) -> Result<Dataset, SceneError> {
    cfg.gen.validate()?;
    let vocab = Vocab::default();
    let mut split = DatasetSplit::default();
    let mut scenes = BTreeMap::new();
    for (tag, count, annotate) in [
        ("train", cfg.train, true),
        ("val", cfg.val, true),
        ("extra", cfg.extra, false),
    ] {
        for i in 0..count {
            let s = build_one(cfg, &vocab, tag, i, annotate)?;
            let ids = match tag {
                "train" => &mut split.train,
                "val" => &mut split.val,
                _ => &mut split.extra,
            };
            ids.push(s.scene_id.clone());
            scenes.insert(s.scene_id.clone(), s);
        }
    }
    Ok(Dataset {
        config: cfg.clone(),
        vocab,
        split,
        scenes,
    })
}

fn io_err(path: &Path, source: std::io::Error) -> SceneError {
    SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes `manifest.json`, `vocab.json` and `scenes/<id>.json`. `run` is
/// stored verbatim under the manifest's `"run"` key.
pub fn save_dataset(ds: &Dataset, dir: &Path, run: Option<Value>) -> Result<(), SceneError> {
    let scene_dir = dir.join("scenes");
    std::fs::create_dir_all(&scene_dir).map_err(|e| io_err(&scene_dir, e))?;
    for s in ds.scenes.values() {
        save_scene(s, &scene_dir.join(format!("{}.json", s.scene_id)))?;
    }
    ds.vocab.save(&dir.join("vocab.json"))?;
    let mut manifest = serde_json::json!({
        "format": DATASET_FORMAT,
        "config": ds.config,
        "split": ds.split,
        "hash": ds.hash(),
    });
    if let Some(r) = run {
        manifest["run"] = r;
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable")).map_err(|e| io_err(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, SceneError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let manifest: Value =
        serde_json::from_str(&text).map_err(|e| SceneError::Config(format!("{}: {e}", path.display())))?;
    if manifest["format"] != DATASET_FORMAT {
        return Err(SceneError::Config(format!(
            "{}: not a dataset manifest",
            path.display()
        )));
    }
    let config: DatasetConfig = serde_json::from_value(manifest["config"].clone())
        .map_err(|e| SceneError::Config(format!("manifest config: {e}")))?;
    let split: DatasetSplit = serde_json::from_value(manifest["split"].clone())
        .map_err(|e| SceneError::Config(format!("manifest split: {e}")))?;
    split.validate()?;
    let vocab = Vocab::load(&dir.join("vocab.json"))?;
    let mut scenes = BTreeMap::new();
    for id in split.train.iter().chain(&split.val).chain(&split.extra) {
        let s = load_scene(&dir.join("scenes").join(format!("{id}.json")))?;
        scenes.insert(id.clone(), s);
    }
    Ok(Dataset {
        config,
        vocab,
        split,
        scenes,
    })
}

/// Samples `floor(ratio * annotated_count)` extra scene ids with replacement.
pub fn sample_extra<R: Rng>(
    extra_ids: &[String],
    ratio: f64,
    annotated_count: usize,
    rng: &mut R,
) -> Result<Vec<String>, SceneError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(SceneError::Config(format!("extra ratio {ratio} outside [0, 1]")));
    }
    let n = (ratio * annotated_count as f64 + 1e-9).floor() as usize;
    if n == 0 {
        return Ok(Vec::new());
    }
    if extra_ids.is_empty() {
        return Err(SceneError::Config("extra ratio > 0 but the extra pool is empty".into()));
    }
    Ok((0..n)
        .map(|_| extra_ids[rng.gen_range(0..extra_ids.len())].clone())
        .collect())
}

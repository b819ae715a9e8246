use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Scene, SceneError, CLASS_NAMES, COLOR_NAMES};
use crate::rng;

pub const PAD: u32 = 0;
pub const SOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];
const FUNCTION_WORDS: [&str; 16] = [
    "the", "is", "a", "it", ".", "there", "to", "of", "in", "and", "left", "right", "front", "behind", "near",
    "between",
];
const SIZE_WORDS: [&str; 2] = ["small", "large"];

/// Closed token vocabulary with reserved ids `0=<pad>, 1=<sos>, 2=<eos>, 3=<unk>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        let words = RESERVED
            .iter()
            .chain(FUNCTION_WORDS.iter())
            .chain(SIZE_WORDS.iter())
            .chain(COLOR_NAMES.iter())
            .chain(CLASS_NAMES.iter())
            .map(|s| s.to_string())
            .collect();
        Self::from_tokens(words).expect("builtin vocabulary is valid")
    }
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, SceneError> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(SceneError::Config(format!("token {i} must be {r}")));
            }
        }
        let mut ids = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(SceneError::Config(format!("duplicate token {t}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("<unk>", String::as_str)
    }

    /// Word tokens that are not reserved.
    pub fn words(&self) -> impl Iterator<Item = (u32, &str)> {
        self.tokens
            .iter()
            .enumerate()
            .skip(RESERVED.len())
            .map(|(i, t)| (i as u32, t.as_str()))
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Joins word tokens, skipping reserved markers other than `<unk>`.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != SOS && i != EOS)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn class_token(&self, class: usize) -> u32 {
        self.id(CLASS_NAMES[class])
    }

    pub fn color_token(&self, color: usize) -> u32 {
        self.id(COLOR_NAMES[color])
    }

    /// `{"token": id, ...}`
    pub fn save(&self, path: &Path) -> Result<(), SceneError> {
        let map: BTreeMap<&str, u32> = self.ids.iter().map(|(k, &v)| (k.as_str(), v)).collect();
        let s = serde_json::to_string_pretty(&map).expect("serializable");
        std::fs::write(path, s).map_err(|source| SceneError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, SceneError> {
        let s = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let map: BTreeMap<String, u32> =
            serde_json::from_str(&s).map_err(|e| SceneError::Config(format!("vocabulary: {e}")))?;
        let mut tokens = vec![String::new(); map.len()];
        for (t, i) in map {
            let slot = tokens
                .get_mut(i as usize)
                .ok_or_else(|| SceneError::Config(format!("vocabulary id {i} out of range")))?;
            *slot = t;
        }
        Self::from_tokens(tokens)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LangConfig {
    pub seed: u64,
    /// Each object gets between 1 and this many descriptions.
    pub max_per_object: usize,
    /// Maximum description length in words (sos/eos excluded).
    pub max_words: usize,
    pub near_distance: f64,
}

impl Default for LangConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_per_object: 3,
            max_words: 14,
            near_distance: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Relation {
    Left(usize),
    Right(usize),
    Front(usize),
    Behind(usize),
    Near(usize),
    Between(usize, usize),
}

fn horizontal(c: &[f64; 3]) -> [f64; 2] {
    [c[0], c[1]]
}

/// Directional relation of `t` with respect to anchor `a`, scene frame with
/// the viewer looking along +y.
fn directional(t: [f64; 2], a: [f64; 2], anchor: usize) -> Relation {
    let dx = t[0] - a[0];
    let dy = t[1] - a[1];
    if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            Relation::Left(anchor)
        } else {
            Relation::Right(anchor)
        }
    } else if dy < 0.0 {
        Relation::Front(anchor)
    } else {
        Relation::Behind(anchor)
    }
}

fn is_between(t: [f64; 2], a: [f64; 2], b: [f64; 2]) -> bool {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let at = [t[0] - a[0], t[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 < 1e-9 {
        return false;
    }
    let s = (ab[0] * at[0] + ab[1] * at[1]) / len2;
    let perp = (ab[0] * at[1] - ab[1] * at[0]).abs() / len2.sqrt();
    (0.25..=0.75).contains(&s) && perp < 0.6
}

struct Phrases<'a> {
    scene: &'a Scene,
}

impl Phrases<'_> {
    fn anchor(&self, k: usize) -> Vec<&'static str> {
        let o = &self.scene.objects[k];
        vec!["the", COLOR_NAMES[o.color], CLASS_NAMES[o.semantic_class]]
    }

    fn target(&self, k: usize, with_size: bool) -> Vec<&'static str> {
        let o = &self.scene.objects[k];
        let mut v = Vec::new();
        if with_size {
            if let Some(w) = o.size.word() {
                v.push(w);
            }
        }
        v.push(COLOR_NAMES[o.color]);
        v.push(CLASS_NAMES[o.semantic_class]);
        v
    }

    fn relation(&self, r: &Relation) -> Vec<&'static str> {
        let mut v = Vec::new();
        match *r {
            Relation::Left(a) => {
                v.extend(["to", "the", "left", "of"]);
                v.extend(self.anchor(a));
            }
            Relation::Right(a) => {
                v.extend(["to", "the", "right", "of"]);
                v.extend(self.anchor(a));
            }
            Relation::Front(a) => {
                v.extend(["in", "front", "of"]);
                v.extend(self.anchor(a));
            }
            Relation::Behind(a) => {
                v.push("behind");
                v.extend(self.anchor(a));
            }
            Relation::Near(a) => {
                v.push("near");
                v.extend(self.anchor(a));
            }
            Relation::Between(a, b) => {
                v.push("between");
                v.extend(self.anchor(a));
                v.push("and");
                v.extend(self.anchor(b));
            }
        }
        v
    }

    /// Templates: `the X is R`, `a X . it is R`, `there is a X R`; with no
    /// relation available: `there is a X`, `a X`.
    fn render(&self, k: usize, rel: Option<&Relation>, template: usize, with_size: bool) -> Vec<&'static str> {
        let obj = self.target(k, with_size);
        let mut v: Vec<&'static str> = Vec::new();
        match rel {
            Some(r) => {
                let rp = self.relation(r);
                match template {
                    0 => {
                        v.push("the");
                        v.extend(obj);
                        v.push("is");
                        v.extend(rp);
                    }
                    1 => {
                        v.push("a");
                        v.extend(obj);
                        v.extend([".", "it", "is"]);
                        v.extend(rp);
                    }
                    _ => {
                        v.extend(["there", "is", "a"]);
                        v.extend(obj);
                        v.extend(rp);
                    }
                }
            }
            None => {
                if template.is_multiple_of(2) {
                    v.extend(["there", "is", "a"]);
                } else {
                    v.push("a");
                }
                v.extend(obj);
            }
        }
        v
    }
}

fn candidate_relations(scene: &Scene, k: usize, cfg: &LangConfig) -> Vec<Relation> {
    let centers: Vec<[f64; 2]> = scene.objects.iter().map(|o| horizontal(&o.bbox.center())).collect();
    let t = centers[k];
    let n = centers.len();
    let mut out = Vec::new();
    for a in (0..n).filter(|&a| a != k) {
        out.push(directional(t, centers[a], a));
    }
    let dist = |a: usize| ((t[0] - centers[a][0]).powi(2) + (t[1] - centers[a][1]).powi(2)).sqrt();
    if let Some(nearest) = (0..n)
        .filter(|&a| a != k)
        .min_by(|&a, &b| dist(a).total_cmp(&dist(b)).then(a.cmp(&b)))
    {
        if dist(nearest) < cfg.near_distance {
            out.push(Relation::Near(nearest));
        }
    }
    for a in 0..n {
        for b in a + 1..n {
            if a != k && b != k && is_between(t, centers[a], centers[b]) {
                out.push(Relation::Between(a, b));
            }
        }
    }
    out
}

/// Attaches 1..=K templated descriptions to every object and marks the
/// scene annotated. Deterministic in `(scene_id, cfg)`.
///
/// An object that shares its class with other objects describes itself
/// first relative to its nearest same-class sibling, and no description of
/// one object repeats a description of a same-class object.
pub fn generate_descriptions(mut scene: Scene, vocab: &Vocab, cfg: &LangConfig) -> Scene {
    let mut rng = rng::rng(rng::derive_str(cfg.seed, &scene.scene_id), &[0x1a9]);
    let phrases = Phrases { scene: &scene };
    let n = scene.objects.len();
    let mut texts: Vec<Vec<Vec<&'static str>>> = vec![Vec::new(); n];
    let centers: Vec<[f64; 2]> = scene.objects.iter().map(|o| horizontal(&o.bbox.center())).collect();
    for k in 0..n {
        let class = scene.objects[k].semantic_class;
        let siblings: Vec<usize> = (0..n)
            .filter(|&j| j != k && scene.objects[j].semantic_class == class)
            .collect();
        let mut rels = candidate_relations(&scene, k, cfg);
        rels.shuffle(&mut rng);
        let d2 = |j: usize| (centers[k][0] - centers[j][0]).powi(2) + (centers[k][1] - centers[j][1]).powi(2);
        if let Some(&sib) = siblings
            .iter()
            .min_by(|&&a, &&b| d2(a).total_cmp(&d2(b)).then(a.cmp(&b)))
        {
            let first = directional(centers[k], centers[sib], sib);
            rels.retain(|r| *r != first);
            rels.insert(0, first);
        }
        let want = rng.gen_range(1..=cfg.max_per_object.max(1));
        let mut options: Vec<Option<Relation>> = rels.into_iter().map(Some).collect();
        if options.is_empty() {
            options.push(None);
        }
        let mut tries = 0;
        let mut oi = 0;
        while texts[k].len() < want && tries < 8 * want + options.len() {
            tries += 1;
            let rel = options[oi % options.len()].clone();
            oi += 1;
            let with_size = rng.gen_bool(0.5);
            let mut template = rng.gen_range(0..3);
            let mut words = phrases.render(k, rel.as_ref(), template, with_size);
            while words.len() > cfg.max_words && template > 0 {
                template -= 1;
                words = phrases.render(k, rel.as_ref(), template, with_size);
            }
            if words.len() > cfg.max_words {
                continue;
            }
            let clash = texts[k].contains(&words) || siblings.iter().any(|&j| texts[j].contains(&words));
            if clash {
                continue;
            }
            texts[k].push(words);
        }
        if texts[k].is_empty() {
            // every candidate clashed; fall back to the plain first option
            texts[k].push(phrases.render(k, options[0].as_ref(), 0, true));
        }
    }
    for (o, ts) in scene.objects.iter_mut().zip(texts) {
        o.descriptions = ts
            .into_iter()
            .map(|t| t.into_iter().map(|w| vocab.id(w)).collect())
            .collect();
    }
    scene.annotated = true;
    scene
}

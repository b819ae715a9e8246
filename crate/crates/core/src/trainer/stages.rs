use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::detector::{proposal_inputs, Detection, DetectionLoss};
use crate::eval::MetricsReport;
use crate::geometry::{iou, Aabb, Point3};
use crate::listener::{listener_loss, PREFIX as LISTENER_PREFIX, PROBE_PREFIX};
use crate::reward::{cider_fit, compute_reward, reinforce_loss_batch, CiderCorpus, ListenerLosses, RewardRecord};
use crate::rng;
use crate::scene::{sample_extra, Dataset, Scene};
use crate::speaker::{match_to_gt, orientation_loss, PREFIX as SPEAKER_PREFIX};
use crate::tensor::{Adam, Checkpoint, Graph, Tensor, Var};

use super::evaluate::{evaluate, EvalOptions, EvalTasks};
use super::{
    augment, checkpoint_path, checkpoint_stage, completed_checkpoint, io_err, latest_checkpoint, listener_tokens,
    object_key, save_checkpoint, Model, Result, SampleMode, Stage, TrainConfig, TrainError,
};

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const REWARD_LOG: &str = "rewards.jsonl";
pub const EVAL_LOG: &str = "eval.jsonl";
pub const EVAL_REPORT: &str = "eval.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: Stage,
    pub iterations: usize,
    pub checkpoint: PathBuf,
    pub report: MetricsReport,
}

type Record = BTreeMap<String, f64>;

/// Running means of named scalars over the scenes of one batch.
#[derive(Default)]
struct Means {
    sums: BTreeMap<String, (f64, f64)>,
}

impl Means {
    fn add(&mut self, key: &str, v: f64) {
        let e = self.sums.entry(key.to_string()).or_insert((0.0, 0.0));
        e.0 += v;
        e.1 += 1.0;
    }

    fn into_record(self) -> Record {
        self.sums.into_iter().map(|(k, (s, n))| (k, s / n)).collect()
    }
}

struct JsonLog {
    out: BufWriter<File>,
}

impl JsonLog {
    /// Opens a log, keeping only records with `iter ≤ keep_through`.
    fn open(path: &Path, keep_through: Option<usize>) -> Result<Self> {
        let mut kept = Vec::new();
        if let (Some(limit), true) = (keep_through, path.exists()) {
            let f = File::open(path).map_err(io_err(path))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(io_err(path))?;
                let v: Value = serde_json::from_str(&line)?;
                if v.get("iter")
                    .and_then(Value::as_u64)
                    .is_some_and(|i| i as usize <= limit)
                {
                    kept.push(line);
                }
            }
        }
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(io_err(path))?;
        let mut out = BufWriter::new(f);
        for line in kept {
            writeln!(out, "{line}").map_err(io_err(path))?;
        }
        Ok(Self { out })
    }

    fn write(&mut self, v: &Value) -> Result<()> {
        serde_json::to_writer(&mut self.out, v)?;
        self.out.write_all(b"\n").map_err(|e| TrainError::Io {
            path: PathBuf::new(),
            source: e,
        })
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| TrainError::Io {
            path: PathBuf::new(),
            source: e,
        })
    }
}

/// Proposal with the highest positive IoU against `gt`, ties to the lower
/// index.
fn best_proposal(boxes: &[Aabb], gt: &Aabb) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, b) in boxes.iter().enumerate() {
        let v = iou(b, gt);
        if v > 0.0 && best.is_none_or(|(_, bv)| v > bv) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Up to `max` described objects of a scene with one randomly chosen
/// description each, as `(object index, description index)`.
fn sample_pairs<R: Rng>(scene: &Scene, max: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let described: Vec<usize> = (0..scene.objects.len())
        .filter(|&o| !scene.objects[o].descriptions.is_empty())
        .collect();
    let mut chosen: Vec<usize> = if described.len() > max {
        let mut idx: Vec<usize> = sample(rng, described.len(), max)
            .into_iter()
            .map(|i| described[i])
            .collect();
        idx.sort_unstable();
        idx
    } else {
        described
    };
    chosen.dedup();
    chosen
        .into_iter()
        .map(|o| (o, rng.gen_range(0..scene.objects[o].descriptions.len())))
        .collect()
}

fn pick<'a, R: Rng>(pool: &'a [String], rng: &mut R) -> &'a str {
    &pool[rng.gen_range(0..pool.len())]
}

/// Whether joint-training step `i` (1-based) draws from the extra pool when
/// `ratio` extra batches are interleaved per annotated batch.
fn is_extra_step(i: usize, ratio: f64) -> bool {
    if ratio <= 0.0 {
        return false;
    }
    let f = ratio / (1.0 + ratio);
    ((i as f64) * f + 1e-9).floor() > (((i - 1) as f64) * f + 1e-9).floor()
}

/// Total optimizer steps of a stage.
fn total_steps(cfg: &TrainConfig, stage: Stage) -> usize {
    let budget = cfg.iterations.get(stage);
    if stage == Stage::JOINT {
        budget + (budget as f64 * cfg.extra_ratio + 1e-9).floor() as usize
    } else {
        budget
    }
}

fn trainable(stage: Stage) -> &'static [&'static str] {
    match stage.number() {
        1 => &[crate::detector::PREFIX],
        2 => &[crate::detector::PREFIX, SPEAKER_PREFIX],
        3 => &[LISTENER_PREFIX, PROBE_PREFIX],
        _ => &[crate::detector::PREFIX, SPEAKER_PREFIX, LISTENER_PREFIX],
    }
}

/// Scales `loss` by `weight`, backpropagates and accumulates into the store.
fn accumulate(model: &mut Model, g: &mut Graph, loss: Var, weight: f64) -> Result<()> {
    let scaled = g.scale(loss, weight);
    let grads = g.backward(scaled)?;
    model.store.accumulate(g, &grads);
    Ok(())
}

fn record_det(m: &mut Means, g: &Graph, l: &DetectionLoss) {
    m.add("det", g.item(l.total));
    m.add("sem", g.item(l.sem));
    m.add("offset_reg", g.item(l.offset_reg));
    m.add("offset_dir", g.item(l.offset_dir));
    if let Some(s) = l.score {
        m.add("score", g.item(s));
    }
}

fn boxes_of(det: &Detection) -> Vec<Aabb> {
    det.proposals.iter().map(|p| p.bbox).collect()
}

fn gt_centers(scene: &Scene) -> (Vec<Aabb>, Vec<Point3>) {
    let boxes: Vec<Aabb> = scene.objects.iter().map(|o| o.bbox).collect();
    let centers = boxes.iter().map(Aabb::center).collect();
    (boxes, centers)
}

/// Shared state of one stage run.
struct Run<'a> {
    cfg: &'a TrainConfig,
    data: &'a Dataset,
    stage: Stage,
    train_ids: Vec<String>,
    detector_pool: Vec<String>,
    extra_pool: Vec<String>,
    corpus: Option<CiderCorpus>,
    rewards: Option<JsonLog>,
}

impl Run<'_> {
    fn step(&mut self, model: &mut Model, iter: usize) -> Result<Record> {
        let mut r = rng::rng(self.cfg.seed, &[self.stage.number() as u64, iter as u64]);
        match self.stage.number() {
            1 => self.step_detector(model, iter, &mut r),
            2 => self.step_speaker(model, &mut r),
            3 => self.step_listener(model, &mut r),
            _ => self.step_joint(model, iter, &mut r),
        }
    }

    fn step_detector(&self, model: &mut Model, iter: usize, r: &mut rng::Rng) -> Result<Record> {
        let b = self.cfg.scenes_per_batch;
        let with_score = iter > self.cfg.score_warmup;
        let mut m = Means::default();
        for _ in 0..b {
            let scene = self.data.scene(pick(&self.detector_pool, r))?;
            let s = augment(scene, &self.cfg.augment, true, r);
            let mut g = Graph::new();
            let det = model
                .detector
                .detect(&mut g, &model.store, &s.points, &s.features, false)?;
            let l = model
                .detector
                .detection_loss(&mut g, &model.store, &det, &s, with_score)?;
            record_det(&mut m, &g, &l);
            m.add("loss", g.item(l.total));
            m.add("clusters", det.clusters.len() as f64);
            accumulate(model, &mut g, l.total, 1.0 / b as f64)?;
        }
        Ok(m.into_record())
    }

    fn step_speaker(&self, model: &mut Model, r: &mut rng::Rng) -> Result<Record> {
        let cfg = self.cfg;
        let b = cfg.scenes_per_batch;
        let mut m = Means::default();
        let mut skipped = 0usize;
        for _ in 0..b {
            let scene = self.data.scene(pick(&self.train_ids, r))?;
            let s = augment(scene, &cfg.augment, false, r);
            let pairs = sample_pairs(&s, cfg.descriptions_per_scene, r);
            let mut g = Graph::new();
            let det = model
                .detector
                .detect(&mut g, &model.store, &s.points, &s.features, true)?;
            let l = model.detector.detection_loss(&mut g, &model.store, &det, &s, true)?;
            record_det(&mut m, &g, &l);
            let mut total = l.total;
            match det.proposal_features {
                Some(f) => {
                    let boxes = boxes_of(&det);
                    let (gt, centers) = gt_centers(&s);
                    let mut targets = Vec::new();
                    let mut words = Vec::new();
                    for &(o, d) in &pairs {
                        match best_proposal(&boxes, &gt[o]) {
                            Some(t) => {
                                targets.push(t);
                                words.push(s.objects[o].descriptions[d].clone());
                            }
                            None => skipped += 1,
                        }
                    }
                    let inputs = proposal_inputs(&mut g, f, &boxes)?;
                    let ctx = model.speaker.encode_scene(&mut g, &model.store, inputs, &boxes)?;
                    if !targets.is_empty() {
                        let mle = model.speaker.mle_loss(&mut g, &model.store, &ctx, &targets, &words)?;
                        m.add("mle", g.item(mle));
                        total = g.add(total, mle)?;
                    }
                    if cfg.ori_in_stage2 && cfg.ori_weight > 0.0 {
                        let matches = match_to_gt(&boxes, &gt, cfg.iou_threshold);
                        let (ori, n) = orientation_loss(&mut g, ctx.edge_logits, &ctx.edges, &matches, &centers)?;
                        if n > 0 {
                            m.add("ori", g.item(ori));
                            let w = g.scale(ori, cfg.ori_weight);
                            total = g.add(total, w)?;
                        }
                    }
                    m.add("proposals", boxes.len() as f64);
                }
                None => skipped += pairs.len(),
            }
            m.add("loss", g.item(total));
            accumulate(model, &mut g, total, 1.0 / b as f64)?;
        }
        let mut rec = m.into_record();
        rec.insert("skipped_pairs".into(), skipped as f64);
        Ok(rec)
    }

    fn step_listener(&self, model: &mut Model, r: &mut rng::Rng) -> Result<Record> {
        let cfg = self.cfg;
        let b = cfg.scenes_per_batch;
        let mut m = Means::default();
        let mut skipped = 0usize;
        for _ in 0..b {
            let scene = self.data.scene(pick(&self.train_ids, r))?;
            let s = augment(scene, &cfg.augment, false, r);
            let pairs = sample_pairs(&s, cfg.descriptions_per_scene, r);
            if pairs.is_empty() {
                continue;
            }
            let mut g = Graph::new();
            let det = model
                .detector
                .detect(&mut g, &model.store, &s.points, &s.features, true)?;
            let (gt, _) = gt_centers(&s);
            let mut terms = Vec::new();
            if let Some(f) = det.proposal_features {
                let boxes = boxes_of(&det);
                let inputs = proposal_inputs(&mut g, f, &boxes)?;
                for &(o, d) in &pairs {
                    let Some(t) = best_proposal(&boxes, &gt[o]) else {
                        skipped += 1;
                        continue;
                    };
                    let tokens = listener_tokens(&s.objects[o].descriptions[d]);
                    let out = model.listener.forward(&mut g, &model.store, inputs, &tokens)?;
                    let ll = listener_loss(&mut g, &out, t, s.objects[o].semantic_class)?;
                    m.add("loc", g.item(ll.loc));
                    m.add("lobjcls", g.item(ll.lobjcls));
                    m.add("chance_loc", (boxes.len() as f64).ln());
                    terms.push(g.add(ll.loc, ll.lobjcls)?);
                }
            } else {
                skipped += pairs.len();
            }
            let members = s.instance_members();
            // The detector is frozen in this stage, so its embeddings equal
            // the probe copy's.
            let (feat, _) = model.probe_detector.score_clusters(
                &mut g,
                &model.store,
                det.points.embeddings,
                &s.points,
                &members,
            )?;
            let gt_inputs = proposal_inputs(&mut g, feat, &gt)?;
            let mut probe_terms = Vec::new();
            for &(o, d) in &pairs {
                let tokens = listener_tokens(&s.objects[o].descriptions[d]);
                let out = model.probe.forward(&mut g, &model.store, gt_inputs, &tokens)?;
                let ll = listener_loss(&mut g, &out, o, s.objects[o].semantic_class)?;
                m.add("probe_loc", g.item(ll.loc));
                m.add("probe_lobjcls", g.item(ll.lobjcls));
                probe_terms.push(g.add(ll.loc, ll.lobjcls)?);
            }
            let mut total = mean_of(&mut g, &probe_terms)?;
            if !terms.is_empty() {
                let main = mean_of(&mut g, &terms)?;
                total = g.add(total, main)?;
            }
            m.add("loss", g.item(total));
            accumulate(model, &mut g, total, 1.0 / b as f64)?;
        }
        let mut rec = m.into_record();
        rec.insert("skipped_pairs".into(), skipped as f64);
        Ok(rec)
    }

    fn step_joint(&mut self, model: &mut Model, iter: usize, r: &mut rng::Rng) -> Result<Record> {
        let cfg = self.cfg;
        let b = cfg.scenes_per_batch;
        let extra = is_extra_step(iter, cfg.extra_ratio) && !self.extra_pool.is_empty();
        let mut m = Means::default();
        m.add("extra", extra as u8 as f64);
        for _ in 0..b {
            let pool = if extra { &self.extra_pool } else { &self.train_ids };
            let scene = self.data.scene(pick(pool, r))?;
            let s = augment(scene, &cfg.augment, false, r);
            let mut g = Graph::new();
            let det = model
                .detector
                .detect(&mut g, &model.store, &s.points, &s.features, true)?;
            let l = model.detector.detection_loss(&mut g, &model.store, &det, &s, true)?;
            record_det(&mut m, &g, &l);
            let mut total = l.total;
            if let Some(f) = det.proposal_features {
                let boxes = boxes_of(&det);
                let (gt, centers) = gt_centers(&s);
                let targets = self.joint_targets(model, &s, &det, &boxes, r);
                let inputs = proposal_inputs(&mut g, f, &boxes)?;
                let ctx = model.speaker.encode_scene(&mut g, &model.store, inputs, &boxes)?;
                if !targets.is_empty() {
                    let inp = g.value(inputs).clone();
                    let props: Vec<usize> = targets.iter().map(|t| t.proposal).collect();
                    let beams = match cfg.sampling {
                        SampleMode::Beam => model
                            .speaker
                            .decode_beam(&model.store, &inp, &boxes, &props, cfg.beam)?,
                        SampleMode::Multinomial => {
                            let rep: Vec<usize> =
                                props.iter().flat_map(|&p| std::iter::repeat_n(p, cfg.beam)).collect();
                            let seqs = model.speaker.decode_sample(&model.store, &inp, &boxes, &rep, r)?;
                            seqs.chunks(cfg.beam).map(<[_]>::to_vec).collect()
                        }
                    };
                    let greedy = model.speaker.decode_greedy(&model.store, &inp, &boxes, &props)?;
                    let mut sample_targets = Vec::new();
                    let mut sample_words = Vec::new();
                    let mut advantages = Vec::new();
                    for (ti, t) in targets.iter().enumerate() {
                        let base = greedy[ti].words();
                        let base_losses = self.reward_losses(model, &inp, &base, t)?;
                        let mut records: Vec<RewardRecord> = Vec::new();
                        for seq in &beams[ti] {
                            let words = seq.words();
                            let losses = self.reward_losses(model, &inp, &words, t)?;
                            let rec = compute_reward(
                                self.corpus.as_ref().filter(|_| t.key.is_some()),
                                t.key.as_deref(),
                                &words,
                                losses,
                                &base,
                                base_losses,
                                cfg.reward,
                            )?;
                            m.add("reward", rec.reward);
                            m.add("advantage", rec.advantage);
                            if t.key.is_some() {
                                m.add("cider", rec.cider);
                            }
                            sample_targets.push(t.proposal);
                            sample_words.push(words);
                            advantages.push(rec.advantage);
                            records.push(rec);
                        }
                        if let (Some(log), Some(top)) = (self.rewards.as_mut(), records.first()) {
                            let adv_mean = records.iter().map(|x| x.advantage).sum::<f64>() / records.len() as f64;
                            let mut v = serde_json::to_value(top)?;
                            let o = v.as_object_mut().expect("record is an object");
                            o.insert("iter".into(), json!(iter));
                            o.insert("scene_id".into(), json!(s.scene_id));
                            o.insert("target".into(), json!(t.label));
                            o.insert("extra".into(), json!(extra));
                            o.insert("samples".into(), json!(records.len()));
                            o.insert("advantage_mean".into(), json!(adv_mean));
                            log.write(&v)?;
                        }
                    }
                    let (lp, _) =
                        model
                            .speaker
                            .sequence_logprobs(&mut g, &model.store, &ctx, &sample_targets, &sample_words)?;
                    let rl = reinforce_loss_batch(&mut g, lp, &advantages)?;
                    m.add("reinforce", g.item(rl));
                    total = g.add(total, rl)?;

                    let mut terms = Vec::new();
                    for (ti, t) in targets.iter().enumerate() {
                        let mut texts = vec![greedy[ti].words()];
                        if let Some(d) = &t.description {
                            texts.push(d.clone());
                        }
                        for words in texts {
                            let out = model
                                .listener
                                .forward(&mut g, &model.store, inputs, &listener_tokens(&words))?;
                            let ll = listener_loss(&mut g, &out, t.proposal, t.class)?;
                            m.add("listener_loc", g.item(ll.loc));
                            m.add("listener_lobjcls", g.item(ll.lobjcls));
                            terms.push(g.add(ll.loc, ll.lobjcls)?);
                        }
                    }
                    let lis = mean_of(&mut g, &terms)?;
                    total = g.add(total, lis)?;
                }
                if cfg.ori_weight > 0.0 {
                    let matches = match_to_gt(&boxes, &gt, cfg.iou_threshold);
                    let (ori, n) = orientation_loss(&mut g, ctx.edge_logits, &ctx.edges, &matches, &centers)?;
                    if n > 0 {
                        m.add("ori", g.item(ori));
                        let w = g.scale(ori, cfg.ori_weight);
                        total = g.add(total, w)?;
                    }
                }
            }
            m.add("loss", g.item(total));
            accumulate(model, &mut g, total, 1.0 / b as f64)?;
        }
        Ok(m.into_record())
    }

    /// Objects described in a joint-training scene: sampled GT objects
    /// mapped to their best proposal for annotated scenes, random detected
    /// proposals otherwise.
    fn joint_targets(
        &self,
        model: &Model,
        s: &Scene,
        det: &Detection,
        boxes: &[Aabb],
        r: &mut rng::Rng,
    ) -> Vec<JointTarget> {
        let max = self.cfg.descriptions_per_scene;
        if s.annotated {
            sample_pairs(s, max, r)
                .into_iter()
                .filter_map(|(o, d)| {
                    let obj = &s.objects[o];
                    best_proposal(boxes, &obj.bbox).map(|p| JointTarget {
                        proposal: p,
                        class: obj.semantic_class,
                        key: self
                            .corpus
                            .as_ref()
                            .map(|_| object_key(&s.scene_id, obj.instance_id))
                            .filter(|k| self.corpus.as_ref().is_some_and(|c| c.contains(k))),
                        description: Some(obj.descriptions[d].clone()),
                        label: obj.instance_id,
                    })
                })
                .collect()
        } else {
            let n = det.proposals.len();
            let mut idx: Vec<usize> = sample(r, n, max.min(n)).into_iter().collect();
            idx.sort_unstable();
            idx.into_iter()
                .filter(|&p| det.proposals[p].predicted_class < model.num_classes)
                .map(|p| JointTarget {
                    proposal: p,
                    class: det.proposals[p].predicted_class,
                    key: None,
                    description: None,
                    label: p,
                })
                .collect()
        }
    }

    /// Listener losses of a caption for reward computation, with the
    /// listener evaluated outside the training graph.
    fn reward_losses(&self, model: &Model, inputs: &Tensor, words: &[u32], t: &JointTarget) -> Result<ListenerLosses> {
        if self.cfg.reward.alpha == 0.0 {
            return Ok(ListenerLosses::default());
        }
        let mut g = Graph::no_grad();
        let x = g.constant(inputs.clone());
        let out = model
            .listener
            .forward(&mut g, &model.store, x, &listener_tokens(words))?;
        let ll = listener_loss(&mut g, &out, t.proposal, t.class)?;
        Ok(ListenerLosses {
            loc: g.item(ll.loc),
            lobjcls: g.item(ll.lobjcls),
        })
    }
}

struct JointTarget {
    proposal: usize,
    class: usize,
    /// Caption-corpus key; `None` cancels the CIDEr reward.
    key: Option<String>,
    description: Option<Vec<u32>>,
    /// Instance id for annotated scenes, proposal index otherwise.
    label: usize,
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Trains one stage under `out/stage{N}`. Stages after the first start
/// from the completed checkpoint of the previous stage found under `init`
/// (default `out`). With `resume`, training continues from the latest
/// checkpoint of this stage, including optimizer state.
pub fn train_stage(
    cfg: &TrainConfig,
    data: &Dataset,
    stage: Stage,
    out: &Path,
    init: Option<&Path>,
    resume: bool,
) -> Result<StageSummary> {
    cfg.validate()?;
    let gen = &data.config.gen;
    let mut model = Model::new(cfg, gen.num_classes, gen.feature_dim, data.vocab.len());
    let dir = out.join(stage.dir_name());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut adam = Adam::new(cfg.lr.get(stage)).with_clip(cfg.clip_norm);

    let resumed = if resume { latest_checkpoint(out, stage)? } else { None };
    let start = match &resumed {
        Some((iter, path)) => {
            let ck = Checkpoint::load(path)?;
            if checkpoint_stage(&ck) != Some(stage.number()) {
                return Err(TrainError::StageMismatch {
                    path: path.clone(),
                    found: checkpoint_stage(&ck).unwrap_or(0),
                    needed: stage.to_string(),
                });
            }
            model.store.load_checkpoint(&ck)?;
            adam.import_state(&ck.extra)?;
            *iter
        }
        None => {
            if let Some(prev) = stage.previous() {
                let ck = completed_checkpoint(init.unwrap_or(out), prev)?;
                model.store.load_checkpoint(&ck)?;
            }
            if stage == Stage::LISTENER {
                model.snapshot_detector()?;
            }
            for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
                let p = entry.map_err(io_err(&dir))?.path();
                if p.extension().is_some_and(|e| e == "ckpt") {
                    fs::remove_file(&p).map_err(io_err(&p))?;
                }
            }
            0
        }
    };
    let keep = resumed.as_ref().map(|(i, _)| *i);
    model.train_only(trainable(stage));
    if stage == Stage::SPEAKER && cfg.freeze_detector_stage2 {
        model.store.set_frozen_prefix(crate::detector::PREFIX, true);
    }

    let train_ids = data.split.train.clone();
    let mut detector_pool = train_ids.clone();
    detector_pool.extend(data.split.extra.iter().cloned());
    let extra_pool = if stage == Stage::JOINT {
        let mut r = rng::rng(rng::derive_str(cfg.seed, "extra-pool"), &[]);
        sample_extra(&data.split.extra, cfg.extra_ratio, train_ids.len(), &mut r)?
    } else {
        Vec::new()
    };
    let corpus = if stage == Stage::JOINT {
        let mut refs = BTreeMap::new();
        for s in data.train() {
            for o in &s.objects {
                if !o.descriptions.is_empty() {
                    refs.insert(object_key(&s.scene_id, o.instance_id), o.descriptions.clone());
                }
            }
        }
        Some(cider_fit(&refs)?)
    } else {
        None
    };
    let rewards = if stage == Stage::JOINT {
        Some(JsonLog::open(&dir.join(REWARD_LOG), keep)?)
    } else {
        None
    };
    let mut run = Run {
        cfg,
        data,
        stage,
        train_ids,
        detector_pool,
        extra_pool,
        corpus,
        rewards,
    };
    let mut metrics = JsonLog::open(&dir.join(METRICS_LOG), keep)?;
    let mut evals = JsonLog::open(&dir.join(EVAL_LOG), keep)?;
    let total = total_steps(cfg, stage);
    let val: Vec<&Scene> = {
        let all: Vec<&Scene> = data.val().collect();
        let n = cfg.eval_limit.unwrap_or(all.len()).min(all.len());
        all[..n].to_vec()
    };
    let opts = EvalOptions {
        iou_threshold: cfg.iou_threshold,
        beam: 1,
        tasks: EvalTasks::after_stage(stage.number()),
    };

    for iter in start + 1..=total {
        model.store.zero_grad();
        let mut rec = run.step(&mut model, iter)?;
        let loss = rec.get("loss").copied().unwrap_or(0.0);
        let gn = model.store.grad_norm();
        if !loss.is_finite() || !gn.is_finite() {
            return Err(TrainError::Diverged {
                stage: stage.number(),
                iter,
                detail: format!("loss {loss}, gradient norm {gn}"),
            });
        }
        rec.insert("grad_norm".into(), gn);
        adam.step(&mut model.store);
        let mut line = json!({"stage": stage.number(), "iter": iter});
        let obj = line.as_object_mut().expect("object");
        for (k, v) in rec {
            obj.insert(k, json!(v));
        }
        metrics.write(&line)?;
        if iter % cfg.checkpoint_every == 0 || iter == total {
            metrics.flush()?;
            if let Some(l) = run.rewards.as_mut() {
                l.flush()?;
            }
            save_checkpoint(
                &model,
                &adam,
                &checkpoint_path(out, stage, iter),
                stage,
                iter,
                iter == total,
                cfg,
            )?;
        }
        if cfg.eval_every > 0 && iter % cfg.eval_every == 0 && iter != total {
            let e = evaluate(&model, &val, &data.vocab, "val", &opts)?;
            evals.write(&json!({"stage": stage.number(), "iter": iter, "report": e.report}))?;
            evals.flush()?;
        }
    }
    if total == 0 {
        save_checkpoint(&model, &adam, &checkpoint_path(out, stage, 0), stage, 0, true, cfg)?;
    }
    metrics.flush()?;
    if let Some(l) = run.rewards.as_mut() {
        l.flush()?;
    }
    let e = evaluate(&model, &val, &data.vocab, "val", &opts)?;
    evals.write(&json!({"stage": stage.number(), "iter": total, "report": e.report}))?;
    evals.flush()?;
    let report_path = dir.join(EVAL_REPORT);
    fs::write(&report_path, serde_json::to_string_pretty(&e.report)?).map_err(io_err(&report_path))?;
    Ok(StageSummary {
        stage,
        iterations: total,
        checkpoint: checkpoint_path(out, stage, total),
        report: e.report,
    })
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::detector::{proposal_inputs, ProposalDump};
use crate::eval::{
    best_matches, caption_eval, detection_eval, grounding_eval, CaptionPrediction, GroundingOutcome, GtBox,
    MetricsReport, ScoredBox,
};
use crate::geometry::{iou, Aabb};
use crate::scene::{Scene, Vocab};
use crate::tensor::{Graph, Tensor};

use super::{listener_tokens, object_key, Model, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTasks {
    pub detection: bool,
    pub captioning: bool,
    pub grounding: bool,
    pub probe: bool,
}

impl EvalTasks {
    pub const ALL: EvalTasks = EvalTasks {
        detection: true,
        captioning: true,
        grounding: true,
        probe: true,
    };
    pub const NONE: EvalTasks = EvalTasks {
        detection: false,
        captioning: false,
        grounding: false,
        probe: false,
    };

    /// Tasks whose modules have been trained by the end of `stage`.
    pub fn after_stage(stage: u8) -> Self {
        EvalTasks {
            detection: true,
            captioning: stage >= 2,
            grounding: stage >= 3,
            probe: stage >= 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub iou_threshold: f64,
    /// 1 decodes greedily; larger values keep the best beam.
    pub beam: usize,
    pub tasks: EvalTasks,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            beam: 1,
            tasks: EvalTasks::ALL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionDump {
    pub tokens: Vec<u32>,
    pub text: String,
    pub bbox: Aabb,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingDump {
    pub scene_id: String,
    pub instance_id: usize,
    pub description: usize,
    pub chosen: Option<Aabb>,
    pub scores: Vec<f64>,
    pub iou: Option<f64>,
    pub unique: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeDump {
    pub scene_id: String,
    pub instance_id: usize,
    pub caption: Option<Vec<u32>>,
    pub chosen: Option<usize>,
    pub unique: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub report: MetricsReport,
    /// scene id → proposal index → caption.
    pub captions: BTreeMap<String, BTreeMap<usize, CaptionDump>>,
    pub grounding: Vec<GroundingDump>,
    pub proposals: Vec<ProposalDump>,
    pub probe: Vec<ProbeDump>,
}

/// Runs the full pipeline on `scenes` and scores every requested task.
/// Captions are assigned to GT objects by the highest-IoU proposal; the
/// probe grounds each object's caption among the GT boxes with the probe
/// listener, fed by the detector copy taken before listener training.
pub fn evaluate(
    model: &Model,
    scenes: &[&Scene],
    vocab: &Vocab,
    split: &str,
    opts: &EvalOptions,
) -> Result<EvalOutput> {
    let k = opts.iou_threshold;
    let tasks = opts.tasks;
    let store = &model.store;
    let mut out = EvalOutput::default();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut refs: BTreeMap<String, Vec<Vec<u32>>> = BTreeMap::new();
    let mut preds: BTreeMap<String, CaptionPrediction> = BTreeMap::new();
    let mut outcomes = Vec::new();
    let mut probe_outcomes = Vec::new();

    for scene in scenes {
        let mut g = Graph::no_grad();
        let det = model
            .detector
            .detect(&mut g, store, &scene.points, &scene.features, true)?;
        let boxes: Vec<Aabb> = det.proposals.iter().map(|p| p.bbox).collect();
        let inputs: Option<Tensor> = match det.proposal_features {
            Some(f) => {
                let v = proposal_inputs(&mut g, f, &boxes)?;
                Some(g.value(v).clone())
            }
            None => None,
        };
        let gt_boxes: Vec<Aabb> = scene.objects.iter().map(|o| o.bbox).collect();
        let counts = scene.class_counts();
        let unique = |class: usize| counts[class] == 1;
        if tasks.detection {
            dets.push(
                det.proposals
                    .iter()
                    .map(|p| ScoredBox {
                        bbox: p.bbox,
                        score: p.score,
                        class: p.predicted_class,
                    })
                    .collect::<Vec<_>>(),
            );
            gts.push(
                scene
                    .objects
                    .iter()
                    .map(|o| GtBox {
                        bbox: o.bbox,
                        class: o.semantic_class,
                    })
                    .collect::<Vec<_>>(),
            );
            out.proposals.push(ProposalDump::new(&scene.scene_id, &det.proposals));
        }

        let mut object_caption: Vec<Option<(Vec<u32>, f64)>> = vec![None; scene.objects.len()];
        if tasks.captioning || tasks.probe {
            if let Some(inp) = &inputs {
                let targets: Vec<usize> = (0..boxes.len()).collect();
                let seqs = if opts.beam <= 1 {
                    model.speaker.decode_greedy(store, inp, &boxes, &targets)?
                } else {
                    model
                        .speaker
                        .decode_beam(store, inp, &boxes, &targets, opts.beam)?
                        .into_iter()
                        .map(|mut b| b.remove(0))
                        .collect()
                };
                let words: Vec<Vec<u32>> = seqs.iter().map(|s| s.words()).collect();
                let dump = out.captions.entry(scene.scene_id.clone()).or_default();
                for (i, (w, s)) in words.iter().zip(&seqs).enumerate() {
                    dump.insert(
                        i,
                        CaptionDump {
                            tokens: s.tokens.clone(),
                            text: vocab.decode(w),
                            bbox: boxes[i],
                        },
                    );
                }
                for (o, m) in best_matches(&gt_boxes, &boxes).into_iter().enumerate() {
                    if let Some((i, v)) = m {
                        object_caption[o] = Some((words[i].clone(), v));
                    }
                }
            }
        }
        if tasks.captioning {
            for (o, obj) in scene.objects.iter().enumerate() {
                if obj.descriptions.is_empty() {
                    continue;
                }
                let key = object_key(&scene.scene_id, obj.instance_id);
                refs.insert(key.clone(), obj.descriptions.clone());
                if let Some((w, v)) = &object_caption[o] {
                    preds.insert(
                        key,
                        CaptionPrediction {
                            tokens: w.clone(),
                            iou: *v,
                        },
                    );
                }
            }
        }
        if tasks.grounding {
            for obj in &scene.objects {
                for (d, desc) in obj.descriptions.iter().enumerate() {
                    let tokens = listener_tokens(desc);
                    let (chosen, scores) = match &inputs {
                        Some(inp) => match model.listener.ground(store, inp, &tokens)? {
                            Some((i, p)) => (Some(boxes[i]), p),
                            None => (None, Vec::new()),
                        },
                        None => (None, Vec::new()),
                    };
                    let v = chosen.map(|b| iou(&b, &obj.bbox));
                    let u = unique(obj.semantic_class);
                    outcomes.push(GroundingOutcome { unique: u, iou: v });
                    out.grounding.push(GroundingDump {
                        scene_id: scene.scene_id.clone(),
                        instance_id: obj.instance_id,
                        description: d,
                        chosen,
                        scores,
                        iou: v,
                        unique: u,
                    });
                }
            }
        }
        if tasks.probe && !scene.objects.is_empty() {
            let members = scene.instance_members();
            let frozen = model
                .probe_detector
                .forward_points(&mut g, store, &scene.points, &scene.features)?;
            let (feat, _) =
                model
                    .probe_detector
                    .score_clusters(&mut g, store, frozen.embeddings, &scene.points, &members)?;
            let gt_inputs = proposal_inputs(&mut g, feat, &gt_boxes)?;
            let gt_inputs = g.value(gt_inputs).clone();
            for (o, obj) in scene.objects.iter().enumerate() {
                if obj.descriptions.is_empty() {
                    continue;
                }
                let u = unique(obj.semantic_class);
                let caption = object_caption[o].as_ref().map(|(w, _)| w.clone());
                let chosen = match &caption {
                    Some(w) => model
                        .probe
                        .ground(store, &gt_inputs, &listener_tokens(w))?
                        .map(|(i, _)| i),
                    None => None,
                };
                probe_outcomes.push(GroundingOutcome {
                    unique: u,
                    iou: chosen.map(|i| iou(&gt_boxes[i], &obj.bbox)),
                });
                out.probe.push(ProbeDump {
                    scene_id: scene.scene_id.clone(),
                    instance_id: obj.instance_id,
                    caption,
                    chosen,
                    unique: u,
                });
            }
        }
    }

    out.report = MetricsReport {
        split: split.to_string(),
        iou_threshold: k,
        captioning: if tasks.captioning && !refs.is_empty() {
            Some(caption_eval(&refs, &preds, k)?)
        } else {
            None
        },
        grounding: tasks.grounding.then(|| grounding_eval(&outcomes, k)),
        detection_map: tasks.detection.then(|| detection_eval(&dets, &gts, k).0),
        probe: tasks.probe.then(|| grounding_eval(&probe_outcomes, k)),
    };
    Ok(out)
}

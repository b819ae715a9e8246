//! Evaluation protocols: IoU-gated captioning metrics, grounding accuracy
//! split by target uniqueness, detection mAP, and the metrics report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, Aabb};
use crate::reward::{cider_fit, CiderCorpus, RewardError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("prediction for unknown ground-truth object {0}")]
    UnknownObject(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Smoothing count used in place of a zero n-gram match count.
pub const BLEU_EPSILON: f64 = 0.1;
pub const ROUGE_BETA: f64 = 1.2;

fn ngrams(tokens: &[u32], n: usize) -> BTreeMap<&[u32], usize> {
    let mut out = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence BLEU-4 with clipped n-gram precision, add-epsilon smoothing of
/// zero matches, uniform weights and the closest-reference brevity penalty.
pub fn bleu4(candidate: &[u32], references: &[Vec<u32>]) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=4 {
        let cand = ngrams(candidate, n);
        let total: usize = cand.values().sum();
        let mut max_ref: BTreeMap<&[u32], usize> = BTreeMap::new();
        for r in references {
            for (g, c) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = cand
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let num = if matched == 0 { BLEU_EPSILON } else { matched as f64 };
        log_p += (num / total.max(1) as f64).ln() / 4.0;
    }
    let c = candidate.len();
    let r = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| (l.abs_diff(c), l))
        .expect("nonempty");
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * log_p.exp()
}

fn lcs(a: &[u32], b: &[u32]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L F-measure using the best precision and best recall over the
/// references.
pub fn rouge_l(candidate: &[u32], references: &[Vec<u32>]) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut p_max = 0.0f64;
    let mut r_max = 0.0f64;
    for r in references {
        if r.is_empty() {
            continue;
        }
        let l = lcs(candidate, r) as f64;
        p_max = p_max.max(l / candidate.len() as f64);
        r_max = r_max.max(l / r.len() as f64);
    }
    if p_max == 0.0 || r_max == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p_max * r_max / (r_max + b2 * p_max)
}

/// For every GT box, the candidate box with the highest IoU (ties by lower
/// index) and that IoU; `None` when there are no candidates.
pub fn best_matches(gt: &[Aabb], candidates: &[Aabb]) -> Vec<Option<(usize, f64)>> {
    gt.iter()
        .map(|g| {
            let mut best: Option<(usize, f64)> = None;
            for (i, c) in candidates.iter().enumerate() {
                let v = iou(g, c);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            best
        })
        .collect()
}

/// The caption predicted for one GT object and the IoU of the box it
/// describes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionPrediction {
    pub tokens: Vec<u32>,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionMetrics {
    pub cider: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub objects: usize,
}

/// `m@kIoU = (1/|GT|) Σ metric(caption, refs)·1[IoU ≥ k]` for CIDEr-D,
/// BLEU-4 and ROUGE-L. Document frequencies come from the GT references;
/// objects without a prediction contribute 0.
pub fn caption_eval(
    gt: &BTreeMap<String, Vec<Vec<u32>>>,
    predictions: &BTreeMap<String, CaptionPrediction>,
    k: f64,
) -> Result<CaptionMetrics, EvalError> {
    if let Some(key) = predictions.keys().find(|key| !gt.contains_key(*key)) {
        return Err(EvalError::UnknownObject(key.clone()));
    }
    let corpus = cider_fit(gt)?;
    Ok(caption_eval_with(&corpus, gt, predictions, k))
}

/// [`caption_eval`] with externally fitted document frequencies.
pub fn caption_eval_with(
    corpus: &CiderCorpus,
    gt: &BTreeMap<String, Vec<Vec<u32>>>,
    predictions: &BTreeMap<String, CaptionPrediction>,
    k: f64,
) -> CaptionMetrics {
    let mut m = CaptionMetrics {
        objects: gt.len(),
        ..CaptionMetrics::default()
    };
    if gt.is_empty() {
        return m;
    }
    for (key, refs) in gt {
        let Some(p) = predictions.get(key) else { continue };
        if p.iou < k {
            continue;
        }
        m.cider += corpus.score_against(refs, &p.tokens);
        m.bleu4 += bleu4(&p.tokens, refs);
        m.rouge_l += rouge_l(&p.tokens, refs);
    }
    let n = gt.len() as f64;
    m.cider /= n;
    m.bleu4 /= n;
    m.rouge_l /= n;
    m
}

/// Outcome of grounding one description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingOutcome {
    /// Whether the target is the only object of its class in the scene.
    pub unique: bool,
    /// IoU of the chosen box with the target; `None` when nothing was chosen.
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundingMetrics {
    pub unique: f64,
    pub multiple: f64,
    pub overall: f64,
    pub unique_count: usize,
    pub multiple_count: usize,
}

pub fn grounding_eval(outcomes: &[GroundingOutcome], k: f64) -> GroundingMetrics {
    let hit = |o: &GroundingOutcome| o.iou.is_some_and(|v| v >= k);
    let (mut uh, mut un, mut mh, mut mn) = (0usize, 0usize, 0usize, 0usize);
    for o in outcomes {
        if o.unique {
            un += 1;
            uh += hit(o) as usize;
        } else {
            mn += 1;
            mh += hit(o) as usize;
        }
    }
    let ratio = |h: usize, n: usize| if n == 0 { 0.0 } else { h as f64 / n as f64 };
    GroundingMetrics {
        unique: ratio(uh, un),
        multiple: ratio(mh, mn),
        overall: ratio(uh + mh, un + mn),
        unique_count: un,
        multiple_count: mn,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: Aabb,
    pub score: f64,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub bbox: Aabb,
    pub class: usize,
}

/// All-point interpolated AP from detections already sorted by descending
/// score, given their true-positive flags and the number of GT boxes.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let (mut t, mut f) = (0.0, 0.0);
    for &hit in tp {
        if hit {
            t += 1.0;
        } else {
            f += 1.0;
        }
        recall.push(t / num_gt as f64);
        precision.push(t / (t + f));
    }
    let mut mpre = vec![0.0];
    mpre.extend(&precision);
    mpre.push(0.0);
    let mut mrec = vec![0.0];
    mrec.extend(&recall);
    mrec.push(1.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len()).map(|i| (mrec[i] - mrec[i - 1]) * mpre[i]).sum()
}

/// Per-class AP and their mean over classes present in the GT. Detections
/// of a class are visited by descending score (ties by scene, then list
/// order). Each is compared with the same-class GT box of highest IoU in
/// its scene and is a hit when that IoU is at least `k` and the box is not
/// yet taken.
pub fn detection_eval(detections: &[Vec<ScoredBox>], gt: &[Vec<GtBox>], k: f64) -> (f64, BTreeMap<usize, f64>) {
    let classes: BTreeSet<usize> = gt.iter().flatten().map(|g| g.class).collect();
    let mut per_class = BTreeMap::new();
    for &c in &classes {
        let mut dets: Vec<(usize, usize, f64)> = Vec::new();
        for (s, ds) in detections.iter().enumerate() {
            for (i, d) in ds.iter().enumerate() {
                if d.class == c {
                    dets.push((s, i, d.score));
                }
            }
        }
        dets.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let gt_boxes: Vec<Vec<Aabb>> = gt
            .iter()
            .map(|gs| gs.iter().filter(|g| g.class == c).map(|g| g.bbox).collect())
            .collect();
        let num_gt: usize = gt_boxes.iter().map(Vec::len).sum();
        let mut used: Vec<Vec<bool>> = gt_boxes.iter().map(|b| vec![false; b.len()]).collect();
        let mut tp = Vec::with_capacity(dets.len());
        for (s, i, _) in dets {
            let b = &detections[s][i].bbox;
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gt_boxes.get(s).into_iter().flatten().enumerate() {
                let v = iou(b, g);
                if best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            let hit = match best {
                Some((j, v)) if v >= k && !used[s][j] => {
                    used[s][j] = true;
                    true
                }
                _ => false,
            };
            tp.push(hit);
        }
        per_class.insert(c, average_precision(&tp, num_gt));
    }
    let map = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    (map, per_class)
}

/// Combined report; sections that were not evaluated are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub iou_threshold: f64,
    pub captioning: Option<CaptionMetrics>,
    pub grounding: Option<GroundingMetrics>,
    pub detection_map: Option<f64>,
    pub probe: Option<GroundingMetrics>,
}

impl MetricsReport {
    /// Plain-text table with one block per evaluated task.
    pub fn table(&self) -> String {
        let k = self.iou_threshold;
        let mut s = String::new();
        if let Some(c) = &self.captioning {
            let _ = writeln!(
                s,
                "{:<14}{:>12}{:>12}{:>12}",
                "captioning",
                format!("C@{k}IoU"),
                format!("B-4@{k}IoU"),
                format!("R@{k}IoU")
            );
            let _ = writeln!(
                s,
                "{:<14}{:>12.4}{:>12.4}{:>12.4}",
                format!("n={}", c.objects),
                c.cider,
                c.bleu4,
                c.rouge_l
            );
        }
        if let Some(m) = self.detection_map {
            let _ = writeln!(s, "{:<14}{:>12}", "detection", format!("mAP@{k}"));
            let _ = writeln!(s, "{:<14}{:>12.4}", "", m);
        }
        for (name, g) in [("grounding", &self.grounding), ("probe", &self.probe)] {
            if let Some(g) = g {
                let _ = writeln!(s, "{:<14}{:>12}{:>12}{:>12}", name, "Unique", "Multiple", "Overall");
                let _ = writeln!(
                    s,
                    "{:<14}{:>12.4}{:>12.4}{:>12.4}",
                    format!("Acc@{k}IoU"),
                    g.unique,
                    g.multiple,
                    g.overall
                );
                let _ = writeln!(
                    s,
                    "{:<14}{:>12}{:>12}{:>12}",
                    "count",
                    g.unique_count,
                    g.multiple_count,
                    g.unique_count + g.multiple_count
                );
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(x: f64, s: f64) -> Aabb {
        Aabb::new([x, 0.0, 0.0], [x + s, s, s])
    }

    #[test]
    fn bleu_exact_match_is_one() {
        let r = vec![vec![1, 2, 3, 4, 5]];
        assert!((bleu4(&[1, 2, 3, 4, 5], &r) - 1.0).abs() < 1e-12);
        assert!(bleu4(&[9, 9, 9, 9], &r) < 0.05);
        assert!(bleu4(&[1, 2, 3], &r) < bleu4(&[1, 2, 3, 4], &r));
    }

    #[test]
    fn rouge_examples() {
        let r = vec![vec![1, 2, 3, 4]];
        assert!((rouge_l(&[1, 2, 3, 4], &r) - 1.0).abs() < 1e-12);
        assert_eq!(rouge_l(&[7, 8], &r), 0.0);
        let (p, rc) = (2.0 / 2.0, 2.0 / 4.0);
        let b2 = ROUGE_BETA * ROUGE_BETA;
        let want = (1.0 + b2) * p * rc / (rc + b2 * p);
        assert!((rouge_l(&[1, 3], &r) - want).abs() < 1e-12);
    }

    #[test]
    fn caption_eval_gating() {
        let mut gt = BTreeMap::new();
        gt.insert("s/0".to_string(), vec![vec![1, 2, 3, 4, 5]]);
        gt.insert("s/1".to_string(), vec![vec![6, 7, 8, 9]]);
        let mut pred = BTreeMap::new();
        pred.insert(
            "s/0".to_string(),
            CaptionPrediction {
                tokens: vec![1, 2, 3, 4, 5],
                iou: 0.4,
            },
        );
        pred.insert(
            "s/1".to_string(),
            CaptionPrediction {
                tokens: vec![6, 7, 8, 9],
                iou: 0.3,
            },
        );
        let m = caption_eval(&gt, &pred, 0.5).unwrap();
        assert_eq!((m.cider, m.bleu4, m.rouge_l), (0.0, 0.0, 0.0));
        pred.get_mut("s/0").unwrap().iou = 0.9;
        let m = caption_eval(&gt, &pred, 0.5).unwrap();
        assert!((m.bleu4 - 0.5).abs() < 1e-12);
        pred.insert(
            "x/9".to_string(),
            CaptionPrediction {
                tokens: vec![1],
                iou: 1.0,
            },
        );
        assert_eq!(
            caption_eval(&gt, &pred, 0.5).unwrap_err(),
            EvalError::UnknownObject("x/9".into())
        );
    }

    #[test]
    fn grounding_subsets() {
        let o = [
            GroundingOutcome {
                unique: true,
                iou: Some(0.9),
            },
            GroundingOutcome {
                unique: false,
                iou: Some(0.1),
            },
            GroundingOutcome {
                unique: false,
                iou: Some(0.7),
            },
            GroundingOutcome {
                unique: false,
                iou: None,
            },
        ];
        let m = grounding_eval(&o, 0.5);
        assert_eq!(m.unique, 1.0);
        assert!((m.multiple - 1.0 / 3.0).abs() < 1e-12);
        let weighted = (m.unique * m.unique_count as f64 + m.multiple * m.multiple_count as f64) / 4.0;
        assert!((m.overall - weighted).abs() < 1e-12);
    }

    #[test]
    fn detection_extremes() {
        let gt = vec![vec![
            GtBox {
                bbox: cube(0.0, 1.0),
                class: 0,
            },
            GtBox {
                bbox: cube(3.0, 1.0),
                class: 1,
            },
        ]];
        let perfect: Vec<Vec<ScoredBox>> = vec![gt[0]
            .iter()
            .map(|g| ScoredBox {
                bbox: g.bbox,
                score: 0.9,
                class: g.class,
            })
            .collect()];
        assert_eq!(detection_eval(&perfect, &gt, 0.5).0, 1.0);
        assert_eq!(detection_eval(&[vec![]], &gt, 0.5).0, 0.0);
    }

    #[test]
    fn ap_hand_case() {
        // hits at ranks 1 and 3 of 3 detections, 2 GT: precision envelope 1, 2/3
        let ap = average_precision(&[true, false, true], 2);
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn report_table_has_grounding_columns() {
        let r = MetricsReport {
            split: "val".into(),
            iou_threshold: 0.5,
            grounding: Some(GroundingMetrics::default()),
            ..MetricsReport::default()
        };
        let t = r.table();
        assert!(t.contains("Unique") && t.contains("Multiple") && t.contains("Overall"));
    }
}

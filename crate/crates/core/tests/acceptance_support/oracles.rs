//! Brute-force reference implementations of the caption metrics and the
//! geometry routines, compared with the library on random instances.

use std::collections::BTreeMap;

use d3desk::detector::{cluster, radius_groups, ClusterSource};
use d3desk::eval::{average_precision, bleu4, rouge_l};
use d3desk::geometry::{iou, nms, Aabb, Point3};
use d3desk::reward::cider_fit;
use d3desk::rng;
use rand::Rng;

pub const INSTANCES: u64 = 100;
pub const METRIC_TOLERANCE: f64 = 1e-9;
/// AP sums per-detection recall steps; the oracle adds `1 / num_gt` per hit
/// instead, so the two may differ by float rounding only.
pub const AP_TOLERANCE: f64 = 1e-12;

/// Occurrences of every n-gram of `t`, as a list in first-seen order.
fn gram_counts(t: &[u32], n: usize) -> Vec<(Vec<u32>, f64)> {
    let mut out: Vec<(Vec<u32>, f64)> = Vec::new();
    for i in 0..t.len().saturating_sub(n - 1) {
        let g = t[i..i + n].to_vec();
        match out.iter_mut().find(|(h, _)| *h == g) {
            Some((_, c)) => *c += 1.0,
            None => out.push((g, 1.0)),
        }
    }
    out
}

fn contains(t: &[u32], g: &[u32]) -> bool {
    (0..t.len()).any(|i| t[i..].starts_with(g))
}

fn count_in(t: &[u32], g: &[u32]) -> usize {
    (0..t.len()).filter(|&i| t[i..].starts_with(g)).count()
}

/// CIDEr-D: tf-idf n-gram vectors for n = 1..4 with document frequencies
/// counted over keys, clipped cosine similarity, Gaussian length penalty
/// with σ = 6, averaged over n and references and scaled by 10.
fn cider_oracle(corpus: &[(String, Vec<Vec<u32>>)], key: usize, cand: &[u32]) -> f64 {
    let docs = corpus.len() as f64;
    let idf = |g: &[u32]| {
        let df = corpus
            .iter()
            .filter(|(_, refs)| refs.iter().any(|r| contains(r, g)))
            .count();
        docs.ln() - (df.max(1) as f64).ln()
    };
    let vector = |t: &[u32], n: usize| -> Vec<(Vec<u32>, f64)> {
        gram_counts(t, n)
            .into_iter()
            .map(|(g, c)| {
                let w = c * idf(&g);
                (g, w)
            })
            .collect()
    };
    let norm = |v: &[(Vec<u32>, f64)]| v.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
    let refs = &corpus[key].1;
    let mut total = 0.0;
    for r in refs {
        let delta = cand.len() as f64 - r.len() as f64;
        let penalty = (-delta * delta / 72.0).exp();
        for n in 1..=4 {
            let (h, rv) = (vector(cand, n), vector(r, n));
            let mut dot = 0.0;
            for (g, x) in &h {
                if let Some((_, y)) = rv.iter().find(|(q, _)| q == g) {
                    dot += x.min(*y) * y;
                }
            }
            let (nh, nr) = (norm(&h), norm(&rv));
            if nh != 0.0 && nr != 0.0 {
                dot /= nh * nr;
            }
            total += dot * penalty;
        }
    }
    (total / 4.0 / refs.len() as f64 * 10.0).max(0.0)
}

fn bleu_oracle(cand: &[u32], refs: &[Vec<u32>]) -> f64 {
    let mut log_p = 0.0;
    for n in 1..=4 {
        let grams = gram_counts(cand, n);
        let total: f64 = grams.iter().map(|(_, c)| c).sum();
        let matched: f64 = grams
            .iter()
            .map(|(g, c)| c.min(refs.iter().map(|r| count_in(r, g)).max().unwrap_or(0) as f64))
            .sum();
        let p = if matched == 0.0 { 0.1 } else { matched } / total.max(1.0);
        log_p += p.ln() / 4.0;
    }
    let c = cand.len() as i64;
    let mut closest = refs[0].len() as i64;
    for r in refs {
        let l = r.len() as i64;
        if (l - c).abs() < (closest - c).abs() || ((l - c).abs() == (closest - c).abs() && l < closest) {
            closest = l;
        }
    }
    let bp = if c >= closest {
        1.0
    } else {
        (1.0 - closest as f64 / c as f64).exp()
    };
    bp * log_p.exp()
}

fn is_subsequence(s: &[u32], t: &[u32]) -> bool {
    let mut it = t.iter();
    s.iter().all(|x| it.any(|y| y == x))
}

/// Longest common subsequence by trying every subsequence of `a`.
fn lcs_exhaustive(a: &[u32], b: &[u32]) -> usize {
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let s: Vec<u32> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            is_subsequence(&s, b).then_some(s.len())
        })
        .max()
        .unwrap_or(0)
}

fn rouge_oracle(cand: &[u32], refs: &[Vec<u32>]) -> f64 {
    let lens: Vec<f64> = refs.iter().map(|r| lcs_exhaustive(cand, r) as f64).collect();
    let p = lens.iter().fold(0.0f64, |m, l| m.max(l / cand.len() as f64));
    let r = lens
        .iter()
        .zip(refs)
        .fold(0.0f64, |m, (l, r)| m.max(l / r.len() as f64));
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = 1.2f64 * 1.2;
    (1.0 + b2) * p * r / (r + b2 * p)
}

fn sentence(r: &mut rng::Rng, vocab: u32, max_len: usize) -> Vec<u32> {
    (0..r.gen_range(1..=max_len))
        .map(|_| r.gen_range(4..4 + vocab))
        .collect()
}

/// A random sentence, or a reference with one token changed or dropped.
fn candidate(r: &mut rng::Rng, refs: &[Vec<u32>], vocab: u32) -> Vec<u32> {
    let mut c = refs[r.gen_range(0..refs.len())].clone();
    match r.gen_range(0..4) {
        0 => sentence(r, vocab, 9),
        1 if c.len() > 1 => {
            c.remove(r.gen_range(0..c.len()));
            c
        }
        2 => {
            let i = r.gen_range(0..c.len());
            c[i] = r.gen_range(4..4 + vocab);
            c
        }
        _ => c,
    }
}

pub fn captions() -> Result<String, String> {
    let (mut cider_err, mut bleu_err, mut rouge_err) = (0.0f64, 0.0f64, 0.0f64);
    let mut scored = 0;
    for inst in 0..INSTANCES {
        let mut r = rng::rng(inst, &[0xc1de]);
        let vocab = r.gen_range(3..8);
        let corpus: Vec<(String, Vec<Vec<u32>>)> = (0..r.gen_range(2..7))
            .map(|k| {
                (
                    format!("k{k}"),
                    (0..r.gen_range(1..4)).map(|_| sentence(&mut r, vocab, 9)).collect(),
                )
            })
            .collect();
        let fitted = cider_fit(&corpus.iter().cloned().collect::<BTreeMap<_, _>>()).map_err(|e| e.to_string())?;
        for (key, (name, refs)) in corpus.iter().enumerate() {
            for _ in 0..3 {
                let cand = candidate(&mut r, refs, vocab);
                let got = fitted.score(name, &cand).map_err(|e| e.to_string())?;
                cider_err = cider_err.max((got - cider_oracle(&corpus, key, &cand)).abs());
                bleu_err = bleu_err.max((bleu4(&cand, refs) - bleu_oracle(&cand, refs)).abs());
                rouge_err = rouge_err.max((rouge_l(&cand, refs) - rouge_oracle(&cand, refs)).abs());
                scored += 1;
            }
        }
    }
    let detail = format!(
        "{scored} candidates over {INSTANCES} corpora; max |diff| CIDEr-D {cider_err:.1e}, BLEU-4 {bleu_err:.1e}, ROUGE-L {rouge_err:.1e}"
    );
    if cider_err.max(bleu_err).max(rouge_err) <= METRIC_TOLERANCE {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Integer-cornered box, possibly flat along some axis.
fn grid_box(r: &mut rng::Rng) -> Aabb {
    let mut min = [0.0; 3];
    let mut max = [0.0; 3];
    for a in 0..3 {
        let lo = r.gen_range(0..6);
        min[a] = lo as f64;
        max[a] = (lo + r.gen_range(0..4)) as f64;
    }
    Aabb::new(min, max)
}

/// IoU by counting unit cells.
fn iou_oracle(a: &Aabb, b: &Aabb) -> f64 {
    let cells = |bx: &Aabb| -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for x in bx.min[0] as i64..bx.max[0] as i64 {
            for y in bx.min[1] as i64..bx.max[1] as i64 {
                for z in bx.min[2] as i64..bx.max[2] as i64 {
                    out.push([x, y, z]);
                }
            }
        }
        out
    };
    let (ca, cb) = (cells(a), cells(b));
    if ca.is_empty() || cb.is_empty() {
        return 0.0;
    }
    let inter = ca.iter().filter(|c| cb.contains(c)).count();
    inter as f64 / (ca.len() + cb.len() - inter) as f64
}

/// NMS by repeatedly taking the best remaining box (ties to the lower
/// index) and discarding everything overlapping it beyond the threshold.
fn nms_oracle(boxes: &[(Aabb, f64)], thr: f64) -> Vec<usize> {
    let mut left: Vec<usize> = (0..boxes.len()).collect();
    let mut kept = Vec::new();
    while !left.is_empty() {
        let best = *left
            .iter()
            .reduce(|a, b| if boxes[*b].1 > boxes[*a].1 { b } else { a })
            .unwrap();
        kept.push(best);
        left.retain(|&j| j != best && iou_oracle(&boxes[best].0, &boxes[j].0) <= thr);
    }
    kept
}

/// Every hit adds `1 / num_gt` recall at the best precision reached at or
/// after its rank.
fn ap_oracle(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let precision: Vec<f64> = (0..tp.len())
        .map(|k| tp[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    (0..tp.len())
        .filter(|&k| tp[k])
        .map(|k| precision[k..].iter().fold(0.0f64, |m, &p| m.max(p)) / num_gt as f64)
        .sum()
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut root = i;
    while parent[root] != root {
        root = parent[root];
    }
    parent[i] = root;
    root
}

/// Connected components of the same-label radius graph over all point
/// pairs, via union-find.
fn groups_oracle(coords: &[Point3], labels: &[usize], skip: usize, radius: f64, min_points: usize) -> Vec<Vec<usize>> {
    let n = coords.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == skip || labels[i] != labels[j] {
                continue;
            }
            let d2: f64 = (0..3).map(|a| (coords[i][a] - coords[j][a]).powi(2)).sum();
            if d2 <= radius * radius {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut comps: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in (0..n).filter(|&i| labels[i] != skip) {
        let root = find(&mut parent, i);
        comps.entry(root).or_default().push(i);
    }
    let mut out: Vec<Vec<usize>> = comps.into_values().filter(|c| c.len() >= min_points).collect();
    out.sort_by_key(|c| c[0]);
    out
}

pub fn geometry() -> Result<String, String> {
    let mut failures = Vec::new();
    for inst in 0..INSTANCES {
        let mut r = rng::rng(inst, &[0x9e0]);

        let pairs: Vec<(Aabb, Aabb)> = (0..20).map(|_| (grid_box(&mut r), grid_box(&mut r))).collect();
        if pairs.iter().any(|(a, b)| iou(a, b) != iou_oracle(a, b)) {
            failures.push(format!("iou #{inst}"));
        }

        let boxes: Vec<(Aabb, f64)> = (0..r.gen_range(1..13))
            .map(|_| (grid_box(&mut r), r.gen_range(0..5) as f64))
            .collect();
        let thr = [0.0, 0.1, 0.25, 0.5, 0.75][r.gen_range(0..5)];
        if nms(&boxes, thr) != nms_oracle(&boxes, thr) {
            failures.push(format!("nms #{inst}"));
        }

        let tp: Vec<bool> = (0..r.gen_range(0..16)).map(|_| r.gen_bool(0.5)).collect();
        let num_gt = tp.iter().filter(|&&h| h).count() + r.gen_range(0..4);
        if (average_precision(&tp, num_gt) - ap_oracle(&tp, num_gt)).abs() > AP_TOLERANCE {
            failures.push(format!("ap #{inst}"));
        }

        let n = r.gen_range(5..80);
        let coords: Vec<Point3> = (0..n)
            .map(|_| [r.gen_range(0.0..1.0), r.gen_range(0.0..1.0), r.gen_range(0.0..0.5)])
            .collect();
        let shifted: Vec<Point3> = coords.iter().map(|p| [p[0] * 0.5, p[1] * 0.5 + 0.2, p[2]]).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..4)).collect();
        let radius = r.gen_range(0.05..0.3);
        let min_points = r.gen_range(1..5);
        let expect = groups_oracle(&coords, &labels, 3, radius, min_points);
        let shifted_expect = groups_oracle(&shifted, &labels, 3, radius, min_points);
        let got = cluster(&coords, &shifted, &labels, 3, radius, min_points);
        let want: Vec<(Vec<usize>, ClusterSource)> = expect
            .iter()
            .map(|m| (m.clone(), ClusterSource::Original))
            .chain(shifted_expect.iter().map(|m| (m.clone(), ClusterSource::Shifted)))
            .collect();
        let got: Vec<(Vec<usize>, ClusterSource)> = got.into_iter().map(|c| (c.members, c.source)).collect();
        if radius_groups(&coords, &labels, 3, radius, min_points) != expect || got != want {
            failures.push(format!("clustering #{inst}"));
        }
    }
    if failures.is_empty() {
        Ok(format!(
            "IoU, NMS, AP and clustering agree on {INSTANCES} instances each"
        ))
    } else {
        Err(failures.join(", "))
    }
}

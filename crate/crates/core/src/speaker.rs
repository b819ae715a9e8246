//! Dense-captioning head: a k-nearest-neighbour relational graph over
//! proposals followed by an attentive recurrent decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, orientation_class, Aabb, Point3, ORIENTATION_CLASSES};
use crate::nn::{GruCell, Linear};
use crate::scene::{EOS, PAD, SOS};
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

pub const PREFIX: &str = "spk.";

/// Logit offset that removes a masked attention slot.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeakerConfig {
    pub hidden: usize,
    pub embed: usize,
    pub attention: usize,
    pub neighbors: usize,
    pub rounds: usize,
    pub max_len: usize,
}

impl Default for SpeakerConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            embed: 64,
            attention: 64,
            neighbors: 5,
            rounds: 1,
            max_len: 16,
        }
    }
}

/// A decoded description: `tokens` starts with sos and ends with eos unless
/// the length limit was hit; `logprobs[t]` belongs to `tokens[t + 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
}

impl TokenSeq {
    /// Word ids without sos and eos.
    pub fn words(&self) -> Vec<u32> {
        self.tokens.iter().copied().filter(|&t| t != SOS && t != EOS).collect()
    }

    pub fn score(&self) -> f64 {
        self.logprobs.iter().sum()
    }

    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

/// Proposal-level state shared by every decoding step of one scene.
#[derive(Clone, Debug)]
pub struct SceneContext {
    /// `P × hidden`, graph-enhanced.
    pub features: Var,
    /// `P × attention`, attention keys of `features`.
    pub keys: Var,
    pub edges: Vec<(usize, usize)>,
    /// `E × 6` orientation logits, `None` without edges.
    pub edge_logits: Option<Var>,
    pub proposals: usize,
}

/// k nearest neighbours of every node by center distance (ties by lower
/// index), as directed `(node, neighbour)` pairs.
pub fn knn_edges(centers: &[Point3], k: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for (i, a) in centers.iter().enumerate() {
        let mut others: Vec<(f64, usize)> = centers
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(j, b)| ((0..3).map(|d| (a[d] - b[d]).powi(2)).sum::<f64>(), j))
            .collect();
        others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        edges.extend(others.into_iter().take(k).map(|(_, j)| (i, j)));
    }
    edges
}

#[derive(Clone, Debug)]
pub struct Speaker {
    pub cfg: SpeakerConfig,
    pub vocab_size: usize,
    pub input_dim: usize,
    node: Linear,
    edge: Vec<Linear>,
    orient: Linear,
    embed: ParamId,
    init: Linear,
    att_query: Linear,
    att_key: Linear,
    att_v: ParamId,
    gru: GruCell,
    out: Linear,
}

impl Speaker {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: SpeakerConfig,
        input_dim: usize,
        vocab_size: usize,
        rng: &mut R,
    ) -> Self {
        let h = cfg.hidden;
        let a = cfg.attention;
        let edge = (0..cfg.rounds)
            .map(|r| Linear::new(store, &format!("spk.edge{r}"), 2 * h + 4, h, rng))
            .collect();
        let embed = store.add_glorot("spk.embed", vocab_size, cfg.embed, rng);
        let att_v = store.add_glorot("spk.att.v", 1, a, rng);
        Self {
            node: Linear::new(store, "spk.node", input_dim, h, rng),
            edge,
            orient: Linear::new(store, "spk.orient", h, ORIENTATION_CLASSES, rng),
            embed,
            init: Linear::new(store, "spk.init", h, h, rng),
            att_query: Linear::new(store, "spk.att.q", h, a, rng),
            att_key: Linear::new(store, "spk.att.k", h, a, rng),
            att_v,
            gru: GruCell::new(store, "spk.gru", cfg.embed + 2 * h, h, rng),
            out: Linear::new(store, "spk.out", 2 * h, vocab_size, rng),
            cfg,
            vocab_size,
            input_dim,
        }
    }

    /// Node projection of proposal inputs (`P × input_dim → P × hidden`).
    pub fn node_features(&self, g: &mut Graph, store: &ParamStore, inputs: Var) -> Result<Var> {
        let x = self.node.forward(g, store, inputs)?;
        Ok(g.relu(x))
    }

    /// Message passing over the kNN graph: each round adds the mean of the
    /// incoming edge messages to the node features. Orientation logits are
    /// read from the last round's messages.
    pub fn message_passing(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        centers: &[Point3],
    ) -> Result<(Var, Vec<(usize, usize)>, Option<Var>)> {
        let p = centers.len();
        let edges = knn_edges(centers, self.cfg.neighbors);
        if edges.is_empty() {
            return Ok((x, edges, None));
        }
        let src: Vec<usize> = edges.iter().map(|e| e.0).collect();
        let dst: Vec<usize> = edges.iter().map(|e| e.1).collect();
        let geo: Vec<f64> = edges
            .iter()
            .flat_map(|&(i, j)| {
                let d = [
                    centers[j][0] - centers[i][0],
                    centers[j][1] - centers[i][1],
                    centers[j][2] - centers[i][2],
                ];
                let len = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                [d[0], d[1], d[2], len]
            })
            .collect();
        let geo = g.constant(Tensor::matrix(edges.len(), 4, geo));
        let mut h = x;
        let mut msg = None;
        for layer in &self.edge {
            let xi = g.gather_rows(h, &src)?;
            let xj = g.gather_rows(h, &dst)?;
            let cat = g.concat_cols(&[xi, xj, geo])?;
            let m = layer.forward(g, store, cat)?;
            let m = g.relu(m);
            let agg = g.segment_mean(m, &src, p)?;
            h = g.add(h, agg)?;
            msg = Some(m);
        }
        let logits = match msg {
            Some(m) => Some(self.orient.forward(g, store, m)?),
            None => None,
        };
        Ok((h, edges, logits))
    }

    /// Node projection, message passing and attention keys for a scene.
    pub fn encode_scene(&self, g: &mut Graph, store: &ParamStore, inputs: Var, boxes: &[Aabb]) -> Result<SceneContext> {
        let centers: Vec<Point3> = boxes.iter().map(Aabb::center).collect();
        let x = self.node_features(g, store, inputs)?;
        let (features, edges, edge_logits) = self.message_passing(g, store, x, &centers)?;
        let keys = self.att_key.forward(g, store, features)?;
        Ok(SceneContext {
            features,
            keys,
            edges,
            edge_logits,
            proposals: boxes.len(),
        })
    }

    /// Initial decoder state for each target row.
    pub fn init_state(&self, g: &mut Graph, store: &ParamStore, ctx: &SceneContext, targets: &[usize]) -> Result<Var> {
        let t = g.gather_rows(ctx.features, targets)?;
        let h = self.init.forward(g, store, t)?;
        Ok(g.tanh(h))
    }

    /// One decoder step for a batch of rows, each describing `targets[b]`.
    /// Attention runs over every proposal except the row's target; with a
    /// single proposal the attended context is zero. Returns the next state,
    /// the vocabulary logits with pad and sos masked out, and the attention
    /// weights.
    pub fn decode_step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ctx: &SceneContext,
        targets: &[usize],
        h: Var,
        prev: &[u32],
    ) -> Result<(Var, Var, Option<Var>)> {
        let b = targets.len();
        let table = g.param(store, self.embed);
        let ids: Vec<usize> = prev.iter().map(|&t| t as usize).collect();
        let emb = g.embedding(table, &ids)?;
        let target = g.gather_rows(ctx.features, targets)?;
        let (context, weights) = if ctx.proposals > 1 {
            let q = self.att_query.forward(g, store, h)?;
            let v = g.param(store, self.att_v);
            let scores = g.additive_attention(q, ctx.keys, v)?;
            let mut mask = vec![0.0; b * ctx.proposals];
            for (r, &t) in targets.iter().enumerate() {
                mask[r * ctx.proposals + t] = MASKED;
            }
            let mask = g.constant(Tensor::matrix(b, ctx.proposals, mask));
            let scores = g.add(scores, mask)?;
            let w = g.softmax(scores);
            (g.matmul(w, ctx.features)?, Some(w))
        } else {
            (g.constant(Tensor::zeros(&[b, self.cfg.hidden])), None)
        };
        let x = g.concat_cols(&[emb, target, context])?;
        let h = self.gru.forward(g, store, x, h)?;
        let o = g.concat_cols(&[h, context])?;
        let logits = self.out.forward(g, store, o)?;
        let mask = g.constant(Tensor::row(
            (0..self.vocab_size)
                .map(|j| if Self::allowed(j) { 0.0 } else { MASKED })
                .collect(),
        ));
        let logits = g.add_row(logits, mask)?;
        Ok((h, logits, weights))
    }

    /// Teacher-forced log-likelihood of `sos w… eos` for every row: returns
    /// a `B × 1` node of per-sequence log-probability sums and the per-step
    /// log-probabilities as plain numbers.
    pub fn sequence_logprobs(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ctx: &SceneContext,
        targets: &[usize],
        words: &[Vec<u32>],
    ) -> Result<(Var, Vec<Vec<f64>>)> {
        if targets.len() != words.len() || targets.is_empty() {
            return Err(TensorError::Invalid {
                op: "sequence_logprobs",
                msg: format!("{} targets for {} sequences", targets.len(), words.len()),
            });
        }
        let b = targets.len();
        let seqs: Vec<Vec<u32>> = words
            .iter()
            .map(|w| {
                let mut s = Vec::with_capacity(w.len() + 1);
                s.extend_from_slice(w);
                s.push(EOS);
                s.truncate(self.cfg.max_len);
                s
            })
            .collect();
        let steps = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut h = self.init_state(g, store, ctx, targets)?;
        let mut prev = vec![SOS; b];
        let mut total: Option<Var> = None;
        let mut per_step = vec![Vec::new(); b];
        for t in 0..steps {
            let (nh, logits, _) = self.decode_step(g, store, ctx, targets, h, &prev)?;
            h = nh;
            let lsm = g.log_softmax(logits);
            let next: Vec<u32> = seqs.iter().map(|s| s.get(t).copied().unwrap_or(PAD)).collect();
            let idx: Vec<usize> = next.iter().map(|&x| x as usize).collect();
            let picked = g.pick(lsm, &idx)?;
            let mask: Vec<f64> = seqs.iter().map(|s| if t < s.len() { 1.0 } else { 0.0 }).collect();
            for (r, s) in seqs.iter().enumerate() {
                if t < s.len() {
                    per_step[r].push(g.value(picked).data()[r]);
                }
            }
            let mask = g.constant(Tensor::matrix(b, 1, mask));
            let term = g.mul(picked, mask)?;
            total = Some(match total {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
            prev = next;
        }
        Ok((total.expect("at least one step"), per_step))
    }

    /// Mean over rows of the summed per-step negative log-likelihood.
    pub fn mle_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ctx: &SceneContext,
        targets: &[usize],
        words: &[Vec<u32>],
    ) -> Result<Var> {
        let (lp, _) = self.sequence_logprobs(g, store, ctx, targets, words)?;
        let m = g.mean(lp);
        Ok(g.scale(m, -1.0))
    }

    /// Log-softmax rows of a logits tensor as plain numbers.
    fn log_probs(t: &Tensor) -> Vec<Vec<f64>> {
        (0..t.rows())
            .map(|r| {
                let row = t.row_slice(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                row.iter().map(|x| x - lse).collect()
            })
            .collect()
    }

    fn allowed(token: usize) -> bool {
        token as u32 != PAD && token as u32 != SOS
    }

    /// Argmax decoding with ties to the lowest token id; pad and sos are
    /// never emitted.
    pub fn decode_greedy(
        &self,
        store: &ParamStore,
        ctx_inputs: &Tensor,
        boxes: &[Aabb],
        targets: &[usize],
    ) -> Result<Vec<TokenSeq>> {
        self.decode_with(store, ctx_inputs, boxes, targets, |lp| {
            let mut best = usize::MAX;
            for (j, &x) in lp.iter().enumerate() {
                if Self::allowed(j) && (best == usize::MAX || x > lp[best]) {
                    best = j;
                }
            }
            best
        })
    }

    /// Ancestral sampling: each token is drawn from the step distribution
    /// restricted to emittable tokens. Targets may repeat to draw several
    /// captions of one proposal.
    pub fn decode_sample<R: Rng>(
        &self,
        store: &ParamStore,
        ctx_inputs: &Tensor,
        boxes: &[Aabb],
        targets: &[usize],
        rng: &mut R,
    ) -> Result<Vec<TokenSeq>> {
        self.decode_with(store, ctx_inputs, boxes, targets, |lp| {
            let total: f64 = lp
                .iter()
                .enumerate()
                .filter(|&(j, _)| Self::allowed(j))
                .map(|(_, x)| x.exp())
                .sum();
            let mut u = rng.gen::<f64>() * total;
            let mut last = usize::MAX;
            for (j, &x) in lp.iter().enumerate() {
                if !Self::allowed(j) {
                    continue;
                }
                last = j;
                u -= x.exp();
                if u < 0.0 {
                    return j;
                }
            }
            last
        })
    }

    fn decode_with<F: FnMut(&[f64]) -> usize>(
        &self,
        store: &ParamStore,
        ctx_inputs: &Tensor,
        boxes: &[Aabb],
        targets: &[usize],
        mut choose: F,
    ) -> Result<Vec<TokenSeq>> {
        let mut g = Graph::no_grad();
        let inputs = g.constant(ctx_inputs.clone());
        let ctx = self.encode_scene(&mut g, store, inputs, boxes)?;
        let b = targets.len();
        let mut h = self.init_state(&mut g, store, &ctx, targets)?;
        let mut out: Vec<TokenSeq> = (0..b)
            .map(|_| TokenSeq {
                tokens: vec![SOS],
                logprobs: Vec::new(),
            })
            .collect();
        let mut prev = vec![SOS; b];
        for _ in 0..self.cfg.max_len {
            if out.iter().all(TokenSeq::finished) {
                break;
            }
            let (nh, logits, _) = self.decode_step(&mut g, store, &ctx, targets, h, &prev)?;
            h = nh;
            let lp = Self::log_probs(g.value(logits));
            for (r, seq) in out.iter_mut().enumerate() {
                if seq.finished() {
                    continue;
                }
                let best = choose(&lp[r]);
                seq.tokens.push(best as u32);
                seq.logprobs.push(lp[r][best]);
                prev[r] = best as u32;
            }
        }
        Ok(out)
    }

    /// Beam search per target. Each step expands every live hypothesis by
    /// every allowed token and keeps the `beam` best expansions by summed
    /// log-probability (ties by parent, then token id); expansions ending in
    /// eos are finished. Returns up to `beam` sequences per target, best
    /// first. No length normalization; `beam = 1` reproduces greedy.
    pub fn decode_beam(
        &self,
        store: &ParamStore,
        ctx_inputs: &Tensor,
        boxes: &[Aabb],
        targets: &[usize],
        beam: usize,
    ) -> Result<Vec<Vec<TokenSeq>>> {
        let beam = beam.max(1);
        let mut g = Graph::no_grad();
        let inputs = g.constant(ctx_inputs.clone());
        let ctx = self.encode_scene(&mut g, store, inputs, boxes)?;
        let h0 = self.init_state(&mut g, store, &ctx, targets)?;
        let h0 = g.value(h0).clone();
        let hid = self.cfg.hidden;

        struct Hyp {
            seq: TokenSeq,
            state: Vec<f64>,
        }
        let mut alive: Vec<Vec<Hyp>> = (0..targets.len())
            .map(|r| {
                vec![Hyp {
                    seq: TokenSeq {
                        tokens: vec![SOS],
                        logprobs: Vec::new(),
                    },
                    state: h0.row_slice(r).to_vec(),
                }]
            })
            .collect();
        let mut done: Vec<Vec<TokenSeq>> = vec![Vec::new(); targets.len()];
        for step in 0..self.cfg.max_len {
            let rows: Vec<(usize, usize)> = alive
                .iter()
                .enumerate()
                .flat_map(|(t, hs)| (0..hs.len()).map(move |k| (t, k)))
                .collect();
            if rows.is_empty() {
                break;
            }
            let row_targets: Vec<usize> = rows.iter().map(|&(t, _)| targets[t]).collect();
            let prev: Vec<u32> = rows
                .iter()
                .map(|&(t, k)| *alive[t][k].seq.tokens.last().expect("sos"))
                .collect();
            let state: Vec<f64> = rows.iter().flat_map(|&(t, k)| alive[t][k].state.clone()).collect();
            let h = g.constant(Tensor::matrix(rows.len(), hid, state));
            let (nh, logits, _) = self.decode_step(&mut g, store, &ctx, &row_targets, h, &prev)?;
            let nh = g.value(nh).clone();
            let lp = Self::log_probs(g.value(logits));
            let last_step = step + 1 == self.cfg.max_len;
            let mut next: Vec<Vec<Hyp>> = (0..targets.len()).map(|_| Vec::new()).collect();
            for t in 0..targets.len() {
                let mut cand: Vec<(f64, usize, usize, usize)> = Vec::new();
                for (r, &(rt, k)) in rows.iter().enumerate() {
                    if rt != t {
                        continue;
                    }
                    let base = alive[t][k].seq.score();
                    for (j, &x) in lp[r].iter().enumerate() {
                        if Self::allowed(j) {
                            cand.push((base + x, k, j, r));
                        }
                    }
                }
                cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
                for &(_, k, j, r) in cand.iter().take(beam) {
                    let mut seq = alive[t][k].seq.clone();
                    seq.tokens.push(j as u32);
                    seq.logprobs.push(lp[r][j]);
                    if j as u32 == EOS || last_step {
                        done[t].push(seq);
                    } else {
                        next[t].push(Hyp {
                            seq,
                            state: nh.row_slice(r).to_vec(),
                        });
                    }
                }
            }
            alive = next;
        }
        Ok(done
            .into_iter()
            .map(|mut d| {
                d.sort_by(|a, b| b.score().total_cmp(&a.score()));
                d.truncate(beam);
                d
            })
            .collect())
    }
}

/// GT object of highest IoU for each box when that IoU reaches `k`.
pub fn match_to_gt(boxes: &[Aabb], gt: &[Aabb], k: f64) -> Vec<Option<usize>> {
    boxes
        .iter()
        .map(|b| {
            let mut best: Option<(usize, f64)> = None;
            for (j, gb) in gt.iter().enumerate() {
                let v = iou(b, gb);
                if v >= k && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((j, v));
                }
            }
            best.map(|(j, _)| j)
        })
        .collect()
}

/// Cross-entropy of edge orientation logits against the orientation class of
/// the matched GT centers. Edges whose endpoints do not both match distinct
/// GT objects are skipped; the count of used edges is returned alongside
/// and the loss is zero when it is 0.
pub fn orientation_loss(
    g: &mut Graph,
    edge_logits: Option<Var>,
    edges: &[(usize, usize)],
    matches: &[Option<usize>],
    gt_centers: &[Point3],
) -> Result<(Var, usize)> {
    let Some(logits) = edge_logits else {
        return Ok((g.constant(Tensor::scalar(0.0)), 0));
    };
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (e, &(i, j)) in edges.iter().enumerate() {
        if let (Some(a), Some(b)) = (matches[i], matches[j]) {
            if a != b {
                rows.push(e);
                targets.push(orientation_class(&gt_centers[a], &gt_centers[b]));
            }
        }
    }
    if rows.is_empty() {
        return Ok((g.constant(Tensor::scalar(0.0)), 0));
    }
    let sel = g.gather_rows(logits, &rows)?;
    Ok((g.cross_entropy(sel, &targets)?, rows.len()))
}

//! Point-group instance detector: a voxel MLP encoder with coarse-cell
//! context, semantic and centroid-offset heads, radius clustering on both
//! original and shifted coordinates, and a cluster scoring network.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{bbox_of_indices, iou, nms, voxel_key, voxelize, Aabb, GeometryError, Point3};
use crate::nn::Linear;
use crate::scene::Scene;
use crate::tensor::{Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, DetectorError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub hidden: usize,
    /// Width of the pooled cluster feature handed to speaker and listener.
    pub feature_dim: usize,
    pub voxel_size: f64,
    /// Cell sizes of the context pooling levels, meters.
    pub context_scales: Vec<f64>,
    pub radius: f64,
    pub min_points: usize,
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// Largest clusters kept per scene when training the scoring network.
    pub max_train_clusters: usize,
    /// IoU range mapped linearly onto the soft score target `[0, 1]`.
    pub score_ramp: [f64; 2],
    /// Points closer than this to their centroid are skipped by the
    /// direction loss.
    pub direction_eps: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            feature_dim: 128,
            voxel_size: 0.05,
            context_scales: vec![0.25, 0.75],
            radius: 0.15,
            min_points: 20,
            score_threshold: 0.09,
            nms_iou: 0.3,
            max_train_clusters: 48,
            score_ramp: [0.25, 0.75],
            direction_eps: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub point_indices: Vec<usize>,
    pub score: f64,
    pub feature: Vec<f64>,
    pub bbox: Aabb,
    pub predicted_class: usize,
}

/// Which coordinate set produced a cluster.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClusterSource {
    Original,
    Shifted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    /// Sorted point indices.
    pub members: Vec<usize>,
    pub source: ClusterSource,
}

/// Breadth-first grouping of points within `radius` of each other that share
/// a label; points labelled `skip` are ignored. Clusters are returned in
/// order of their lowest member index, members sorted, and groups smaller
/// than `min_points` dropped.
pub fn radius_groups(
    coords: &[Point3],
    labels: &[usize],
    skip: usize,
    radius: f64,
    min_points: usize,
) -> Vec<Vec<usize>> {
    let r2 = radius * radius;
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in coords.iter().enumerate() {
        if labels[i] != skip {
            grid.entry(voxel_key(p, radius)).or_default().push(i);
        }
    }
    let mut seen = vec![false; coords.len()];
    let mut out = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for start in 0..coords.len() {
        if seen[start] || labels[start] == skip {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut members = Vec::new();
        while let Some(i) = queue.pop_front() {
            members.push(i);
            let k = voxel_key(&coords[i], radius);
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(cell) = grid.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) else {
                            continue;
                        };
                        for &j in cell {
                            if seen[j] || labels[j] != labels[i] {
                                continue;
                            }
                            let d2: f64 = (0..3).map(|a| (coords[i][a] - coords[j][a]).powi(2)).sum();
                            if d2 <= r2 {
                                seen[j] = true;
                                queue.push_back(j);
                            }
                        }
                    }
                }
            }
        }
        if members.len() >= min_points {
            members.sort_unstable();
            out.push(members);
        }
    }
    out
}

/// Radius grouping on original and on offset-shifted coordinates; original
/// clusters come first. Overlapping clusters from the two sets are both kept.
pub fn cluster(
    coords: &[Point3],
    shifted: &[Point3],
    labels: &[usize],
    floor_class: usize,
    radius: f64,
    min_points: usize,
) -> Vec<Cluster> {
    let mut out: Vec<Cluster> = radius_groups(coords, labels, floor_class, radius, min_points)
        .into_iter()
        .map(|members| Cluster {
            members,
            source: ClusterSource::Original,
        })
        .collect();
    out.extend(
        radius_groups(shifted, labels, floor_class, radius, min_points)
            .into_iter()
            .map(|members| Cluster {
                members,
                source: ClusterSource::Shifted,
            }),
    );
    out
}

/// Most frequent label among `members`; ties go to the lower label.
pub fn majority_label(labels: &[usize], members: &[usize], num_labels: usize) -> usize {
    let mut counts = vec![0usize; num_labels];
    for &i in members {
        counts[labels[i]] += 1;
    }
    let mut best = 0;
    for c in 1..num_labels {
        if counts[c] > counts[best] {
            best = c;
        }
    }
    best
}

/// Indices of clusters scoring at least `threshold` with at least
/// `min_points` members, by descending score (ties by lower index).
pub fn filter_clusters(scores: &[f64], sizes: &[usize], threshold: f64, min_points: usize) -> Vec<usize> {
    let mut keep: Vec<usize> = (0..scores.len())
        .filter(|&k| scores[k] >= threshold && sizes[k] >= min_points)
        .collect();
    keep.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    keep
}

/// Soft objectness target: IoU with the best-matching GT box, linearly
/// ramped from `ramp[0]` (target 0) to `ramp[1]` (target 1).
pub fn score_target(bbox: &Aabb, gt: &[Aabb], ramp: [f64; 2]) -> f64 {
    let best = gt.iter().map(|g| iou(bbox, g)).fold(0.0, f64::max);
    ((best - ramp[0]) / (ramp[1] - ramp[0])).clamp(0.0, 1.0)
}

/// Voxelized encoder inputs for one point cloud.
#[derive(Clone, Debug)]
pub struct EncoderInput {
    /// `V × input_dim` per-voxel inputs.
    pub voxels: Tensor,
    pub point_voxel: Vec<usize>,
    /// Per context scale: coarse cell id of every voxel and the cell count.
    pub context: Vec<(Vec<usize>, usize)>,
}

/// Per-point network outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct PointOutputs {
    /// `N × hidden`.
    pub embeddings: Var,
    /// `N × (C + 1)`, the last class being floor.
    pub sem_logits: Var,
    /// `N × 3`, meters toward the instance centroid.
    pub offsets: Var,
}

#[derive(Clone, Debug)]
pub struct Detection {
    pub points: PointOutputs,
    pub labels: Vec<usize>,
    pub clusters: Vec<Cluster>,
    /// `K × feature_dim` cluster features and `K × 1` score logits; `None`
    /// when no cluster was found.
    pub cluster_features: Option<Var>,
    pub cluster_logits: Option<Var>,
    pub proposals: Vec<Proposal>,
    /// Cluster row of each proposal.
    pub proposal_rows: Vec<usize>,
    /// `P × feature_dim`, rows aligned with `proposals`.
    pub proposal_features: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub total: Var,
    pub sem: Var,
    pub offset_reg: Var,
    pub offset_dir: Var,
    /// `None` when no scored cluster took part.
    pub score: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub num_classes: usize,
    pub point_feature_dim: usize,
    enc1: Linear,
    enc2: Linear,
    enc3: Linear,
    sem: Linear,
    off1: Linear,
    off2: Linear,
    pool: Linear,
    score: Linear,
}

pub const PREFIX: &str = "det.";

impl Detector {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: DetectorConfig,
        num_classes: usize,
        point_feature_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::with_prefix(store, PREFIX, cfg, num_classes, point_feature_dim, rng)
    }

    /// Detector whose parameter names start with `prefix`.
    pub fn with_prefix<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: DetectorConfig,
        num_classes: usize,
        point_feature_dim: usize,
        rng: &mut R,
    ) -> Self {
        let h = cfg.hidden;
        let s = cfg.context_scales.len();
        let input_dim = 1 + point_feature_dim + 3 * s;
        Self {
            enc1: Linear::new(store, &format!("{prefix}enc1"), input_dim, h, rng),
            enc2: Linear::new(store, &format!("{prefix}enc2"), h * (1 + s) + input_dim, h, rng),
            enc3: Linear::new(store, &format!("{prefix}enc3"), h * (1 + s), h, rng),
            sem: Linear::new(store, &format!("{prefix}sem"), h, num_classes + 1, rng),
            off1: Linear::new(store, &format!("{prefix}off1"), h, h, rng),
            off2: Linear::new(store, &format!("{prefix}off2"), h, 3, rng),
            pool: Linear::new(store, &format!("{prefix}pool"), 2 * h + 3, cfg.feature_dim, rng),
            score: Linear::new(store, &format!("{prefix}score"), cfg.feature_dim, 1, rng),
            cfg,
            num_classes,
            point_feature_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        1 + self.point_feature_dim + 3 * self.cfg.context_scales.len()
    }

    /// Voxelizes the cloud and builds per-voxel inputs: height, mean point
    /// features, and the voxel center relative to the mean of each
    /// enclosing context cell.
    pub fn prepare(&self, points: &[Point3], features: &[f64]) -> Result<EncoderInput> {
        if points.is_empty() {
            return Err(DetectorError::Contract("empty point cloud".into()));
        }
        let grid = voxelize(points, features, self.point_feature_dim, self.cfg.voxel_size)?;
        let nv = grid.voxels.len();
        let mut context = Vec::with_capacity(self.cfg.context_scales.len());
        let mut rel: Vec<Vec<Point3>> = Vec::new();
        for &scale in &self.cfg.context_scales {
            let mut ids: HashMap<[i64; 3], usize> = HashMap::new();
            let mut seg = Vec::with_capacity(nv);
            for v in &grid.voxels {
                let k = voxel_key(&v.center, scale);
                let next = ids.len();
                seg.push(*ids.entry(k).or_insert(next));
            }
            let nc = ids.len();
            let mut sums = vec![[0.0; 3]; nc];
            let mut counts = vec![0.0; nc];
            for (v, &c) in grid.voxels.iter().zip(&seg) {
                counts[c] += 1.0;
                for a in 0..3 {
                    sums[c][a] += v.center[a];
                }
            }
            rel.push(
                grid.voxels
                    .iter()
                    .zip(&seg)
                    .map(|(v, &c)| {
                        let mut r = [0.0; 3];
                        for a in 0..3 {
                            r[a] = v.center[a] - sums[c][a] / counts[c];
                        }
                        r
                    })
                    .collect(),
            );
            context.push((seg, nc));
        }
        let d = self.input_dim();
        let mut data = Vec::with_capacity(nv * d);
        for (i, v) in grid.voxels.iter().enumerate() {
            data.push(v.center[2]);
            data.extend_from_slice(&v.feature);
            for r in &rel {
                data.extend_from_slice(&r[i]);
            }
        }
        Ok(EncoderInput {
            voxels: Tensor::matrix(nv, d, data),
            point_voxel: grid.point_voxel,
            context,
        })
    }

    fn with_context(&self, g: &mut Graph, h: Var, inp: &EncoderInput) -> Result<Var> {
        let mut parts = vec![h];
        for (seg, n) in &inp.context {
            let pooled = g.segment_mean(h, seg, *n)?;
            parts.push(g.gather_rows(pooled, seg)?);
        }
        Ok(g.concat_cols(&parts)?)
    }

    /// Encoder and heads, with the voxel input given as a graph node so
    /// that gradients can be checked against it.
    pub fn forward_input(&self, g: &mut Graph, store: &ParamStore, inp: &EncoderInput, x: Var) -> Result<PointOutputs> {
        let h1 = self.enc1.forward(g, store, x)?;
        let h1 = g.relu(h1);
        let c1 = self.with_context(g, h1, inp)?;
        let c1 = g.concat_cols(&[c1, x])?;
        let h2 = self.enc2.forward(g, store, c1)?;
        let h2 = g.relu(h2);
        let c2 = self.with_context(g, h2, inp)?;
        let h3 = self.enc3.forward(g, store, c2)?;
        let h3 = g.relu(h3);
        let h = g.add(h3, h2)?;
        let embeddings = g.gather_rows(h, &inp.point_voxel)?;
        let sem_logits = self.sem.forward(g, store, embeddings)?;
        let o = self.off1.forward(g, store, embeddings)?;
        let o = g.relu(o);
        let offsets = self.off2.forward(g, store, o)?;
        Ok(PointOutputs {
            embeddings,
            sem_logits,
            offsets,
        })
    }

    /// Per-point embeddings (`N × hidden`).
    pub fn encode_points(&self, g: &mut Graph, store: &ParamStore, points: &[Point3], features: &[f64]) -> Result<Var> {
        Ok(self.forward_points(g, store, points, features)?.embeddings)
    }

    pub fn forward_points(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        points: &[Point3],
        features: &[f64],
    ) -> Result<PointOutputs> {
        let inp = self.prepare(points, features)?;
        let x = g.constant(inp.voxels.clone());
        self.forward_input(g, store, &inp, x)
    }

    /// Pooled cluster features (`K × feature_dim`) and score logits (`K × 1`).
    pub fn score_clusters(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embeddings: Var,
        points: &[Point3],
        clusters: &[Vec<usize>],
    ) -> Result<(Var, Var)> {
        if clusters.is_empty() {
            return Err(DetectorError::Contract("no clusters to score".into()));
        }
        let mut idx = Vec::new();
        let mut seg = Vec::new();
        let mut sizes = Vec::with_capacity(clusters.len() * 3);
        for (k, c) in clusters.iter().enumerate() {
            idx.extend_from_slice(c);
            seg.extend(std::iter::repeat_n(k, c.len()));
            sizes.extend_from_slice(&bbox_of_indices(points, c)?.size());
        }
        let rows = g.gather_rows(embeddings, &idx)?;
        let mean = g.segment_mean(rows, &seg, clusters.len())?;
        let max = g.segment_max(rows, &seg, clusters.len())?;
        let size = g.constant(Tensor::matrix(clusters.len(), 3, sizes));
        let pooled = g.concat_cols(&[mean, max, size])?;
        let feat = self.pool.forward(g, store, pooled)?;
        let feat = g.relu(feat);
        let logits = self.score.forward(g, store, feat)?;
        Ok((feat, logits))
    }

    /// Full detection pass. With `suppress`, proposals go through NMS.
    pub fn detect(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        points: &[Point3],
        features: &[f64],
        suppress: bool,
    ) -> Result<Detection> {
        let out = self.forward_points(g, store, points, features)?;
        let labels = argmax_rows(g.value(out.sem_logits));
        let off = g.value(out.offsets);
        let shifted: Vec<Point3> = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let o = off.row_slice(i);
                [p[0] + o[0], p[1] + o[1], p[2] + o[2]]
            })
            .collect();
        let clusters = cluster(
            points,
            &shifted,
            &labels,
            self.num_classes,
            self.cfg.radius,
            self.cfg.min_points,
        );
        let mut det = Detection {
            points: out,
            labels,
            clusters,
            cluster_features: None,
            cluster_logits: None,
            proposals: Vec::new(),
            proposal_rows: Vec::new(),
            proposal_features: None,
        };
        if det.clusters.is_empty() {
            return Ok(det);
        }
        let members: Vec<Vec<usize>> = det.clusters.iter().map(|c| c.members.clone()).collect();
        let (feat, logits) = self.score_clusters(g, store, out.embeddings, points, &members)?;
        det.cluster_features = Some(feat);
        det.cluster_logits = Some(logits);
        let scores: Vec<f64> = g.value(logits).data().iter().map(|&x| sigmoid(x)).collect();
        let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
        let cand = filter_clusters(&scores, &sizes, self.cfg.score_threshold, self.cfg.min_points);
        let boxes: Vec<Aabb> = members
            .iter()
            .map(|m| bbox_of_indices(points, m))
            .collect::<std::result::Result<_, _>>()?;
        let rows: Vec<usize> = if suppress {
            let items: Vec<(Aabb, f64)> = cand.iter().map(|&k| (boxes[k], scores[k])).collect();
            nms(&items, self.cfg.nms_iou).into_iter().map(|i| cand[i]).collect()
        } else {
            cand
        };
        if rows.is_empty() {
            return Ok(det);
        }
        let fv = g.value(feat).clone();
        det.proposals = rows
            .iter()
            .map(|&k| Proposal {
                point_indices: members[k].clone(),
                score: scores[k],
                feature: fv.row_slice(k).to_vec(),
                bbox: boxes[k],
                predicted_class: majority_label(&det.labels, &members[k], self.num_classes + 1),
            })
            .collect();
        det.proposal_features = Some(g.gather_rows(feat, &rows)?);
        det.proposal_rows = rows;
        Ok(det)
    }

    /// `L_det = L_sem + L_o_reg + L_o_dir + L_c_score`. The score term is
    /// computed on at most `max_train_clusters` of the largest clusters and
    /// only when `with_score` is set.
    pub fn detection_loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        det: &Detection,
        scene: &Scene,
        with_score: bool,
    ) -> Result<DetectionLoss> {
        let (sem, offset_reg, offset_dir) = point_losses(g, det.points, scene, self.cfg.direction_eps)?;
        let mut total = g.add(sem, offset_reg)?;
        total = g.add(total, offset_dir)?;
        let mut score = None;
        if with_score && !det.clusters.is_empty() {
            let mut order: Vec<usize> = (0..det.clusters.len()).collect();
            order.sort_by(|&a, &b| {
                det.clusters[b]
                    .members
                    .len()
                    .cmp(&det.clusters[a].members.len())
                    .then(a.cmp(&b))
            });
            order.truncate(self.cfg.max_train_clusters);
            order.sort_unstable();
            let members: Vec<Vec<usize>> = order.iter().map(|&k| det.clusters[k].members.clone()).collect();
            let logits = match (det.cluster_logits, order.len() == det.clusters.len()) {
                (Some(l), true) => l,
                _ => {
                    self.score_clusters(g, store, det.points.embeddings, &scene.points, &members)?
                        .1
                }
            };
            let gt: Vec<Aabb> = scene.objects.iter().map(|o| o.bbox).collect();
            let targets: Vec<f64> = members
                .iter()
                .map(|m| bbox_of_indices(&scene.points, m).map(|b| score_target(&b, &gt, self.cfg.score_ramp)))
                .collect::<std::result::Result<_, _>>()?;
            let s = g.bce_with_logits(logits, &targets)?;
            total = g.add(total, s)?;
            score = Some(s);
        }
        Ok(DetectionLoss {
            total,
            sem,
            offset_reg,
            offset_dir,
            score,
        })
    }
}

/// GT offset `centroid − point` for every point; `None` for floor points.
pub fn gt_offsets(scene: &Scene) -> Vec<Option<Point3>> {
    let centroids = scene.instance_centroids();
    scene
        .points
        .iter()
        .zip(&scene.instance_labels)
        .map(|(p, &l)| {
            (l >= 0).then(|| {
                let c = centroids[l as usize];
                [c[0] - p[0], c[1] - p[1], c[2] - p[2]]
            })
        })
        .collect()
}

/// `(L_sem, L_o_reg, L_o_dir)` for one scene. Offset terms average over
/// instance points; with none present they are zero.
pub fn point_losses(g: &mut Graph, out: PointOutputs, scene: &Scene, direction_eps: f64) -> Result<(Var, Var, Var)> {
    if scene.instance_labels.len() != scene.len() || scene.semantic_labels.len() != scene.len() {
        return Err(DetectorError::Contract(format!(
            "scene {} lacks per-point labels",
            scene.scene_id
        )));
    }
    let sem = g.cross_entropy(out.sem_logits, &scene.semantic_labels)?;
    let gt = gt_offsets(scene);
    let inst: Vec<usize> = (0..gt.len()).filter(|&i| gt[i].is_some()).collect();
    if inst.is_empty() {
        let zero = g.constant(Tensor::scalar(0.0));
        return Ok((sem, zero, zero));
    }
    let pred = g.gather_rows(out.offsets, &inst)?;
    let target: Vec<f64> = inst.iter().flat_map(|&i| gt[i].unwrap()).collect();
    let target = g.constant(Tensor::matrix(inst.len(), 3, target));
    let diff = g.sub(pred, target)?;
    let l1 = g.l1_norm_rows(diff);
    let reg = g.mean(l1);

    let dir_rows: Vec<usize> = (0..inst.len())
        .filter(|&r| {
            let o = gt[inst[r]].unwrap();
            (o[0] * o[0] + o[1] * o[1] + o[2] * o[2]).sqrt() > direction_eps
        })
        .collect();
    let dir = if dir_rows.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let p = g.gather_rows(pred, &dir_rows)?;
        let t = g.gather_rows(target, &dir_rows)?;
        let cos = g.cosine_rows(p, t)?;
        let m = g.mean(cos);
        g.scale(m, -1.0)
    };
    Ok((sem, reg, dir))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise argmax with ties to the lowest column.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    (0..t.rows())
        .map(|r| {
            let row = t.row_slice(r);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Number of geometry columns appended by [`proposal_inputs`].
pub const GEOMETRY_DIMS: usize = 9;

/// Proposal features with box geometry appended: center, size, and center
/// relative to the mean center of all proposals in the scene.
pub fn proposal_inputs(g: &mut Graph, features: Var, boxes: &[Aabb]) -> std::result::Result<Var, TensorError> {
    let n = boxes.len().max(1) as f64;
    let mut mean = [0.0; 3];
    for b in boxes {
        let c = b.center();
        for a in 0..3 {
            mean[a] += c[a] / n;
        }
    }
    let mut geo = Vec::with_capacity(boxes.len() * GEOMETRY_DIMS);
    for b in boxes {
        let c = b.center();
        geo.extend_from_slice(&c);
        geo.extend_from_slice(&b.size());
        geo.extend((0..3).map(|a| c[a] - mean[a]));
    }
    let geo = g.constant(Tensor::matrix(boxes.len(), GEOMETRY_DIMS, geo));
    g.concat_cols(&[features, geo])
}

/// JSON record of a scene's proposals for offline evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalDump {
    pub scene_id: String,
    pub boxes: Vec<Aabb>,
    pub scores: Vec<f64>,
    pub classes: Vec<usize>,
}

impl ProposalDump {
    pub fn new(scene_id: &str, proposals: &[Proposal]) -> Self {
        Self {
            scene_id: scene_id.to_string(),
            boxes: proposals.iter().map(|p| p.bbox).collect(),
            scores: proposals.iter().map(|p| p.score).collect(),
            classes: proposals.iter().map(|p| p.predicted_class).collect(),
        }
    }
}

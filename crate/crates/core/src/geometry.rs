//! Geometric kernels: boxes, overlap, suppression, relative orientation and
//! voxel binning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub type Point3 = [f64; 3];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("bounding box of an empty point set")]
    EmptyPoints,
    #[error("voxel size must be positive, got {0}")]
    VoxelSize(f64),
}

/// Axis-aligned bounding box, `min <= max` componentwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb {
    pub fn new(min: Point3, max: Point3) -> Self {
        debug_assert!((0..3).all(|i| min[i] <= max[i]), "inverted box {min:?} {max:?}");
        Self { min, max }
    }

    pub fn center(&self) -> Point3 {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn size(&self) -> Point3 {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn volume(&self) -> f64 {
        let s = self.size();
        s[0] * s[1] * s[2]
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        let mut min = self.min;
        let mut max = self.max;
        for i in 0..3 {
            min[i] = min[i].min(other.min[i]);
            max[i] = max[i].max(other.max[i]);
        }
        Aabb { min, max }
    }
}

/// Componentwise min/max of a point subset.
pub fn bbox_from_points<'a, I>(points: I) -> Result<Aabb, GeometryError>
where
    I: IntoIterator<Item = &'a Point3>,
{
    let mut it = points.into_iter();
    let first = it.next().ok_or(GeometryError::EmptyPoints)?;
    let mut min = *first;
    let mut max = *first;
    for p in it {
        for i in 0..3 {
            min[i] = min[i].min(p[i]);
            max[i] = max[i].max(p[i]);
        }
    }
    Ok(Aabb { min, max })
}

/// Box of the points selected by `indices`.
pub fn bbox_of_indices(points: &[Point3], indices: &[usize]) -> Result<Aabb, GeometryError> {
    bbox_from_points(indices.iter().map(|&i| &points[i]))
}

/// Intersection over union. Zero-volume boxes score 0, even against
/// themselves.
pub fn iou(a: &Aabb, b: &Aabb) -> f64 {
    let (va, vb) = (a.volume(), b.volume());
    if va <= 0.0 || vb <= 0.0 {
        return 0.0;
    }
    let mut inter = 1.0;
    for i in 0..3 {
        let lo = a.min[i].max(b.min[i]);
        let hi = a.max[i].min(b.max[i]);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    (inter / (va + vb - inter)).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression. Boxes are visited by descending score
/// (ties by lower index); a box is dropped when its IoU with an already kept
/// box exceeds `iou_threshold`. Returns kept indices in visiting order.
pub fn nms(boxes: &[(Aabb, f64)], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| boxes[j].1.total_cmp(&boxes[i].1).then(i.cmp(&j)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k].0, &boxes[i].0) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}

pub const ORIENTATION_CLASSES: usize = 6;

/// Discretized horizontal direction from `a` to `b`: the angle against +x is
/// folded into `[0°, 180°)` and binned into half-open 30° bins. A zero
/// horizontal displacement maps to class 0.
pub fn orientation_class(a: &Point3, b: &Point3) -> usize {
    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    if dx == 0.0 && dy == 0.0 {
        return 0;
    }
    let mut deg = dy.atan2(dx).to_degrees();
    if deg < 0.0 {
        deg += 180.0;
    }
    if deg >= 180.0 {
        deg -= 180.0;
    }
    ((deg / 30.0).floor() as usize).min(ORIENTATION_CLASSES - 1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Voxel {
    pub key: [i64; 3],
    pub members: Vec<usize>,
    /// Mean of member coordinates.
    pub center: Point3,
    /// Mean of member features.
    pub feature: Vec<f64>,
}

/// Occupied voxels in key order plus the voxel of every input point.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub voxel_size: f64,
    pub voxels: Vec<Voxel>,
    pub point_voxel: Vec<usize>,
}

pub fn voxel_key(p: &Point3, voxel_size: f64) -> [i64; 3] {
    [
        (p[0] / voxel_size).floor() as i64,
        (p[1] / voxel_size).floor() as i64,
        (p[2] / voxel_size).floor() as i64,
    ]
}

/// Floor-division binning with per-voxel mean features. `features` is
/// row-major `N × feature_dim` (empty when `feature_dim` is 0).
pub fn voxelize(
    points: &[Point3],
    features: &[f64],
    feature_dim: usize,
    voxel_size: f64,
) -> Result<VoxelGrid, GeometryError> {
    if !(voxel_size > 0.0) {
        return Err(GeometryError::VoxelSize(voxel_size));
    }
    let mut bins: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in points.iter().enumerate() {
        bins.entry(voxel_key(p, voxel_size)).or_default().push(i);
    }
    let fdim = feature_dim;
    let mut point_voxel = vec![0usize; points.len()];
    let mut voxels = Vec::with_capacity(bins.len());
    for (vi, (key, members)) in bins.into_iter().enumerate() {
        let n = members.len() as f64;
        let mut center = [0.0; 3];
        let mut feature = vec![0.0; fdim];
        for &m in &members {
            point_voxel[m] = vi;
            for k in 0..3 {
                center[k] += points[m][k];
            }
            for (f, x) in feature.iter_mut().zip(&features[m * fdim..(m + 1) * fdim]) {
                *f += x;
            }
        }
        center.iter_mut().for_each(|c| *c /= n);
        feature.iter_mut().for_each(|f| *f /= n);
        voxels.push(Voxel {
            key,
            members,
            center,
            feature,
        });
    }
    Ok(VoxelGrid {
        voxel_size,
        voxels,
        point_voxel,
    })
}

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{class_colors, rendered_color, GtObject, Scene, SceneError, SizeAttr, CLASS_SIZES, FLOOR_RGB};
use crate::geometry::{bbox_of_indices, Point3};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Room footprint along x and y, meters.
    pub room: [f64; 2],
    /// Surface sampling density, points per square meter.
    pub density: f64,
    pub min_points_per_object: usize,
    pub max_points_per_object: usize,
    pub floor_points: usize,
    pub point_cap: usize,
    /// Minimum free space between object footprints, meters.
    pub gap: f64,
    pub coord_noise: f64,
    pub color_noise: f64,
    pub feature_dim: usize,
    pub scale_range: [f64; 2],
    pub max_retries: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            min_objects: 4,
            max_objects: 8,
            room: [4.0, 4.0],
            density: 150.0,
            min_points_per_object: 60,
            max_points_per_object: 500,
            floor_points: 400,
            point_cap: 20_000,
            gap: 0.35,
            coord_noise: 0.004,
            color_noise: 0.02,
            feature_dim: 6,
            scale_range: [0.8, 1.2],
            max_retries: 500,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Config(m.to_string()));
        if self.num_classes == 0 || self.num_classes > super::CLASS_NAMES.len() {
            return bad("num_classes must be in 1..=10");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range is empty");
        }
        if self.feature_dim < 3 {
            return bad("feature_dim must be at least 3");
        }
        if self.min_points_per_object == 0 || self.min_points_per_object > self.max_points_per_object {
            return bad("points-per-object range is empty");
        }
        if self.point_cap == 0 {
            return bad("point_cap must be positive");
        }
        Ok(())
    }
}

struct Placed {
    class: usize,
    color: usize,
    scale: f64,
    min: Point3,
    max: Point3,
}

fn footprints_clear(a: &Placed, b: &Placed, gap: f64) -> bool {
    a.max[0] + gap <= b.min[0] || b.max[0] + gap <= a.min[0] || a.max[1] + gap <= b.min[1] || b.max[1] + gap <= a.min[1]
}

/// Generates one scene: non-overlapping axis-aligned furniture boxes on a
/// floor, sampled as noisy surface points with color + normal features.
/// Descriptions are not attached here (see `generate_descriptions`).
pub fn generate_scene(seed: u64, cfg: &GenConfig) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let mut rng = rng::rng(seed, &[0x5ce7e]);
    let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut placed: Vec<Placed> = Vec::with_capacity(n_obj);
    for k in 0..n_obj {
        let mut ok = false;
        for _ in 0..cfg.max_retries {
            let class = rng.gen_range(0..cfg.num_classes);
            let scale = rng.gen_range(cfg.scale_range[0]..=cfg.scale_range[1]);
            let base = CLASS_SIZES[class];
            let (mut w, mut d) = (base[0] * scale, base[1] * scale);
            if rng.gen_bool(0.5) {
                std::mem::swap(&mut w, &mut d);
            }
            let h = base[2] * scale;
            if w >= cfg.room[0] || d >= cfg.room[1] {
                continue;
            }
            let x0 = rng.gen_range(0.0..cfg.room[0] - w);
            let y0 = rng.gen_range(0.0..cfg.room[1] - d);
            let colors = class_colors(class);
            let cand = Placed {
                class,
                color: colors[rng.gen_range(0..2)],
                scale,
                min: [x0, y0, 0.0],
                max: [x0 + w, y0 + d, h],
            };
            if placed.iter().all(|p| footprints_clear(p, &cand, cfg.gap)) {
                placed.push(cand);
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(SceneError::Generation(format!(
                "could not place object {k} of {n_obj} after {} retries",
                cfg.max_retries
            )));
        }
    }

    let noise = Normal::new(0.0, cfg.coord_noise.max(1e-12)).expect("valid sigma");
    let cnoise = Normal::new(0.0, cfg.color_noise.max(1e-12)).expect("valid sigma");
    let mut points: Vec<Point3> = Vec::new();
    let mut features: Vec<f64> = Vec::new();
    let mut semantic = Vec::new();
    let mut instance = Vec::new();
    let fdim = cfg.feature_dim;
    let mut push_point = |rng: &mut rng::Rng, p: Point3, rgb: [f64; 3], normal: [f64; 3], sem: usize, inst: i64| {
        points.push([
            p[0] + noise.sample(rng),
            p[1] + noise.sample(rng),
            p[2] + noise.sample(rng),
        ]);
        let mut f: Vec<f64> = rgb.iter().map(|c| (c + cnoise.sample(rng)).clamp(0.0, 1.0)).collect();
        f.extend_from_slice(&normal);
        while f.len() < fdim {
            f.push(cnoise.sample(rng));
        }
        f.truncate(fdim);
        features.extend(f);
        semantic.push(sem);
        instance.push(inst);
    };

    for (k, o) in placed.iter().enumerate() {
        let (w, d, h) = (o.max[0] - o.min[0], o.max[1] - o.min[1], o.max[2]);
        // top, -x, +x, -y, +y
        let areas = [w * d, d * h, d * h, w * h, w * h];
        let total: f64 = areas.iter().sum();
        let n = ((total * cfg.density).round() as usize).clamp(cfg.min_points_per_object, cfg.max_points_per_object);
        let rgb = rendered_color(o.class, o.color);
        for _ in 0..n {
            let mut r = rng.gen_range(0.0..total);
            let mut face = 0;
            while face < 4 && r >= areas[face] {
                r -= areas[face];
                face += 1;
            }
            let (u, v) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            let (p, nrm) = match face {
                0 => ([o.min[0] + u * w, o.min[1] + v * d, h], [0.0, 0.0, 1.0]),
                1 => ([o.min[0], o.min[1] + u * d, v * h], [-1.0, 0.0, 0.0]),
                2 => ([o.max[0], o.min[1] + u * d, v * h], [1.0, 0.0, 0.0]),
                3 => ([o.min[0] + u * w, o.min[1], v * h], [0.0, -1.0, 0.0]),
                _ => ([o.min[0] + u * w, o.max[1], v * h], [0.0, 1.0, 0.0]),
            };
            push_point(&mut rng, p, rgb, nrm, o.class, k as i64);
        }
    }
    let floor_class = cfg.num_classes;
    let mut floor_left = cfg.floor_points;
    let mut guard = 0;
    while floor_left > 0 && guard < cfg.floor_points * 50 {
        guard += 1;
        let p = [rng.gen_range(0.0..cfg.room[0]), rng.gen_range(0.0..cfg.room[1]), 0.0];
        let under = placed
            .iter()
            .any(|o| p[0] >= o.min[0] && p[0] <= o.max[0] && p[1] >= o.min[1] && p[1] <= o.max[1]);
        if under {
            continue;
        }
        push_point(&mut rng, p, FLOOR_RGB, [0.0, 0.0, 1.0], floor_class, -1);
        floor_left -= 1;
    }

    if points.len() > cfg.point_cap {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
        idx.truncate(cfg.point_cap);
        idx.sort_unstable();
        points = idx.iter().map(|&i| points[i]).collect();
        features = idx
            .iter()
            .flat_map(|&i| features[i * fdim..(i + 1) * fdim].to_vec())
            .collect();
        semantic = idx.iter().map(|&i| semantic[i]).collect();
        instance = idx.iter().map(|&i| instance[i]).collect();
    }

    let mut objects = Vec::with_capacity(placed.len());
    for (k, o) in placed.iter().enumerate() {
        let members: Vec<usize> = (0..points.len()).filter(|&i| instance[i] == k as i64).collect();
        let bbox = bbox_of_indices(&points, &members)
            .map_err(|_| SceneError::Generation(format!("object {k} lost all points to the point cap")))?;
        objects.push(GtObject {
            instance_id: k,
            semantic_class: o.class,
            bbox,
            color: o.color,
            size: SizeAttr::from_scale(o.scale),
            descriptions: Vec::new(),
        });
    }
    Ok(Scene {
        scene_id: format!("scene{seed:016x}"),
        points,
        feature_dim: fdim,
        features,
        semantic_labels: semantic,
        instance_labels: instance,
        objects,
        annotated: false,
        num_classes: cfg.num_classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{bbox_from_points, iou};

    #[test]
    fn single_object_scene() {
        let cfg = GenConfig {
            min_objects: 1,
            max_objects: 1,
            ..GenConfig::default()
        };
        let s = generate_scene(0, &cfg).unwrap();
        assert_eq!(s.objects.len(), 1);
        let pts: Vec<Point3> = (0..s.len())
            .filter(|&i| s.instance_labels[i] == 0)
            .map(|i| s.points[i])
            .collect();
        assert_eq!(s.objects[0].bbox, bbox_from_points(&pts).unwrap());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::default();
        assert_eq!(generate_scene(42, &cfg).unwrap(), generate_scene(42, &cfg).unwrap());
        assert_ne!(generate_scene(42, &cfg).unwrap(), generate_scene(43, &cfg).unwrap());
    }

    #[test]
    fn infeasible_placement_errors() {
        let cfg = GenConfig {
            min_objects: 30,
            max_objects: 30,
            room: [2.0, 2.0],
            max_retries: 20,
            ..GenConfig::default()
        };
        assert!(matches!(generate_scene(1, &cfg), Err(SceneError::Generation(_))));
    }

    #[test]
    fn invariants_hold() {
        let cfg = GenConfig::default();
        for seed in 0..10 {
            let s = generate_scene(seed, &cfg).unwrap();
            assert!(s.len() <= cfg.point_cap);
            assert_eq!(s.features.len(), s.len() * cfg.feature_dim);
            assert!(s.points.iter().all(|p| p.iter().all(|v| v.is_finite())));
            for o in &s.objects {
                assert!(o.semantic_class < cfg.num_classes);
            }
            for &l in &s.instance_labels {
                assert!(l == -1 || (l as usize) < s.objects.len());
            }
        }
    }

    #[test]
    fn point_cap_applies() {
        let cfg = GenConfig {
            point_cap: 300,
            ..GenConfig::default()
        };
        let s = generate_scene(5, &cfg).unwrap();
        assert_eq!(s.len(), 300);
    }

    #[test]
    fn objects_never_overlap() {
        let cfg = GenConfig::default();
        for seed in 0..100 {
            let s = generate_scene(seed, &cfg).unwrap();
            for (a, oa) in s.objects.iter().enumerate() {
                for ob in &s.objects[a + 1..] {
                    assert_eq!(iou(&oa.bbox, &ob.bbox), 0.0, "seed {seed}");
                }
            }
        }
    }
}

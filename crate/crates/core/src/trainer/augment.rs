use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::scene::Scene;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Standard deviation of per-point coordinate noise, meters.
    pub jitter: f64,
    /// Random mirroring about the YZ-plane through the scene center.
    pub mirror: bool,
    /// Random rotation about the vertical axis through the scene center.
    pub rotate: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            jitter: 0.005,
            mirror: true,
            rotate: true,
        }
    }
}

/// Augmented copy of a scene with boxes recomputed from the moved points.
/// Mirroring and rotation apply only when `geometric` is set, since they
/// would contradict the left/right/front/behind words of descriptions.
/// Normal features (columns 3..6) follow the geometric transform.
pub fn augment<R: Rng>(scene: &Scene, cfg: &AugmentConfig, geometric: bool, rng: &mut R) -> Scene {
    let mut s = scene.clone();
    if s.points.is_empty() {
        return s;
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &s.points {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let c = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
    let mirror = geometric && cfg.mirror && rng.gen_bool(0.5);
    let angle = if geometric && cfg.rotate {
        rng.gen_range(0.0..std::f64::consts::TAU)
    } else {
        0.0
    };
    let (sin, cos) = angle.sin_cos();
    let transform = |x: f64, y: f64, centered: bool| {
        let (mut x, y) = if centered { (x - c[0], y - c[1]) } else { (x, y) };
        if mirror {
            x = -x;
        }
        let (rx, ry) = (cos * x - sin * y, sin * x + cos * y);
        if centered {
            (rx + c[0], ry + c[1])
        } else {
            (rx, ry)
        }
    };
    let has_normals = s.feature_dim >= 6;
    for i in 0..s.points.len() {
        let p = s.points[i];
        let (x, y) = transform(p[0], p[1], true);
        s.points[i] = [x, y, p[2]];
        if has_normals {
            let f = &mut s.features[i * s.feature_dim..(i + 1) * s.feature_dim];
            let (nx, ny) = transform(f[3], f[4], false);
            f[3] = nx;
            f[4] = ny;
        }
    }
    if cfg.jitter > 0.0 {
        let noise = Normal::new(0.0, cfg.jitter).expect("positive jitter");
        for p in &mut s.points {
            for v in p.iter_mut() {
                *v += noise.sample(rng);
            }
        }
    }
    s.refresh_boxes();
    s
}

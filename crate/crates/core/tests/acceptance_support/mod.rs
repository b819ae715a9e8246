pub mod determinism;
pub mod gradients;
pub mod oracles;
pub mod reinforce;
pub mod trends;

use d3desk::rng;
use d3desk::scene::{generate_scene, GenConfig, Scene};
use rand::Rng;

/// Number of random instances per check.
pub const INSTANCES: u64 = 20;

pub fn small_scene(seed: u64) -> Scene {
    let cfg = GenConfig {
        min_objects: 2,
        max_objects: 3,
        density: 20.0,
        min_points_per_object: 8,
        max_points_per_object: 14,
        floor_points: 8,
        ..GenConfig::default()
    };
    generate_scene(seed, &cfg).expect("small scene")
}

pub fn uniform(r: &mut rng::Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.gen_range(-scale..scale)).collect()
}

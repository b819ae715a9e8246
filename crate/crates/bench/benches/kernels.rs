use std::collections::BTreeMap;

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use d3desk::detector::{cluster, DetectorConfig};
use d3desk::geometry::{iou, nms, Aabb};
use d3desk::reward::cider_fit;
use d3desk::scene::{generate_scene, GenConfig};
use d3desk::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn boxes(n: usize, r: &mut ChaCha8Rng) -> Vec<(Aabb, f64)> {
    (0..n)
        .map(|_| {
            let min = [r.gen_range(0.0..2.0), r.gen_range(0.0..2.0), r.gen_range(0.0..0.5)];
            let max = [
                min[0] + r.gen_range(0.05..0.5),
                min[1] + r.gen_range(0.05..0.5),
                min[2] + r.gen_range(0.05..0.5),
            ];
            (Aabb::new(min, max), r.gen_range(0.0..1.0))
        })
        .collect()
}

fn geometry(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let b = boxes(256, &mut r);
    c.bench_function("iou 256x256", |bench| {
        bench.iter(|| {
            let mut s = 0.0;
            for (x, _) in &b {
                for (y, _) in &b {
                    s += iou(x, y);
                }
            }
            black_box(s)
        })
    });
    c.bench_function("nms 256", |bench| bench.iter(|| nms(black_box(&b), 0.25)));
}

fn clustering(c: &mut Criterion) {
    let scene = generate_scene(3, &GenConfig::default()).expect("default scene");
    let cfg = DetectorConfig::default();
    c.bench_function("cluster default scene", |bench| {
        bench.iter(|| {
            cluster(
                black_box(&scene.points),
                &scene.points,
                &scene.semantic_labels,
                scene.floor_class(),
                cfg.radius,
                cfg.min_points,
            )
        })
    });
}

fn captions(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let sentence = |r: &mut ChaCha8Rng| {
        (0..r.gen_range(6..14))
            .map(|_| r.gen_range(4..42))
            .collect::<Vec<u32>>()
    };
    let refs: BTreeMap<String, Vec<Vec<u32>>> = (0..200)
        .map(|i| (format!("o{i}"), (0..3).map(|_| sentence(&mut r)).collect()))
        .collect();
    let candidates: Vec<(String, Vec<u32>)> = refs.keys().map(|k| (k.clone(), sentence(&mut r))).collect();
    c.bench_function("cider fit 200 objects", |bench| {
        bench.iter(|| cider_fit(black_box(&refs)))
    });
    let corpus = cider_fit(&refs).expect("non-empty references");
    c.bench_function("cider score 200 candidates", |bench| {
        bench.iter(|| candidates.iter().map(|(k, s)| corpus.score(k, s).unwrap()).sum::<f64>())
    });
}

fn matmul(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let mut m = |rows: usize, cols: usize| {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect())
    };
    let (a, b) = (m(1024, 64), m(64, 64));
    c.bench_function("matmul 1024x64x64 forward+backward", |bench| {
        bench.iter_batched(
            Graph::new,
            |mut g| {
                let x = g.input(a.clone());
                let w = g.input(b.clone());
                let y = g.matmul(x, w).unwrap();
                let s = g.sum(y);
                g.backward(s).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(kernels, geometry, clustering, captions, matmul);
criterion_main!(kernels);

//! Finite-difference checks of every training loss, with respect to its
//! direct inputs and to the parameters of the modules it trains.

use d3desk::detector::{point_losses, score_target, Detector, DetectorConfig, PointOutputs};
use d3desk::geometry::{bbox_of_indices, Aabb};
use d3desk::listener::{listener_loss, Listener, ListenerConfig, PREFIX as LST};
use d3desk::rng;
use d3desk::speaker::{match_to_gt, orientation_loss, Speaker, SpeakerConfig, PREFIX as SPK};
use d3desk::tensor::{GradCheck, Graph, ParamStore, Result, Tensor, Var};
use rand::Rng;

use super::{small_scene, uniform, INSTANCES};

/// Relative-error bound for float64 graphs.
pub const TOLERANCE: f64 = 1e-5;

const EPS: f64 = 1e-6;

struct Row {
    name: &'static str,
    worst: f64,
    checks: usize,
}

impl Row {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            worst: 0.0,
            checks: 0,
        }
    }

    fn record(&mut self, err: Result<f64>) -> std::result::Result<(), String> {
        let e = err.map_err(|e| format!("{}: {e}", self.name))?;
        self.worst = self.worst.max(e);
        self.checks += 1;
        Ok(())
    }
}

fn check() -> GradCheck {
    GradCheck::new(EPS)
}

/// Checks `f` against every parameter whose name starts with one of
/// `prefixes`, recording the worst error.
fn params<F>(row: &mut Row, store: &ParamStore, prefixes: &[&str], f: F) -> std::result::Result<(), String>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| prefixes.iter().any(|x| p.name.starts_with(x)))
        .map(|(id, _)| id)
        .collect();
    if ids.is_empty() {
        return Err(format!("{}: no parameters match {prefixes:?}", row.name));
    }
    for id in ids {
        row.record(check().run_param(&f, store, id))?;
    }
    Ok(())
}

/// Adds uniform noise to every parameter. Zero-initialized biases would
/// otherwise let a head output exactly zero, where the direction loss is
/// not differentiable.
fn jitter(store: &mut ParamStore, r: &mut rng::Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        store
            .get_mut(id)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += r.gen_range(-0.1..0.1));
    }
}

fn detector_rows(seed: u64, rows: &mut [Row; 5]) -> std::result::Result<(), String> {
    let scene = small_scene(1000 + seed);
    let mut r = rng::rng(seed, &[1]);
    let classes = scene.num_classes + 1;
    let n = scene.len();

    let outputs = Tensor::matrix(n, classes + 3, uniform(&mut r, n * (classes + 3), 1.0));
    let pick = |part: usize| {
        let scene = &scene;
        move |g: &mut Graph, x: Var| -> Result<Var> {
            let sem_logits = g.slice_cols(x, 0, classes)?;
            let offsets = g.slice_cols(x, classes, classes + 3)?;
            let out = PointOutputs {
                embeddings: offsets,
                sem_logits,
                offsets,
            };
            let l = point_losses(g, out, scene, 1e-6).map_err(to_tensor)?;
            Ok([l.0, l.1, l.2][part])
        }
    };
    for (part, row) in rows.iter_mut().take(3).enumerate() {
        row.record(check().run(pick(part), &outputs))?;
    }

    let mut store = ParamStore::new();
    let cfg = DetectorConfig {
        hidden: 6,
        feature_dim: 5,
        ..DetectorConfig::default()
    };
    let det = Detector::new(&mut store, cfg, scene.num_classes, scene.feature_dim, &mut r);
    jitter(&mut store, &mut r);
    let gt: Vec<Aabb> = scene.objects.iter().map(|o| o.bbox).collect();
    let mut clusters = Vec::new();
    for m in scene.instance_members().into_iter().filter(|m| m.len() >= 4) {
        clusters.push(m[..m.len() / 2].to_vec());
        clusters.push(m);
    }
    let targets: Vec<f64> = clusters
        .iter()
        .map(|c| score_target(&bbox_of_indices(&scene.points, c).unwrap(), &gt, det.cfg.score_ramp))
        .collect();
    let emb = Tensor::matrix(n, 6, uniform(&mut r, n * 6, 1.0));
    let score = |g: &mut Graph, x: Var| -> Result<Var> {
        let (_, logits) = det
            .score_clusters(g, &store, x, &scene.points, &clusters)
            .map_err(to_tensor)?;
        g.bce_with_logits(logits, &targets)
    };
    rows[3].record(check().run(score, &emb))?;

    let inp = det.prepare(&scene.points, &scene.features).map_err(|e| e.to_string())?;
    let full = |g: &mut Graph, s: &ParamStore, x: Var| -> Result<Var> {
        let out = det.forward_input(g, s, &inp, x).map_err(to_tensor)?;
        let (a, b, c) = point_losses(g, out, &scene, 1e-6).map_err(to_tensor)?;
        let (_, logits) = det
            .score_clusters(g, s, out.embeddings, &scene.points, &clusters)
            .map_err(to_tensor)?;
        let d = g.bce_with_logits(logits, &targets)?;
        let ab = g.add(a, b)?;
        let cd = g.add(c, d)?;
        g.add(ab, cd)
    };
    rows[4].record(check().run(|g, x| full(g, &store, x), &inp.voxels))?;
    params(&mut rows[4], &store, &["det."], |g, s| {
        let x = g.constant(inp.voxels.clone());
        full(g, s, x)
    })
}

fn to_tensor<E: std::fmt::Display>(e: E) -> d3desk::tensor::TensorError {
    d3desk::tensor::TensorError::Invalid {
        op: "acceptance",
        msg: e.to_string(),
    }
}

fn listener_rows(seed: u64, rows: &mut [Row; 2]) -> std::result::Result<(), String> {
    let mut r = rng::rng(seed, &[2]);
    let mut store = ParamStore::new();
    let cfg = ListenerConfig {
        width: 8,
        heads: 2,
        layers: 2,
        embed: 4,
    };
    let (dim, vocab, classes) = (5, 12, 4);
    let lst = Listener::new(&mut store, LST, cfg, dim, vocab, classes, &mut r);
    jitter(&mut store, &mut r);
    let p = r.gen_range(2..=5);
    let proposals = Tensor::matrix(p, dim, uniform(&mut r, p * dim, 1.0));
    let tokens: Vec<u32> = (0..r.gen_range(2..=5)).map(|_| r.gen_range(4..vocab as u32)).collect();
    let (target, class) = (r.gen_range(0..p), r.gen_range(0..classes));
    let loss = |g: &mut Graph, s: &ParamStore, x: Var, part: usize| -> Result<Var> {
        let out = lst.forward(g, s, x, &tokens)?;
        let l = listener_loss(g, &out, target, class)?;
        Ok([l.loc, l.lobjcls][part])
    };
    rows[0].record(check().run(|g, x| loss(g, &store, x, 0), &proposals))?;
    for (part, row) in rows.iter_mut().enumerate() {
        params(row, &store, &[LST], |g, s| {
            let x = g.constant(proposals.clone());
            loss(g, s, x, part)
        })?;
    }
    Ok(())
}

fn speaker_rows(seed: u64, rows: &mut [Row; 2]) -> std::result::Result<(), String> {
    let mut r = rng::rng(seed, &[3]);
    let mut store = ParamStore::new();
    let cfg = SpeakerConfig {
        hidden: 8,
        embed: 4,
        attention: 6,
        neighbors: 3,
        rounds: 1,
        max_len: 6,
    };
    let (dim, vocab) = (7, 10);
    let spk = Speaker::new(&mut store, cfg, dim, vocab, &mut r);
    jitter(&mut store, &mut r);
    let p = r.gen_range(3..=5);
    let inputs = Tensor::matrix(p, dim, uniform(&mut r, p * dim, 1.0));
    let boxes: Vec<Aabb> = (0..p)
        .map(|i| {
            let x = i as f64 * 1.2 + r.gen_range(0.0..0.3);
            let y = r.gen_range(0.0..3.0);
            Aabb::new([x, y, 0.0], [x + 0.6, y + 0.5, 0.8])
        })
        .collect();
    let targets: Vec<usize> = (0..2).map(|_| r.gen_range(0..p)).collect();
    let words: Vec<Vec<u32>> = targets
        .iter()
        .map(|_| (0..r.gen_range(1..=4)).map(|_| r.gen_range(3..vocab as u32)).collect())
        .collect();
    let xe = |g: &mut Graph, s: &ParamStore, x: Var| -> Result<Var> {
        let ctx = spk.encode_scene(g, s, x, &boxes)?;
        spk.mle_loss(g, s, &ctx, &targets, &words)
    };
    rows[0].record(check().run(|g, x| xe(g, &store, x), &inputs))?;
    params(&mut rows[0], &store, &[SPK], |g, s| {
        let x = g.constant(inputs.clone());
        xe(g, s, x)
    })?;

    let centers: Vec<_> = boxes.iter().map(Aabb::center).collect();
    let matches = match_to_gt(&boxes, &boxes, 0.5);
    let ori = |g: &mut Graph, s: &ParamStore, x: Var| -> Result<Var> {
        let ctx = spk.encode_scene(g, s, x, &boxes)?;
        let (l, used) = orientation_loss(g, ctx.edge_logits, &ctx.edges, &matches, &centers)?;
        assert!(used > 0);
        Ok(l)
    };
    rows[1].record(check().run(|g, x| ori(g, &store, x), &inputs))?;
    params(&mut rows[1], &store, &["spk.node", "spk.edge", "spk.orient"], |g, s| {
        let x = g.constant(inputs.clone());
        ori(g, s, x)
    })
}

pub fn run() -> std::result::Result<String, String> {
    let mut det = [
        Row::new("L_sem"),
        Row::new("L_o_reg"),
        Row::new("L_o_dir"),
        Row::new("L_c_score"),
        Row::new("L_det encoder path"),
    ];
    let mut lst = [Row::new("L_loc + fusion"), Row::new("L_lobjcls")];
    let mut spk = [Row::new("L_spk-XE + decoder"), Row::new("L_ori")];
    for seed in 0..INSTANCES {
        detector_rows(seed, &mut det)?;
        listener_rows(seed, &mut lst)?;
        speaker_rows(seed, &mut spk)?;
    }
    let rows: Vec<&Row> = det.iter().chain(&lst).chain(&spk).collect();
    let summary = rows
        .iter()
        .map(|r| format!("{} {:.1e} ({} checks)", r.name, r.worst, r.checks))
        .collect::<Vec<_>>()
        .join("; ");
    if rows.iter().all(|r| r.worst < TOLERANCE) {
        Ok(summary)
    } else {
        Err(summary)
    }
}

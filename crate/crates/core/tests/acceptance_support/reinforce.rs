//! Self-critical REINFORCE on a two-step policy over three tokens, compared
//! with the exact gradient of the expected reward.
//!
//! The policy has twelve logits: three for the first token and a 3×3 table
//! for the second token given the first. Rewards are a random 3×3 table.

use d3desk::reward::reinforce_loss_batch;
use d3desk::rng;
use d3desk::tensor::{Graph, Tensor};
use rand::Rng;

pub const SAMPLES: usize = 50_000;
pub const SETTINGS: u64 = 5;
pub const TOLERANCE: f64 = 0.02;

const V: usize = 3;

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

struct Policy {
    first: Vec<f64>,
    second: Vec<Vec<f64>>,
}

impl Policy {
    fn new(theta: &[f64]) -> Self {
        Self {
            first: softmax(&theta[..V]),
            second: (0..V).map(|a| softmax(&theta[V + V * a..2 * V + V * a])).collect(),
        }
    }

    fn prob(&self, a: usize, b: usize) -> f64 {
        self.first[a] * self.second[a][b]
    }
}

fn argmax(x: &[f64]) -> usize {
    (0..x.len()).fold(0, |best, i| if x[i] > x[best] { i } else { best })
}

/// `∇_θ Σ_C p(C) R(C)` by enumerating all nine sequences.
fn exact_gradient(theta: &[f64], reward: &[[f64; V]; V]) -> Vec<f64> {
    let pol = Policy::new(theta);
    let mut grad = vec![0.0; theta.len()];
    for a in 0..V {
        for b in 0..V {
            let w = pol.prob(a, b) * reward[a][b];
            for k in 0..V {
                grad[k] += w * (f64::from(u8::from(k == a)) - pol.first[k]);
                grad[V + V * a + k] += w * (f64::from(u8::from(k == b)) - pol.second[a][k]);
            }
        }
    }
    grad
}

/// Systematic sampling: one uniform offset and `n` evenly spaced quantiles
/// pushed through the inverse CDF of the sequence distribution. Every draw
/// is marginally distributed as the policy.
fn systematic_samples(pol: &Policy, n: usize, offset: f64) -> Vec<(usize, usize)> {
    let mut cdf = Vec::with_capacity(V * V);
    let mut acc = 0.0;
    for a in 0..V {
        for b in 0..V {
            acc += pol.prob(a, b);
            cdf.push((acc, (a, b)));
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for i in 0..n {
        let u = (i as f64 + offset) / n as f64 * acc;
        while j + 1 < cdf.len() && cdf[j].0 <= u {
            j += 1;
        }
        out.push(cdf[j].1);
    }
    out
}

/// The library estimator: the gradient of `mean(−(R − R_greedy) log p)`
/// through the autodiff graph, negated.
fn estimate(theta: &[f64], reward: &[[f64; V]; V], samples: &[(usize, usize)]) -> Vec<f64> {
    let a0 = argmax(&theta[..V]);
    let b0 = argmax(&theta[V + V * a0..2 * V + V * a0]);
    let baseline = reward[a0][b0];
    let mut g = Graph::new();
    let x = g.input(Tensor::row(theta.to_vec()));
    let first = g.slice_cols(x, 0, V).unwrap();
    let first = g.log_softmax(first);
    let second = g.slice_cols(x, V, V + V * V).unwrap();
    let second = g.reshape(second, &[V, V]).unwrap();
    let second = g.log_softmax(second);
    let firsts: Vec<usize> = samples.iter().map(|s| s.0).collect();
    let seconds: Vec<usize> = samples.iter().map(|s| s.1).collect();
    let rows = g.gather_rows(first, &vec![0; samples.len()]).unwrap();
    let lp1 = g.pick(rows, &firsts).unwrap();
    let rows = g.gather_rows(second, &firsts).unwrap();
    let lp2 = g.pick(rows, &seconds).unwrap();
    let lp = g.add(lp1, lp2).unwrap();
    let adv: Vec<f64> = samples.iter().map(|&(a, b)| reward[a][b] - baseline).collect();
    let loss = reinforce_loss_batch(&mut g, lp, &adv).unwrap();
    let grad = g.backward(loss).unwrap().get(&g, x);
    grad.data().iter().map(|v| -v).collect()
}

pub fn run() -> Result<String, String> {
    let mut worst = 0.0f64;
    for setting in 0..SETTINGS {
        let mut r = rng::rng(setting, &[0x2e1f]);
        let theta: Vec<f64> = (0..V + V * V).map(|_| r.gen_range(-1.5..1.5)).collect();
        let mut reward = [[0.0; V]; V];
        reward.iter_mut().flatten().for_each(|v| *v = r.gen_range(0.0..1.0));
        let samples = systematic_samples(&Policy::new(&theta), SAMPLES, r.gen_range(0.0..1.0));
        let est = estimate(&theta, &reward, &samples);
        let exact = exact_gradient(&theta, &reward);
        for (e, x) in est.iter().zip(&exact) {
            worst = worst.max((e - x).abs() / x.abs());
        }
    }
    let detail = format!("max relative error {worst:.2e} over {SETTINGS} settings of {SAMPLES} samples");
    if worst < TOLERANCE {
        Ok(detail)
    } else {
        Err(detail)
    }
}

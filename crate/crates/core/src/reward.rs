//! CIDEr-D statistics, the listener-regularized caption reward and the
//! self-critical policy-gradient loss.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Result as TensorResult, Tensor, Var};

pub const CIDER_MAX_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_SCALE: f64 = 10.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RewardError {
    #[error("CIDEr corpus needs at least one key with one reference")]
    EmptyCorpus,
    #[error("unknown CIDEr key {0}")]
    UnknownKey(String),
}

type NgramCounts = BTreeMap<Vec<u32>, f64>;

fn ngram_counts(tokens: &[u32], n: usize) -> NgramCounts {
    let mut out = NgramCounts::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    out
}

/// One tf-idf vector per n-gram order plus its norm.
struct TfIdf {
    vecs: Vec<NgramCounts>,
    norms: Vec<f64>,
    length: f64,
}

/// Document frequencies and per-key references for CIDEr-D.
#[derive(Clone, Debug)]
pub struct CiderCorpus {
    refs: BTreeMap<String, Vec<Vec<u32>>>,
    df: HashMap<Vec<u32>, f64>,
    log_size: f64,
}

/// Fits document frequencies over every key's reference set. An n-gram's
/// document frequency counts the keys whose references contain it.
pub fn cider_fit(references: &BTreeMap<String, Vec<Vec<u32>>>) -> Result<CiderCorpus, RewardError> {
    let refs: BTreeMap<String, Vec<Vec<u32>>> = references
        .iter()
        .filter(|(_, r)| !r.is_empty())
        .map(|(k, r)| (k.clone(), r.clone()))
        .collect();
    if refs.is_empty() {
        return Err(RewardError::EmptyCorpus);
    }
    let mut df: HashMap<Vec<u32>, f64> = HashMap::new();
    for rs in refs.values() {
        let mut seen: std::collections::HashSet<&[u32]> = std::collections::HashSet::new();
        for r in rs {
            for n in 1..=CIDER_MAX_N {
                if r.len() >= n {
                    for w in r.windows(n) {
                        seen.insert(w);
                    }
                }
            }
        }
        for g in seen {
            *df.entry(g.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    let log_size = (refs.len() as f64).ln();
    Ok(CiderCorpus { refs, df, log_size })
}

impl CiderCorpus {
    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.refs.contains_key(key)
    }

    pub fn references(&self, key: &str) -> Option<&[Vec<u32>]> {
        self.refs.get(key).map(Vec::as_slice)
    }

    /// Document frequency as fitted (0 for unseen n-grams).
    pub fn document_frequency(&self, ngram: &[u32]) -> f64 {
        self.df.get(ngram).copied().unwrap_or(0.0)
    }

    /// `ln(corpus size / max(1, df))`.
    pub fn idf(&self, ngram: &[u32]) -> f64 {
        self.log_size - self.document_frequency(ngram).max(1.0).ln()
    }

    fn tfidf(&self, tokens: &[u32]) -> TfIdf {
        let mut vecs = Vec::with_capacity(CIDER_MAX_N);
        let mut norms = Vec::with_capacity(CIDER_MAX_N);
        for n in 1..=CIDER_MAX_N {
            let mut v = ngram_counts(tokens, n);
            for (g, x) in v.iter_mut() {
                *x *= self.idf(g);
            }
            norms.push(v.values().map(|x| x * x).sum::<f64>().sqrt());
            vecs.push(v);
        }
        TfIdf {
            vecs,
            norms,
            length: tokens.len() as f64,
        }
    }

    fn similarity(hyp: &TfIdf, reference: &TfIdf) -> f64 {
        let delta = hyp.length - reference.length;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut total = 0.0;
        for n in 0..CIDER_MAX_N {
            let mut val = 0.0;
            for (g, &h) in &hyp.vecs[n] {
                if let Some(&r) = reference.vecs[n].get(g) {
                    val += h.min(r) * r;
                }
            }
            if hyp.norms[n] != 0.0 && reference.norms[n] != 0.0 {
                val /= hyp.norms[n] * reference.norms[n];
            }
            total += val * penalty;
        }
        total
    }

    /// CIDEr-D of `candidate` (word ids, no sos/eos) against `key`'s references.
    pub fn score(&self, key: &str, candidate: &[u32]) -> Result<f64, RewardError> {
        let refs = self
            .refs
            .get(key)
            .ok_or_else(|| RewardError::UnknownKey(key.to_string()))?;
        Ok(self.score_against(refs, candidate))
    }

    /// CIDEr-D against an explicit reference set, using this corpus's
    /// document frequencies.
    pub fn score_against(&self, refs: &[Vec<u32>], candidate: &[u32]) -> f64 {
        if refs.is_empty() {
            return 0.0;
        }
        let hyp = self.tfidf(candidate);
        let sum: f64 = refs.iter().map(|r| Self::similarity(&hyp, &self.tfidf(r))).sum();
        (sum / CIDER_MAX_N as f64 / refs.len() as f64 * CIDER_SCALE).max(0.0)
    }
}

pub fn cider_score(corpus: &CiderCorpus, key: &str, candidate: &[u32]) -> Result<f64, RewardError> {
    corpus.score(key, candidate)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 1.0 }
    }
}

/// Listener losses of one caption, evaluated with the listener frozen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ListenerLosses {
    pub loc: f64,
    pub lobjcls: f64,
}

/// `cider − α(loc + β·lobjcls)`, with the CIDEr term dropped when the
/// caption has no references.
pub fn reward_value(cider: Option<f64>, losses: ListenerLosses, w: RewardWeights) -> f64 {
    cider.unwrap_or(0.0) - w.alpha * (losses.loc + w.beta * losses.lobjcls)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub cider: f64,
    pub loc_loss: f64,
    pub lobjcls_loss: f64,
    pub reward: f64,
    pub baseline: f64,
    pub advantage: f64,
}

/// Reward of a sampled caption and of the greedy baseline, both scored by
/// the same formula against the same key.
pub fn compute_reward(
    corpus: Option<&CiderCorpus>,
    key: Option<&str>,
    candidate: &[u32],
    losses: ListenerLosses,
    baseline: &[u32],
    baseline_losses: ListenerLosses,
    w: RewardWeights,
) -> Result<RewardRecord, RewardError> {
    let (cider, base_cider) = match (corpus, key) {
        (Some(c), Some(k)) => (Some(c.score(k, candidate)?), Some(c.score(k, baseline)?)),
        _ => (None, None),
    };
    let reward = reward_value(cider, losses, w);
    let base = reward_value(base_cider, baseline_losses, w);
    Ok(RewardRecord {
        cider: cider.unwrap_or(0.0),
        loc_loss: losses.loc,
        lobjcls_loss: losses.lobjcls,
        reward,
        baseline: base,
        advantage: reward - base,
    })
}

/// `mean_i(−advantage_i · Σ_t log p_i,t)`; each entry of `logprob_sums` is
/// a scalar node, advantages are constants.
pub fn reinforce_loss(g: &mut Graph, logprob_sums: &[Var], advantages: &[f64]) -> TensorResult<Var> {
    if logprob_sums.is_empty() || logprob_sums.len() != advantages.len() {
        return Err(crate::tensor::TensorError::Invalid {
            op: "reinforce_loss",
            msg: format!("{} samples for {} advantages", logprob_sums.len(), advantages.len()),
        });
    }
    let n = logprob_sums.len() as f64;
    let mut total: Option<Var> = None;
    for (&lp, &a) in logprob_sums.iter().zip(advantages) {
        let term = g.scale(lp, -a / n);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(total.expect("nonempty"))
}

/// [`reinforce_loss`] for a `B × 1` node of per-sample log-probability
/// sums.
pub fn reinforce_loss_batch(g: &mut Graph, logprob_sums: Var, advantages: &[f64]) -> TensorResult<Var> {
    if g.value(logprob_sums).len() != advantages.len() || advantages.is_empty() {
        return Err(crate::tensor::TensorError::Invalid {
            op: "reinforce_loss_batch",
            msg: format!(
                "{:?} log-probabilities for {} advantages",
                g.shape(logprob_sums),
                advantages.len()
            ),
        });
    }
    let n = advantages.len() as f64;
    let w = g.constant(Tensor::matrix(
        advantages.len(),
        1,
        advantages.iter().map(|a| -a / n).collect(),
    ));
    let weighted = g.mul(logprob_sums, w)?;
    Ok(g.sum(weighted))
}

//! Visual-grounding head: recurrent language encoder, attention fusion over
//! proposals, per-proposal matching logits and a language object classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{GruCell, Linear, MultiHeadAttention};
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

pub const PREFIX: &str = "lst.";
/// Parameter prefix of the GT-box listener used by the discriminability probe.
pub const PROBE_PREFIX: &str = "probe.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ListenerConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub embed: usize,
}

impl Default for ListenerConfig {
    fn default() -> Self {
        Self {
            width: 128,
            heads: 4,
            layers: 2,
            embed: 64,
        }
    }
}

/// One description grounded against the proposals of its scene.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingBatch {
    pub tokens: Vec<u32>,
    pub target_index: usize,
    pub target_class: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// `1 × P` matching logits.
    pub matching: Var,
    /// `1 × C` language object class logits.
    pub class_logits: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ListenerLoss {
    pub loc: Var,
    pub lobjcls: Var,
}

#[derive(Clone, Debug)]
struct FusionLayer {
    self_att: MultiHeadAttention,
    cross_att: MultiHeadAttention,
    ffn: Linear,
}

#[derive(Clone, Debug)]
pub struct Listener {
    pub cfg: ListenerConfig,
    pub input_dim: usize,
    pub num_classes: usize,
    embed: ParamId,
    gru: GruCell,
    proj: Linear,
    layers: Vec<FusionLayer>,
    matcher: Linear,
    classifier: Linear,
}

impl Listener {
    /// `input_dim` is the proposal feature width; `num_classes` counts the
    /// non-structural classes the language classifier predicts. Parameter
    /// names start with `prefix`.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: ListenerConfig,
        input_dim: usize,
        vocab_size: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let w = cfg.width;
        let layers = (0..cfg.layers)
            .map(|l| FusionLayer {
                self_att: MultiHeadAttention::new(store, &format!("{prefix}fuse{l}.self"), w, cfg.heads, rng),
                cross_att: MultiHeadAttention::new(store, &format!("{prefix}fuse{l}.cross"), w, cfg.heads, rng),
                ffn: Linear::new(store, &format!("{prefix}fuse{l}.ffn"), w, w, rng),
            })
            .collect();
        Self {
            embed: store.add_glorot(&format!("{prefix}embed"), vocab_size, cfg.embed, rng),
            gru: GruCell::new(store, &format!("{prefix}gru"), cfg.embed, w, rng),
            proj: Linear::new(store, &format!("{prefix}proj"), input_dim, w, rng),
            layers,
            matcher: Linear::new(store, &format!("{prefix}match"), w, 1, rng),
            classifier: Linear::new(store, &format!("{prefix}cls"), w, num_classes, rng),
            cfg,
            input_dim,
            num_classes,
        }
    }

    /// Word states (`T × width`) and the sentence vector (`1 × width`, the
    /// final state).
    pub fn encode_language(&self, g: &mut Graph, store: &ParamStore, tokens: &[u32]) -> Result<(Var, Var)> {
        if tokens.is_empty() {
            return Err(TensorError::Invalid {
                op: "encode_language",
                msg: "empty description".into(),
            });
        }
        let table = g.param(store, self.embed);
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let emb = g.embedding(table, &ids)?;
        let mut h = g.constant(Tensor::zeros(&[1, self.cfg.width]));
        let mut states = Vec::with_capacity(tokens.len());
        for t in 0..tokens.len() {
            let x = g.slice_rows(emb, t, t + 1)?;
            h = self.gru.forward(g, store, x, h)?;
            states.push(h);
        }
        let words = if states.len() == 1 {
            states[0]
        } else {
            g.concat_rows(&states)?
        };
        Ok((words, h))
    }

    /// Fusion of proposal inputs (`P × input_dim`) with the word states.
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        proposals: Var,
        words: Var,
        sentence: Var,
    ) -> Result<FusionOutput> {
        let p = self.proj.forward(g, store, proposals)?;
        let mut p = g.relu(p);
        for layer in &self.layers {
            let a = layer.self_att.forward(g, store, p, p)?;
            let s = g.add(p, a)?;
            p = g.layer_norm(s);
            let c = layer.cross_att.forward(g, store, p, words)?;
            let s = g.add(p, c)?;
            p = g.layer_norm(s);
            let f = layer.ffn.forward(g, store, p)?;
            let f = g.relu(f);
            let s = g.add(p, f)?;
            p = g.layer_norm(s);
        }
        let m = self.matcher.forward(g, store, p)?;
        let matching = g.transpose(m);
        let class_logits = self.classifier.forward(g, store, sentence)?;
        Ok(FusionOutput { matching, class_logits })
    }

    /// Language encoding followed by fusion.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, proposals: Var, tokens: &[u32]) -> Result<FusionOutput> {
        let (words, sentence) = self.encode_language(g, store, tokens)?;
        self.fuse(g, store, proposals, words, sentence)
    }

    /// Index of the best-matching proposal, ties to the lower index; `None`
    /// without proposals.
    pub fn ground(&self, store: &ParamStore, proposals: &Tensor, tokens: &[u32]) -> Result<Option<(usize, Vec<f64>)>> {
        if proposals.rows() == 0 {
            return Ok(None);
        }
        let mut g = Graph::no_grad();
        let x = g.constant(proposals.clone());
        let out = self.forward(&mut g, store, x, tokens)?;
        let probs = g.softmax(out.matching);
        let probs = g.value(probs).data().to_vec();
        Ok(Some((argmax_first(g.value(out.matching).data()), probs)))
    }
}

/// First index of the maximum.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Matching and language-classification cross-entropies.
pub fn listener_loss(
    g: &mut Graph,
    out: &FusionOutput,
    target_index: usize,
    target_class: usize,
) -> Result<ListenerLoss> {
    Ok(ListenerLoss {
        loc: g.cross_entropy(out.matching, &[target_index])?,
        lobjcls: g.cross_entropy(out.class_logits, &[target_class])?,
    })
}

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Graph, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

/// Named trainable parameters. Names are dotted paths such as
/// `det.encoder.l1.w`; the first segment names the owning module.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
            frozen: false,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    /// Uniform Glorot initialization for a `fan_in × fan_out` weight.
    pub fn add_glorot<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..limit)).collect();
        self.add(name, Tensor::matrix(fan_in, fan_out, data))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.iter().any(|p| p.name.starts_with(prefix))
    }

    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the gradients of every parameter node of `graph` into the store.
    pub fn accumulate(&mut self, graph: &Graph, grads: &Gradients) {
        for (id, var) in graph.param_nodes() {
            let p = &mut self.params[id.0];
            if p.frozen {
                continue;
            }
            if let Some(g) = grads.get_raw(var) {
                p.grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Copies values (not gradients) of every parameter whose name starts
    /// with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for (name, &id) in &other.index {
            if !name.starts_with(prefix) {
                continue;
            }
            let src = &other.params[id.0];
            let dst = self.add(name, src.value.clone());
            let d = &mut self.params[dst.0];
            if d.value.shape() != src.value.shape() {
                return Err(TensorError::Checkpoint(format!("shape mismatch for {name}")));
            }
            d.value = src.value.clone();
        }
        Ok(())
    }

    /// Copies the value of every parameter named `from…` onto the existing
    /// parameter named `to…` with the same suffix.
    pub fn copy_renamed(&mut self, from: &str, to: &str) -> Result<()> {
        let pairs: Vec<(ParamId, ParamId)> = self
            .index
            .iter()
            .filter_map(|(name, &src)| name.strip_prefix(from).map(|rest| (src, format!("{to}{rest}"))))
            .map(|(src, dst)| {
                self.index
                    .get(&dst)
                    .map(|&d| (src, d))
                    .ok_or_else(|| TensorError::Checkpoint(format!("no parameter {dst}")))
            })
            .collect::<Result<_>>()?;
        for (src, dst) in pairs {
            if self.params[src.0].value.shape() != self.params[dst.0].value.shape() {
                return Err(TensorError::Checkpoint(format!(
                    "shape mismatch for {}",
                    self.params[dst.0].name
                )));
            }
            self.params[dst.0].value = self.params[src.0].value.clone();
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            meta: BTreeMap::new(),
            params: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
            extra: BTreeMap::new(),
        }
    }

    /// Loads values from a checkpoint. Parameters already present must match
    /// in shape; unknown ones are added.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for nt in &ck.params {
            let t = Tensor::new(nt.shape.clone(), nt.data.clone())
                .map_err(|e| TensorError::Checkpoint(format!("{}: {e}", nt.name)))?;
            match self.index.get(&nt.name) {
                Some(&id) => {
                    let p = &mut self.params[id.0];
                    if p.value.shape() != t.shape() {
                        return Err(TensorError::Checkpoint(format!(
                            "{}: stored shape {:?}, model shape {:?}",
                            nt.name,
                            t.shape(),
                            p.value.shape()
                        )));
                    }
                    p.value = t;
                }
                None => {
                    self.add(&nt.name, t);
                }
            }
        }
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "d3desk-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint: named tensors with their shapes plus free-form metadata.
/// `serde_json` writes the shortest round-tripping decimal for every `f64`,
/// so values survive a save/load cycle bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub params: Vec<NamedTensor>,
    /// Additional named tensors such as optimizer moments.
    #[serde(default)]
    pub extra: BTreeMap<String, Vec<NamedTensor>>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        }
        let s = serde_json::to_string(self).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s =
            std::fs::read_to_string(path).map_err(|e| TensorError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck: Checkpoint = serde_json::from_str(&s).map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(TensorError::Checkpoint(format!("unknown format {}", ck.format)));
        }
        Ok(ck)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.iter().any(|p| p.name.starts_with(prefix))
    }
}

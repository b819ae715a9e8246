use std::collections::BTreeMap;

use super::params::NamedTensor;
use super::{ParamStore, Result, TensorError};

/// Adaptive-moment optimizer (Kingma & Ba), with optional global-norm
/// gradient clipping applied before the moment update.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    state: AdamState,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            state: AdamState::default(),
        }
    }

    pub fn with_clip(mut self, clip: f64) -> Self {
        self.clip_norm = Some(clip);
        self
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    /// Applies one update from the gradients currently held by `store` and
    /// leaves them untouched; frozen parameters are skipped.
    pub fn step(&mut self, store: &mut ParamStore) {
        let scale = match self.clip_norm {
            Some(c) => {
                let n = store.grad_norm();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in store.params_mut() {
            if p.frozen {
                continue;
            }
            let n = p.value.len();
            let m = self.state.m.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.state.v.entry(p.name.clone()).or_insert_with(|| vec![0.0; n]);
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..n {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                w[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    pub fn export_state(&self) -> BTreeMap<String, Vec<NamedTensor>> {
        let pack = |map: &BTreeMap<String, Vec<f64>>| {
            map.iter()
                .map(|(k, d)| NamedTensor {
                    name: k.clone(),
                    shape: vec![d.len()],
                    data: d.clone(),
                })
                .collect::<Vec<_>>()
        };
        let mut out = BTreeMap::new();
        out.insert("adam.m".to_string(), pack(&self.state.m));
        out.insert("adam.v".to_string(), pack(&self.state.v));
        out.insert(
            "adam.step".to_string(),
            vec![NamedTensor {
                name: "step".into(),
                shape: vec![1],
                data: vec![self.state.step as f64],
            }],
        );
        out
    }

    pub fn import_state(&mut self, extra: &BTreeMap<String, Vec<NamedTensor>>) -> Result<()> {
        let unpack = |key: &str| -> Result<BTreeMap<String, Vec<f64>>> {
            let list = extra
                .get(key)
                .ok_or_else(|| TensorError::Checkpoint(format!("missing optimizer state {key}")))?;
            Ok(list.iter().map(|t| (t.name.clone(), t.data.clone())).collect())
        };
        let step = extra
            .get("adam.step")
            .and_then(|l| l.first())
            .map(|t| t.data[0] as u64)
            .ok_or_else(|| TensorError::Checkpoint("missing optimizer step".into()))?;
        self.state = AdamState {
            step,
            m: unpack("adam.m")?,
            v: unpack("adam.v")?,
        };
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_gradient_step_is_fixed_point() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::row(vec![0.3, -1.2, 4.0]));
        let before = store.get(store.id("w").unwrap()).value.clone();
        let mut adam = Adam::new(1e-3);
        for _ in 0..5 {
            adam.step(&mut store);
        }
        assert_eq!(store.get(store.id("w").unwrap()).value, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![1.0, 1.0]));
        store.get_mut(id).grad = Tensor::row(vec![2.0, -0.5]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut store);
        let w = store.get(id).value.data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("det.w", Tensor::row(vec![1.0]));
        store.get_mut(id).grad = Tensor::row(vec![1.0]);
        store.set_frozen_prefix("det.", true);
        let mut adam = Adam::new(0.1);
        adam.step(&mut store);
        assert_eq!(store.get(id).value.data(), &[1.0]);
    }
}

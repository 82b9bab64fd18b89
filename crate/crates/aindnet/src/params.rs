//! Named, tagged parameter storage with per-parameter Adam state.
//!
//! Tags drive the transfer-learning partition: an update step only touches
//! parameters whose tag is in the trainable set, leaving everything else
//! byte-identical. Insertion order is the canonical order for checkpoints
//! and digests, so it must be deterministic (it follows model construction).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tensor::{Scalar, Tape, Tensor, ValueId};

/// Which part of the network a parameter belongs to.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamTag {
    /// Scale/shift generators inside the conditional normalization modules.
    Ain,
    /// The noise level estimator.
    Estimator,
    /// The final convolution producing the output image.
    LastConv,
    /// Everything else in the reconstruction network.
    Backbone,
}

impl ParamTag {
    pub const ALL: [ParamTag; 4] =
        [ParamTag::Ain, ParamTag::Estimator, ParamTag::LastConv, ParamTag::Backbone];

    pub fn as_str(&self) -> &'static str {
        match self {
            ParamTag::Ain => "ain",
            ParamTag::Estimator => "estimator",
            ParamTag::LastConv => "last_conv",
            ParamTag::Backbone => "backbone",
        }
    }
}

impl std::str::FromStr for ParamTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ain" => Ok(ParamTag::Ain),
            "estimator" => Ok(ParamTag::Estimator),
            "last_conv" => Ok(ParamTag::LastConv),
            "backbone" => Ok(ParamTag::Backbone),
            other => Err(format!("unknown parameter tag: {other}")),
        }
    }
}

impl std::fmt::Display for ParamTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub tag: ParamTag,
    pub value: Tensor<T>,
    pub moment1: Vec<T>,
    pub moment2: Vec<T>,
    pub steps: u64,
}

#[derive(Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

/// Tape handles for every parameter of a store, in store order.
pub struct TapeBinding {
    ids: Vec<ValueId>,
}

impl TapeBinding {
    pub fn id(&self, idx: usize) -> ValueId {
        self.ids[idx]
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn insert(&mut self, name: &str, tag: ParamTag, value: Tensor<T>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let n = value.len();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            tag,
            value,
            moment1: vec![T::zero(); n],
            moment2: vec![T::zero(); n],
            steps: 0,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        let idx = self.index[name];
        &self.entries[idx].value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let idx = self.index[name];
        &mut self.entries[idx].value
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Register every parameter on a tape, returning the handles needed by
    /// a forward pass.
    pub fn bind(&self, tape: &mut Tape<T>) -> TapeBinding {
        let ids = self.entries.iter().map(|e| tape.input(e.value.clone())).collect();
        TapeBinding { ids }
    }

    /// Look up a bound parameter by name.
    pub fn bound_id(&self, binding: &TapeBinding, name: &str) -> ValueId {
        binding.ids[self.index[name]]
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.value.zero_grad();
        }
    }

    /// Pull the gradients a completed backward pass accumulated on the tape
    /// into each parameter's gradient buffer. Unreached parameters get
    /// zeros, which counts as populated.
    pub fn collect_grads(&mut self, tape: &Tape<T>, binding: &TapeBinding) {
        for (e, &id) in self.entries.iter_mut().zip(&binding.ids) {
            e.value.zero_grad();
            if let Some(g) = tape.grad(id) {
                let buf = e.value.grad.as_mut().unwrap();
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b = *b + v;
                }
            }
        }
    }

    /// SHA-256 over the raw little-endian bytes of every parameter carrying
    /// `tag`, in store order.
    pub fn tag_digest(&self, tag: ParamTag) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for e in self.entries.iter().filter(|e| e.tag == tag) {
            hasher.update(e.name.as_bytes());
            for v in &e.value.data {
                hasher.update(v.to_le_bytes_vec());
            }
        }
        hasher.finalize().into()
    }

    /// Names of parameters carrying `tag`.
    pub fn names_with_tag(&self, tag: ParamTag) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.tag == tag)
            .map(|e| e.name.as_str())
            .collect()
    }
}

/// Adam hyperparameters. Defaults are the usual (0.9, 0.999, 1e-8) moments
/// with a constant schedule.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }
}

/// One Adam update over the parameters whose tag is in `trainable`.
/// Gradients must have been populated by a backward pass; everything
/// outside the trainable set is left untouched, bit for bit.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    cfg: &AdamConfig,
    trainable: &[ParamTag],
) {
    let lr = T::from_f64(cfg.lr).unwrap();
    let b1 = T::from_f64(cfg.beta1).unwrap();
    let b2 = T::from_f64(cfg.beta2).unwrap();
    let eps = T::from_f64(cfg.eps).unwrap();
    let one = T::one();

    for e in store.entries_mut() {
        if !trainable.contains(&e.tag) {
            continue;
        }
        let grad = e
            .value
            .grad
            .as_ref()
            .expect("adam step before any backward pass")
            .clone();
        e.steps += 1;
        let t = e.steps as i32;
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for ((w, m), (v, &g)) in e
            .value
            .data
            .iter_mut()
            .zip(&mut e.moment1)
            .zip(e.moment2.iter_mut().zip(&grad))
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn store_with(names: &[(&str, ParamTag, f64)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (name, tag, v) in names {
            s.insert(name, *tag, Tensor::filled(Shape::new(1, 1, 2, 1), *v));
        }
        s
    }

    #[test]
    fn adam_converges_on_quadratic_bowl() {
        // minimize w^2; 200 steps at lr 0.1 should reach |w| < 1e-3
        let mut store = ParamStore::new();
        store.insert("w", ParamTag::Backbone, Tensor::scalar(1.5f64));
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        for _ in 0..200 {
            let w = store.get("w").item();
            store.get_mut("w").grad = Some(vec![2.0 * w]);
            adam_step(&mut store, &cfg, &[ParamTag::Backbone]);
        }
        assert!(
            store.get("w").item().abs() < 1e-3,
            "w did not converge: {}",
            store.get("w").item()
        );
    }

    #[test]
    fn empty_trainable_set_changes_nothing() {
        let mut store = store_with(&[("a", ParamTag::Ain, 0.5), ("b", ParamTag::Backbone, -0.25)]);
        for e in store.entries_mut() {
            e.value.grad = Some(vec![1.0; 2]);
        }
        let before: Vec<Vec<u8>> = store
            .entries()
            .iter()
            .flat_map(|e| e.value.data.iter().map(|v| v.to_le_bytes_vec()))
            .collect();
        adam_step(&mut store, &AdamConfig::default(), &[]);
        let after: Vec<Vec<u8>> = store
            .entries()
            .iter()
            .flat_map(|e| e.value.data.iter().map(|v| v.to_le_bytes_vec()))
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn partition_update_touches_only_trainable_tags() {
        let mut store = store_with(&[
            ("norm", ParamTag::Ain, 0.5),
            ("body", ParamTag::Backbone, -0.25),
        ]);
        let backbone_before = store.tag_digest(ParamTag::Backbone);
        let ain_before = store.tag_digest(ParamTag::Ain);
        for e in store.entries_mut() {
            e.value.grad = Some(vec![1.0; 2]);
        }
        adam_step(&mut store, &AdamConfig::default(), &[ParamTag::Ain]);
        assert_eq!(store.tag_digest(ParamTag::Backbone), backbone_before);
        assert_ne!(store.tag_digest(ParamTag::Ain), ain_before);
    }

    #[test]
    fn grads_collected_from_tape() {
        let mut store = ParamStore::new();
        store.insert("w", ParamTag::Backbone, Tensor::new(Shape::new(1, 1, 2, 1), vec![1.0f64, 2.0]));
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape);
        let w = store.bound_id(&binding, "w");
        let x = tape.input(Tensor::new(Shape::new(1, 1, 2, 1), vec![3.0, 4.0]));
        let prod = tape.mul(w, x);
        let loss = tape.sum(prod);
        tape.backward(loss).unwrap();
        store.collect_grads(&tape, &binding);
        assert_eq!(store.get("w").grad.as_deref().unwrap(), &[3.0, 4.0]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("w", ParamTag::Backbone, Tensor::scalar(0.0));
        s.insert("w", ParamTag::Backbone, Tensor::scalar(0.0));
    }
}

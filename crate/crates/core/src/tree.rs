//! Named parameter store with per-leaf freeze flags.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradients or deltas keyed by parameter path.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub value: Tensor,
    pub frozen: bool,
}

/// Which leaves stay trainable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    AllTrainable,
    /// Encoder base frozen; decoder and adapters train.
    FreezeEncoderBase,
    /// Only adapter leaves train.
    FreezeAllButAdapters,
}

/// `true` for leaves that belong to an inserted adapter.
pub fn is_adapter_path(path: &str) -> bool {
    path.split('/').any(|seg| seg.starts_with("adapter_"))
}

pub fn is_encoder_path(path: &str) -> bool {
    path.starts_with("encoder/")
}

/// Parameters keyed by slash-delimited path, iterated in lexicographic order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterTree {
    leaves: BTreeMap<String, Leaf>,
}

impl ParameterTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, value: Tensor, frozen: bool) -> Result<()> {
        let path = path.into();
        if self.leaves.contains_key(&path) {
            return Err(Error::Config(format!("duplicate parameter path `{path}`")));
        }
        self.leaves.insert(path, Leaf { value, frozen });
        Ok(())
    }

    pub fn remove(&mut self, path: &str) -> Option<Leaf> {
        self.leaves.remove(path)
    }

    /// Drops every leaf under `prefix`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        self.leaves.retain(|p, _| !p.starts_with(prefix));
    }

    pub fn get(&self, path: &str) -> Option<&Leaf> {
        self.leaves.get(path)
    }

    pub fn tensor(&self, path: &str) -> Result<&Tensor> {
        self.leaves
            .get(path)
            .map(|l| &l.value)
            .ok_or_else(|| Error::UnknownPath(path.to_string()))
    }

    pub fn tensor_mut(&mut self, path: &str) -> Result<&mut Tensor> {
        self.leaves
            .get_mut(path)
            .map(|l| &mut l.value)
            .ok_or_else(|| Error::UnknownPath(path.to_string()))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.leaves.contains_key(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Leaf)> {
        self.leaves.iter()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.leaves.keys()
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn has_adapters(&self) -> bool {
        self.leaves.keys().any(|p| is_adapter_path(p))
    }

    pub fn trainable_paths(&self) -> impl Iterator<Item = &String> {
        self.leaves.iter().filter(|(_, l)| !l.frozen).map(|(p, _)| p)
    }

    pub fn total_count(&self) -> usize {
        self.leaves.values().map(|l| l.value.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.leaves.values().filter(|l| !l.frozen).map(|l| l.value.numel()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.leaves.values().filter(|l| l.frozen).map(|l| l.value.numel()).sum()
    }

    pub fn set_frozen(&mut self, path: &str, frozen: bool) -> Result<()> {
        self.leaves
            .get_mut(path)
            .map(|l| l.frozen = frozen)
            .ok_or_else(|| Error::UnknownPath(path.to_string()))
    }

    pub fn set_freeze(&mut self, policy: FreezePolicy) -> Result<()> {
        if policy == FreezePolicy::FreezeAllButAdapters && !self.has_adapters() {
            return Err(Error::NoAdapters);
        }
        for (path, leaf) in &mut self.leaves {
            leaf.frozen = match policy {
                FreezePolicy::AllTrainable => false,
                FreezePolicy::FreezeEncoderBase => is_encoder_path(path) && !is_adapter_path(path),
                FreezePolicy::FreezeAllButAdapters => !is_adapter_path(path),
            };
        }
        Ok(())
    }

    /// Deep copy of the trainable leaves.
    pub fn trainable_values(&self) -> ParamMap {
        self.leaves
            .iter()
            .filter(|(_, l)| !l.frozen)
            .map(|(p, l)| (p.clone(), l.value.clone()))
            .collect()
    }

    /// Overwrites trainable leaves from `values`; keys must match exactly.
    pub fn load_trainable(&mut self, values: &ParamMap) -> Result<()> {
        check_keys(self, values)?;
        for (path, value) in values {
            let leaf = self.leaves.get_mut(path).expect("checked");
            if leaf.value.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_trainable",
                    left: leaf.value.shape().to_vec(),
                    right: value.shape().to_vec(),
                });
            }
            leaf.value = value.clone();
        }
        Ok(())
    }

    /// Records every leaf on `tape`; frozen leaves do not require grad.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let vars = self
            .leaves
            .iter()
            .map(|(p, l)| (p.clone(), tape.leaf(l.value.clone(), !l.frozen)))
            .collect();
        Bound { vars }
    }

    /// SHA-256 over paths, shapes, frozen flags and little-endian values.
    pub fn digest(&self) -> String {
        self.digest_filtered(|_| true)
    }

    pub fn trainable_digest(&self) -> String {
        self.digest_filtered(|l| !l.frozen)
    }

    fn digest_filtered(&self, keep: impl Fn(&Leaf) -> bool) -> String {
        let mut h = Sha256::new();
        for (path, leaf) in self.leaves.iter().filter(|(_, l)| keep(l)) {
            h.update((path.len() as u64).to_le_bytes());
            h.update(path.as_bytes());
            h.update((leaf.value.shape().len() as u64).to_le_bytes());
            for &d in leaf.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            h.update([leaf.frozen as u8]);
            for v in leaf.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Verifies that `values` names exactly the trainable leaves of `tree`.
pub fn check_keys(tree: &ParameterTree, values: &ParamMap) -> Result<()> {
    for path in values.keys() {
        match tree.get(path) {
            None => return Err(Error::UnknownPath(path.clone())),
            Some(l) if l.frozen => return Err(Error::FrozenGradient(path.clone())),
            _ => {}
        }
    }
    if let Some(missing) = tree.trainable_paths().find(|p| !values.contains_key(*p)) {
        return Err(Error::MissingGradient(missing.clone()));
    }
    Ok(())
}

/// Tape handles for a bound tree.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, path: &str) -> Result<Var> {
        self.vars.get(path).copied().ok_or_else(|| Error::UnknownPath(path.to_string()))
    }

    pub fn has(&self, path: &str) -> bool {
        self.vars.contains_key(path)
    }

    /// Gradients of the trainable leaves after `tape.backward`.
    pub fn trainable_grads(&self, tape: &Tape, tree: &ParameterTree) -> ParamMap {
        tree.trainable_paths()
            .map(|p| {
                let v = self.vars[p];
                let g = tape
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
                (p.clone(), g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterTree {
        let mut t = ParameterTree::new();
        t.insert("encoder/layer00/ffm1/w1", Tensor::zeros(&[2, 3]), false).unwrap();
        t.insert("encoder/layer00/adapter_end/w_down", Tensor::zeros(&[2, 1]), false).unwrap();
        t.insert("decoder/w", Tensor::zeros(&[2, 4]), false).unwrap();
        t
    }

    #[test]
    fn lexicographic_iteration() {
        let t = sample();
        let paths: Vec<_> = t.paths().cloned().collect();
        let mut sorted = paths.clone();
        sorted.sort();
        assert_eq!(paths, sorted);
        assert!(t.clone().insert("decoder/w", Tensor::zeros(&[1]), false).is_err());
    }

    #[test]
    fn freeze_policies() {
        let mut t = sample();
        t.set_freeze(FreezePolicy::AllTrainable).unwrap();
        assert_eq!(t.trainable_count(), t.total_count());
        t.set_freeze(FreezePolicy::FreezeEncoderBase).unwrap();
        assert_eq!(t.trainable_count(), 2 + 8);
        t.set_freeze(FreezePolicy::FreezeAllButAdapters).unwrap();
        assert_eq!(t.trainable_count(), 2);
        assert_eq!(t.trainable_count() + t.frozen_count(), t.total_count());
    }

    #[test]
    fn adapter_policy_requires_adapters() {
        let mut t = ParameterTree::new();
        t.insert("encoder/x", Tensor::zeros(&[1]), false).unwrap();
        assert!(matches!(t.set_freeze(FreezePolicy::FreezeAllButAdapters), Err(Error::NoAdapters)));
    }

    #[test]
    fn bound_frozen_leaves_do_not_require_grad() {
        let mut t = sample();
        t.set_freeze(FreezePolicy::FreezeAllButAdapters).unwrap();
        let mut tape = Tape::new();
        let b = t.bind(&mut tape);
        assert!(!tape.requires_grad(b.var("decoder/w").unwrap()));
        assert!(tape.requires_grad(b.var("encoder/layer00/adapter_end/w_down").unwrap()));
    }

    #[test]
    fn key_check_errors() {
        let mut t = sample();
        t.set_freeze(FreezePolicy::FreezeAllButAdapters).unwrap();
        let mut g = ParamMap::new();
        assert!(matches!(check_keys(&t, &g), Err(Error::MissingGradient(_))));
        g.insert("encoder/layer00/adapter_end/w_down".into(), Tensor::zeros(&[2, 1]));
        check_keys(&t, &g).unwrap();
        g.insert("decoder/w".into(), Tensor::zeros(&[2, 4]));
        assert!(matches!(check_keys(&t, &g), Err(Error::FrozenGradient(_))));
    }
}

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::autodiff::tape::{Gradients, Tape, Var};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered, uniquely named tensors. Entries with `requires_grad == false`
/// (for example batchnorm running statistics) are never touched by an optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

/// Tape handles for every entry of a [`ParamSet`].
#[derive(Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    /// Bindings from explicit `(name, var)` pairs, e.g. the leaves handed out by a gradient check.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bindings { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Records every entry on `tape`; trainable entries become gradient leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone())))
            .collect();
        Bindings { vars }
    }

    /// Adds the gradients of a backward pass into each trainable entry.
    pub fn accumulate(&mut self, grads: &Gradients, bindings: &Bindings) -> Result<()> {
        for (name, t) in &mut self.entries {
            if !t.requires_grad() {
                continue;
            }
            if let Some(g) = grads.get(bindings.get(name)?) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    /// Sets `requires_grad` on every entry for which `select` returns a value.
    pub fn set_trainable(&mut self, select: impl Fn(&str) -> Option<bool>) {
        for (n, t) in &mut self.entries {
            if let Some(flag) = select(n) {
                t.set_requires_grad(flag);
            }
        }
    }

    /// SHA-256 over names, shapes and values of the entries accepted by `filter`.
    pub fn digest_where(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.entries.iter().filter(|(n, _)| filter(n)) {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn digest(&self) -> String {
        self.digest_where(|_| true)
    }

    /// Copy with all gradient buffers dropped.
    pub fn without_grads(&self) -> ParamSet {
        let mut out = self.clone();
        out.zero_grad();
        out
    }
}

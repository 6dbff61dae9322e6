//! Named parameter storage shared by models, the optimizer, and checkpoints.

use indexmap::IndexMap;

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One named tensor with a freeze flag. Frozen parameters never receive a
/// gradient buffer and are never touched by the optimizer.
#[derive(Debug, Clone)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Ordered parameter table. Insertion order is the canonical iteration order
/// everywhere (optimizer, checkpoints, freeze reports), which keeps runs
/// deterministic.
pub struct ParamStore<T: Scalar> {
    entries: Vec<Parameter<T>>,
    index: IndexMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: IndexMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = self.entries.len();
        self.entries.push(Parameter {
            name: name.to_string(),
            tensor,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<(ParamId, &Parameter<T>)> {
        self.index
            .get(name)
            .map(|&i| (ParamId(i), &self.entries[i]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| ParamId(i))
            .collect()
    }

    /// Total element count over trainable parameters only.
    pub fn count_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Mark every parameter whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in &mut self.entries {
            if p.name.starts_with(prefix) {
                p.trainable = false;
            }
        }
    }
}

/// Per-forward-pass binding of parameters onto a tape. Each parameter is
/// inserted once and reused, so gradients from every use site accumulate at
/// a single leaf.
pub struct TapeBinding {
    vars: Vec<Option<Var>>,
    force_frozen: bool,
}

impl TapeBinding {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        TapeBinding {
            vars: vec![None; store.len()],
            force_frozen: false,
        }
    }

    /// Inference binding: every parameter enters the tape without gradient
    /// tracking regardless of its trainable flag.
    pub fn frozen<T: Scalar>(store: &ParamStore<T>) -> Self {
        TapeBinding {
            vars: vec![None; store.len()],
            force_frozen: true,
        }
    }

    pub fn var<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        id: ParamId,
    ) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = store.get(id);
        let v = tape.leaf(p.tensor.clone(), p.trainable && !self.force_frozen);
        self.vars[id.0] = Some(v);
        v
    }

    /// Read back the gradient for a bound parameter after `backward`.
    pub fn grad<T: Scalar>(&self, tape: &Tape<T>, id: ParamId) -> Option<Tensor<T>> {
        self.vars[id.0].and_then(|v| tape.grad(v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[2]), true).unwrap();
        assert!(store.add("w", Tensor::zeros(&[2]), true).is_err());
    }

    #[test]
    fn count_trainable_sums_elements() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(&[3, 4]), true).unwrap();
        store.add("b", Tensor::zeros(&[10]), false).unwrap();
        assert_eq!(store.count_trainable(), 12);
        store.freeze_prefix("a");
        assert_eq!(store.count_trainable(), 0);
    }

    #[test]
    fn binding_reuses_one_leaf_and_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let w = store
            .add("w", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        let mut tape = Tape::new();
        let mut bind = TapeBinding::new(&store);
        let v1 = bind.var(&mut tape, &store, w);
        let v2 = bind.var(&mut tape, &store, w);
        assert_eq!(v1, v2);
        let s1 = tape.sum_all(v1);
        let s2 = tape.sum_all(v2);
        let loss = tape.mean_of(&[s1, s2]).unwrap();
        tape.backward(loss).unwrap();
        // d/dw of mean(sum w, sum w) = 1 for each element
        assert_eq!(bind.grad(&tape, w).unwrap().data(), &[1.0, 1.0]);
    }
}

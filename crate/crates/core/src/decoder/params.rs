//! Named trainable parameter storage and tape binding.

use crate::autograd::{Arr, Grads, Tape, Var};
use crate::util::hash_named_buffers;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat, insertion-ordered map of named parameter arrays. This is the
/// complete set of trainable state; the backbone never appears here.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>().max(1),
            data.len(),
            "param {name}: shape/data mismatch"
        );
        assert!(!self.index.contains_key(&name), "duplicate param {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, shape: shape.to_vec(), data });
    }

    pub fn idx(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown param {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn fingerprint(&self) -> String {
        hash_named_buffers(self.entries.iter().map(|e| (e.name.as_str(), e.data.as_slice())))
    }

    pub fn from_entries(entries: Vec<ParamEntry>) -> Self {
        let mut store = Self::new();
        for e in entries {
            store.insert(e.name, &e.shape.clone(), e.data);
        }
        store
    }
}

/// Parameters bound onto one tape, either trainable (collecting
/// gradients) or frozen snapshots.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn bind(store: &ParamStore, tape: &Tape, trainable: bool) -> Self {
        let vars = store
            .entries()
            .iter()
            .map(|e| {
                let arr = Arr::from_vec(&e.shape, e.data.clone());
                if trainable {
                    tape.param(arr)
                } else {
                    tape.input(arr)
                }
            })
            .collect();
        Self { vars }
    }

    pub fn var(&self, store: &ParamStore, name: &str) -> Var {
        self.vars[store.idx(name)]
    }

    /// Accumulates per-parameter gradients from a finished backward pass
    /// into `acc` (parallel to the store's entries).
    pub fn accumulate_grads(&self, store: &ParamStore, grads: &Grads, acc: &mut [Vec<f64>]) {
        assert_eq!(acc.len(), store.len());
        for (i, var) in self.vars.iter().enumerate() {
            if let Some(g) = grads.get(*var) {
                let slot = &mut acc[i];
                if slot.is_empty() {
                    *slot = g.to_vec();
                } else {
                    for (a, &gv) in slot.iter_mut().zip(g) {
                        *a += gv;
                    }
                }
            }
        }
    }
}

/// Allocates an empty gradient accumulator parallel to the store.
pub fn empty_grad_acc(store: &ParamStore) -> Vec<Vec<f64>> {
    vec![Vec::new(); store.len()]
}

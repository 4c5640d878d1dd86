use std::collections::HashMap;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{DiffError, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub trainable: bool,
}

/// Ordered, named collection of parameter tensors.
///
/// Insertion order is the canonical order for checkpoints, hashing and
/// gradient buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    entries: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    /// Adds a trainable parameter. Re-inserting a name is an error.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize, DiffError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        let idx = self.entries.len();
        self.index.insert(name.clone(), idx);
        self.entries.push(Param { name, value: Arc::new(value), trainable: true });
        Ok(idx)
    }

    /// Appends every entry of `other`, keeping its trainable flags.
    pub fn extend(&mut self, other: &ParamSet<T>) -> Result<(), DiffError> {
        for p in &other.entries {
            let idx = self.insert(p.name.clone(), Tensor::zeros(vec![0]))?;
            self.entries[idx].value = Arc::clone(&p.value);
            self.entries[idx].trainable = p.trainable;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| self.entries[i].value.as_ref())
    }

    pub fn value_arc(&self, idx: usize) -> &Arc<Tensor<T>> {
        &self.entries[idx].value
    }

    pub fn entries(&self) -> &[Param<T>] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &Param<T> {
        &self.entries[idx]
    }

    /// Mutable access to a tensor's values (copy-on-write if shared).
    pub fn data_mut(&mut self, idx: usize) -> &mut [T] {
        Arc::make_mut(&mut self.entries[idx].value).data_mut()
    }

    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<(), DiffError> {
        let idx = self.index_of(name).ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        let old = self.entries[idx].value.shape();
        if old != value.shape() {
            return Err(DiffError::Shape {
                op: "set",
                detail: format!("{name}: expected {:?}, got {:?}", old, value.shape()),
            });
        }
        self.entries[idx].value = Arc::new(value);
        Ok(())
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.entries {
            p.trainable = trainable;
        }
    }

    pub fn set_entry_trainable(&mut self, idx: usize, trainable: bool) {
        self.entries[idx].trainable = trainable;
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.entries.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.all_finite())
    }

    /// SHA-256 over names, shapes and little-endian values, in order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.entries {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for p in &self.entries {
            let idx = out.insert(p.name.clone(), p.value.cast()).expect("names unique");
            out.entries[idx].trainable = p.trainable;
        }
        out
    }

    /// Subset containing only the named entries, in this set's order.
    pub fn subset(&self, keep: impl Fn(&Param<T>) -> bool) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for p in self.entries.iter().filter(|p| keep(p)) {
            let idx = out.insert(p.name.clone(), Tensor::zeros(vec![0])).expect("names unique");
            out.entries[idx].value = Arc::clone(&p.value);
            out.entries[idx].trainable = p.trainable;
        }
        out
    }
}

/// Gradient buffers aligned with a [`ParamSet`]'s entry order.
///
/// `backward` accumulates into these; call [`Gradients::zero`] to reset.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    bufs: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            bufs: params
                .entries()
                .iter()
                .map(|p| p.trainable.then(|| vec![T::zero(); p.value.numel()]))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for b in self.bufs.iter_mut().flatten() {
            b.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn get(&self, idx: usize) -> Option<&[T]> {
        self.bufs.get(idx).and_then(|b| b.as_deref())
    }

    pub(crate) fn buf_mut(&mut self, idx: usize) -> Option<&mut Vec<T>> {
        self.bufs.get_mut(idx).and_then(|b| b.as_mut())
    }

    pub fn len(&self) -> usize {
        self.bufs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bufs.is_empty()
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            if let (Some(a), Some(b)) = (a.as_mut(), b.as_ref()) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += *y;
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for b in self.bufs.iter_mut().flatten() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

//! Named flat parameter storage with a stable global ordering, plus the
//! binder that exposes slots as tape leaves.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::scalar::Real;
use super::tape::{NodeId, Tape};

/// Named slots over one flat f64 vector. Slot order is insertion order and
/// is part of the store's identity: gradient vectors, optimizer moments, and
/// checkpoints all share it.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    spans: Vec<(usize, usize)>,
    index: HashMap<String, usize>,
    data: Vec<f64>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter slot {name}")));
        }
        let offset = self.data.len();
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.spans.push((offset, values.len()));
        self.data.extend_from_slice(&values);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn slot_names(&self) -> &[String] {
        &self.names
    }

    pub fn span(&self, name: &str) -> Option<(usize, usize)> {
        self.index.get(name).map(|&i| self.spans[i])
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.span(name).map(|(o, l)| &self.data[o..o + l])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let (o, l) = self.span(name)?;
        Some(&mut self.data[o..o + l])
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "flat vector length {} does not match store dimension {}",
                values.len(),
                self.data.len()
            )));
        }
        self.data.copy_from_slice(values);
        Ok(())
    }

    /// Iterate (name, offset, len) in the stable global order.
    pub fn slots(&self) -> impl Iterator<Item = (&str, usize, usize)> {
        self.names
            .iter()
            .zip(&self.spans)
            .map(|(n, &(o, l))| (n.as_str(), o, l))
    }
}

/// Exposes store slots as tape leaves, optionally seeding a tangent
/// direction (used by the exact Hessian-vector product).
pub struct Binder<'a, S: Real> {
    store: &'a ParameterStore,
    tangent: Option<&'a [f64]>,
    bound: HashMap<usize, NodeId>,
    _marker: std::marker::PhantomData<S>,
}

impl<'a, S: Real> Binder<'a, S> {
    pub fn new(store: &'a ParameterStore, tangent: Option<&'a [f64]>) -> Self {
        if let Some(t) = tangent {
            assert_eq!(t.len(), store.dim(), "tangent length mismatch");
        }
        Binder {
            store,
            tangent,
            bound: HashMap::new(),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn store(&self) -> &ParameterStore {
        self.store
    }

    /// Bind a named slot as a rows x cols leaf. Binding the same slot twice
    /// returns the same node.
    pub fn param(
        &mut self,
        tape: &mut Tape<S>,
        name: &str,
        rows: usize,
        cols: usize,
    ) -> Result<NodeId> {
        let (offset, len) = self
            .store
            .span(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter slot {name}")))?;
        if len != rows * cols {
            return Err(Error::Dimension(format!(
                "slot {name} has {len} values, requested {rows}x{cols}"
            )));
        }
        if let Some(&id) = self.bound.get(&offset) {
            return Ok(id);
        }
        let values: Vec<S> = (0..len)
            .map(|k| {
                let v = self.store.flat()[offset + k];
                let t = self.tangent.map_or(0.0, |tan| tan[offset + k]);
                S::with_tangent(v, t)
            })
            .collect();
        let id = tape.leaf(rows, cols, values, offset);
        self.bound.insert(offset, id);
        Ok(id)
    }
}

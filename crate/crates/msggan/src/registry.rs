//! Name-keyed registries of interchangeable strategies.
//!
//! Combine functions, losses, feature extractors, datasets, and devices are
//! each a family of variants behind one trait; config strings select a
//! variant at runtime. Registries are built once at startup and read-only
//! afterwards.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

pub struct Registry<V: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<String, Arc<V>>,
}

impl<V: ?Sized> Registry<V> {
    /// `kind` names the family in error messages ("combine", "loss", ...).
    pub fn new(kind: &'static str) -> Self {
        Registry { kind, entries: BTreeMap::new() }
    }

    pub fn register(&mut self, name: &str, value: Arc<V>) {
        let prev = self.entries.insert(name.to_string(), value);
        assert!(prev.is_none(), "duplicate {} registration: {}", self.kind, name);
    }

    pub fn get(&self, name: &str) -> Result<Arc<V>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::InvalidConfig(format!(
                "unknown {} '{}' (available: {})",
                self.kind,
                name,
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

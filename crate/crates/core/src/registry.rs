//! Name -> constructor tables for runtime-selectable strategies.

use std::collections::BTreeMap;

use crate::error::{Result, UlcError};

pub type Factory<T> = fn() -> Box<T>;

/// Strategies of one kind, keyed by a stable name used on the command line.
pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Factory<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Registry {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Replaces any previous entry with the same name.
    pub fn register(&mut self, name: &'static str, factory: Factory<T>) -> &mut Self {
        self.entries.insert(name, factory);
        self
    }

    pub fn create(&self, name: &str) -> Result<Box<T>> {
        self.entries
            .get(name)
            .map(|f| f())
            .ok_or_else(|| UlcError::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

//! Name-keyed registries of strategy objects selected at runtime.

use std::sync::Arc;

use crate::error::{Error, Result};

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: Vec<(String, Arc<T>)>,
}

impl<T: ?Sized> Clone for Registry<T> {
    fn clone(&self) -> Self {
        Self {
            kind: self.kind,
            entries: self.entries.clone(),
        }
    }
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self { kind, entries: Vec::new() }
    }

    /// Adds `item` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: impl Into<String>, item: Arc<T>) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(e) => e.1 = item,
            None => self.entries.push((name, item)),
        }
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::Config(format!("unknown {} `{name}` (known: {})", self.kind, self.names().join(", "))))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookup_and_replace() {
        let mut r: Registry<str> = Registry::new("greeting");
        r.register("a", Arc::from("one"));
        r.register("b", Arc::from("two"));
        r.register("a", Arc::from("three"));
        assert_eq!(&*r.get("a").unwrap(), "three");
        assert_eq!(r.names(), vec!["a", "b"]);
        let err = r.get("zzz").unwrap_err().to_string();
        assert!(err.contains("zzz") && err.contains("a, b"), "{err}");
    }
}

use indexmap::IndexMap;

use super::array::{DenseArray, Real};
use crate::error::{Error, Result};

/// A named parameter with its freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: DenseArray<T>,
    pub frozen: bool,
}

/// Ordered name → parameter map. Iteration order is insertion order, which
/// fixes reduction and serialization order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray<T>, frozen: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Param { value, frozen });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DenseArray<T>> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn require(&self, name: &str) -> Result<&DenseArray<T>> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DenseArray<T>> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    /// Replaces a value in place, keeping shape.
    pub fn set(&mut self, name: &str, value: DenseArray<T>) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "set",
                detail: format!("`{name}`: {:?} vs {:?}", p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> Option<bool> {
        self.entries.get(name).map(|p| p.frozen)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|p| p.frozen = frozen)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            frozen: p.frozen,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Appends every entry of `other`; names must not collide.
    pub fn extend(&mut self, other: ParamStore<T>) -> Result<()> {
        for (k, p) in other.entries {
            self.insert(k, p.value, p.frozen)?;
        }
        Ok(())
    }
}

//! Dense identifier newtypes and raw-id vocabularies.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! dense_id {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl From<usize> for $name {
            fn from(i: usize) -> Self {
                Self(u32::try_from(i).expect("identifier exceeds u32"))
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                self.0.fmt(f)
            }
        }
    };
}

dense_id!(
    /// Knowledge-graph entity (items and attribute entities alike).
    EntityId
);
dense_id!(RelationId);
dense_id!(
    /// Recommender item. Items with a KG counterpart map to one [`EntityId`].
    ItemId
);
dense_id!(UserId);

/// Assigns contiguous ids to raw string identifiers in order of first appearance.
#[derive(Clone, Debug, Default)]
pub struct Vocab {
    raw: Vec<String>,
    lookup: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn intern(&mut self, raw: &str) -> u32 {
        if let Some(&id) = self.lookup.get(raw) {
            return id;
        }
        let id = u32::try_from(self.raw.len()).expect("vocabulary exceeds u32");
        self.raw.push(raw.to_string());
        self.lookup.insert(raw.to_string(), id);
        id
    }

    pub fn get(&self, raw: &str) -> Option<u32> {
        self.lookup.get(raw).copied()
    }

    pub fn raw(&self, id: u32) -> Option<&str> {
        self.raw.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_is_contiguous_in_first_seen_order() {
        let mut v = Vocab::new();
        assert_eq!(v.intern("99"), 0);
        assert_eq!(v.intern("apple"), 1);
        assert_eq!(v.intern("99"), 0);
        assert_eq!(v.raw(1), Some("apple"));
        assert_eq!(v.len(), 2);
    }
}

use std::collections::{BTreeMap, HashMap};

use pbft_core::wire::NodeId;

/// Restores per-origin stamp order after a data-parallel stage.
///
/// Stamps start at 0 for every origin and must be dense: an item is held
/// until every lower stamp from the same origin has been released.
#[derive(Debug)]
pub struct Reorder<T> {
    next: HashMap<NodeId, u64>,
    held: HashMap<NodeId, BTreeMap<u64, T>>,
}

impl<T> Default for Reorder<T> {
    fn default() -> Self {
        Reorder {
            next: HashMap::new(),
            held: HashMap::new(),
        }
    }
}

impl<T> Reorder<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the items now releasable, in stamp order.
    pub fn push(&mut self, origin: NodeId, stamp: u64, item: T) -> Vec<T> {
        let next = self.next.entry(origin).or_insert(0);
        if stamp < *next {
            return Vec::new();
        }
        if stamp > *next {
            self.held.entry(origin).or_default().insert(stamp, item);
            return Vec::new();
        }
        let mut out = vec![item];
        *next += 1;
        if let Some(h) = self.held.get_mut(&origin) {
            while let Some(i) = h.remove(next) {
                out.push(i);
                *next += 1;
            }
        }
        out
    }

    pub fn held(&self) -> usize {
        self.held.values().map(BTreeMap::len).sum()
    }
}

//! Fixed-capacity replay memory, balanced across the classes seen so far.
//!
//! The total budget K is split into per-class quotas of K/C, with the K mod C
//! leftover slots going to the lowest class ids. Each class runs its own
//! reservoir, so every stored sample of a class is a uniform draw from that
//! class's history. When a new class registers, quotas shrink and each
//! overfull class evicts uniformly at random down to its new quota.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A stored sample: the raw input, its label, and the feature vector the
/// extractor produced at insertion time. The frozen feature is what drift
/// correction later compares against.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub x: Vec<f64>,
    pub y: usize,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
struct ClassStore {
    entries: Vec<MemoryEntry>,
    /// Lifetime insertion attempts for this class, including dropped ones.
    seen: u64,
}

#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    classes: BTreeMap<usize, ClassStore>,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("replay capacity must be positive".into()));
        }
        Ok(ReplayMemory {
            capacity,
            classes: BTreeMap::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.classes.values().map(|c| c.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.keys().copied()
    }

    /// Slots currently granted to `class`: K/C plus one leftover slot for the
    /// K mod C lowest registered class ids.
    pub fn quota(&self, class: usize) -> usize {
        let c = self.classes.len();
        if c == 0 || !self.classes.contains_key(&class) {
            return 0;
        }
        let rank = self.classes.keys().position(|&k| k == class).expect("registered");
        self.capacity / c + usize::from(rank < self.capacity % c)
    }

    pub fn class_entries(&self, class: usize) -> &[MemoryEntry] {
        self.classes
            .get(&class)
            .map(|c| c.entries.as_slice())
            .unwrap_or(&[])
    }

    /// Reservoir insert. First registration of a class rebalances quotas and
    /// evicts overflow from the other classes before the insert proceeds.
    pub fn insert(&mut self, entry: MemoryEntry, rng: &mut ChaCha8Rng) {
        let class = entry.y;
        if !self.classes.contains_key(&class) {
            self.classes.insert(
                class,
                ClassStore {
                    entries: Vec::new(),
                    seen: 0,
                },
            );
            self.rebalance(rng);
        }
        let quota = self.quota(class);
        let store = self.classes.get_mut(&class).expect("registered");
        store.seen += 1;
        if store.entries.len() < quota {
            store.entries.push(entry);
        } else {
            // classic reservoir step: keep with probability quota/seen
            let j = rng.gen_range(0..store.seen) as usize;
            if j < quota {
                store.entries[j] = entry;
            }
        }
    }

    fn rebalance(&mut self, rng: &mut ChaCha8Rng) {
        let ids: Vec<usize> = self.classes.keys().copied().collect();
        for id in ids {
            let quota = self.quota(id);
            let store = self.classes.get_mut(&id).expect("registered");
            while store.entries.len() > quota {
                let victim = rng.gen_range(0..store.entries.len());
                store.entries.swap_remove(victim);
            }
        }
    }

    /// Uniform sample of `k` stored entries without replacement, pooled over
    /// all classes. Returns everything (class-ascending, insertion order) when
    /// fewer than `k` are stored.
    pub fn retrieve(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<MemoryEntry> {
        let pool: Vec<&MemoryEntry> = self
            .classes
            .values()
            .flat_map(|c| c.entries.iter())
            .collect();
        if pool.len() <= k {
            return pool.into_iter().cloned().collect();
        }
        sample_indices(pool.len(), k, rng)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect()
    }

    /// Uniform subset of `k` registered class ids, returned ascending.
    /// Returns all registered classes when fewer than `k` exist.
    pub fn class_subset(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let ids: Vec<usize> = self.classes.keys().copied().collect();
        if ids.len() <= k {
            return ids;
        }
        let mut chosen: Vec<usize> = sample_indices(ids.len(), k, rng)
            .into_iter()
            .map(|i| ids[i])
            .collect();
        chosen.sort_unstable();
        chosen
    }

    /// Checkpoint view: (class id, entries, lifetime seen count) per class.
    pub fn snapshot(&self) -> Vec<(usize, Vec<MemoryEntry>, u64)> {
        self.classes
            .iter()
            .map(|(&id, s)| (id, s.entries.clone(), s.seen))
            .collect()
    }

    /// Rebuilds a memory from checkpoint parts, re-checking every invariant.
    pub fn from_parts(capacity: usize, parts: Vec<(usize, Vec<MemoryEntry>, u64)>) -> Result<Self> {
        let mut mem = ReplayMemory::new(capacity)?;
        for (id, entries, seen) in parts {
            if mem.classes.contains_key(&id) {
                return Err(Error::Checkpoint(format!("class {id} appears twice")));
            }
            if entries.iter().any(|e| e.y != id) {
                return Err(Error::Checkpoint(format!(
                    "class {id} store holds a foreign label"
                )));
            }
            if (seen as usize) < entries.len() {
                return Err(Error::Checkpoint(format!(
                    "class {id} stores more entries than it has seen"
                )));
            }
            mem.classes.insert(id, ClassStore { entries, seen });
        }
        for (&id, store) in &mem.classes {
            if store.entries.len() > mem.quota(id) {
                return Err(Error::Checkpoint(format!(
                    "class {id} holds {} entries over its quota {}",
                    store.entries.len(),
                    mem.quota(id)
                )));
            }
        }
        Ok(mem)
    }
}

/// First `k` positions of a partial Fisher-Yates shuffle of 0..n.
fn sample_indices(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(k <= n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

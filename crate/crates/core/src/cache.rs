//! Set-associative metadata cache and the cache-tree over its dirty lines.
//!
//! The cache has two partitions (counter blocks and SIT nodes) sharing one
//! set numbering: counter sets first. The cache-tree hashes, per set, the MAC
//! fields of the dirty lines ordered by descending address, then folds the
//! set digests into an 8-ary merkle tree whose root is an on-chip register.
//! Cache-tree nodes are modeled on chip and never occupy cache ways.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::{MacField, NodeContent, Prf, DOMAIN_SET_DIGEST, DOMAIN_TREE_NODE};
use crate::error::{Error, Result};
use crate::geometry::{Geometry, LineId, LineKind, LINE_BYTES, TREE_ARITY};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub counter_cache_bytes: u64,
    pub sit_cache_bytes: u64,
    pub ways: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        CacheConfig { counter_cache_bytes: 256 << 10, sit_cache_bytes: 256 << 10, ways: 8 }
    }
}

impl CacheConfig {
    pub fn symmetric(bytes_each: u64) -> Self {
        CacheConfig { counter_cache_bytes: bytes_each, sit_cache_bytes: bytes_each, ways: 8 }
    }

    pub fn total_lines(&self) -> u64 {
        (self.counter_cache_bytes + self.sit_cache_bytes) / LINE_BYTES
    }
}

/// Maps metadata lines to cache sets. Shared by the live cache and by
/// recovery, which has to rebuild the cache-tree without the cache.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheLayout {
    geometry: Geometry,
    counter_sets: usize,
    sit_sets: usize,
    ways: usize,
}

impl CacheLayout {
    pub fn new(geometry: Geometry, cfg: &CacheConfig) -> Result<Self> {
        if cfg.ways == 0 {
            return Err(Error::Config("associativity must be at least 1".into()));
        }
        let sets = |bytes: u64| -> Result<usize> {
            let lines = bytes / LINE_BYTES;
            if bytes % LINE_BYTES != 0 || lines == 0 || lines % cfg.ways as u64 != 0 {
                return Err(Error::Config(format!(
                    "cache partition of {bytes} bytes is not a whole number of {}-way sets",
                    cfg.ways
                )));
            }
            Ok((lines / cfg.ways as u64) as usize)
        };
        Ok(CacheLayout {
            counter_sets: sets(cfg.counter_cache_bytes)?,
            sit_sets: sets(cfg.sit_cache_bytes)?,
            ways: cfg.ways,
            geometry,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn sets(&self) -> usize {
        self.counter_sets + self.sit_sets
    }

    pub fn counter_sets(&self) -> usize {
        self.counter_sets
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    pub fn capacity_lines(&self) -> usize {
        self.sets() * self.ways
    }

    pub fn set_index(&self, id: LineId) -> Result<usize> {
        match id.kind {
            LineKind::CounterBlock => Ok((id.index % self.counter_sets as u64) as usize),
            LineKind::SitNode => {
                let within = self.geometry.meta_ordinal(id)? - self.geometry.counter_blocks();
                Ok(self.counter_sets + (within % self.sit_sets as u64) as usize)
            }
            _ => Err(Error::NotMetadata(id)),
        }
    }

    /// Cache-tree root over an arbitrary collection of dirty lines. Pure in
    /// the multiset of `(set, address, MAC)`; input order is irrelevant.
    pub fn rebuild_cache_tree(&self, prf: &Prf, dirty: &[(LineId, MacField)]) -> Result<u64> {
        let mut per_set: BTreeMap<usize, Vec<(u64, MacField)>> = BTreeMap::new();
        for &(id, mac) in dirty {
            let ord = self.geometry.meta_ordinal(id)?;
            per_set.entry(self.set_index(id)?).or_default().push((ord, mac));
        }
        let mut digests = vec![0u64; self.sets()];
        for (set, mut lines) in per_set {
            lines.sort_by(|a, b| b.0.cmp(&a.0));
            let macs: Vec<MacField> = lines.into_iter().map(|(_, m)| m).collect();
            digests[set] = set_digest(prf, &macs);
        }
        let mut level = digests;
        let mut depth = 0u64;
        loop {
            let next: Vec<u64> = level
                .chunks(TREE_ARITY)
                .enumerate()
                .map(|(i, kids)| node_digest(prf, depth, i as u64, kids))
                .collect();
            depth += 1;
            if next.len() == 1 {
                return Ok(next[0]);
            }
            level = next;
        }
    }
}

/// Digest of one set; zero when the set holds no dirty line.
pub fn set_digest(prf: &Prf, macs_by_descending_address: &[MacField]) -> u64 {
    if macs_by_descending_address.is_empty() {
        return 0;
    }
    let words: Vec<u64> = macs_by_descending_address.iter().map(|m| m.pack()).collect();
    prf.hash_words(DOMAIN_SET_DIGEST, &words)
}

fn node_digest(prf: &Prf, depth: u64, index: u64, children: &[u64]) -> u64 {
    let mut words = [0u64; 2 + TREE_ARITY];
    words[0] = depth;
    words[1] = index;
    words[2..2 + children.len()].copy_from_slice(children);
    prf.hash_words(DOMAIN_TREE_NODE, &words)
}

/// Incrementally maintained cache-tree.
#[derive(Clone, Debug)]
pub struct CacheTree {
    /// `levels[0]` holds the set digests; the last level has one node.
    levels: Vec<Vec<u64>>,
}

impl CacheTree {
    pub fn new(prf: &Prf, sets: usize) -> Self {
        let mut levels = vec![vec![0u64; sets]];
        loop {
            let depth = levels.len() as u64 - 1;
            let below = levels.last().unwrap();
            let next: Vec<u64> = below
                .chunks(TREE_ARITY)
                .enumerate()
                .map(|(i, kids)| node_digest(prf, depth, i as u64, kids))
                .collect();
            let done = next.len() == 1;
            levels.push(next);
            if done {
                break;
            }
        }
        CacheTree { levels }
    }

    pub fn root(&self) -> u64 {
        self.levels.last().unwrap()[0]
    }

    pub fn set_digests(&self) -> &[u64] {
        &self.levels[0]
    }

    pub fn update(&mut self, prf: &Prf, set: usize, digest: u64) {
        if self.levels[0][set] == digest {
            return;
        }
        self.levels[0][set] = digest;
        let mut idx = set;
        for depth in 0..self.levels.len() - 1 {
            let parent = idx / TREE_ARITY;
            let lo = parent * TREE_ARITY;
            let hi = (lo + TREE_ARITY).min(self.levels[depth].len());
            let d = node_digest(prf, depth as u64, parent as u64, &self.levels[depth][lo..hi]);
            self.levels[depth + 1][parent] = d;
            idx = parent;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheLine {
    pub id: LineId,
    pub content: NodeContent,
    /// Logical dirty bit: set on modification, cleared only by an eviction
    /// that binds the line to a fresh parent counter.
    pub dirty: bool,
    /// NVM copy equals the cached content.
    pub fresh: bool,
    /// The parent's counter for this line; constant while the line is cached.
    pub parent_counter: u64,
    /// Per-slot increments since this line was last written to NVM.
    pub since_write: [u16; TREE_ARITY],
    lru: u64,
}

impl CacheLine {
    pub fn filled(id: LineId, content: NodeContent, parent_counter: u64) -> Self {
        CacheLine {
            id,
            content,
            dirty: false,
            fresh: true,
            parent_counter,
            since_write: [0; TREE_ARITY],
            lru: 0,
        }
    }

    pub fn lru_stamp(&self) -> u64 {
        self.lru
    }
}

#[derive(Clone, Debug)]
pub struct MetadataCache {
    layout: CacheLayout,
    prf: Prf,
    sets: Vec<Vec<CacheLine>>,
    clock: u64,
    tree: CacheTree,
    insertions: Vec<u64>,
    evictions: Vec<u64>,
    set_dirty: Vec<u32>,
    /// Dirty lines in the counter and SIT partitions.
    dirty_by_partition: [usize; 2],
}

impl MetadataCache {
    pub fn new(layout: CacheLayout, prf: Prf) -> Self {
        let n = layout.sets();
        let ways = layout.ways();
        MetadataCache {
            tree: CacheTree::new(&prf, n),
            sets: (0..n).map(|_| Vec::with_capacity(ways)).collect(),
            insertions: vec![0; n],
            evictions: vec![0; n],
            set_dirty: vec![0; n],
            dirty_by_partition: [0; 2],
            clock: 0,
            layout,
            prf,
        }
    }

    pub fn layout(&self) -> &CacheLayout {
        &self.layout
    }

    fn locate(&self, id: LineId) -> Option<(usize, usize)> {
        let set = self.layout.set_index(id).ok()?;
        self.sets[set].iter().position(|l| l.id == id).map(|w| (set, w))
    }

    pub fn contains(&self, id: LineId) -> bool {
        self.locate(id).is_some()
    }

    pub fn get(&self, id: LineId) -> Option<&CacheLine> {
        self.locate(id).map(|(s, w)| &self.sets[s][w])
    }

    pub fn get_mut(&mut self, id: LineId) -> Option<&mut CacheLine> {
        self.locate(id).map(|(s, w)| &mut self.sets[s][w])
    }

    /// Marks `id` most recently used. Returns false on a miss.
    pub fn touch(&mut self, id: LineId) -> bool {
        match self.locate(id) {
            Some((s, w)) => {
                self.clock += 1;
                self.sets[s][w].lru = self.clock;
                true
            }
            None => false,
        }
    }

    pub fn is_full(&self, set: usize) -> bool {
        self.sets[set].len() >= self.layout.ways()
    }

    /// Least recently used line of `set` that is not pinned.
    pub fn victim(&self, set: usize, pinned: &[LineId]) -> Option<LineId> {
        self.sets[set]
            .iter()
            .filter(|l| !pinned.contains(&l.id))
            .min_by_key(|l| l.lru)
            .map(|l| l.id)
    }

    pub fn insert(&mut self, mut line: CacheLine) -> Result<()> {
        let set = self.layout.set_index(line.id)?;
        assert!(!self.is_full(set), "insert into a full set");
        debug_assert!(!self.contains(line.id));
        self.clock += 1;
        line.lru = self.clock;
        let dirty = line.dirty;
        self.sets[set].push(line);
        self.insertions[set] += 1;
        if dirty {
            self.refresh_set(set);
        }
        Ok(())
    }

    pub fn remove(&mut self, id: LineId) -> Option<CacheLine> {
        let (s, w) = self.locate(id)?;
        let line = self.sets[s].swap_remove(w);
        self.evictions[s] += 1;
        if line.dirty {
            self.refresh_set(s);
        }
        Some(line)
    }

    /// Recomputes the digest of the set holding `id` and the path to the root.
    pub fn refresh_for(&mut self, id: LineId) {
        if let Ok(set) = self.layout.set_index(id) {
            self.refresh_set(set);
        }
    }

    pub fn refresh_set(&mut self, set: usize) {
        let geom = self.layout.geometry();
        let mut dirty: Vec<(u64, MacField)> = self.sets[set]
            .iter()
            .filter(|l| l.dirty)
            .map(|l| (geom.meta_ordinal(l.id).expect("cached line in range"), l.content.mac()))
            .collect();
        dirty.sort_by(|a, b| b.0.cmp(&a.0));
        let macs: Vec<MacField> = dirty.into_iter().map(|(_, m)| m).collect();
        let d = set_digest(&self.prf, &macs);
        self.tree.update(&self.prf, set, d);
        let part = (set >= self.layout.counter_sets()) as usize;
        self.dirty_by_partition[part] -= self.set_dirty[set] as usize;
        self.set_dirty[set] = macs.len() as u32;
        self.dirty_by_partition[part] += macs.len();
    }

    pub fn tree_root(&self) -> u64 {
        self.tree.root()
    }

    pub fn tree(&self) -> &CacheTree {
        &self.tree
    }

    pub fn lines(&self) -> impl Iterator<Item = &CacheLine> {
        self.sets.iter().flatten()
    }

    pub fn set_lines(&self, set: usize) -> &[CacheLine] {
        &self.sets[set]
    }

    pub fn dirty_lines(&self) -> Vec<(LineId, MacField)> {
        self.lines().filter(|l| l.dirty).map(|l| (l.id, l.content.mac())).collect()
    }

    pub fn resident(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    pub fn dirty_count(&self) -> usize {
        self.dirty_by_partition[0] + self.dirty_by_partition[1]
    }

    /// Dirty lines as `(counter blocks, SIT nodes)`.
    pub fn dirty_by_partition(&self) -> (usize, usize) {
        (self.dirty_by_partition[0], self.dirty_by_partition[1])
    }

    pub fn capacity_lines(&self) -> usize {
        self.layout.capacity_lines()
    }

    pub fn insertions(&self, set: usize) -> u64 {
        self.insertions[set]
    }

    pub fn evictions(&self, set: usize) -> u64 {
        self.evictions[set]
    }
}

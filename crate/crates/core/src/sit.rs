//! The integrity-tree engine: lazy SIT updates, verified fills, eviction
//! with the ahead-write policy, page re-encryption, the LSB-window flush and
//! the strict-persistence branch walk.
//!
//! Every line in the cache keeps the parent counter it was verified (or last
//! written) against. That counter cannot change while the line is cached,
//! because a parent counter only advances when the child is written back.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::SchemeId;
use crate::cache::{CacheConfig, CacheLayout, CacheLine, MetadataCache};
use crate::crypto::{
    DataLine, NodeContent, Prf, LSB_MASK, MINOR_LIMIT, SIT_COUNTER_MASK,
};
use crate::error::{Error, Result};
use crate::geometry::{Geometry, LineId, LineKind, COUNTERS_PER_BLOCK};
use crate::nvm::{Bitmap, NvmImage, StoredLine, VersionLog};
use crate::tracker::{AdrConfig, BitmapIndex, TrackerStats};

/// Increments a parent counter may take before its NVM copy must be
/// refreshed, so a 10-bit sidecar always pins the live value.
pub const LSB_WINDOW: u16 = LSB_MASK as u16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AwMode {
    /// Start at user data: every counter-block update is written ahead.
    AwL,
    /// Start at counter blocks.
    AwM,
    /// Start at the last stored level, whose parent is the on-chip root.
    AwH,
}

impl AwMode {
    pub const ALL: [AwMode; 3] = [AwMode::AwL, AwMode::AwM, AwMode::AwH];

    /// Start level in tree-level numbering (user data = -1).
    pub fn start_level(self, geom: &Geometry) -> i32 {
        match self {
            AwMode::AwL => -1,
            AwMode::AwM => 0,
            AwMode::AwH => geom.top_level() as i32,
        }
    }
}

impl fmt::Display for AwMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AwMode::AwL => "aw-l",
            AwMode::AwM => "aw-m",
            AwMode::AwH => "aw-h",
        })
    }
}

impl FromStr for AwMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aw-l" | "awl" | "l" => Ok(AwMode::AwL),
            "aw-m" | "awm" | "m" => Ok(AwMode::AwM),
            "aw-h" | "awh" | "h" => Ok(AwMode::AwH),
            _ => Err(Error::Config(format!("unknown aw mode `{s}`"))),
        }
    }
}

/// NVM writes by cause. Every engine write lands in exactly one field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WriteStats {
    pub data: u64,
    pub metadata_evict: u64,
    pub ahead_write: u64,
    pub bitmap_spill: u64,
    pub st_block: u64,
    pub strict_branch: u64,
    pub reencrypt: u64,
    pub lsb_flush: u64,
}

impl WriteStats {
    pub fn total(&self) -> u64 {
        self.data
            + self.metadata_evict
            + self.ahead_write
            + self.bitmap_spill
            + self.st_block
            + self.strict_branch
            + self.reencrypt
            + self.lsb_flush
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Category {
    Data,
    MetadataEvict,
    AheadWrite,
    StrictBranch,
    Reencrypt,
    LsbFlush,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlushEvent {
    pub victim: LineId,
    pub wrote_victim: bool,
    pub ahead_wrote_parent: bool,
    pub nvm_writes: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub mem_bytes: u64,
    pub cache: CacheConfig,
    pub scheme: SchemeId,
    pub adr: AdrConfig,
    pub seed: u64,
}

impl EngineConfig {
    pub fn new(mem_bytes: u64, scheme: SchemeId) -> Self {
        EngineConfig {
            mem_bytes,
            cache: CacheConfig::default(),
            scheme,
            adr: AdrConfig::default(),
            seed: 1,
        }
    }
}

/// On-chip state that survives power loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChipState {
    pub root_counter: u64,
    pub cache_tree_root: u64,
    pub top_index_line: Bitmap,
}

/// What survives a crash: NVM (recovery area included, after the ADR
/// battery flush) and the on-chip registers.
#[derive(Clone, Debug)]
pub struct CrashSnapshot {
    pub config: EngineConfig,
    pub nvm: NvmImage,
    pub chip: ChipState,
    pub event_index: u64,
}

#[derive(Clone, Debug)]
pub struct Engine {
    geom: Geometry,
    prf: Prf,
    cfg: EngineConfig,
    nvm: NvmImage,
    cache: MetadataCache,
    tracker: Option<BitmapIndex>,
    root_counter: u64,
    stats: WriteStats,
    reads: u64,
    events: u64,
    pinned: Vec<LineId>,
    flushes: Vec<FlushEvent>,
    versions: Option<VersionLog>,
    shadow: bool,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self> {
        let prf = Prf::from_seed(cfg.seed);
        Self::with_image(cfg, NvmImage::new(prf), 0)
    }

    /// Continues from a post-recovery image: cold cache, all lines clean.
    pub fn resume(cfg: EngineConfig, mut nvm: NvmImage, root_counter: u64) -> Result<Self> {
        nvm.ra = Default::default();
        Self::with_image(cfg, nvm, root_counter)
    }

    fn with_image(cfg: EngineConfig, nvm: NvmImage, root_counter: u64) -> Result<Self> {
        let geom = Geometry::new(cfg.mem_bytes)?;
        let prf = Prf::from_seed(cfg.seed);
        let layout = CacheLayout::new(geom.clone(), &cfg.cache)?;
        let tracker = match cfg.scheme {
            SchemeId::Star(_) => Some(BitmapIndex::new(cfg.adr)),
            _ => None,
        };
        Ok(Engine {
            cache: MetadataCache::new(layout, prf),
            geom,
            prf,
            nvm,
            tracker,
            root_counter,
            stats: WriteStats::default(),
            reads: 0,
            events: 0,
            pinned: Vec::new(),
            flushes: Vec::new(),
            versions: None,
            shadow: false,
            cfg,
        })
    }

    /// Keeps up to `depth` superseded versions of every NVM line.
    pub fn record_versions(&mut self, depth: usize) {
        self.versions = Some(VersionLog::new(depth));
    }

    /// Checks the cache-tree, freshness and tracker invariants after every
    /// event. Slow; meant for tests.
    pub fn set_shadow_validation(&mut self, on: bool) {
        self.shadow = on;
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn prf(&self) -> &Prf {
        &self.prf
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn nvm(&self) -> &NvmImage {
        &self.nvm
    }

    pub fn cache(&self) -> &MetadataCache {
        &self.cache
    }

    pub fn versions(&self) -> Option<&VersionLog> {
        self.versions.as_ref()
    }

    pub fn root_counter(&self) -> u64 {
        self.root_counter
    }

    pub fn write_stats(&self) -> WriteStats {
        self.stats
    }

    pub fn reads(&self) -> u64 {
        self.reads
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn tracker_stats(&self) -> Option<TrackerStats> {
        self.tracker.as_ref().map(|t| t.stats)
    }

    pub fn dirty_ratio(&self) -> f64 {
        self.cache.dirty_count() as f64 / self.cache.capacity_lines() as f64
    }

    fn start_level(&self) -> Option<i32> {
        match self.cfg.scheme {
            SchemeId::Star(m) => Some(m.start_level(&self.geom)),
            _ => None,
        }
    }

    fn ahead_writes_from(&self, level: i32) -> bool {
        self.start_level().is_some_and(|s| level >= s)
    }

    fn pin(&mut self, id: LineId) {
        self.pinned.push(id);
    }

    fn unpin(&mut self, id: LineId) {
        let pos = self.pinned.iter().rposition(|&p| p == id).expect("unpin of unpinned line");
        self.pinned.remove(pos);
    }

    fn persist(&mut self, id: LineId, line: StoredLine, cat: Category) {
        if let Some(v) = self.versions.as_mut() {
            v.record(id, self.nvm.line(id));
        }
        self.nvm.write_line(id, line);
        let s = &mut self.stats;
        match cat {
            Category::Data => s.data += 1,
            Category::MetadataEvict => s.metadata_evict += 1,
            Category::AheadWrite => s.ahead_write += 1,
            Category::StrictBranch => s.strict_branch += 1,
            Category::Reencrypt => s.reencrypt += 1,
            Category::LsbFlush => s.lsb_flush += 1,
        }
        if self.cfg.scheme == SchemeId::Anubis {
            s.st_block += 1;
        }
    }

    /// Parent counter of a cached or about-to-be-cached metadata line.
    fn parent_counter_of(&self, id: LineId) -> u64 {
        let parent = self.geom.parent_of(id).expect("metadata line has a parent");
        if self.geom.is_root(parent) {
            self.root_counter
        } else {
            let p = self.cache.get(parent).expect("parent is cached");
            p.content.sit_counter(self.geom.counter_slot(id))
        }
    }

    fn record_transition(&mut self, id: LineId, dirty: bool) {
        let Some(tracker) = self.tracker.as_mut() else { return };
        let ord = self.geom.meta_ordinal(id).expect("metadata line");
        let out = tracker.record(ord, dirty, &mut self.nvm.ra);
        self.stats.bitmap_spill += out.spilled.len() as u64;
    }

    /// Re-MACs a modified cached line and marks it dirty and stale.
    fn mark_modified(&mut self, id: LineId) {
        let prf = self.prf;
        let line = self.cache.get_mut(id).expect("modified line is cached");
        line.content.seal(&prf, id, line.parent_counter);
        line.fresh = false;
        let was_dirty = std::mem::replace(&mut line.dirty, true);
        self.cache.refresh_for(id);
        if !was_dirty {
            self.record_transition(id, true);
        }
    }

    /// Brings `id` into the cache, verifying it against its parent counter.
    pub fn ensure_cached(&mut self, id: LineId) -> Result<()> {
        if self.cache.touch(id) {
            return Ok(());
        }
        if !self.geom.contains(id) || !id.is_metadata() {
            return Err(Error::OutOfRange(id));
        }
        let parent = self.geom.parent_of(id)?;
        let parent_on_chip = self.geom.is_root(parent);
        if !parent_on_chip {
            self.ensure_cached(parent)?;
            self.pin(parent);
        }
        let result = self.fill(id);
        if !parent_on_chip {
            self.unpin(parent);
        }
        result
    }

    fn fill(&mut self, id: LineId) -> Result<()> {
        let set = self.cache.layout().set_index(id)?;
        self.make_room(set)?;
        if self.cache.touch(id) {
            return Ok(());
        }
        let pc = self.parent_counter_of(id);
        let content = self.nvm.node(id);
        self.reads += 1;
        if !content.verify(&self.prf, id, pc) {
            return Err(Error::IntegrityViolation(id));
        }
        self.cache.insert(CacheLine::filled(id, content, pc))
    }

    fn make_room(&mut self, set: usize) -> Result<()> {
        while self.cache.is_full(set) {
            let victim = self.cache.victim(set, &self.pinned).ok_or(Error::SetExhausted(set))?;
            let ev = self.evict_metadata(victim)?;
            self.flushes.push(ev);
        }
        Ok(())
    }

    /// Removes `victim` from the cache, writing it back if dirty.
    pub fn evict_metadata(&mut self, victim: LineId) -> Result<FlushEvent> {
        let line = self.cache.get(victim).expect("victim is cached");
        if !line.dirty {
            self.cache.remove(victim);
            return Ok(FlushEvent {
                victim,
                wrote_victim: false,
                ahead_wrote_parent: false,
                nvm_writes: 0,
            });
        }
        self.pin(victim);
        let parent = self.geom.parent_of(victim)?;
        let on_chip = self.geom.is_root(parent);
        let slot = self.geom.counter_slot(victim);
        let new_pc = if on_chip {
            self.root_counter = (self.root_counter + 1) & SIT_COUNTER_MASK;
            self.root_counter
        } else {
            self.ensure_cached(parent)?;
            self.pin(parent);
            self.bump_child_counter(parent, slot)
        };

        let mut line = self.cache.remove(victim).expect("pinned victim stays cached");
        line.content.seal(&self.prf, victim, new_pc);
        self.persist(victim, StoredLine::Node(line.content), Category::MetadataEvict);
        self.record_transition(victim, false);
        self.unpin(victim);

        let mut ev =
            FlushEvent { victim, wrote_victim: true, ahead_wrote_parent: false, nvm_writes: 1 };
        if !on_chip {
            if self.ahead_writes_from(victim.tree_level()) {
                self.write_back_cached(parent, Category::AheadWrite);
                ev.ahead_wrote_parent = true;
                ev.nvm_writes += 1;
            } else if self.lsb_window_full(parent, slot) {
                self.write_back_cached(parent, Category::LsbFlush);
                ev.nvm_writes += 1;
            }
            self.unpin(parent);
        }
        Ok(ev)
    }

    /// The recovery schemes need a parent on NVM within one LSB window of
    /// its live counters.
    fn lsb_window_full(&self, parent: LineId, slot: usize) -> bool {
        self.start_level().is_some()
            && self.cache.get(parent).is_some_and(|p| p.since_write[slot] >= LSB_WINDOW)
    }

    /// Forced LSB-window refresh of `parent`, if due. Exposed for tests.
    pub fn lsb_window_flush(&mut self, parent: LineId) -> Option<FlushEvent> {
        let due = (0..8).any(|s| self.lsb_window_full(parent, s));
        if !due {
            return None;
        }
        self.write_back_cached(parent, Category::LsbFlush);
        Some(FlushEvent { victim: parent, wrote_victim: true, ahead_wrote_parent: false, nvm_writes: 1 })
    }

    fn bump_child_counter(&mut self, parent: LineId, slot: usize) -> u64 {
        let line = self.cache.get_mut(parent).expect("parent is cached");
        let NodeContent::Sit(s) = &mut line.content else {
            unreachable!("only SIT nodes parent metadata lines")
        };
        s.counters[slot] = (s.counters[slot] + 1) & SIT_COUNTER_MASK;
        let v = s.counters[slot];
        line.since_write[slot] += 1;
        self.mark_modified(parent);
        v
    }

    /// Writes a cached line's current content without changing its parent
    /// counter. The line stays cached and keeps its dirty flag.
    fn write_back_cached(&mut self, id: LineId, cat: Category) {
        let line = self.cache.get_mut(id).expect("cached");
        line.fresh = true;
        line.since_write = [0; 8];
        let content = line.content;
        self.persist(id, StoredLine::Node(content), cat);
    }

    fn counters_for(&self, cb: LineId, slot: usize) -> (u64, u8) {
        match &self.cache.get(cb).expect("counter block cached").content {
            NodeContent::Counter(c) => (c.major, c.minors[slot]),
            NodeContent::Sit(_) => unreachable!(),
        }
    }

    fn check_data(&self, addr: LineId) -> Result<()> {
        if addr.kind != LineKind::UserData || !self.geom.contains(addr) {
            return Err(Error::OutOfRange(addr));
        }
        Ok(())
    }

    pub fn write_data(&mut self, addr: LineId, plaintext: &[u8; 64]) -> Result<Vec<FlushEvent>> {
        self.check_data(addr)?;
        self.events += 1;
        let cb = self.geom.parent_of(addr)?;
        let slot = self.geom.counter_slot(addr);
        self.ensure_cached(cb)?;
        self.pin(cb);
        let (major, minor) = self.counters_for(cb, slot);
        if minor + 1 == MINOR_LIMIT {
            self.re_encrypt_page(cb, Some((slot, *plaintext)))?;
        } else {
            if let Some(NodeContent::Counter(c)) = self.cache.get_mut(cb).map(|l| &mut l.content) {
                c.minors[slot] += 1;
            }
            self.mark_modified(cb);
            let line = DataLine::seal(&self.prf, addr, plaintext, major, minor + 1);
            self.persist(addr, StoredLine::Data(line), Category::Data);
            if self.cfg.scheme == SchemeId::Strict {
                self.persist_branch(cb)?;
            } else if self.ahead_writes_from(addr.tree_level()) {
                self.write_back_cached(cb, Category::AheadWrite);
            }
        }
        self.unpin(cb);
        self.after_event()?;
        Ok(std::mem::take(&mut self.flushes))
    }

    pub fn read_data(&mut self, addr: LineId) -> Result<[u8; 64]> {
        self.check_data(addr)?;
        self.events += 1;
        let cb = self.geom.parent_of(addr)?;
        self.ensure_cached(cb)?;
        let (major, minor) = self.counters_for(cb, self.geom.counter_slot(addr));
        let line = self.nvm.data(addr);
        self.reads += 1;
        if !line.verify(&self.prf, addr, major, minor) {
            return Err(Error::IntegrityViolation(addr));
        }
        self.flushes.clear();
        self.after_event()?;
        Ok(line.decrypt(&self.prf, addr, major, minor))
    }

    /// Minor overflow: bump the major, reset the minors, rewrite the page and
    /// the counter block. `trigger` carries the write that overflowed.
    /// Returns the number of NVM writes.
    pub fn re_encrypt_page(&mut self, cb: LineId, trigger: Option<(usize, [u8; 64])>) -> Result<u64> {
        let before = self.stats.reencrypt;
        let (major, minors) = match &self.cache.get(cb).expect("counter block cached").content {
            NodeContent::Counter(c) => (c.major, c.minors),
            NodeContent::Sit(_) => unreachable!(),
        };
        let base = cb.index * COUNTERS_PER_BLOCK as u64;
        let mut plain = [[0u8; 64]; COUNTERS_PER_BLOCK];
        for (i, p) in plain.iter_mut().enumerate() {
            if trigger.is_some_and(|(s, _)| s == i) {
                *p = trigger.unwrap().1;
                continue;
            }
            let addr = LineId::data(base + i as u64);
            let line = self.nvm.data(addr);
            self.reads += 1;
            if !line.verify(&self.prf, addr, major, minors[i]) {
                return Err(Error::IntegrityViolation(addr));
            }
            *p = line.decrypt(&self.prf, addr, major, minors[i]);
        }
        if let Some(NodeContent::Counter(c)) = self.cache.get_mut(cb).map(|l| &mut l.content) {
            c.major += 1;
            c.minors = [0; COUNTERS_PER_BLOCK];
        }
        self.mark_modified(cb);
        for (i, p) in plain.iter().enumerate() {
            let addr = LineId::data(base + i as u64);
            let line = DataLine::seal(&self.prf, addr, p, major + 1, 0);
            self.persist(addr, StoredLine::Data(line), Category::Reencrypt);
        }
        self.write_back_cached(cb, Category::Reencrypt);
        if self.cfg.scheme == SchemeId::Strict {
            self.persist_branch(cb)?;
        }
        Ok(self.stats.reencrypt - before)
    }

    /// Strict persistence: write every node from `cb` up to the last stored
    /// level, advancing each parent counter; the root advances on chip.
    fn persist_branch(&mut self, cb: LineId) -> Result<()> {
        let mut node = cb;
        let mut held = Vec::new();
        loop {
            let parent = self.geom.parent_of(node)?;
            let on_chip = self.geom.is_root(parent);
            let pc = if on_chip {
                self.root_counter = (self.root_counter + 1) & SIT_COUNTER_MASK;
                self.root_counter
            } else {
                self.ensure_cached(parent)?;
                self.pin(parent);
                held.push(parent);
                self.bump_child_counter(parent, self.geom.counter_slot(node))
            };
            let prf = self.prf;
            let line = self.cache.get_mut(node).expect("branch node cached");
            line.content.seal(&prf, node, pc);
            line.parent_counter = pc;
            line.dirty = false;
            line.fresh = true;
            line.since_write = [0; 8];
            let content = line.content;
            self.cache.refresh_for(node);
            self.persist(node, StoredLine::Node(content), Category::StrictBranch);
            if on_chip {
                break;
            }
            node = parent;
        }
        for p in held {
            self.unpin(p);
        }
        Ok(())
    }

    fn after_event(&mut self) -> Result<()> {
        debug_assert!(self.pinned.is_empty());
        if self.shadow {
            self.check_invariants()?;
        }
        Ok(())
    }

    /// Shadow validation: incremental cache-tree root equals a rebuild,
    /// every cached line above the start level matches NVM, and the tracker
    /// records exactly the dirty lines.
    pub fn check_invariants(&self) -> Result<()> {
        let rebuilt =
            self.cache.layout().rebuild_cache_tree(&self.prf, &self.cache.dirty_lines())?;
        if rebuilt != self.cache.tree_root() {
            return Err(Error::Invariant(format!(
                "cache-tree root {:#x} != rebuild {:#x}",
                self.cache.tree_root(),
                rebuilt
            )));
        }
        for l in self.cache.lines() {
            if !l.dirty {
                let pc = self.parent_counter_cached_or_nvm(l.id);
                if self.nvm.node(l.id) != l.content || pc.is_some_and(|pc| pc != l.parent_counter) {
                    return Err(Error::Invariant(format!("clean line {} differs from NVM", l.id)));
                }
            }
            if l.fresh != (self.nvm.node(l.id) == l.content) {
                return Err(Error::Invariant(format!("freshness flag of {} is wrong", l.id)));
            }
            if let Some(start) = self.start_level() {
                if l.id.tree_level() > start && !l.fresh {
                    return Err(Error::Invariant(format!(
                        "{} is above the start level but stale in NVM",
                        l.id
                    )));
                }
            }
        }
        if let Some(t) = &self.tracker {
            let mut want: Vec<u64> = self
                .cache
                .dirty_lines()
                .iter()
                .map(|(id, _)| self.geom.meta_ordinal(*id).unwrap())
                .collect();
            want.sort_unstable();
            if t.l1_union(&self.nvm.ra, self.geom.bitmap_l1_lines()) != want {
                return Err(Error::Invariant("tracker lost a dirty-state transition".into()));
            }
        }
        Ok(())
    }

    fn parent_counter_cached_or_nvm(&self, id: LineId) -> Option<u64> {
        let parent = self.geom.parent_of(id).ok()?;
        if self.geom.is_root(parent) {
            return Some(self.root_counter);
        }
        self.cache.get(parent).map(|p| p.content.sit_counter(self.geom.counter_slot(id)))
    }

    /// Power loss: NVM and the on-chip registers survive; the battery
    /// flushes the ADR bitmap lines into the recovery area.
    pub fn crash(&self) -> CrashSnapshot {
        let mut nvm = self.nvm.clone();
        if let Some(t) = &self.tracker {
            t.flush_to(&mut nvm.ra);
        }
        CrashSnapshot {
            config: self.cfg.clone(),
            nvm,
            chip: ChipState {
                root_counter: self.root_counter,
                cache_tree_root: self.cache.tree_root(),
                top_index_line: self.tracker.as_ref().map(|t| t.top()).unwrap_or([0; 8]),
            },
            event_index: self.events,
        }
    }
}

//! Dirty-line bookkeeping for recovery: L1 bitmap lines (one bit per
//! metadata line) and L2 lines (one bit per L1 line) cached in a small
//! battery-backed ADR pool, spilled LRU to the recovery area, and a single
//! top line held on chip.
//!
//! Runtime never reads the recovery area. A line brought into ADR is rebuilt
//! from the metadata cache's dirty flags, which are ground truth because a
//! dirty line is always resident; the index mirrors those flags from the
//! transitions it is fed, so a rebuild costs no cache scan.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LineId, BITMAP_BITS};
use crate::nvm::{Bitmap, RecoveryArea};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdrConfig {
    pub l1_lines: usize,
    pub l2_lines: usize,
}

impl Default for AdrConfig {
    fn default() -> Self {
        AdrConfig { l1_lines: 14, l2_lines: 2 }
    }
}

impl AdrConfig {
    /// Splits a total ADR capacity, reserving one L2 line per eight lines.
    pub fn with_capacity(total: usize) -> Result<Self> {
        if total < 2 {
            return Err(Error::Config("ADR needs at least one L1 and one L2 line".into()));
        }
        let l2 = (total / 8).max(1);
        Ok(AdrConfig { l1_lines: total - l2, l2_lines: l2 })
    }

    pub fn capacity(&self) -> usize {
        self.l1_lines + self.l2_lines
    }
}

fn get_bit(b: &Bitmap, i: u64) -> bool {
    b[(i / 64) as usize] >> (i % 64) & 1 == 1
}

fn put_bit(b: &mut Bitmap, i: u64, v: bool) {
    let w = &mut b[(i / 64) as usize];
    if v {
        *w |= 1 << (i % 64);
    } else {
        *w &= !(1 << (i % 64));
    }
}

fn set_bits(b: &Bitmap) -> impl Iterator<Item = u64> + '_ {
    (0..BITMAP_BITS).filter(move |&i| get_bit(b, i))
}

#[derive(Clone, Debug)]
struct AdrPool {
    capacity: usize,
    lines: Vec<(u64, Bitmap, u64)>,
}

impl AdrPool {
    fn new(capacity: usize) -> Self {
        AdrPool { capacity, lines: Vec::with_capacity(capacity) }
    }

    fn position(&self, index: u64) -> Option<usize> {
        self.lines.iter().position(|l| l.0 == index)
    }

    /// Inserts a line, returning the LRU line it displaced.
    fn insert(&mut self, index: u64, bits: Bitmap, stamp: u64) -> Option<(u64, Bitmap)> {
        let mut out = None;
        if self.lines.len() == self.capacity {
            let (w, _) = self.lines.iter().enumerate().min_by_key(|(_, l)| l.2).unwrap();
            let old = self.lines.swap_remove(w);
            out = Some((old.0, old.1));
        }
        self.lines.push((index, bits, stamp));
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackerStats {
    /// Dirty-state transitions, each one L1 access.
    pub transitions: u64,
    pub l1_hits: u64,
    pub l2_accesses: u64,
    pub l2_hits: u64,
    pub spills: u64,
}

impl TrackerStats {
    pub fn hit_ratio(&self) -> f64 {
        if self.transitions == 0 {
            1.0
        } else {
            self.l1_hits as f64 / self.transitions as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordOutcome {
    pub adr_hit: bool,
    /// Bitmap lines written to the recovery area to make room.
    pub spilled: Vec<LineId>,
}

#[derive(Clone, Debug)]
pub struct BitmapIndex {
    cfg: AdrConfig,
    l1: AdrPool,
    l2: AdrPool,
    top: Bitmap,
    clock: u64,
    /// Non-zero L1 lines of the cache's dirty flags.
    flags: HashMap<u64, Bitmap>,
    pub stats: TrackerStats,
}

impl BitmapIndex {
    pub fn new(cfg: AdrConfig) -> Self {
        BitmapIndex {
            l1: AdrPool::new(cfg.l1_lines),
            l2: AdrPool::new(cfg.l2_lines),
            cfg,
            top: [0; 8],
            clock: 0,
            flags: HashMap::new(),
            stats: TrackerStats::default(),
        }
    }

    pub fn config(&self) -> AdrConfig {
        self.cfg
    }

    pub fn top(&self) -> Bitmap {
        self.top
    }

    /// Records a dirty-flag transition of the metadata line at `ordinal`.
    pub fn record(&mut self, ordinal: u64, dirty: bool, ra: &mut RecoveryArea) -> RecordOutcome {
        self.stats.transitions += 1;
        let mut spilled = Vec::new();
        let l1_index = ordinal / BITMAP_BITS;
        let bit = ordinal % BITMAP_BITS;
        let flags = self.flags.entry(l1_index).or_insert([0; 8]);
        put_bit(flags, bit, dirty);
        let now = *flags;
        if now == [0; 8] {
            self.flags.remove(&l1_index);
        }
        self.clock += 1;
        let adr_hit;
        let w = match self.l1.position(l1_index) {
            Some(w) => {
                adr_hit = true;
                self.stats.l1_hits += 1;
                w
            }
            None => {
                adr_hit = false;
                if let Some((idx, old)) = self.l1.insert(l1_index, now, self.clock) {
                    ra.write(1, idx, old);
                    self.stats.spills += 1;
                    spilled.push(LineId::bitmap(1, idx));
                }
                self.l1.lines.len() - 1
            }
        };
        let line = &mut self.l1.lines[w];
        line.2 = self.clock;
        put_bit(&mut line.1, bit, dirty);
        let only_bit = line.1.iter().map(|w| w.count_ones()).sum::<u32>() == 1;
        if dirty && only_bit {
            self.mark_l2(l1_index, ra, &mut spilled);
        }
        RecordOutcome { adr_hit, spilled }
    }

    fn mark_l2(&mut self, l1_index: u64, ra: &mut RecoveryArea, spilled: &mut Vec<LineId>) {
        self.stats.l2_accesses += 1;
        let l2_index = l1_index / BITMAP_BITS;
        self.clock += 1;
        let w = match self.l2.position(l2_index) {
            Some(w) => {
                self.stats.l2_hits += 1;
                w
            }
            None => {
                let mut bits = [0u64; 8];
                for &i in self.flags.keys().filter(|&&i| i / BITMAP_BITS == l2_index) {
                    put_bit(&mut bits, i % BITMAP_BITS, true);
                }
                if let Some((idx, old)) = self.l2.insert(l2_index, bits, self.clock) {
                    ra.write(2, idx, old);
                    self.stats.spills += 1;
                    spilled.push(LineId::bitmap(2, idx));
                }
                self.l2.lines.len() - 1
            }
        };
        let line = &mut self.l2.lines[w];
        line.2 = self.clock;
        put_bit(&mut line.1, l1_index % BITMAP_BITS, true);
        put_bit(&mut self.top, l2_index, true);
    }

    /// Battery flush at power loss: every ADR line lands in the recovery area.
    pub fn flush_to(&self, ra: &mut RecoveryArea) {
        for &(idx, bits, _) in &self.l1.lines {
            ra.write(1, idx, bits);
        }
        for &(idx, bits, _) in &self.l2.lines {
            ra.write(2, idx, bits);
        }
    }

    /// The L1 view a crash would leave behind: ADR lines over RA lines.
    pub fn l1_union(&self, ra: &RecoveryArea, l1_count: u64) -> Vec<u64> {
        let mut out = Vec::new();
        for idx in 0..l1_count {
            let bits = match self.l1.position(idx) {
                Some(w) => self.l1.lines[w].1,
                None => ra.read(1, idx),
            };
            out.extend(set_bits(&bits).map(|b| idx * BITMAP_BITS + b));
        }
        out
    }
}

/// Walks top line, non-zero L2 lines and non-zero L1 lines. Returns the
/// dirty ordinals in ascending order and the number of RA lines read; the
/// top line is an on-chip register and costs nothing.
pub fn enumerate_dirty(ra: &RecoveryArea, top: &Bitmap) -> (Vec<u64>, u64) {
    let mut reads = 0;
    let mut out = Vec::new();
    for l2 in set_bits(top) {
        reads += 1;
        let l2_bits = ra.read(2, l2);
        for j in set_bits(&l2_bits) {
            let l1 = l2 * BITMAP_BITS + j;
            reads += 1;
            let l1_bits = ra.read(1, l1);
            out.extend(set_bits(&l1_bits).map(|b| l1 * BITMAP_BITS + b));
        }
    }
    (out, reads)
}

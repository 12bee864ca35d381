//! Address-space layout and SIT shape.
//!
//! Everything here is arithmetic over line indices. The simulated NVM is laid
//! out as `[user data | metadata (counter blocks, then SIT levels bottom-up) |
//! recovery area L1 | recovery area L2]`. User-data MACs are colocated with
//! their data line and take no address space of their own.
//!
//! The SIT root is an on-chip register that sits above the last stored level,
//! so a tree with `levels()` stored levels has `levels() + 1` levels in total.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LINE_BYTES: u64 = 64;
pub const PAGE_BYTES: u64 = 4096;
pub const COUNTERS_PER_BLOCK: usize = 64;
pub const TREE_ARITY: usize = 8;
/// Flags in one bitmap line (one bit per covered line).
pub const BITMAP_BITS: u64 = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LineKind {
    UserData,
    CounterBlock,
    SitNode,
    BitmapL1,
    BitmapL2,
}

/// Names one line of the simulated machine.
///
/// `level` is the SIT level for metadata (0 = counter block). The on-chip root
/// is represented as a `SitNode` at level `Geometry::levels()`; it has no NVM
/// offset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LineId {
    pub kind: LineKind,
    pub level: u8,
    pub index: u64,
}

impl LineId {
    pub const fn data(index: u64) -> Self {
        LineId { kind: LineKind::UserData, level: 0, index }
    }

    pub const fn counter(index: u64) -> Self {
        LineId { kind: LineKind::CounterBlock, level: 0, index }
    }

    /// A metadata node at `level`; level 0 is the counter-block level.
    pub const fn node(level: u8, index: u64) -> Self {
        if level == 0 {
            Self::counter(index)
        } else {
            LineId { kind: LineKind::SitNode, level, index }
        }
    }

    pub const fn bitmap(layer: u8, index: u64) -> Self {
        let kind = if layer == 1 { LineKind::BitmapL1 } else { LineKind::BitmapL2 };
        LineId { kind, level: 0, index }
    }

    pub fn is_metadata(&self) -> bool {
        matches!(self.kind, LineKind::CounterBlock | LineKind::SitNode)
    }

    /// Level in the protection hierarchy: user data sits at -1.
    pub fn tree_level(&self) -> i32 {
        match self.kind {
            LineKind::UserData => -1,
            _ => self.level as i32,
        }
    }

    /// Compact 64-bit encoding used as the address input of the MAC/OTP.
    pub fn tag(&self) -> u64 {
        let kind = self.kind as u64;
        (kind << 61) | ((self.level as u64) << 55) | (self.index & ((1 << 55) - 1))
    }
}

impl fmt::Display for LineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LineKind::UserData => write!(f, "data[{}]", self.index),
            LineKind::CounterBlock => write!(f, "counter[{}]", self.index),
            LineKind::SitNode => write!(f, "sit{}[{}]", self.level, self.index),
            LineKind::BitmapL1 => write!(f, "bitmap-l1[{}]", self.index),
            LineKind::BitmapL2 => write!(f, "bitmap-l2[{}]", self.index),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    mem_bytes: u64,
    /// Node count per stored level, counter blocks first.
    level_sizes: Vec<u64>,
    /// Metadata ordinal of the first node of each level.
    level_base: Vec<u64>,
    metadata_lines: u64,
}

impl Geometry {
    pub fn new(mem_bytes: u64) -> Result<Self> {
        if mem_bytes == 0 || mem_bytes % PAGE_BYTES != 0 {
            return Err(Error::Geometry(format!(
                "memory size {mem_bytes} is not a positive multiple of {PAGE_BYTES}"
            )));
        }
        let mut level_sizes = vec![mem_bytes / PAGE_BYTES];
        while *level_sizes.last().unwrap() > 1 {
            let prev = *level_sizes.last().unwrap();
            level_sizes.push(prev.div_ceil(TREE_ARITY as u64));
        }
        if level_sizes.len() > 50 {
            return Err(Error::Geometry("tree too deep".into()));
        }
        let mut level_base = Vec::with_capacity(level_sizes.len());
        let mut acc = 0;
        for &n in &level_sizes {
            level_base.push(acc);
            acc += n;
        }
        Ok(Geometry { mem_bytes, level_sizes, level_base, metadata_lines: acc })
    }

    pub fn mem_bytes(&self) -> u64 {
        self.mem_bytes
    }

    pub fn level_sizes(&self) -> &[u64] {
        &self.level_sizes
    }

    /// Stored levels (counter-block level through the single top node).
    pub fn levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn levels_including_root(&self) -> usize {
        self.level_sizes.len() + 1
    }

    /// Level N-1: the stored level whose parent is the on-chip root.
    pub fn top_level(&self) -> u8 {
        (self.level_sizes.len() - 1) as u8
    }

    pub fn root(&self) -> LineId {
        LineId { kind: LineKind::SitNode, level: self.levels() as u8, index: 0 }
    }

    pub fn is_root(&self, id: LineId) -> bool {
        id == self.root()
    }

    pub fn data_lines(&self) -> u64 {
        self.mem_bytes / LINE_BYTES
    }

    pub fn counter_blocks(&self) -> u64 {
        self.level_sizes[0]
    }

    pub fn sit_nodes(&self) -> u64 {
        self.metadata_lines - self.level_sizes[0]
    }

    pub fn metadata_lines(&self) -> u64 {
        self.metadata_lines
    }

    pub fn bitmap_l1_lines(&self) -> u64 {
        self.metadata_lines.div_ceil(BITMAP_BITS)
    }

    pub fn bitmap_l2_lines(&self) -> u64 {
        self.bitmap_l1_lines().div_ceil(BITMAP_BITS)
    }

    pub fn contains(&self, id: LineId) -> bool {
        match id.kind {
            LineKind::UserData => id.index < self.data_lines(),
            LineKind::CounterBlock => id.level == 0 && id.index < self.level_sizes[0],
            LineKind::SitNode => {
                let l = id.level as usize;
                l >= 1 && l < self.levels() && id.index < self.level_sizes[l]
            }
            LineKind::BitmapL1 => id.index < self.bitmap_l1_lines(),
            LineKind::BitmapL2 => id.index < self.bitmap_l2_lines(),
        }
    }

    fn check(&self, id: LineId) -> Result<()> {
        if self.contains(id) || self.is_root(id) {
            Ok(())
        } else {
            Err(Error::OutOfRange(id))
        }
    }

    /// Position of a metadata line in the linear metadata space.
    pub fn meta_ordinal(&self, id: LineId) -> Result<u64> {
        if !id.is_metadata() {
            return Err(Error::NotMetadata(id));
        }
        if !self.contains(id) {
            return Err(Error::OutOfRange(id));
        }
        Ok(self.level_base[id.level as usize] + id.index)
    }

    pub fn meta_from_ordinal(&self, ordinal: u64) -> Result<LineId> {
        if ordinal >= self.metadata_lines {
            return Err(Error::BadOffset(ordinal));
        }
        let level = match self.level_base.binary_search(&ordinal) {
            Ok(l) => l,
            Err(l) => l - 1,
        };
        Ok(LineId::node(level as u8, ordinal - self.level_base[level]))
    }

    pub fn parent_of(&self, id: LineId) -> Result<LineId> {
        self.check(id)?;
        match id.kind {
            LineKind::UserData => Ok(LineId::counter(id.index / COUNTERS_PER_BLOCK as u64)),
            LineKind::CounterBlock | LineKind::SitNode => {
                if self.is_root(id) {
                    return Err(Error::NoParent(id));
                }
                let up = id.level + 1;
                if up as usize == self.levels() {
                    Ok(self.root())
                } else {
                    Ok(LineId::node(up, id.index / TREE_ARITY as u64))
                }
            }
            LineKind::BitmapL1 | LineKind::BitmapL2 => Err(Error::NotMetadata(id)),
        }
    }

    /// Slot of `child`'s counter inside its parent.
    pub fn counter_slot(&self, child: LineId) -> usize {
        match child.kind {
            LineKind::UserData => (child.index % COUNTERS_PER_BLOCK as u64) as usize,
            _ => (child.index % TREE_ARITY as u64) as usize,
        }
    }

    /// Children that exist in this geometry. Trailing slots of a partially
    /// filled parent have no child and their counters stay zero.
    pub fn children_of(&self, id: LineId) -> Result<Vec<LineId>> {
        self.check(id)?;
        match id.kind {
            LineKind::UserData | LineKind::BitmapL1 | LineKind::BitmapL2 => {
                Err(Error::NoChildren(id))
            }
            LineKind::CounterBlock => {
                let base = id.index * COUNTERS_PER_BLOCK as u64;
                Ok((base..base + COUNTERS_PER_BLOCK as u64).map(LineId::data).collect())
            }
            LineKind::SitNode => {
                let below = id.level - 1;
                let n = self.level_sizes[below as usize];
                let base = id.index * TREE_ARITY as u64;
                let end = (base + TREE_ARITY as u64).min(n);
                Ok((base..end).map(|i| LineId::node(below, i)).collect())
            }
        }
    }

    /// Byte offset of a line in the NVM image. The root has none.
    pub fn offset_of(&self, id: LineId) -> Result<u64> {
        if !self.contains(id) {
            return Err(Error::OutOfRange(id));
        }
        let meta_base = self.mem_bytes;
        let ra_l1_base = meta_base + self.metadata_lines * LINE_BYTES;
        let ra_l2_base = ra_l1_base + self.bitmap_l1_lines() * LINE_BYTES;
        Ok(match id.kind {
            LineKind::UserData => id.index * LINE_BYTES,
            LineKind::CounterBlock | LineKind::SitNode => {
                meta_base + self.meta_ordinal(id)? * LINE_BYTES
            }
            LineKind::BitmapL1 => ra_l1_base + id.index * LINE_BYTES,
            LineKind::BitmapL2 => ra_l2_base + id.index * LINE_BYTES,
        })
    }

    pub fn line_at(&self, offset: u64) -> Result<LineId> {
        if offset % LINE_BYTES != 0 {
            return Err(Error::BadOffset(offset));
        }
        let line = offset / LINE_BYTES;
        let data = self.data_lines();
        let meta = self.metadata_lines;
        let l1 = self.bitmap_l1_lines();
        let l2 = self.bitmap_l2_lines();
        if line < data {
            Ok(LineId::data(line))
        } else if line < data + meta {
            self.meta_from_ordinal(line - data)
        } else if line < data + meta + l1 {
            Ok(LineId::bitmap(1, line - data - meta))
        } else if line < data + meta + l1 + l2 {
            Ok(LineId::bitmap(2, line - data - meta - l1))
        } else {
            Err(Error::BadOffset(offset))
        }
    }

    /// Total size of the NVM image, including metadata and the recovery area.
    pub fn image_bytes(&self) -> u64 {
        (self.data_lines() + self.metadata_lines + self.bitmap_l1_lines() + self.bitmap_l2_lines())
            * LINE_BYTES
    }

    pub fn all_metadata(&self) -> impl Iterator<Item = LineId> + '_ {
        self.level_sizes
            .iter()
            .enumerate()
            .flat_map(|(l, &n)| (0..n).map(move |i| LineId::node(l as u8, i)))
    }
}

//! The persistent byte store, kept sparse.
//!
//! A line that was never written holds its factory content: zero plaintext
//! encrypted under counter zero for user data, all-zero counters for
//! metadata, each sealed against a zero parent counter. Materializing those
//! lazily is indistinguishable from initializing the full image.

use std::collections::HashMap;

use crate::crypto::{CounterBlockContent, DataLine, NodeContent, Prf, SitNodeContent};
use crate::geometry::{LineId, LineKind};

/// One 512-bit bitmap line.
pub type Bitmap = [u64; 8];

/// Any line as it appears in NVM.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoredLine {
    Data(DataLine),
    Node(NodeContent),
}

/// Spilled bitmap lines, addressed by `(layer, index)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RecoveryArea {
    lines: HashMap<(u8, u64), Bitmap>,
}

impl RecoveryArea {
    pub fn read(&self, layer: u8, index: u64) -> Bitmap {
        self.lines.get(&(layer, index)).copied().unwrap_or([0; 8])
    }

    pub fn write(&mut self, layer: u8, index: u64, bits: Bitmap) {
        self.lines.insert((layer, index), bits);
    }

    pub fn stored_lines(&self) -> usize {
        self.lines.len()
    }
}

#[derive(Clone, Debug)]
pub struct NvmImage {
    prf: Prf,
    data: HashMap<u64, DataLine>,
    counters: HashMap<u64, CounterBlockContent>,
    sit: HashMap<(u8, u64), SitNodeContent>,
    pub ra: RecoveryArea,
}

impl NvmImage {
    pub fn new(prf: Prf) -> Self {
        NvmImage {
            prf,
            data: HashMap::new(),
            counters: HashMap::new(),
            sit: HashMap::new(),
            ra: RecoveryArea::default(),
        }
    }

    pub fn factory_data(prf: &Prf, addr: LineId) -> DataLine {
        DataLine::seal(prf, addr, &[0u8; 64], 0, 0)
    }

    pub fn factory_node(prf: &Prf, id: LineId) -> NodeContent {
        let mut n = NodeContent::empty_for(id);
        n.seal(prf, id, 0);
        n
    }

    pub fn data(&self, addr: LineId) -> DataLine {
        debug_assert_eq!(addr.kind, LineKind::UserData);
        self.data
            .get(&addr.index)
            .copied()
            .unwrap_or_else(|| Self::factory_data(&self.prf, addr))
    }

    /// The stored line if it was ever written, `None` for factory content.
    pub fn written_data(&self, addr: LineId) -> Option<DataLine> {
        self.data.get(&addr.index).copied()
    }

    pub fn prf(&self) -> &Prf {
        &self.prf
    }

    pub fn node(&self, id: LineId) -> NodeContent {
        match id.kind {
            LineKind::CounterBlock => self
                .counters
                .get(&id.index)
                .map(|c| NodeContent::Counter(*c))
                .unwrap_or_else(|| Self::factory_node(&self.prf, id)),
            LineKind::SitNode => self
                .sit
                .get(&(id.level, id.index))
                .map(|s| NodeContent::Sit(*s))
                .unwrap_or_else(|| Self::factory_node(&self.prf, id)),
            _ => panic!("{id} is not a metadata line"),
        }
    }

    pub fn line(&self, id: LineId) -> StoredLine {
        match id.kind {
            LineKind::UserData => StoredLine::Data(self.data(id)),
            _ => StoredLine::Node(self.node(id)),
        }
    }

    pub fn write_data(&mut self, addr: LineId, line: DataLine) {
        self.data.insert(addr.index, line);
    }

    pub fn write_node(&mut self, id: LineId, content: NodeContent) {
        match content {
            NodeContent::Counter(c) => {
                self.counters.insert(id.index, c);
            }
            NodeContent::Sit(s) => {
                self.sit.insert((id.level, id.index), s);
            }
        }
    }

    pub fn write_line(&mut self, id: LineId, line: StoredLine) {
        match line {
            StoredLine::Data(d) => self.write_data(id, d),
            StoredLine::Node(n) => self.write_node(id, n),
        }
    }

    /// Lines that differ from factory content (or were ever written).
    pub fn materialized_lines(&self) -> usize {
        self.data.len() + self.counters.len() + self.sit.len()
    }

    pub fn written_data_lines(&self) -> impl Iterator<Item = LineId> + '_ {
        self.data.keys().map(|&i| LineId::data(i))
    }
}

/// Keeps the most recent superseded NVM versions of every line, so tests can
/// stage replay attacks with genuine old content.
#[derive(Clone, Debug, Default)]
pub struct VersionLog {
    depth: usize,
    versions: HashMap<LineId, Vec<StoredLine>>,
}

impl VersionLog {
    pub fn new(depth: usize) -> Self {
        VersionLog { depth: depth.max(1), versions: HashMap::new() }
    }

    pub fn record(&mut self, id: LineId, previous: StoredLine) {
        let v = self.versions.entry(id).or_default();
        if v.last() == Some(&previous) {
            return;
        }
        if v.len() == self.depth {
            v.remove(0);
        }
        v.push(previous);
    }

    /// Superseded versions, oldest first.
    pub fn versions(&self, id: LineId) -> &[StoredLine] {
        self.versions.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn lines(&self) -> impl Iterator<Item = &LineId> {
        self.versions.keys()
    }
}

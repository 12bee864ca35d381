//! Keyed primitives: OTP generation for counter-mode encryption and the
//! truncated 54-bit MACs carried by data lines and metadata nodes.
//!
//! The PRF is SipHash-1-3 under a 128-bit run key. Strength is irrelevant to
//! the simulator; determinism and avalanche are what the tests rely on.

use std::hash::Hasher;

use serde::{Deserialize, Serialize};
use siphasher::sip::SipHasher13;

use crate::geometry::{LineId, COUNTERS_PER_BLOCK, TREE_ARITY};

pub const MAC_BITS: u32 = 54;
pub const MAC_MASK: u64 = (1 << MAC_BITS) - 1;
pub const LSB_BITS: u32 = 10;
pub const LSB_MASK: u64 = (1 << LSB_BITS) - 1;
/// Minor counters are 7 bits wide; reaching this value overflows.
pub const MINOR_LIMIT: u8 = 128;
pub const SIT_COUNTER_MASK: u64 = (1 << 56) - 1;

const DOMAIN_OTP: u64 = 0x6f74_7000;
const DOMAIN_DATA_MAC: u64 = 0x6d61_6364;
const DOMAIN_NODE_MAC: u64 = 0x6d61_636e;
const DOMAIN_COUNTER_MAC: u64 = 0x6d61_6363;
pub(crate) const DOMAIN_SET_DIGEST: u64 = 0x7365_7464;
pub(crate) const DOMAIN_TREE_NODE: u64 = 0x7472_6565;
pub(crate) const DOMAIN_PLAINTEXT: u64 = 0x706c_6169;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prf {
    k0: u64,
    k1: u64,
}

impl Prf {
    pub fn new(key: u128) -> Self {
        Prf { k0: key as u64, k1: (key >> 64) as u64 }
    }

    /// Derives the run key from a seed with a splitmix64 expansion.
    pub fn from_seed(seed: u64) -> Self {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_add(0x9e37_79b9_7f4a_7c15);
            let mut z = s;
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^ (z >> 31)
        };
        let k0 = next();
        let k1 = next();
        Prf { k0, k1 }
    }

    fn hasher(&self, domain: u64) -> SipHasher13 {
        let mut h = SipHasher13::new_with_keys(self.k0, self.k1);
        h.write_u64(domain);
        h
    }

    pub fn hash_words(&self, domain: u64, words: &[u64]) -> u64 {
        let mut h = self.hasher(domain);
        for &w in words {
            h.write_u64(w);
        }
        h.finish()
    }

    pub fn otp(&self, addr: LineId, major: u64, minor: u8) -> [u8; 64] {
        debug_assert!(minor < MINOR_LIMIT);
        let mut pad = [0u8; 64];
        for (j, chunk) in pad.chunks_exact_mut(8).enumerate() {
            let w = self.hash_words(DOMAIN_OTP, &[addr.tag(), major, minor as u64, j as u64]);
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        pad
    }

    /// Encryption and decryption are the same XOR with the pad.
    pub fn xor_pad(&self, line: &[u8; 64], addr: LineId, major: u64, minor: u8) -> [u8; 64] {
        let pad = self.otp(addr, major, minor);
        let mut out = [0u8; 64];
        for i in 0..64 {
            out[i] = line[i] ^ pad[i];
        }
        out
    }

    pub fn mac_data(
        &self,
        cipher: &[u8; 64],
        addr: LineId,
        major: u64,
        minor: u8,
        lsb10: u16,
    ) -> u64 {
        let mut h = self.hasher(DOMAIN_DATA_MAC);
        h.write(cipher);
        h.write_u64(addr.tag());
        h.write_u64(major);
        h.write_u64(minor as u64);
        h.write_u64(lsb10 as u64);
        h.finish() & MAC_MASK
    }

    /// Node MAC: address, then counters in slot order, then the parent's
    /// counter for this node, then the LSB sidecar.
    pub fn mac_sit(
        &self,
        node: LineId,
        counters: &[u64; TREE_ARITY],
        parent_counter: u64,
        lsb10: u16,
    ) -> u64 {
        let mut h = self.hasher(DOMAIN_NODE_MAC);
        h.write_u64(node.tag());
        for &c in counters {
            h.write_u64(c);
        }
        h.write_u64(parent_counter);
        h.write_u64(lsb10 as u64);
        h.finish() & MAC_MASK
    }

    pub fn mac_counter_block(
        &self,
        node: LineId,
        major: u64,
        minors: &[u8; COUNTERS_PER_BLOCK],
        parent_counter: u64,
        lsb10: u16,
    ) -> u64 {
        let mut h = self.hasher(DOMAIN_COUNTER_MAC);
        h.write_u64(node.tag());
        h.write_u64(major);
        h.write(minors);
        h.write_u64(parent_counter);
        h.write_u64(lsb10 as u64);
        h.finish() & MAC_MASK
    }
}

/// 54-bit tag plus the 10-bit sidecar holding the LSBs of the parent counter.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MacField {
    pub mac54: u64,
    pub lsb10: u16,
}

impl MacField {
    pub fn new(mac54: u64, lsb10: u16) -> Self {
        debug_assert!(mac54 <= MAC_MASK && (lsb10 as u64) <= LSB_MASK);
        MacField { mac54, lsb10 }
    }

    pub fn pack(self) -> u64 {
        (self.mac54 << LSB_BITS) | self.lsb10 as u64
    }

    pub fn unpack(word: u64) -> Self {
        MacField { mac54: word >> LSB_BITS, lsb10: (word & LSB_MASK) as u16 }
    }
}

pub fn lsb10(counter: u64) -> u16 {
    (counter & LSB_MASK) as u16
}

/// Sidecar stored with a user-data line: the 7-bit minor in the low bits and
/// the three LSBs of the major counter above it.
pub fn data_lsb10(major: u64, minor: u8) -> u16 {
    ((minor as u16) & 0x7f) | (((major & 0x7) as u16) << 7)
}

/// Inverse of [`data_lsb10`]: `(major_lsb3, minor)`.
pub fn split_data_lsb10(lsb: u16) -> (u64, u8) {
    (((lsb >> 7) & 0x7) as u64, (lsb & 0x7f) as u8)
}

/// Rebuilds a counter from a stale copy and the live low bits found in a
/// child's sidecar. Sound as long as the live value is less than one window
/// (`1 << bits`) ahead of the stale one.
pub fn splice_lsbs(stale: u64, live_lsbs: u64, bits: u32) -> u64 {
    let mask = (1u64 << bits) - 1;
    let mut v = (stale & !mask) | (live_lsbs & mask);
    if (live_lsbs & mask) < (stale & mask) {
        v += 1 << bits;
    }
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DataLine {
    pub cipher: [u8; 64],
    pub mac: MacField,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterBlockContent {
    pub major: u64,
    pub minors: [u8; COUNTERS_PER_BLOCK],
    pub mac: MacField,
}

impl Default for CounterBlockContent {
    fn default() -> Self {
        CounterBlockContent { major: 0, minors: [0; COUNTERS_PER_BLOCK], mac: MacField::default() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SitNodeContent {
    pub counters: [u64; TREE_ARITY],
    pub mac: MacField,
}

/// Content of a metadata line, as stored in NVM or held in the cache.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeContent {
    Counter(CounterBlockContent),
    Sit(SitNodeContent),
}

impl NodeContent {
    pub fn empty_for(id: LineId) -> Self {
        if id.level == 0 {
            NodeContent::Counter(CounterBlockContent::default())
        } else {
            NodeContent::Sit(SitNodeContent::default())
        }
    }

    pub fn mac(&self) -> MacField {
        match self {
            NodeContent::Counter(c) => c.mac,
            NodeContent::Sit(s) => s.mac,
        }
    }

    pub fn set_mac(&mut self, mac: MacField) {
        match self {
            NodeContent::Counter(c) => c.mac = mac,
            NodeContent::Sit(s) => s.mac = mac,
        }
    }

    /// Counter this node holds for child `slot` (SIT nodes only).
    pub fn sit_counter(&self, slot: usize) -> u64 {
        match self {
            NodeContent::Sit(s) => s.counters[slot],
            NodeContent::Counter(_) => panic!("counter blocks hold split data counters"),
        }
    }

    pub fn compute_mac(&self, prf: &Prf, id: LineId, parent_counter: u64, lsb: u16) -> u64 {
        match self {
            NodeContent::Counter(c) => {
                prf.mac_counter_block(id, c.major, &c.minors, parent_counter, lsb)
            }
            NodeContent::Sit(s) => prf.mac_sit(id, &s.counters, parent_counter, lsb),
        }
    }

    /// Recomputes the MAC field against `parent_counter`.
    pub fn seal(&mut self, prf: &Prf, id: LineId, parent_counter: u64) {
        let lsb = lsb10(parent_counter);
        let mac = self.compute_mac(prf, id, parent_counter, lsb);
        self.set_mac(MacField::new(mac, lsb));
    }

    /// Recompute-and-compare against the parent's counter for this node.
    pub fn verify(&self, prf: &Prf, id: LineId, parent_counter: u64) -> bool {
        let m = self.mac();
        m.lsb10 == lsb10(parent_counter)
            && m.mac54 == self.compute_mac(prf, id, parent_counter, m.lsb10)
    }
}

impl DataLine {
    pub fn seal(prf: &Prf, addr: LineId, plaintext: &[u8; 64], major: u64, minor: u8) -> Self {
        let cipher = prf.xor_pad(plaintext, addr, major, minor);
        let lsb = data_lsb10(major, minor);
        let mac = prf.mac_data(&cipher, addr, major, minor, lsb);
        DataLine { cipher, mac: MacField::new(mac, lsb) }
    }

    pub fn verify(&self, prf: &Prf, addr: LineId, major: u64, minor: u8) -> bool {
        self.mac.lsb10 == data_lsb10(major, minor)
            && self.mac.mac54 == prf.mac_data(&self.cipher, addr, major, minor, self.mac.lsb10)
    }

    pub fn decrypt(&self, prf: &Prf, addr: LineId, major: u64, minor: u8) -> [u8; 64] {
        prf.xor_pad(&self.cipher, addr, major, minor)
    }
}

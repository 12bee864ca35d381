//! Workloads, trace files, run configuration, orchestration with crash
//! injection, statistics and the comparison report.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::baselines::SchemeId;
use crate::crypto::{Prf, DOMAIN_PLAINTEXT};
use crate::error::{Error, Result};
use crate::geometry::{LineId, LINE_BYTES, PAGE_BYTES};
use crate::recovery::{audit_image, recover, AuditSummary, RecoveryReport};
use crate::sit::{AwMode, Engine, EngineConfig, WriteStats};
use crate::tracker::AdrConfig;

pub const SCHEMA_VERSION: u32 = 1;
const TRACE_HEADER: &str = "#star-trace v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    R,
    W,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceEvent {
    pub op: Op,
    /// Byte address, line aligned.
    pub addr: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trace {
    pub mem_bytes: u64,
    pub events: Vec<TraceEvent>,
}

impl Trace {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{TRACE_HEADER} mem={}", self.mem_bytes)?;
        for e in &self.events {
            let op = if e.op == Op::W { 'W' } else { 'R' };
            writeln!(w, "{op} {:#x}", e.addr)?;
        }
        Ok(())
    }

    pub fn parse(r: impl BufRead) -> Result<Trace> {
        let mut lines = r.lines();
        let perr = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };
        let header = lines.next().ok_or_else(|| perr(1, "empty trace"))??;
        let mem = header
            .strip_prefix(TRACE_HEADER)
            .and_then(|rest| rest.trim().strip_prefix("mem="))
            .and_then(|m| m.parse::<u64>().ok())
            .ok_or_else(|| perr(1, "expected `#star-trace v1 mem=<bytes>`"))?;
        let mut events = Vec::new();
        for (i, line) in lines.enumerate() {
            let n = i + 2;
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            let (op, addr) = t.split_once(' ').ok_or_else(|| perr(n, "expected `<R|W> 0x<hex>`"))?;
            let op = match op {
                "R" => Op::R,
                "W" => Op::W,
                _ => return Err(perr(n, "operation must be R or W")),
            };
            let hex = addr.trim().strip_prefix("0x").ok_or_else(|| perr(n, "address needs 0x"))?;
            let addr = u64::from_str_radix(hex, 16).map_err(|_| perr(n, "bad hex address"))?;
            if addr % LINE_BYTES != 0 {
                return Err(perr(n, "address is not 64-byte aligned"));
            }
            if addr >= mem {
                return Err(perr(n, "address outside the memory size"));
            }
            events.push(TraceEvent { op, addr });
        }
        Ok(Trace { mem_bytes: mem, events })
    }

    pub fn load(path: &Path) -> Result<Trace> {
        let f = std::fs::File::open(path)?;
        Self::parse(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn writes(&self) -> usize {
        self.events.iter().filter(|e| e.op == Op::W).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Workload {
    Array,
    Btree,
    Hash,
    Queue,
    Rbtree,
    Uniform,
    Zipf,
}

impl Workload {
    pub const ALL: [Workload; 7] = [
        Workload::Array,
        Workload::Btree,
        Workload::Hash,
        Workload::Queue,
        Workload::Rbtree,
        Workload::Uniform,
        Workload::Zipf,
    ];
}

impl fmt::Display for Workload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Workload::Array => "array",
            Workload::Btree => "btree",
            Workload::Hash => "hash",
            Workload::Queue => "queue",
            Workload::Rbtree => "rbtree",
            Workload::Uniform => "uniform",
            Workload::Zipf => "zipf",
        })
    }
}

impl FromStr for Workload {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Workload::ALL
            .into_iter()
            .find(|w| w.to_string() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownWorkload(s.to_string()))
    }
}

pub const DEFAULT_ZIPF_S: f64 = 1.2;

struct Gen {
    rng: ChaCha8Rng,
    lines: u64,
    events: Vec<TraceEvent>,
}

impl Gen {
    fn r(&mut self, line: u64) {
        self.events.push(TraceEvent { op: Op::R, addr: (line % self.lines) * LINE_BYTES });
    }

    fn w(&mut self, line: u64) {
        self.events.push(TraceEvent { op: Op::W, addr: (line % self.lines) * LINE_BYTES });
    }
}

fn check_region(region_bytes: u64, mem_bytes: u64) -> Result<()> {
    if region_bytes == 0 || region_bytes % PAGE_BYTES != 0 || region_bytes > mem_bytes {
        return Err(Error::Config(format!(
            "region of {region_bytes} bytes must be whole pages within {mem_bytes} bytes"
        )));
    }
    Ok(())
}

/// Deterministic address-level trace for `workload` over the first
/// `region_bytes` of memory.
pub fn gen_workload(
    workload: Workload,
    region_bytes: u64,
    mem_bytes: u64,
    n_ops: usize,
    seed: u64,
) -> Result<Trace> {
    if workload == Workload::Zipf {
        return gen_zipf(region_bytes, mem_bytes, n_ops, seed, DEFAULT_ZIPF_S);
    }
    check_region(region_bytes, mem_bytes)?;
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed ^ (workload as u64).wrapping_mul(0x9e37_79b9)),
        lines: region_bytes / LINE_BYTES,
        events: Vec::new(),
    };
    match workload {
        Workload::Array => gen_array(&mut g, n_ops),
        Workload::Queue => gen_queue(&mut g, n_ops),
        Workload::Hash => gen_hash(&mut g, n_ops),
        Workload::Btree => gen_btree(&mut g, n_ops),
        Workload::Rbtree => gen_rbtree(&mut g, n_ops),
        Workload::Uniform => {
            for _ in 0..n_ops {
                let l = g.rng.random_range(0..g.lines);
                if g.rng.random_bool(0.6) {
                    g.w(l)
                } else {
                    g.r(l)
                }
            }
        }
        Workload::Zipf => unreachable!(),
    }
    Ok(Trace { mem_bytes, events: g.events })
}

/// Page popularity follows Zipf(`s`); popular pages are spread over the
/// region by a fixed odd-multiplier permutation.
pub fn gen_zipf(region_bytes: u64, mem_bytes: u64, n_ops: usize, seed: u64, s: f64) -> Result<Trace> {
    check_region(region_bytes, mem_bytes)?;
    let pages = region_bytes / PAGE_BYTES;
    let zipf = Zipf::new(pages as f64, s).map_err(|e| Error::Config(format!("zipf: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a69_7066);
    let lines_per_page = PAGE_BYTES / LINE_BYTES;
    let mut events = Vec::with_capacity(n_ops);
    for _ in 0..n_ops {
        let rank = zipf.sample(&mut rng) as u64 - 1;
        let page = rank.wrapping_mul(0x9e37_79b9_7f4a_7c15 | 1) % pages;
        let line = page * lines_per_page + rng.random_range(0..lines_per_page);
        let op = if rng.random_bool(0.7) { Op::W } else { Op::R };
        events.push(TraceEvent { op, addr: line * LINE_BYTES });
    }
    Ok(Trace { mem_bytes, events })
}

/// Sequential initialization, then random swaps of two entries.
fn gen_array(g: &mut Gen, n_ops: usize) {
    for l in 0..g.lines {
        g.w(l);
    }
    for _ in 0..n_ops {
        let i = g.rng.random_range(0..g.lines);
        let j = g.rng.random_range(0..g.lines);
        g.r(i);
        g.r(j);
        g.w(i);
        g.w(j);
    }
}

/// Ring buffer with the head/tail word in line 0.
fn gen_queue(g: &mut Gen, n_ops: usize) {
    let cap = g.lines - 1;
    let (mut head, mut len) = (0u64, 0u64);
    for _ in 0..n_ops {
        let enqueue = len == 0 || (len < cap && g.rng.random_bool(0.55));
        if enqueue {
            g.w(1 + (head + len) % cap);
            len += 1;
        } else {
            g.r(1 + head);
            head = (head + 1) % cap;
            len -= 1;
        }
        g.w(0);
    }
}

/// Open addressing with linear probing; 30% of operations are lookups.
fn gen_hash(g: &mut Gen, n_ops: usize) {
    let buckets = g.lines;
    let mut used = vec![false; buckets as usize];
    let mut load = 0u64;
    for _ in 0..n_ops {
        let mut b = g.rng.random_range(0..buckets);
        let lookup = g.rng.random_bool(0.3);
        g.r(b);
        let mut probes = 0;
        while used[b as usize] && probes < 16 {
            b = (b + 1) % buckets;
            g.r(b);
            probes += 1;
        }
        if !lookup {
            g.w(b);
            if !used[b as usize] {
                used[b as usize] = true;
                load += 1;
            }
            if load * 10 > buckets * 7 {
                used.iter_mut().for_each(|u| *u = false);
                load = 0;
            }
        }
    }
}

/// B+tree insertions: 256-byte nodes of 16 entries, internal nodes in the
/// first eighth of the region, leaves allocated in creation order after it.
fn gen_btree(g: &mut Gen, n_ops: usize) {
    const NODE_LINES: u64 = 4;
    const FANOUT: u64 = 16;
    let internal_lines = (g.lines / 8).max(NODE_LINES);
    let internal_nodes = internal_lines / NODE_LINES;
    // (lowest key, entry count, node id)
    let mut leaves: Vec<(u64, u64, u64)> = vec![(0, 0, 0)];
    let mut next_node = 1u64;
    let leaf_line = |node: u64, k: u64| internal_lines + node * NODE_LINES + k;
    for _ in 0..n_ops {
        let key: u64 = g.rng.random();
        let pos = leaves.partition_point(|l| l.0 <= key).saturating_sub(1);
        let mut span = 1u64;
        let mut depth = 0;
        while span < leaves.len() as u64 {
            span *= FANOUT;
            depth += 1;
        }
        for lvl in (1..=depth).rev() {
            let idx = pos as u64 / FANOUT.pow(lvl);
            let node = (idx * 7919 + lvl as u64 * 104_729) % internal_nodes;
            g.r(node * NODE_LINES);
            g.r(node * NODE_LINES + 1 + idx % 3);
        }
        let (_, count, node) = leaves[pos];
        let slot_line = g.rng.random_range(0..=count) / 4;
        g.r(leaf_line(node, slot_line));
        for k in slot_line..=(count / 4).min(NODE_LINES - 1) {
            g.w(leaf_line(node, k));
        }
        leaves[pos].1 += 1;
        if leaves[pos].1 == FANOUT {
            let fresh = next_node;
            next_node += 1;
            let lo = leaves[pos].0;
            let mid = lo / 2 + key / 2 + 1;
            leaves[pos].1 = FANOUT / 2;
            leaves.insert(pos + 1, (mid.max(lo + 1), FANOUT / 2, fresh));
            for k in 0..NODE_LINES {
                g.w(leaf_line(fresh, k));
            }
            g.w(leaf_line(node, 2));
            g.w(leaf_line(node, 3));
            let parent = (pos as u64 / FANOUT * 7919 + 104_729) % internal_nodes;
            g.w(parent * NODE_LINES + 1);
        }
    }
}

/// Red-black insertions approximated by a random-key binary search tree:
/// one line per node, nodes placed in allocation order, the search path is
/// read, and recoloring or rotation writes a few path nodes.
fn gen_rbtree(g: &mut Gen, n_ops: usize) {
    let mut keys: Vec<u64> = Vec::with_capacity(n_ops);
    let mut kids: Vec<[u32; 2]> = Vec::with_capacity(n_ops);
    let mut path = Vec::new();
    for _ in 0..n_ops {
        let key: u64 = g.rng.random();
        let id = keys.len() as u32;
        path.clear();
        if !keys.is_empty() {
            let mut cur = 0u32;
            loop {
                path.push(cur);
                g.r(cur as u64);
                let side = (key > keys[cur as usize]) as usize;
                let next = kids[cur as usize][side];
                if next == u32::MAX {
                    kids[cur as usize][side] = id;
                    break;
                }
                cur = next;
            }
        }
        keys.push(key);
        kids.push([u32::MAX; 2]);
        g.w(id as u64);
        if let Some(&p) = path.last() {
            g.w(p as u64);
            let mut up = path.len() - 1;
            while up >= 2 && g.rng.random_bool(0.5) {
                up -= 2;
                g.w(path[up] as u64);
                if g.rng.random_bool(0.3) {
                    g.w(path[up + 1] as u64);
                    break;
                }
            }
        }
    }
}

/// Plaintext written by event `index`; the differential oracle replays the
/// same function.
pub fn plaintext_for(seed: u64, index: u64) -> [u8; 64] {
    let prf = Prf::from_seed(seed ^ 0x5eed_0f_da7a);
    let mut out = [0u8; 64];
    for (j, c) in out.chunks_exact_mut(8).enumerate() {
        c.copy_from_slice(&prf.hash_words(DOMAIN_PLAINTEXT, &[index, j as u64]).to_le_bytes());
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrashPlan {
    #[default]
    None,
    /// Crash after each listed number of events.
    At(Vec<u64>),
    Random { count: usize, seed: u64 },
}

impl CrashPlan {
    pub fn points(&self, n_events: u64) -> Vec<u64> {
        match self {
            CrashPlan::None => Vec::new(),
            CrashPlan::At(v) => {
                let mut v: Vec<u64> = v.iter().copied().filter(|&k| k <= n_events).collect();
                v.sort_unstable();
                v.dedup();
                v
            }
            CrashPlan::Random { count, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut v: Vec<u64> =
                    (0..*count).map(|_| rng.random_range(1..=n_events.max(1))).collect();
                v.sort_unstable();
                v.dedup();
                v
            }
        }
    }
}

/// Flat `key=value` run configuration; `#` starts a comment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub crash: CrashPlan,
    pub mem_explicit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            engine: EngineConfig::new(16 << 20, SchemeId::Star(AwMode::AwH)),
            crash: CrashPlan::None,
            mem_explicit: false,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<u64> {
            let v = v.replace('_', "");
            let (digits, mul) = match v.to_ascii_lowercase() {
                s if s.ends_with("gib") => (s[..s.len() - 3].to_string(), 1u64 << 30),
                s if s.ends_with("mib") => (s[..s.len() - 3].to_string(), 1 << 20),
                s if s.ends_with("kib") => (s[..s.len() - 3].to_string(), 1 << 10),
                s => (s, 1),
            };
            digits
                .parse::<u64>()
                .map(|d| d * mul)
                .map_err(|_| Error::Config(format!("`{v}` is not a number")))
        };
        let e = &mut self.engine;
        match key {
            "mem_bytes" => {
                e.mem_bytes = num(value)?;
                self.mem_explicit = true;
            }
            "scheme" => {
                let parsed: SchemeId = value.parse()?;
                // a bare `star` keeps an aw_mode set earlier
                e.scheme = match (parsed, e.scheme) {
                    (SchemeId::Star(_), SchemeId::Star(prev)) if value.eq_ignore_ascii_case("star") => {
                        SchemeId::Star(prev)
                    }
                    (s, _) => s,
                };
            }
            "aw_mode" => {
                let m: AwMode = value.parse()?;
                if let SchemeId::Star(_) = e.scheme {
                    e.scheme = SchemeId::Star(m);
                } else {
                    return Err(Error::Config("aw_mode applies to the star scheme only".into()));
                }
            }
            "counter_cache_bytes" => e.cache.counter_cache_bytes = num(value)?,
            "sit_cache_bytes" => e.cache.sit_cache_bytes = num(value)?,
            "ways" => e.cache.ways = num(value)? as usize,
            "adr_lines" => {
                let l2 = e.adr.l2_lines;
                e.adr = AdrConfig::with_capacity(num(value)? as usize)?;
                if l2 != AdrConfig::default().l2_lines {
                    e.adr = AdrConfig { l1_lines: e.adr.capacity() - l2, l2_lines: l2 };
                }
            }
            "adr_l2_lines" => {
                let total = e.adr.capacity();
                let l2 = num(value)? as usize;
                if l2 == 0 || l2 >= total {
                    return Err(Error::Config("adr_l2_lines must leave room for L1 lines".into()));
                }
                e.adr = AdrConfig { l1_lines: total - l2, l2_lines: l2 };
            }
            "seed" => e.seed = num(value)?,
            "crash_at" => {
                let pts = value.split(',').map(|p| num(p.trim())).collect::<Result<Vec<_>>>()?;
                self.crash = CrashPlan::At(pts);
            }
            "crash_random" => {
                self.crash = CrashPlan::Random { count: num(value)? as usize, seed: e.seed };
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrashRecord {
    pub event_index: u64,
    pub dirty_lines: u64,
    pub dirty_ratio: f64,
    pub recovery: Option<RecoveryReport>,
    pub audit: Option<AuditSummary>,
    pub audit_error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub schema_version: u32,
    pub label: String,
    pub scheme: SchemeId,
    pub mem_bytes: u64,
    pub events: u64,
    pub writes: WriteStats,
    pub total_writes: u64,
    pub reads: u64,
    pub dirty_ratio_end: f64,
    pub dirty_ratio_at_crash: Option<f64>,
    pub bitmap_hit_ratio: Option<f64>,
    pub bitmap_transitions: u64,
    pub crash_points: u64,
    pub recovery_failures: u64,
    pub recovery: Option<RecoveryReport>,
}

impl Stats {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v.get("schema_version").and_then(|s| s.as_u64()).unwrap_or(0) as u32;
        if found != SCHEMA_VERSION {
            return Err(Error::SchemaVersion { found, expected: SCHEMA_VERSION });
        }
        Ok(serde_json::from_value(v)?)
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub stats: Stats,
    pub crashes: Vec<CrashRecord>,
    pub engine: Engine,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Audit the recovered image against the differential oracle.
    pub audit: bool,
    /// Shadow-validate engine invariants after every event.
    pub shadow: bool,
}

pub fn apply_event(engine: &mut Engine, seed: u64, index: u64, ev: &TraceEvent) -> Result<()> {
    let addr = LineId::data(ev.addr / LINE_BYTES);
    match ev.op {
        Op::W => engine.write_data(addr, &plaintext_for(seed, index)).map(drop),
        Op::R => engine.read_data(addr).map(drop),
    }
}

pub fn run(cfg: &EngineConfig, trace: &Trace, plan: &CrashPlan) -> Result<RunOutcome> {
    run_with(cfg, trace, plan, RunOptions::default())
}

pub fn run_with(
    cfg: &EngineConfig,
    trace: &Trace,
    plan: &CrashPlan,
    opts: RunOptions,
) -> Result<RunOutcome> {
    if trace.mem_bytes > cfg.mem_bytes {
        return Err(Error::Config(format!(
            "trace needs {} bytes of memory, config has {}",
            trace.mem_bytes, cfg.mem_bytes
        )));
    }
    let mut engine = Engine::new(cfg.clone())?;
    engine.set_shadow_validation(opts.shadow);
    let points = plan.points(trace.events.len() as u64);
    let mut next = points.iter().peekable();
    let mut oracle: HashMap<u64, [u8; 64]> = HashMap::new();
    let mut crashes = Vec::new();
    for (i, ev) in trace.events.iter().enumerate() {
        apply_event(&mut engine, cfg.seed, i as u64, ev)?;
        if opts.audit && ev.op == Op::W {
            oracle.insert(ev.addr / LINE_BYTES, plaintext_for(cfg.seed, i as u64));
        }
        while next.peek().is_some_and(|&&k| k == i as u64 + 1) {
            next.next();
            crashes.push(crash_point(&engine, &oracle, opts.audit)?);
        }
    }
    let w = engine.write_stats();
    let last = crashes.last();
    let stats = Stats {
        schema_version: SCHEMA_VERSION,
        label: String::new(),
        scheme: cfg.scheme,
        mem_bytes: cfg.mem_bytes,
        events: engine.events(),
        writes: w,
        total_writes: w.total(),
        reads: engine.reads(),
        dirty_ratio_end: engine.dirty_ratio(),
        dirty_ratio_at_crash: last.map(|c| c.dirty_ratio),
        bitmap_hit_ratio: engine.tracker_stats().map(|t| t.hit_ratio()),
        bitmap_transitions: engine.tracker_stats().map_or(0, |t| t.transitions),
        crash_points: crashes.len() as u64,
        recovery_failures: crashes
            .iter()
            .filter(|c| {
                c.audit_error.is_some() || c.recovery.as_ref().is_some_and(|r| !r.verified())
            })
            .count() as u64,
        recovery: last.and_then(|c| c.recovery.clone()),
    };
    Ok(RunOutcome { stats, crashes, engine })
}

fn crash_point(engine: &Engine, oracle: &HashMap<u64, [u8; 64]>, audit: bool) -> Result<CrashRecord> {
    let snap = engine.crash();
    let mut rec = CrashRecord {
        event_index: snap.event_index,
        dirty_lines: engine.cache().dirty_count() as u64,
        dirty_ratio: engine.dirty_ratio(),
        recovery: None,
        audit: None,
        audit_error: None,
    };
    if !snap.config.scheme.is_recoverable() {
        return Ok(rec);
    }
    let recovered = recover(&snap)?;
    if audit {
        if let Some(img) = &recovered.image {
            let want = |i: u64| oracle.get(&i).copied().unwrap_or([0; 64]);
            match audit_image(img, engine.geometry(), engine.prf(), recovered.root_counter, &want) {
                Ok(s) => rec.audit = Some(s),
                Err(e) => rec.audit_error = Some(e.to_string()),
            }
        } else if recovered.report.verified() {
            // accounting-only scheme: nothing to audit
        } else {
            rec.audit_error = Some("recovery rejected an honest snapshot".into());
        }
    }
    rec.recovery = Some(recovered.report);
    Ok(rec)
}

/// Crash after `k` events, recover, resume from the recovered image and
/// replay the rest. Returns true when every written line then reads back
/// the same plaintext as in an uninterrupted run.
pub fn resume_matches_uncrashed(cfg: &EngineConfig, trace: &Trace, k: usize) -> Result<bool> {
    let mut engine = Engine::new(cfg.clone())?;
    for (i, ev) in trace.events[..k].iter().enumerate() {
        apply_event(&mut engine, cfg.seed, i as u64, ev)?;
    }
    let recovered = recover(&engine.crash())?;
    let Some(img) = recovered.image else { return Ok(false) };
    let mut resumed = Engine::resume(cfg.clone(), img, recovered.root_counter)?;
    let mut straight = Engine::new(cfg.clone())?;
    for (i, ev) in trace.events.iter().enumerate() {
        apply_event(&mut straight, cfg.seed, i as u64, ev)?;
        if i >= k {
            apply_event(&mut resumed, cfg.seed, i as u64, ev)?;
        }
    }
    let mut written: Vec<u64> =
        trace.events.iter().filter(|e| e.op == Op::W).map(|e| e.addr / LINE_BYTES).collect();
    written.sort_unstable();
    written.dedup();
    for l in written {
        if resumed.read_data(LineId::data(l))? != straight.read_data(LineId::data(l))? {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Accesses random lines until the cache holds at least `target` dirty
/// lines, holding both partitions near the same dirty ratio: a write while
/// the counter partition is below it, a read otherwise (reads evict dirty
/// counter blocks, which dirties their parents). Returns the events issued.
pub fn drive_to_dirty(
    engine: &mut Engine,
    target: usize,
    seed: u64,
    max_events: u64,
) -> Result<Vec<TraceEvent>> {
    let layout = engine.cache().layout();
    let cap = layout.capacity_lines();
    if target > cap {
        return Err(Error::Config(format!("{target} dirty lines exceed a {cap}-line cache")));
    }
    let counter_target = target * layout.counter_sets() / layout.sets();
    let lines = engine.geometry().data_lines();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::new();
    while engine.cache().dirty_count() < target {
        if events.len() as u64 >= max_events {
            return Err(Error::Config(format!(
                "gave up at {} of {target} dirty lines",
                engine.cache().dirty_count()
            )));
        }
        let op = if engine.cache().dirty_by_partition().0 < counter_target { Op::W } else { Op::R };
        let ev = TraceEvent { op, addr: rng.random_range(0..lines) * LINE_BYTES };
        apply_event(engine, seed, events.len() as u64, &ev)?;
        events.push(ev);
    }
    Ok(events)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub scheme: SchemeId,
    pub events: u64,
    pub total_writes: u64,
    /// Total writes over the WB run with the same label.
    pub write_ratio: Option<f64>,
    pub writes: WriteStats,
    pub bitmap_hit_ratio: Option<f64>,
    pub recovery_reads: Option<u64>,
    pub recovery_time_ns: Option<u64>,
    pub verdict: Option<String>,
}

pub fn report(stats: &[Stats]) -> Result<Vec<ReportRow>> {
    if stats.is_empty() {
        return Err(Error::Config("report needs at least one stats file".into()));
    }
    let mut wb: BTreeMap<&str, u64> = BTreeMap::new();
    for s in stats.iter().filter(|s| s.scheme == SchemeId::Wb) {
        wb.insert(&s.label, s.total_writes);
    }
    Ok(stats
        .iter()
        .map(|s| ReportRow {
            label: s.label.clone(),
            scheme: s.scheme,
            events: s.events,
            total_writes: s.total_writes,
            write_ratio: wb
                .get(s.label.as_str())
                .filter(|&&b| b > 0)
                .map(|&b| s.total_writes as f64 / b as f64),
            writes: s.writes,
            bitmap_hit_ratio: s.bitmap_hit_ratio,
            recovery_reads: s.recovery.as_ref().map(|r| r.reads),
            recovery_time_ns: s.recovery.as_ref().map(|r| r.time_ns),
            verdict: s.recovery.as_ref().map(|r| {
                if r.verified() { "verified" } else { "root_mismatch" }.to_string()
            }),
        })
        .collect())
}

pub const CSV_COLUMNS: &str = "label,scheme,events,total_writes,write_ratio,data,metadata_evict,\
ahead_write,bitmap_spill,st_block,strict_branch,reencrypt,lsb_flush,bitmap_hit_ratio,\
recovery_reads,recovery_time_ns,verdict";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let opt = |v: Option<String>| v.unwrap_or_default();
    let mut out = String::from(CSV_COLUMNS);
    out.push('\n');
    for r in rows {
        let w = &r.writes;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.label,
            r.scheme,
            r.events,
            r.total_writes,
            opt(r.write_ratio.map(|x| format!("{x:.4}"))),
            w.data,
            w.metadata_evict,
            w.ahead_write,
            w.bitmap_spill,
            w.st_block,
            w.strict_branch,
            w.reencrypt,
            w.lsb_flush,
            opt(r.bitmap_hit_ratio.map(|x| format!("{x:.4}"))),
            opt(r.recovery_reads.map(|x| x.to_string())),
            opt(r.recovery_time_ns.map(|x| x.to_string())),
            opt(r.verdict.clone()),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CacheConfig;

    #[test]
    fn trace_round_trips_through_text() {
        let t = gen_workload(Workload::Hash, 1 << 20, 1 << 20, 300, 4).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert!(buf.starts_with(b"#star-trace v1 mem=1048576\n"));
        assert_eq!(Trace::parse(&buf[..]).unwrap(), t);
    }

    #[test]
    fn malformed_lines_report_their_line_number() {
        let bad = "#star-trace v1 mem=4096\nW 0x40\nX 0x0\n";
        match Trace::parse(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        for bad in ["#star-trace v1 mem=4096\nW 0x41\n", "#star-trace v1 mem=4096\nR 0x1000\n"] {
            assert!(matches!(Trace::parse(bad.as_bytes()), Err(Error::Parse { line: 2, .. })));
        }
        assert!(matches!(Trace::parse("W 0x0\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn array_without_ops_is_sequential_initialization() {
        let t = gen_workload(Workload::Array, 8192, 8192, 0, 1).unwrap();
        assert_eq!(t.events.len(), 128);
        for (i, e) in t.events.iter().enumerate() {
            assert_eq!(*e, TraceEvent { op: Op::W, addr: i as u64 * 64 });
        }
    }

    #[test]
    fn generation_is_deterministic_and_in_range() {
        for w in Workload::ALL {
            let a = gen_workload(w, 1 << 20, 2 << 20, 2000, 7).unwrap();
            let b = gen_workload(w, 1 << 20, 2 << 20, 2000, 7).unwrap();
            assert_eq!(a, b, "{w}");
            assert!(a.events.iter().all(|e| e.addr < 1 << 20 && e.addr % 64 == 0));
            assert!(a.writes() > 0, "{w}");
        }
        assert!(matches!("splay".parse::<Workload>(), Err(Error::UnknownWorkload(_))));
    }

    #[test]
    fn config_parses_and_overrides() {
        let c = RunConfig::parse(
            "# comment\nmem_bytes = 8MiB\nscheme=star\naw_mode=aw-m\nadr_lines=8\nseed=3\ncrash_random=5\n",
        )
        .unwrap();
        assert_eq!(c.engine.mem_bytes, 8 << 20);
        assert_eq!(c.engine.scheme, SchemeId::Star(AwMode::AwM));
        assert_eq!(c.engine.adr, AdrConfig { l1_lines: 7, l2_lines: 1 });
        assert_eq!(c.crash, CrashPlan::Random { count: 5, seed: 3 });
        assert!(matches!(RunConfig::parse("bogus=1"), Err(Error::Parse { line: 1, .. })));
        assert!(RunConfig::parse("scheme=wb\naw_mode=aw-l").is_err());
    }

    fn small() -> EngineConfig {
        EngineConfig {
            mem_bytes: 2 << 20,
            cache: CacheConfig::symmetric(4096),
            scheme: SchemeId::Wb,
            adr: AdrConfig::default(),
            seed: 2,
        }
    }

    #[test]
    fn runs_are_bit_identical() {
        let t = gen_workload(Workload::Uniform, 2 << 20, 2 << 20, 3000, 1).unwrap();
        let mut cfg = small();
        cfg.scheme = SchemeId::Star(AwMode::AwM);
        let plan = CrashPlan::Random { count: 3, seed: 1 };
        let a = run(&cfg, &t, &plan).unwrap().stats.to_json().unwrap();
        let b = run(&cfg, &t, &plan).unwrap().stats.to_json().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wb_run_has_no_recovery_traffic() {
        let t = gen_workload(Workload::Zipf, 2 << 20, 2 << 20, 3000, 1).unwrap();
        let s = run(&small(), &t, &CrashPlan::None).unwrap().stats;
        assert_eq!(s.writes.ahead_write + s.writes.bitmap_spill + s.writes.st_block, 0);
        assert_eq!(s.total_writes, s.writes.total());
    }

    #[test]
    fn crash_then_resume_matches_uncrashed_run() {
        let t = gen_workload(Workload::Btree, 2 << 20, 2 << 20, 1500, 5).unwrap();
        for m in AwMode::ALL {
            let mut cfg = small();
            cfg.scheme = SchemeId::Star(m);
            assert!(resume_matches_uncrashed(&cfg, &t, t.events.len() / 2).unwrap(), "{m}");
        }
    }

    #[test]
    fn stats_schema_is_checked() {
        let t = gen_workload(Workload::Queue, 1 << 20, 2 << 20, 200, 1).unwrap();
        let s = run(&small(), &t, &CrashPlan::None).unwrap().stats;
        let j = s.to_json().unwrap();
        assert_eq!(Stats::from_json(&j).unwrap(), s);
        let bumped = j.replace("\"schema_version\": 1", "\"schema_version\": 9");
        assert!(matches!(Stats::from_json(&bumped), Err(Error::SchemaVersion { found: 9, .. })));
    }

    #[test]
    fn report_normalizes_to_wb() {
        let t = gen_workload(Workload::Array, 1 << 20, 2 << 20, 2000, 1).unwrap();
        let wb = run(&small(), &t, &CrashPlan::None).unwrap().stats;
        let rows = report(std::slice::from_ref(&wb)).unwrap();
        assert_eq!(rows[0].write_ratio, Some(1.0));
        let mut cfg = small();
        cfg.scheme = SchemeId::Anubis;
        let an = run(&cfg, &t, &CrashPlan::None).unwrap().stats;
        let rows = report(&[wb, an]).unwrap();
        assert_eq!(rows[1].write_ratio, Some(2.0));
        let csv = report_csv(&rows);
        assert_eq!(csv.lines().next().unwrap(), CSV_COLUMNS);
        assert_eq!(csv.lines().count(), 3);
        assert!(report(&[]).is_err());
    }
}

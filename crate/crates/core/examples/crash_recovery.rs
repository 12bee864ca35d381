//! Crash a run at random points, recover each snapshot, and audit the
//! recovered image line by line against a differential oracle.
//!
//!     cargo run --release --example crash_recovery [workload] [aw-mode] [crashes]

use std::time::Instant;

use star_sim::cache::CacheConfig;
use star_sim::harness::{gen_workload, run_with, CrashPlan, RunOptions, Workload};
use star_sim::{AwMode, EngineConfig, SchemeId};

fn main() -> star_sim::Result<()> {
    let mut args = std::env::args().skip(1);
    let workload: Workload = args.next().as_deref().unwrap_or("btree").parse()?;
    let mode: AwMode = args.next().as_deref().unwrap_or("aw-m").parse()?;
    let crashes: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);

    let region = 16 << 20;
    let mut cfg = EngineConfig::new(region, SchemeId::Star(mode));
    cfg.cache = CacheConfig::symmetric(32 << 10);
    let trace = gen_workload(workload, region, region, 30_000, 7)?;

    let t = Instant::now();
    let plan = CrashPlan::Random { count: crashes, seed: 11 };
    let out = run_with(&cfg, &trace, &plan, RunOptions { audit: true, shadow: false })?;
    for c in &out.crashes {
        let r = c.recovery.as_ref().expect("star schemes are recoverable");
        println!(
            "crash @{:>8}  dirty {:>4}  restored {:>4}  reads {:>6}  {:>8.1} us  {}",
            c.event_index,
            c.dirty_lines,
            r.restored.len(),
            r.reads,
            r.time_ns as f64 / 1e3,
            match &c.audit_error {
                Some(e) => format!("AUDIT FAILED: {e}"),
                None if r.verified() => "verified, image audited".to_string(),
                None => "ROOT MISMATCH".to_string(),
            }
        );
    }
    println!(
        "{} events, {} crash points, {} failures, {:.2?}",
        trace.events.len(),
        out.crashes.len(),
        out.stats.recovery_failures,
        t.elapsed()
    );
    Ok(())
}

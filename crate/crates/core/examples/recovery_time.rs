//! Modeled recovery time of each scheme with a 4 MiB metadata cache driven
//! to a chosen dirty ratio (100 ns per NVM line read).
//!
//!     cargo run --release --example recovery_time [dirty-ratio] [mem-MiB]

use star_sim::baselines::recover_anubis;
use star_sim::cache::CacheConfig;
use star_sim::harness::{apply_event, drive_to_dirty, Trace};
use star_sim::recovery::recover;
use star_sim::{AwMode, Engine, EngineConfig, SchemeId};

fn main() -> star_sim::Result<()> {
    let mut args = std::env::args().skip(1);
    let ratio: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.62);
    let mib: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1024);
    let mut cfg = EngineConfig::new(mib << 20, SchemeId::Star(AwMode::AwH));
    cfg.cache = CacheConfig::symmetric(2 << 20);
    let target = (ratio * cfg.cache.total_lines() as f64).round() as usize;

    let mut driver = Engine::new(cfg.clone())?;
    let events = drive_to_dirty(&mut driver, target, 3, 5_000_000)?;
    let (cb, sit) = driver.cache().dirty_by_partition();
    println!("{} events -> {} dirty lines ({cb} counter blocks, {sit} SIT nodes)", events.len(), cb + sit);
    let trace = Trace { mem_bytes: cfg.mem_bytes, events };

    for mode in AwMode::ALL {
        let c = EngineConfig { scheme: SchemeId::Star(mode), ..cfg.clone() };
        let mut e = Engine::new(c)?;
        for (i, ev) in trace.events.iter().enumerate() {
            apply_event(&mut e, 3, i as u64, ev)?;
        }
        let r = recover(&e.crash())?.report;
        println!(
            "star-{mode}: restored {:>6}  fresh {:>6}  reads {:>7}  {:.4} s  {:?}",
            r.restored.len(),
            r.fresh_lines,
            r.reads,
            r.time_secs(),
            r.verdict
        );
    }
    let anubis = recover_anubis(&Engine::new(EngineConfig { scheme: SchemeId::Anubis, ..cfg })?.crash());
    println!("anubis:    reads {:>7}  {:.4} s", anubis.reads, anubis.time_secs());
    Ok(())
}

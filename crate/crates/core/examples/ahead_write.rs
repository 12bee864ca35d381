//! How the start level changes where metadata writes come from: the same
//! uniform trace under each ahead-write mode, broken down by write cause.
//!
//!     cargo run --release --example ahead_write [ops]

use star_sim::baselines::run_scheme;
use star_sim::cache::CacheConfig;
use star_sim::harness::{gen_workload, Workload};
use star_sim::{AwMode, EngineConfig, Geometry, SchemeId};

fn main() -> star_sim::Result<()> {
    let ops: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(50_000);
    let region = 16 << 20;
    let mut base = EngineConfig::new(region, SchemeId::Wb);
    base.cache = CacheConfig::symmetric(32 << 10);
    let trace = gen_workload(Workload::Uniform, region, region, ops, 2)?;
    let g = Geometry::new(region)?;

    println!(
        "{:<10} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9}",
        "scheme", "start", "data", "evict", "ahead", "bitmap", "lsb", "total"
    );
    for s in [SchemeId::Wb, SchemeId::Star(AwMode::AwH), SchemeId::Star(AwMode::AwM), SchemeId::Star(AwMode::AwL)] {
        let st = run_scheme(&base, &trace, s)?;
        let start = match s {
            SchemeId::Star(m) => m.start_level(&g).to_string(),
            _ => "-".into(),
        };
        let w = st.writes;
        println!(
            "{:<10} {:>6} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9}",
            s.to_string(),
            start,
            w.data,
            w.metadata_evict,
            w.ahead_write,
            w.bitmap_spill,
            w.lsb_flush,
            st.total_writes
        );
    }
    Ok(())
}

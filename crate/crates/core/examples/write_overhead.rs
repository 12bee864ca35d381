//! Total NVM writes of every scheme on the seven workloads, normalized to
//! the write-back baseline.
//!
//!     cargo run --release --example write_overhead [ops]

use star_sim::baselines::run_scheme;
use star_sim::cache::CacheConfig;
use star_sim::harness::{gen_workload, Workload};
use star_sim::{EngineConfig, SchemeId};

fn main() -> star_sim::Result<()> {
    let ops: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(100_000);
    let region = 16 << 20;
    let mut base = EngineConfig::new(region, SchemeId::Wb);
    base.cache = CacheConfig::symmetric(32 << 10);

    let mut sums = vec![0u64; SchemeId::ALL.len()];
    print!("{:<8}", "workload");
    for s in SchemeId::ALL {
        print!("{:>12}", s.to_string());
    }
    println!();
    for w in Workload::ALL {
        let trace = gen_workload(w, region, region, ops, 1)?;
        let totals: Vec<u64> = SchemeId::ALL
            .iter()
            .map(|&s| run_scheme(&base, &trace, s).map(|st| st.total_writes))
            .collect::<star_sim::Result<_>>()?;
        print!("{:<8}", w.to_string());
        for (i, t) in totals.iter().enumerate() {
            sums[i] += t;
            print!("{:>12.3}", *t as f64 / totals[0] as f64);
        }
        println!("   ({} events, wb={})", trace.events.len(), totals[0]);
    }
    print!("{:<8}", "suite");
    for s in &sums {
        print!("{:>12.3}", *s as f64 / sums[0] as f64);
    }
    println!();
    Ok(())
}

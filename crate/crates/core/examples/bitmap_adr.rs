//! ADR bitmap-line hit ratio and recovery-area spills across ADR capacities
//! on a Zipf trace, against the write-back scheme's total writes.
//!
//!     cargo run --release --example bitmap_adr [zipf-s] [region-MiB] [ops]

use star_sim::baselines::run_scheme;
use star_sim::harness::gen_zipf;
use star_sim::tracker::AdrConfig;
use star_sim::{AwMode, EngineConfig, SchemeId};

fn main() -> star_sim::Result<()> {
    let mut args = std::env::args().skip(1);
    let s: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1.2);
    let region: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1024);
    let ops: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(200_000);
    let trace = gen_zipf(region << 20, region << 20, ops, 5, s)?;
    let base = EngineConfig::new(region << 20, SchemeId::Wb);
    let wb = run_scheme(&base, &trace, SchemeId::Wb)?.total_writes;
    println!("zipf s={s}, {region} MiB, {ops} ops, wb writes {wb}");
    println!("{:>8} {:>8} {:>10} {:>10} {:>10}", "adr", "l1/l2", "hit", "spills", "wb/spill");
    for cap in [2, 4, 8, 16, 32] {
        let adr = AdrConfig::with_capacity(cap)?;
        let cfg = EngineConfig { adr, ..base.clone() };
        let st = run_scheme(&cfg, &trace, SchemeId::Star(AwMode::AwM))?;
        let spills = st.writes.bitmap_spill;
        println!(
            "{cap:>8} {:>8} {:>9.2}% {spills:>10} {:>10.1}",
            format!("{}/{}", adr.l1_lines, adr.l2_lines),
            100.0 * st.bitmap_hit_ratio.unwrap_or(0.0),
            wb as f64 / spills.max(1) as f64
        );
    }
    Ok(())
}

//! Stage replay attacks on crash snapshots: swap one line for a genuine
//! older version and check that recovery refuses the image, then put the
//! line back and check that it is accepted again.
//!
//!     cargo run --release --example replay_attack [aw-mode]

use star_sim::cache::CacheConfig;
use star_sim::harness::{apply_event, gen_workload, Workload};
use star_sim::recovery::{inject_replay, recover, replay_candidates};
use star_sim::{AwMode, Engine, EngineConfig, LineKind, SchemeId};

fn main() -> star_sim::Result<()> {
    let mode: AwMode = std::env::args().nth(1).as_deref().unwrap_or("aw-m").parse()?;
    let region = 4 << 20;
    let mut cfg = EngineConfig::new(region, SchemeId::Star(mode));
    cfg.cache = CacheConfig::symmetric(16 << 10);
    let trace = gen_workload(Workload::Hash, region, region, 20_000, 4)?;

    let mut e = Engine::new(cfg.clone())?;
    e.record_versions(4);
    let (mut caught, mut missed, mut false_alarms) = (0, 0, 0);
    for (i, ev) in trace.events.iter().enumerate() {
        apply_event(&mut e, cfg.seed, i as u64, ev)?;
        if i % 10_000 != 9_999 {
            continue;
        }
        let snap = e.crash();
        let honest = recover(&snap)?;
        if !honest.report.verified() {
            false_alarms += 1;
            continue;
        }
        let targets = replay_candidates(&snap, e.versions().expect("versions on"), &honest.report.restored)?;
        let (mut data, mut meta) = (0, 0);
        for (id, old) in targets.into_iter().take(400) {
            let bad = inject_replay(&snap, id, old);
            if recover(&bad)?.report.verified() {
                missed += 1;
            } else {
                caught += 1;
            }
            if id.kind == LineKind::UserData {
                data += 1;
            } else {
                meta += 1;
            }
            if !recover(&inject_replay(&bad, id, snap.nvm.line(id)))?.report.verified() {
                false_alarms += 1;
            }
        }
        println!("crash @{:>7}: {data} data-line and {meta} metadata replays", i + 1);
    }
    println!("star-{mode}: {caught} caught, {missed} missed, {false_alarms} false alarms");
    Ok(())
}

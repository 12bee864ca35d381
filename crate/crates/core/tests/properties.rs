//! Round-trip, cost-model and tamper properties over random short runs.

use std::collections::HashMap;

use proptest::prelude::*;

use star_sim::cache::CacheConfig;
use star_sim::recovery::{audit_image, inject_replay, recover, replay_candidates, READ_NS, RESTORE_READS};
use star_sim::{AwMode, Engine, EngineConfig, LineId, SchemeId};

fn small(mode: AwMode) -> EngineConfig {
    let mut c = EngineConfig::new(2 << 20, SchemeId::Star(mode));
    c.cache = CacheConfig { counter_cache_bytes: 4096, sit_cache_bytes: 2048, ways: 4 };
    c
}

fn mode() -> impl Strategy<Value = AwMode> {
    prop_oneof![Just(AwMode::AwL), Just(AwMode::AwM), Just(AwMode::AwH)]
}

/// (line, is_write, fill byte); lines cluster so counters advance and wrap.
fn ops() -> impl Strategy<Value = Vec<(u64, bool, u8)>> {
    prop::collection::vec((0..2048u64, prop::bool::weighted(0.7), any::<u8>()), 1..1500)
}

fn play(mode: AwMode, ops: &[(u64, bool, u8)]) -> (Engine, HashMap<u64, [u8; 64]>) {
    let mut e = Engine::new(small(mode)).unwrap();
    e.record_versions(3);
    let mut oracle = HashMap::new();
    for &(line, write, b) in ops {
        if write {
            e.write_data(LineId::data(line), &[b; 64]).unwrap();
            oracle.insert(line, [b; 64]);
        } else {
            let want = oracle.get(&line).copied().unwrap_or([0; 64]);
            assert_eq!(e.read_data(LineId::data(line)).unwrap(), want);
        }
    }
    (e, oracle)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn honest_crash_recovers_and_audits(mode in mode(), ops in ops()) {
        let (e, oracle) = play(mode, &ops);
        let rec = recover(&e.crash()).unwrap();
        prop_assert!(rec.report.verified());
        let want = |i: u64| oracle.get(&i).copied().unwrap_or([0; 64]);
        let img = rec.image.as_ref().unwrap();
        prop_assert!(audit_image(img, e.geometry(), e.prf(), rec.root_counter, &want).is_ok());
    }

    #[test]
    fn cost_model_matches_the_report(mode in mode(), ops in ops()) {
        let (e, _) = play(mode, &ops);
        let r = recover(&e.crash()).unwrap().report;
        prop_assert_eq!(r.dirty_lines, e.cache().dirty_count() as u64);
        prop_assert_eq!(r.restored.len() as u64 + r.fresh_lines, r.dirty_lines);
        prop_assert_eq!(r.reads, r.index_reads + RESTORE_READS * r.restored.len() as u64 + r.fresh_lines);
        prop_assert_eq!(r.time_ns, READ_NS * r.reads);
        if mode == AwMode::AwL {
            prop_assert!(r.restored.is_empty());
        }
    }

    #[test]
    fn any_recorded_replay_is_rejected(mode in mode(), ops in ops(), pick in any::<prop::sample::Index>()) {
        let (e, _) = play(mode, &ops);
        let snap = e.crash();
        let good = recover(&snap).unwrap();
        let targets = replay_candidates(&snap, e.versions().unwrap(), &good.report.restored).unwrap();
        prop_assume!(!targets.is_empty());
        let (id, old) = targets[pick.index(targets.len())];
        let bad = inject_replay(&snap, id, old);
        prop_assert!(!recover(&bad).unwrap().report.verified(), "replay of {} accepted", id);
    }
}

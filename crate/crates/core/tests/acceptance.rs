//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line to
//! stderr (uncaptured) and then asserts, so a failure is both logged and
//! fatal. Tolerances are the constants at the top of each test.

use std::collections::HashMap;
use std::io::Write;
use std::time::{Duration, Instant};

use star_sim::baselines::{recover_anubis, run_scheme};
use star_sim::cache::CacheConfig;
use star_sim::crypto::NodeContent;
use star_sim::harness::{
    apply_event, drive_to_dirty, gen_workload, gen_zipf, plaintext_for, resume_matches_uncrashed,
    run_with, CrashPlan, Op, RunOptions, Trace, Workload,
};
use star_sim::recovery::{audit_image, inject_replay, recover, replay_candidates};
use star_sim::tracker::AdrConfig;
use star_sim::{AwMode, Engine, EngineConfig, LineId, SchemeId};

fn report(n: u32, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "criterion {n}: {verdict} {detail}");
}

fn desk_config(scheme: SchemeId) -> EngineConfig {
    let mut c = EngineConfig::new(16 << 20, scheme);
    c.cache = CacheConfig::symmetric(32 << 10);
    c
}

/// Per-workload op counts giving at least 10^5 trace events each.
fn ops_for(w: Workload) -> usize {
    match w {
        Workload::Array => 1_000,
        Workload::Btree => 12_000,
        Workload::Hash => 60_000,
        Workload::Queue => 60_000,
        Workload::Rbtree => 6_000,
        Workload::Uniform | Workload::Zipf => 100_000,
    }
}

#[test]
fn criterion_1_crash_recovery_soundness() {
    const MIN_EVENTS: usize = 100_000;
    const CRASHES: usize = 60;
    const MIN_DISTINCT: usize = 50;
    const BUDGET: Duration = Duration::from_secs(600);

    let t = Instant::now();
    let region = 16 << 20;
    let mut failures = Vec::new();
    let (mut points, mut configs) = (0, 0);
    for w in Workload::ALL {
        let trace = gen_workload(w, region, region, ops_for(w), 1).unwrap();
        assert!(trace.events.len() >= MIN_EVENTS, "{w}: only {} events", trace.events.len());
        for mode in AwMode::ALL {
            let cfg = desk_config(SchemeId::Star(mode));
            let plan = CrashPlan::Random { count: CRASHES, seed: 17 + configs };
            let distinct = plan.points(trace.events.len() as u64).len();
            assert!(distinct >= MIN_DISTINCT, "{w}/{mode}: {distinct} distinct crash points");
            let out = run_with(&cfg, &trace, &plan, RunOptions { audit: true, shadow: false }).unwrap();
            points += out.crashes.len();
            for c in &out.crashes {
                let verified = c.recovery.as_ref().is_some_and(|r| r.verified());
                if !verified || c.audit_error.is_some() || c.audit.is_none() {
                    failures.push(format!("{w}/{mode}@{}: {:?}", c.event_index, c.audit_error));
                }
            }
            configs += 1;
        }
    }
    // resuming from a recovered image continues the run exactly
    let trace = gen_workload(Workload::Hash, region, region, 20_000, 2).unwrap();
    for mode in AwMode::ALL {
        let k = trace.events.len() / 2;
        if !resume_matches_uncrashed(&desk_config(SchemeId::Star(mode)), &trace, k).unwrap() {
            failures.push(format!("hash/{mode}: resumed run diverged"));
        }
    }
    let elapsed = t.elapsed();
    let pass = failures.is_empty() && elapsed < BUDGET;
    report(
        1,
        pass,
        &format!("{configs} configs, {points} audited crash points, {} failures, {elapsed:.1?}", failures.len()),
    );
    assert!(failures.is_empty(), "{failures:?}");
    assert!(elapsed < BUDGET, "took {elapsed:?}");
}

#[test]
fn criterion_2_tamper_completeness() {
    const MIN_REPLAYS: usize = 500;
    const PER_CRASH: usize = 60;

    let region = 4 << 20;
    let (mut replays, mut caught, mut false_pos, mut honest) = (0, 0, 0, 0);
    for mode in AwMode::ALL {
        for w in [Workload::Hash, Workload::Zipf, Workload::Btree] {
            let mut cfg = EngineConfig::new(region, SchemeId::Star(mode));
            cfg.cache = CacheConfig::symmetric(16 << 10);
            let trace = gen_workload(w, region, region, 8_000, 3).unwrap();
            let mut e = Engine::new(cfg.clone()).unwrap();
            e.record_versions(4);
            let n = trace.events.len();
            let crash_at = [n / 3, 2 * n / 3, n];
            for (i, ev) in trace.events.iter().enumerate() {
                apply_event(&mut e, cfg.seed, i as u64, ev).unwrap();
                if !crash_at.contains(&(i + 1)) {
                    continue;
                }
                let snap = e.crash();
                let good = recover(&snap).unwrap();
                honest += 1;
                if !good.report.verified() {
                    false_pos += 1;
                    continue;
                }
                let targets = replay_candidates(&snap, e.versions().unwrap(), &good.report.restored).unwrap();
                let step = targets.len().div_ceil(PER_CRASH).max(1);
                for (id, old) in targets.into_iter().step_by(step) {
                    let bad = inject_replay(&snap, id, old);
                    replays += 1;
                    let r = recover(&bad).unwrap();
                    if !r.report.verified() && r.image.is_none() {
                        caught += 1;
                    }
                    let reverted = inject_replay(&bad, id, snap.nvm.line(id));
                    honest += 1;
                    if !recover(&reverted).unwrap().report.verified() {
                        false_pos += 1;
                    }
                }
            }
        }
    }
    let pass = replays >= MIN_REPLAYS && caught == replays && false_pos == 0;
    report(
        2,
        pass,
        &format!("{caught}/{replays} replays rejected, {false_pos} false positives in {honest} honest recoveries"),
    );
    assert!(replays >= MIN_REPLAYS, "only {replays} replays staged");
    assert_eq!(caught, replays);
    assert_eq!(false_pos, 0);
}

#[test]
fn criterion_3_write_overhead_ratios() {
    const OPS: usize = 100_000;
    const STRICT_MAX: f64 = 9.0;
    const AW_H: (f64, f64) = (1.0, 1.4);
    const AW_M: (f64, f64) = (1.1, 1.6);
    const AW_L: (f64, f64) = (1.6, 2.4);

    let region = 16 << 20;
    let base = desk_config(SchemeId::Wb);
    let mut sums: HashMap<SchemeId, u64> = HashMap::new();
    for w in Workload::ALL {
        let trace = gen_workload(w, region, region, OPS, 1).unwrap();
        for s in SchemeId::ALL {
            *sums.entry(s).or_default() += run_scheme(&base, &trace, s).unwrap().total_writes;
        }
    }
    let wb = sums[&SchemeId::Wb];
    let ratio = |s| sums[&s] as f64 / wb as f64;
    let (h, m, l) = (
        ratio(SchemeId::Star(AwMode::AwH)),
        ratio(SchemeId::Star(AwMode::AwM)),
        ratio(SchemeId::Star(AwMode::AwL)),
    );
    let strict = ratio(SchemeId::Strict);
    let anubis_exact = sums[&SchemeId::Anubis] == 2 * wb;
    let within = |x: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&x);
    let pass = anubis_exact
        && strict < STRICT_MAX
        && h <= m
        && m <= l
        && within(h, AW_H)
        && within(m, AW_M)
        && within(l, AW_L);
    report(
        3,
        pass,
        &format!(
            "aw-h {h:.3} aw-m {m:.3} aw-l {l:.3} anubis {:.3} strict {strict:.3}",
            ratio(SchemeId::Anubis)
        ),
    );
    assert!(anubis_exact);
    assert!(strict < STRICT_MAX);
    assert!(h <= m && m <= l);
    assert!(within(h, AW_H) && within(m, AW_M) && within(l, AW_L), "{h} {m} {l}");
}

/// Engine with a 2+2 MiB metadata cache driven to `ratio` dirty.
fn driven(mem: u64, ratio: f64, seed: u64) -> (EngineConfig, Trace) {
    let mut cfg = EngineConfig::new(mem, SchemeId::Star(AwMode::AwH));
    cfg.cache = CacheConfig::symmetric(2 << 20);
    let target = (ratio * cfg.cache.total_lines() as f64).round() as usize;
    let mut e = Engine::new(cfg.clone()).unwrap();
    let events = drive_to_dirty(&mut e, target, seed, 5_000_000).unwrap();
    (cfg, Trace { mem_bytes: mem, events })
}

fn replayed(cfg: &EngineConfig, trace: &Trace, mode: AwMode) -> Engine {
    let mut e = Engine::new(EngineConfig { scheme: SchemeId::Star(mode), ..cfg.clone() }).unwrap();
    for (i, ev) in trace.events.iter().enumerate() {
        apply_event(&mut e, cfg.seed, i as u64, ev).unwrap();
    }
    e
}

fn r_squared(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    sxy * sxy / (sxx * syy)
}

#[test]
fn criterion_4_recovery_time_model() {
    const TOL: f64 = 0.15;
    const WANT: [(AwMode, f64); 3] = [(AwMode::AwH, 0.039), (AwMode::AwM, 0.023), (AwMode::AwL, 0.004)];
    const ANUBIS_NS: u64 = 196_608 * 100;
    const R2_MIN: f64 = 0.99;
    const MEM_TOL: f64 = 0.01;

    let gib = 1u64 << 30;
    let mut ok = true;
    let mut detail = String::new();

    let (cfg, trace) = driven(gib, 0.62, 3);
    for (mode, want) in WANT {
        let r = recover(&replayed(&cfg, &trace, mode).crash()).unwrap().report;
        let good = r.verified() && (r.time_secs() - want).abs() <= TOL * want;
        ok &= good;
        detail += &format!("{mode} {:.4}s ", r.time_secs());
    }
    let anubis = recover_anubis(&Engine::new(EngineConfig { scheme: SchemeId::Anubis, ..cfg.clone() }).unwrap().crash());
    ok &= anubis.time_ns == ANUBIS_NS;
    detail += &format!("anubis {:.4}s; ", anubis.time_secs());

    let mut r2 = Vec::new();
    for mode in [AwMode::AwH, AwMode::AwM] {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for (k, ratio) in [0.1, 0.2, 0.35, 0.5, 0.62].into_iter().enumerate() {
            let (cfg, trace) = driven(gib, ratio, 10 + k as u64);
            let e = replayed(&cfg, &trace, mode);
            let r = recover(&e.crash()).unwrap().report;
            ok &= r.verified();
            xs.push(e.cache().dirty_count() as f64);
            ys.push(r.reads as f64);
        }
        r2.push(r_squared(&xs, &ys));
    }
    ok &= r2.iter().all(|&r| r >= R2_MIN);
    detail += &format!("R2 aw-h {:.5} aw-m {:.5}; ", r2[0], r2[1]);

    // one access trace, replayed under three memory sizes
    let (cfg, trace) = driven(gib, 0.3, 21);
    let mut spread = 0.0f64;
    for mode in AwMode::ALL {
        let reads: Vec<(usize, u64)> = [gib, 2 * gib, 4 * gib]
            .into_iter()
            .map(|mem| {
                let e = replayed(&EngineConfig { mem_bytes: mem, ..cfg.clone() }, &trace, mode);
                (e.cache().dirty_count(), recover(&e.crash()).unwrap().report.reads)
            })
            .collect();
        ok &= reads.iter().all(|r| r.0 == reads[0].0);
        for r in &reads[1..] {
            spread = spread.max((r.1 as f64 - reads[0].1 as f64).abs() / reads[0].1 as f64);
        }
    }
    ok &= spread <= MEM_TOL;
    detail += &format!("reads at 1/2/4 GiB differ by at most {:.2}%", 100.0 * spread);

    report(4, ok, &detail);
    assert!(ok, "{detail}");
}

#[test]
fn criterion_5_bitmap_line_economy() {
    const ZIPF_S: f64 = 1.3;
    const MIN_WB_PER_SPILL: f64 = 50.0;
    const HIT_AT_16: (f64, f64) = (0.55, 0.90);

    let region = 32 << 20;
    let trace = gen_zipf(region, region, 200_000, 5, ZIPF_S).unwrap();
    let base = EngineConfig::new(region, SchemeId::Wb);
    let wb = run_scheme(&base, &trace, SchemeId::Wb).unwrap().total_writes;
    let mut hits = Vec::new();
    let mut spills_16 = 0;
    for cap in [2, 4, 8, 16, 32] {
        let cfg = EngineConfig { adr: AdrConfig::with_capacity(cap).unwrap(), ..base.clone() };
        let st = run_scheme(&cfg, &trace, SchemeId::Star(AwMode::AwM)).unwrap();
        hits.push(st.bitmap_hit_ratio.unwrap());
        if cap == 16 {
            spills_16 = st.writes.bitmap_spill;
        }
    }
    let economy = wb as f64 / spills_16.max(1) as f64;
    let monotone = hits.windows(2).all(|w| w[0] <= w[1]);
    let hit16 = hits[3];
    let pass = economy >= MIN_WB_PER_SPILL && monotone && (HIT_AT_16.0..=HIT_AT_16.1).contains(&hit16);
    let pct: Vec<String> = hits.iter().map(|h| format!("{:.1}%", 100.0 * h)).collect();
    report(5, pass, &format!("wb/spill {economy:.1}x at 16 lines, hit ratio over 2..32: {}", pct.join(" ")));
    assert!(economy >= MIN_WB_PER_SPILL, "{economy}");
    assert!(monotone, "{hits:?}");
    assert!((HIT_AT_16.0..=HIT_AT_16.1).contains(&hit16), "{hit16}");
}

#[test]
fn criterion_6_mechanism_micro_oracles() {
    const MIN_EVENTS: u64 = 100_000;
    let mut detail = Vec::new();

    // (a) counter crossing a 1024 boundary, restored from sidecars
    let mut cfg = EngineConfig::new(2 << 20, SchemeId::Star(AwMode::AwH));
    cfg.cache = CacheConfig { counter_cache_bytes: 4096, sit_cache_bytes: 2048, ways: 4 };
    let mut e = Engine::new(cfg.clone()).unwrap();
    let (cb, parent) = (LineId::counter(0), LineId::node(1, 0));
    for k in 0..1020u32 {
        e.write_data(LineId::data(0), &[k as u8; 64]).unwrap();
        e.evict_metadata(cb).unwrap();
    }
    e.evict_metadata(parent).unwrap();
    for k in 0..8u32 {
        e.write_data(LineId::data(0), &[k as u8; 64]).unwrap();
        e.evict_metadata(cb).unwrap();
    }
    let live = e.cache().get(parent).unwrap().content.sit_counter(0);
    let rec = recover(&e.crash()).unwrap();
    let restored = rec.image.as_ref().map(|img| img.node(parent).sit_counter(0));
    let a = live == 1028 && rec.report.verified() && restored == Some(live);
    detail.push(format!("(a) wrap {live} -> {restored:?}"));

    // (b) 128th write to a line overflows its minor counter
    let mut e = Engine::new(EngineConfig::new(1 << 20, SchemeId::Star(AwMode::AwH))).unwrap();
    for i in 0..64 {
        e.write_data(LineId::data(i), &[i as u8; 64]).unwrap();
    }
    for k in 1..127u32 {
        e.write_data(LineId::data(5), &[k as u8; 64]).unwrap();
    }
    let before = e.write_stats();
    e.write_data(LineId::data(5), &[0xee; 64]).unwrap();
    let after = e.write_stats();
    let NodeContent::Counter(c) = e.cache().get(LineId::counter(0)).unwrap().content else {
        panic!("counter block expected")
    };
    let reads_ok = (0..64).all(|i| {
        let want = if i == 5 { [0xee; 64] } else { [i as u8; 64] };
        e.read_data(LineId::data(i)).unwrap() == want
    });
    let reenc = after.reencrypt - before.reencrypt;
    let b = reenc == 65 && after.data == before.data && c.major == 1 && reads_ok;
    detail.push(format!("(b) overflow wrote {reenc} lines, major {}", c.major));

    // (c) + (d): shadow validation checks the incremental cache-tree root
    // against a rebuild and NVM freshness above the start level after
    // every event
    let mut events = 0u64;
    let mut shadow_err = None;
    for mode in AwMode::ALL {
        let cfg = EngineConfig { scheme: SchemeId::Star(mode), ..cfg.clone() };
        let trace = gen_workload(Workload::Uniform, 2 << 20, 2 << 20, 40_000, 9).unwrap();
        let mut e = Engine::new(cfg).unwrap();
        e.set_shadow_validation(true);
        for (i, ev) in trace.events.iter().enumerate() {
            let plain = plaintext_for(1, i as u64);
            let addr = LineId::data(ev.addr / 64);
            let res = match ev.op {
                Op::W => e.write_data(addr, &plain).map(drop),
                Op::R => e.read_data(addr).map(drop),
            };
            if let Err(err) = res {
                shadow_err.get_or_insert(format!("{mode} @{i}: {err}"));
                break;
            }
        }
        events += e.events();
        let rec = recover(&e.crash()).unwrap();
        if let Some(img) = &rec.image {
            let mut oracle = HashMap::new();
            for (i, ev) in trace.events.iter().enumerate() {
                if ev.op == Op::W {
                    oracle.insert(ev.addr / 64, plaintext_for(1, i as u64));
                }
            }
            let want = |i: u64| oracle.get(&i).copied().unwrap_or([0; 64]);
            if let Err(err) = audit_image(img, e.geometry(), e.prf(), rec.root_counter, &want) {
                shadow_err.get_or_insert(format!("{mode} audit: {err}"));
            }
        } else {
            shadow_err.get_or_insert(format!("{mode}: honest recovery rejected"));
        }
    }
    let cd = shadow_err.is_none() && events >= MIN_EVENTS;
    detail.push(format!("(c,d) {events} shadow-validated events, error {shadow_err:?}"));

    let pass = a && b && cd;
    report(6, pass, &detail.join("; "));
    assert!(a, "{}", detail[0]);
    assert!(b, "{}", detail[1]);
    assert!(cd, "{}", detail[2]);
}

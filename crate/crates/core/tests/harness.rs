mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use hintsteer::experience::{collect_chunk, ChunkMode, ChunkPolicy, ExperienceStore};
use hintsteer::harness::{evaluate, label, parallel_map, Harness, Label, Measurement, Pick, Picker};
use hintsteer::sim::Query;
use hintsteer::workload::Environment;
use hintsteer::Result;

const UNBIASED: ChunkPolicy = ChunkPolicy {
    mode: ChunkMode::UnbiasedAllHintsets,
    sample_size: 0,
};

#[test]
fn pool_size_does_not_change_results() {
    let (env, queries) = common::env(&["jcch", "tpch1"], 3, 12);
    let mut records = Vec::new();
    for pool in [1, 3, 225] {
        let mut h = Harness::new(12);
        h.max_pool = pool;
        let mut store = ExperienceStore::in_memory(env.hints.digest());
        collect_chunk(&env, &h, &mut store, &queries, UNBIASED, 0, None).unwrap();
        records.push(store.records().to_vec());
    }
    assert_eq!(records[0], records[1]);
    assert_eq!(records[0], records[2]);
}

#[test]
fn in_flight_calls_never_exceed_the_pool() {
    for pool in [1, 2, 5] {
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let out = parallel_map(20, pool, |i| {
            let now = live.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(2));
            live.fetch_sub(1, Ordering::SeqCst);
            i * i
        });
        assert_eq!(out, (0..20).map(|i| i * i).collect::<Vec<_>>());
        assert!(peak.load(Ordering::SeqCst) <= pool);
    }
}

/// Picks the slowest plan of each query.
struct Worst(Harness);

impl Picker for Worst {
    fn pick(&self, env: &Environment, q: &Query) -> Result<Pick> {
        let comp = env.compiler(&q.workload_id)?;
        let mut best = (0, f64::MIN);
        for s in env.hints.sets() {
            let plan = comp.compile(q, s)?;
            let t = self.0.cost_model.latency(&plan, &Default::default());
            if t > best.1 {
                best = (s.id, t);
            }
        }
        Ok(Pick {
            hintset_id: best.0,
            predicted_reward: 1.0,
            class: "worst".into(),
        })
    }
}

#[test]
fn timed_out_picks_are_regressions_at_the_limit() {
    let (env, queries) = common::env(&["tpch10"], 8, 3);
    let h = common::tight_harness(3, 300.0);
    let rep = evaluate(&Worst(h.clone()), &env, &h, &queries, 0.1).unwrap();
    let timed_out: Vec<_> = rep.rows.iter().filter(|r| r.chosen_timed_out).collect();
    assert!(!timed_out.is_empty());
    for r in timed_out {
        assert_eq!(r.label, Label::Regressed);
        assert_eq!(r.chosen_reward, 300.0);
    }
    assert!(rep.summary.timeouts > 0);
}

#[test]
fn measurement_reports_timeout_on_cold_first_run() {
    let (env, queries) = common::env(&["tpch1"], 1, 1);
    let q = &queries[0];
    let plan = env
        .compiler(&q.workload_id)
        .unwrap()
        .compile(q, &env.hints.sets()[0])
        .unwrap();
    let mut h = Harness::new(1);
    let warm = h.cost_model.latency(&plan, &Default::default());
    // Above the warm latency, below the cold first run.
    h.timeout.limit_ms = warm * 1.2;
    h.cost_model.noise_sigma = 0.0;
    assert_eq!(h.measure(q, &plan), Measurement::Timeout);
    h.timeout.limit_ms = warm * 2.0;
    let r = h.measure(q, &plan).reward().unwrap();
    assert!((r - warm).abs() < 1e-9 * warm);
}

#[test]
fn labels_follow_the_threshold() {
    assert_eq!(label(0, 10.0, Some(1.0), 0.1), Label::NoHint);
    assert_eq!(label(4, 10.0, Some(9.0), 0.1), Label::Improved);
    assert_eq!(label(4, 10.0, Some(9.5), 0.1), Label::Neutral);
    assert_eq!(label(4, 10.0, Some(11.0), 0.1), Label::Regressed);
    assert_eq!(label(4, 10.0, None, 0.1), Label::Regressed);
}

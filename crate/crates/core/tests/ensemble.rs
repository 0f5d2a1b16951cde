mod common;

use hintsteer::ensemble::{argmin, select_hintset, ComplexityClass, EnsembleModel, ModelKey, Routing, TrainSettings};
use hintsteer::experience::{collect_chunk, ChunkMode, ChunkPolicy, ExperienceStore};
use hintsteer::harness::{Harness, Picker};
use hintsteer::model::Architecture;
use hintsteer::sim::EstimateModel;
use hintsteer::Error;
use proptest::prelude::*;

/// A strictly increasing map chosen by `kind`.
fn increasing(kind: u8, a: f64, b: f64) -> impl Fn(f64) -> f64 {
    move |x| match kind {
        0 => a * x + b,
        1 => (x / 100.0).exp() + b,
        2 => x.powi(3) * a,
        _ => (x.abs() + 1.0).ln() * x.signum() * a + b,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn argmin_survives_monotone_transforms(
        v in prop::collection::vec(-500f64..500.0, 1..225),
        kind in 0u8..4,
        a in 0.01f64..50.0,
        b in -100f64..100.0,
    ) {
        let f = increasing(kind, a, b);
        let t: Vec<f64> = v.iter().map(|&x| f(x)).collect();
        prop_assert_eq!(argmin(&v), argmin(&t));
    }
}

#[test]
fn ties_go_to_the_lowest_hintset() {
    assert_eq!(argmin(&[3.0, 1.0, 1.0, 2.0]), 1);
    assert_eq!(argmin(&[5.0; 7]), 0);
}

#[test]
fn oracle_scores_pick_the_true_optimum() {
    let (env, queries) = common::env(&["tpch10", "tpcds1"], 10, 21);
    let truth = Harness::new(21).cost_model;
    let est = EstimateModel::default();
    for q in &queries {
        let comp = env.compiler(&q.workload_id).unwrap();
        let brute: Vec<f64> = env
            .hints
            .sets()
            .iter()
            .map(|s| truth.latency(&comp.compile(q, s).unwrap(), &est))
            .collect();
        let (picked, _) = select_hintset(&env, q, 4, |p| Ok(truth.latency(p, &est))).unwrap();
        assert_eq!(picked, argmin(&brute), "{}", q.id);
    }
}

#[test]
fn untrained_models_pick_no_hint() {
    let (env, queries) = common::env(&["tpch1", "jcch"], 5, 8);
    for name in ["single", "custom", "e1"] {
        let ens = EnsembleModel::untrained(Routing::named(name).unwrap(), &TrainSettings::default(), &env);
        for q in &queries {
            assert_eq!(ens.pick(&env, q).unwrap().hintset_id, 0);
        }
    }
}

#[test]
fn default_rule_routes_the_four_workload_mix() {
    let (env, _) = common::env(&["tpch10", "jcch", "tpch1", "tpcds1"], 0, 1);
    let ens = EnsembleModel::untrained(Routing::named("custom").unwrap(), &TrainSettings::default(), &env);
    let class = |w: &str| ens.route(w).unwrap();
    assert_eq!(class("tpch10"), ModelKey::Class(ComplexityClass::Heavy));
    assert_eq!(class("jcch"), ModelKey::Class(ComplexityClass::Heavy));
    assert_eq!(class("tpch1"), ModelKey::Class(ComplexityClass::Light));
    assert_eq!(class("tpcds1"), ModelKey::Class(ComplexityClass::Light));
    assert!(matches!(ens.route("nowhere"), Err(Error::UnknownWorkload(_))));
}

#[test]
fn presets_cover_all_twelve_workloads() {
    for name in ["e1", "e2", "e3", "e4"] {
        match Routing::named(name).unwrap() {
            Routing::Preset { classes, .. } => assert_eq!(classes.len(), 12, "{name}"),
            other => panic!("{name}: {other:?}"),
        }
    }
    assert!(Routing::named("e9").is_err());
}

#[test]
fn trained_ensemble_round_trips_through_disk() {
    let (env, queries) = common::env(&["tpch1", "tpch10"], 3, 5);
    let mut store = ExperienceStore::in_memory(env.hints.digest());
    let policy = ChunkPolicy {
        mode: ChunkMode::UnbiasedAllHintsets,
        sample_size: 0,
    };
    collect_chunk(&env, &Harness::new(5), &mut store, &queries, policy, 0, None).unwrap();
    let settings = TrainSettings {
        arch: Architecture {
            conv: vec![8, 8, 4],
            hidden: 4,
            ..Architecture::default()
        },
        ..TrainSettings::default()
    };
    let mut ens = EnsembleModel::untrained(Routing::named("custom").unwrap(), &settings, &env);
    let reports = ens.train(store.records(), 3, 5).unwrap();
    assert_eq!(reports.len(), 2);

    let dir = tempfile::tempdir().unwrap();
    ens.save(dir.path()).unwrap();
    let back = EnsembleModel::load(dir.path()).unwrap();
    assert_eq!(back, ens);
    for q in &queries {
        assert_eq!(
            back.predict_hintset(&env, q).unwrap(),
            ens.predict_hintset(&env, q).unwrap()
        );
    }
}

#[test]
fn a_class_without_data_is_an_error() {
    let (env, queries) = common::env(&["tpch1", "tpch10"], 2, 5);
    let light: Vec<_> = queries.into_iter().filter(|q| q.workload_id == "tpch1").collect();
    let mut store = ExperienceStore::in_memory(env.hints.digest());
    let policy = ChunkPolicy {
        mode: ChunkMode::NoHintOnly,
        sample_size: 0,
    };
    collect_chunk(&env, &Harness::new(5), &mut store, &light, policy, 0, None).unwrap();
    let mut ens = EnsembleModel::untrained(Routing::named("custom").unwrap(), &TrainSettings::default(), &env);
    assert!(matches!(ens.train(store.records(), 1, 0), Err(Error::EmptyClass(_))));
}

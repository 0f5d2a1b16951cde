use std::collections::HashSet;

use hintsteer::hints::{HintCatalog, HintSet};
use hintsteer::sim::{Compiler, EstimateModel, Executor, Operator, TrueCostModel};
use hintsteer::workload::Workload;
use proptest::prelude::*;

fn set_with(cat: &HintCatalog, names: &[&str]) -> HintSet {
    let want: Vec<u8> = names.iter().map(|n| cat.config().hint_id(n).unwrap()).collect();
    *cat.sets()
        .iter()
        .find(|s| s.enabled.ids().collect::<Vec<_>>() == want)
        .expect("hintset is in the catalog")
}

#[test]
fn distinct_plans_per_query_are_bounded_by_the_catalog() {
    let cat = HintCatalog::default_catalog();
    for id in ["tpch1", "jcch", "job", "stack"] {
        let w = Workload::preset(id, 11).unwrap();
        let comp = Compiler::new(&w.catalog, cat.config());
        for q in w.queries(0, 15, 11) {
            let hashes: HashSet<_> = cat
                .sets()
                .iter()
                .map(|s| comp.compile(&q, s).unwrap().plan_hash())
                .collect();
            assert!(
                !hashes.is_empty() && hashes.len() <= cat.len(),
                "{}: {}",
                q.id,
                hashes.len()
            );
        }
    }
}

#[test]
fn forced_hash_join_excludes_index_joins() {
    let cat = HintCatalog::default_catalog();
    let hs = set_with(&cat, &["hash_join"]);
    let w = Workload::preset("job", 3).unwrap();
    let comp = Compiler::new(&w.catalog, cat.config());
    for q in w.queries(0, 40, 3) {
        let p = comp.compile(&q, &hs).unwrap();
        assert!(!p.asp.root.contains(Operator::IndexJoin), "{}", q.id);
    }
}

#[test]
fn range_hints_do_not_touch_equality_only_queries() {
    let cat = HintCatalog::default_catalog();
    let w = Workload::preset("tpch10", 5).unwrap();
    let comp = Compiler::new(&w.catalog, cat.config());
    let base = set_with(&cat, &[]);
    let range = set_with(&cat, &["range_join"]);
    let hashed = set_with(&cat, &["hashed_range_join"]);
    let mut checked = 0;
    for q in w
        .queries(0, 60, 5)
        .iter()
        .filter(|q| !q.has_inequality_join(&w.catalog))
    {
        let h = comp.compile(q, &base).unwrap().plan_hash();
        assert_eq!(comp.compile(q, &range).unwrap().plan_hash(), h);
        assert_eq!(comp.compile(q, &hashed).unwrap().plan_hash(), h);
        checked += 1;
    }
    assert!(checked >= 10);
}

#[test]
fn compile_is_deterministic() {
    let cat = HintCatalog::default_catalog();
    let w = Workload::preset("tpcds1", 2).unwrap();
    let comp = Compiler::new(&w.catalog, cat.config());
    for q in w.queries(0, 10, 2) {
        for s in cat.sets().iter().step_by(17) {
            assert_eq!(comp.compile(&q, s).unwrap(), comp.compile(&q, s).unwrap());
        }
    }
}

#[test]
fn zero_noise_execution_is_exact() {
    let cat = HintCatalog::default_catalog();
    let w = Workload::preset("tpch1", 1).unwrap();
    let comp = Compiler::new(&w.catalog, cat.config());
    let q = &w.queries(0, 1, 1)[0];
    let plan = comp.compile(q, &cat.sets()[0]).unwrap();
    let model = TrueCostModel {
        noise_sigma: 0.0,
        cold_cache_penalty: 3.0,
        ..TrueCostModel::default()
    };
    let truth = model.latency(&plan, &EstimateModel::default());
    let mut ex = Executor::new(model);
    assert_eq!(ex.execute(&plan, 1), 3.0 * truth);
    assert_eq!(ex.execute(&plan, 2), truth);
    assert_eq!(ex.execute(&plan, 3), truth);
}

#[test]
fn seeded_noise_is_repeatable() {
    let cat = HintCatalog::default_catalog();
    let w = Workload::preset("tpch1", 1).unwrap();
    let comp = Compiler::new(&w.catalog, cat.config());
    let q = &w.queries(0, 1, 1)[0];
    let plan = comp.compile(q, &cat.sets()[0]).unwrap();
    let mut ex = Executor::default();
    ex.execute(&plan, 0);
    let a = ex.execute(&plan, 42);
    assert_eq!(ex.execute(&plan, 42), a);
    assert_ne!(ex.execute(&plan, 43), a);
}

#[test]
fn estimates_track_truth_without_matching_it() {
    let cat = HintCatalog::default_catalog();
    let w = Workload::preset("jcch", 4).unwrap();
    let comp = Compiler::new(&w.catalog, cat.config());
    let model = TrueCostModel::default();
    let est = EstimateModel::default();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for q in w.queries(0, 40, 4) {
        let p = comp.compile(&q, &cat.sets()[0]).unwrap();
        xs.push(p.asp.root.est_cost.ln());
        ys.push(model.latency(&p, &est).ln());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&xs), mean(&ys));
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let r = cov / (vx * vy).sqrt();
    assert!(r > 0.5 && r < 0.999, "correlation {r}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Same physical plan, bigger table: the true cost never drops.
    #[test]
    fn true_cost_is_monotone_in_table_size(
        preset in prop::sample::select(vec!["tpch1", "jcch", "tpcds1", "job"]),
        qi in 0usize..30,
        set in 0usize..225,
        which in 0usize..8,
        grow in 1.1f64..40.0,
    ) {
        let cat = HintCatalog::default_catalog();
        let w = Workload::preset(preset, 9).unwrap();
        let q = w.queries(qi, 1, 9).remove(0);
        let comp = Compiler::new(&w.catalog, cat.config());
        let shape = comp.shape(&q, &cat.sets()[set]).unwrap();
        let before = comp.annotate(&q, &shape).unwrap();

        let mut bigger = w.catalog.clone();
        let name = &q.tables[which % q.tables.len()];
        let t = bigger.table_index(name).unwrap();
        bigger.tables[t].row_count = (bigger.tables[t].row_count as f64 * grow) as u64;
        let after = Compiler::new(&bigger, cat.config()).annotate(&q, &shape).unwrap();

        let model = TrueCostModel::default();
        let est = EstimateModel::default();
        prop_assert!(model.latency(&after, &est) >= model.latency(&before, &est));
    }
}

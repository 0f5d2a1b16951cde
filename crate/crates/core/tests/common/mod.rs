#![allow(dead_code)]

use hintsteer::encoding::{featurize, EncodedTree};
use hintsteer::hints::HintCatalog;
use hintsteer::sim::{CompiledPlan, Compiler, Query};
use hintsteer::workload::Workload;

/// Distinct compiled plans from a seeded workload, with their queries.
pub fn plans(preset: &str, n_queries: usize, seed: u64) -> Vec<(Query, CompiledPlan)> {
    let cat = HintCatalog::default_catalog();
    let w = Workload::preset(preset, seed).unwrap();
    let comp = Compiler::new(&w.catalog, cat.config());
    let mut out = Vec::new();
    for q in w.queries(0, n_queries, seed) {
        for s in cat.sets().iter().step_by(45) {
            out.push((q.clone(), comp.compile(&q, s).unwrap()));
        }
    }
    out
}

/// Encoded trees paired with a reward that is a fixed function of the estimates.
pub fn samples(n_queries: usize, seed: u64) -> Vec<(EncodedTree, f64)> {
    plans("tpch1", n_queries, seed)
        .into_iter()
        .map(|(_, p)| {
            let r = 1.0 + p.asp.root.est_cost.sqrt();
            (featurize(&p.asp), r)
        })
        .collect()
}

use hintsteer::harness::Harness;
use hintsteer::workload::Environment;

/// An environment with the given presets and a few queries from each.
pub fn env(presets: &[&str], per_workload: usize, seed: u64) -> (Environment, Vec<Query>) {
    let mut env = Environment::new(HintCatalog::default_catalog());
    let mut queries = Vec::new();
    for p in presets {
        let w = Workload::preset(p, seed).unwrap();
        queries.extend(w.queries(0, per_workload, seed));
        env.add(w);
    }
    (env, queries)
}

/// Harness whose timeout is low enough that some plans in `presets` time out.
pub fn tight_harness(seed: u64, limit_ms: f64) -> Harness {
    let mut h = Harness::new(seed);
    h.timeout.limit_ms = limit_ms;
    h
}

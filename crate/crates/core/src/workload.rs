//! Named workloads: a generated catalog plus its classifier statistics.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::hints::HintCatalog;
use crate::seed;
use crate::sim::catalog::DEFAULT_SKEW_THRESHOLD;
use crate::sim::{
    generate_catalog, generate_queries, workload_stats, Catalog, CatalogSpec, Compiler, Query, QueryMix, WorkloadStats,
};

#[derive(Debug, Clone)]
pub struct Workload {
    pub id: String,
    pub spec: CatalogSpec,
    pub catalog: Catalog,
    pub stats: WorkloadStats,
    pub mix: QueryMix,
}

impl Workload {
    pub fn generate(id: &str, spec: CatalogSpec, mix: QueryMix, seed: u64) -> Result<Self> {
        let catalog = generate_catalog(&spec, seed::derive(seed, id.as_bytes()))?;
        let stats = workload_stats(&catalog, id, DEFAULT_SKEW_THRESHOLD);
        Ok(Workload {
            id: id.to_string(),
            spec,
            catalog,
            stats,
            mix,
        })
    }

    /// Generates the workload for a named catalog preset.
    pub fn preset(id: &str, seed: u64) -> Result<Self> {
        let spec = CatalogSpec::preset(id).ok_or_else(|| Error::UnknownWorkload(id.to_string()))?;
        Self::generate(id, spec, QueryMix::default(), seed)
    }

    pub fn queries(&self, first_index: usize, count: usize, seed: u64) -> Vec<Query> {
        generate_queries(&self.catalog, &self.id, &self.mix, first_index, count, seed)
    }
}

/// Everything needed to compile and run queries across workloads.
#[derive(Debug, Clone)]
pub struct Environment {
    pub hints: HintCatalog,
    workloads: BTreeMap<String, Workload>,
}

impl Environment {
    pub fn new(hints: HintCatalog) -> Self {
        Environment {
            hints,
            workloads: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, w: Workload) {
        self.workloads.insert(w.id.clone(), w);
    }

    pub fn workload(&self, id: &str) -> Result<&Workload> {
        self.workloads
            .get(id)
            .ok_or_else(|| Error::UnknownWorkload(id.to_string()))
    }

    pub fn workloads(&self) -> impl Iterator<Item = &Workload> {
        self.workloads.values()
    }

    pub fn compiler(&self, workload_id: &str) -> Result<Compiler<'_>> {
        Ok(Compiler::new(&self.workload(workload_id)?.catalog, self.hints.config()))
    }

    pub fn stats(&self) -> Vec<WorkloadStats> {
        self.workloads.values().map(|w| w.stats.clone()).collect()
    }
}

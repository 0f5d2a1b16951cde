//! Deterministic stand-in for a commercial optimizer and executor.

pub mod catalog;
pub mod compile;
pub mod exec;
pub mod plan;
pub mod query;

pub use catalog::{generate_catalog, workload_stats, Catalog, CatalogSpec, WorkloadStats};
pub use compile::{Compiler, EstimateModel, Shape};
pub use exec::{Executor, TrueCostModel};
pub use plan::{AbstractPlan, CompiledPlan, Operator, PlanHash, PlanNode, TruthNode};
pub use query::{generate_queries, Query, QueryMix};

//! The simulated executor: costs plans with true cardinalities.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::compile::EstimateModel;
use super::plan::{CompiledPlan, Operator, PlanHash, PlanNode, TruthNode};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueCostModel {
    /// Per-operator multiplier on the optimizer's believed coefficient.
    pub multipliers: [f64; 10],
    /// Build sides and aggregation tables above this many rows spill.
    pub memory_rows: f64,
    pub spill_factor: f64,
    /// Databases whose largest table exceeds this many rows do not fit the buffer pool.
    pub buffer_rows: f64,
    /// Factor on index lookups when the database does not fit the buffer pool.
    pub random_io_factor: f64,
    /// Factor on index lookups when it does.
    pub cached_io_factor: f64,
    /// Fixed per-query overhead in ms.
    pub overhead_ms: f64,
    /// Log-space standard deviation of run-to-run noise.
    pub noise_sigma: f64,
    pub cold_cache_penalty: f64,
}

impl Default for TrueCostModel {
    fn default() -> Self {
        TrueCostModel {
            multipliers: [
                1.0, // TableScan
                0.7, // IndexScan
                1.0, // HashJoin
                2.0, // IndexJoin
                0.6, // RangeJoin
                1.4, // HashedRangeJoin
                1.5, // NestedLoopJoin
                1.2, // Filter
                1.1, // Aggregate
                1.0, // Union
            ],
            memory_rows: 5.0e6,
            spill_factor: 3.0,
            buffer_rows: 2.0e7,
            random_io_factor: 2.0,
            cached_io_factor: 0.35,
            overhead_ms: 0.5,
            noise_sigma: 0.05,
            cold_cache_penalty: 1.5,
        }
    }
}

impl TrueCostModel {
    /// Noise-free warm latency of a plan in ms.
    pub fn latency(&self, plan: &CompiledPlan, estimates: &EstimateModel) -> f64 {
        let resident = plan.database_rows <= self.buffer_rows;
        self.overhead_ms + self.node_cost(&plan.asp.root, &plan.truth, estimates, resident)
    }

    fn node_cost(&self, node: &PlanNode, truth: &TruthNode, est: &EstimateModel, resident: bool) -> f64 {
        let inputs: Vec<f64> = truth.children.iter().map(|c| c.rows).collect();
        let op = node.operator;
        let mut own =
            est.coefficient(op) * self.multipliers[op.index()] * op.work(&inputs, truth.rows, truth.base_rows);
        let spills = match op {
            Operator::HashJoin => inputs.get(1).is_some_and(|&r| r > self.memory_rows),
            Operator::Aggregate => truth.rows > self.memory_rows,
            _ => false,
        };
        if spills {
            own *= self.spill_factor;
        }
        if matches!(op, Operator::IndexScan | Operator::IndexJoin) {
            own *= if resident {
                self.cached_io_factor
            } else {
                self.random_io_factor
            };
        }
        own + node
            .children
            .iter()
            .zip(&truth.children)
            .map(|(n, t)| self.node_cost(n, t, est, resident))
            .sum::<f64>()
    }
}

/// Runs plans; remembers which plans have warm caches.
#[derive(Debug, Clone, Default)]
pub struct Executor {
    pub model: TrueCostModel,
    pub estimates: EstimateModel,
    warm: HashSet<PlanHash>,
}

impl Executor {
    pub fn new(model: TrueCostModel) -> Self {
        Executor {
            model,
            estimates: EstimateModel::default(),
            warm: HashSet::new(),
        }
    }

    pub fn clear_cache(&mut self) {
        self.warm.clear();
    }

    /// Executes once and returns the observed latency in ms.
    pub fn execute(&mut self, plan: &CompiledPlan, run_seed: u64) -> f64 {
        let hash = plan.plan_hash();
        let cold = self.warm.insert(hash);
        let z = seed::normal(run_seed);
        let mut t = self.model.latency(plan, &self.estimates) * (self.model.noise_sigma * z).exp();
        if cold {
            t *= self.model.cold_cache_penalty;
        }
        t
    }
}

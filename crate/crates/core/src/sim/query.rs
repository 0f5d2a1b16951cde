//! Queries and the seeded query generator.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::catalog::{Catalog, JoinKind};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredOp {
    Eq,
    Range,
}

/// A filter on one column.
///
/// For `Eq` the literal is the key's position in the value domain, in [0, 1).
/// For `Range` it is the covered fraction of the domain, in (0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub table: String,
    pub column: u32,
    pub op: PredOp,
    pub literal: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregation {
    /// True number of output groups.
    pub groups: f64,
}

/// `UNION ALL` over partitions of the join block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnionSpec {
    /// Fraction of the fact table each arm reads.
    pub arm_fractions: Vec<f64>,
    /// Selectivity of a filter over the union output, if any.
    pub post_filter: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub workload_id: String,
    /// Referenced tables in syntactic (FROM-list) order.
    pub tables: Vec<String>,
    pub predicates: Vec<Predicate>,
    /// Indices into the catalog's join graph; they form a spanning tree.
    pub joins: Vec<usize>,
    pub aggregate: Option<Aggregation>,
    pub union: Option<UnionSpec>,
}

impl Query {
    pub fn has_inequality_join(&self, catalog: &Catalog) -> bool {
        self.joins
            .iter()
            .any(|&e| catalog.join_graph.get(e).map(|e| e.kind) == Some(JoinKind::Inequality))
    }

    /// Checks table references and that joins connect the referenced tables.
    pub fn validate(&self, catalog: &Catalog) -> Result<Vec<usize>> {
        if self.tables.is_empty() {
            return Err(Error::InvalidSpec(format!("query {} references no tables", self.id)));
        }
        let idx = self
            .tables
            .iter()
            .map(|t| catalog.table_index(t))
            .collect::<Result<Vec<_>>>()?;
        for p in &self.predicates {
            catalog.table_index(&p.table)?;
        }
        let set: BTreeSet<usize> = idx.iter().copied().collect();
        for &e in &self.joins {
            let edge = catalog
                .join_graph
                .get(e)
                .ok_or_else(|| Error::InvalidSpec(format!("query {} uses missing edge {e}", self.id)))?;
            if !set.contains(&edge.left) || !set.contains(&edge.right) {
                return Err(Error::InvalidSpec(format!(
                    "query {} joins a table it does not reference",
                    self.id
                )));
            }
        }
        if self.joins.len() + 1 != idx.len() {
            return Err(Error::InvalidSpec(format!(
                "query {} joins do not form a spanning tree",
                self.id
            )));
        }
        Ok(idx)
    }

    /// One record per line.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("queries always serialize")
    }
}

/// Shape of the generated query mix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryMix {
    pub min_tables: usize,
    pub max_tables: usize,
    pub max_predicates: usize,
    pub p_eq: f64,
    pub p_aggregate: f64,
    pub p_union: f64,
    /// Relative weight of inequality edges during the join walk.
    pub inequality_weight: f64,
}

impl Default for QueryMix {
    fn default() -> Self {
        QueryMix {
            min_tables: 3,
            max_tables: 6,
            max_predicates: 3,
            p_eq: 0.5,
            p_aggregate: 0.7,
            p_union: 0.2,
            inequality_weight: 0.35,
        }
    }
}

/// Draws `count` queries over `catalog`, numbered from `first_index`.
pub fn generate_queries(
    catalog: &Catalog,
    workload_id: &str,
    mix: &QueryMix,
    first_index: usize,
    count: usize,
    seed: u64,
) -> Vec<Query> {
    (first_index..first_index + count)
        .map(|i| {
            let s = seed::derive_ints(seed::derive(seed, workload_id.as_bytes()), &[i as u64]);
            generate_query(catalog, workload_id, mix, i, s)
        })
        .collect()
}

fn generate_query(catalog: &Catalog, workload_id: &str, mix: &QueryMix, index: usize, s: u64) -> Query {
    let mut rng = seed::rng(s);
    let n_cat = catalog.tables.len();
    let target = rng
        .gen_range(mix.min_tables..=mix.max_tables.max(mix.min_tables))
        .min(n_cat)
        .max(1);

    let start = if rng.gen_bool(0.6) { 0 } else { rng.gen_range(0..n_cat) };
    let mut chosen = vec![start];
    let mut joins = Vec::new();
    while chosen.len() < target {
        let frontier: Vec<(usize, f64)> = catalog
            .join_graph
            .iter()
            .enumerate()
            .filter(|(_, e)| chosen.contains(&e.left) != chosen.contains(&e.right))
            .map(|(i, e)| {
                let w = match e.kind {
                    JoinKind::Equi => 1.0,
                    JoinKind::Inequality => mix.inequality_weight,
                };
                (i, w)
            })
            .filter(|&(_, w)| w > 0.0)
            .collect();
        if frontier.is_empty() {
            break;
        }
        let total: f64 = frontier.iter().map(|f| f.1).sum();
        let mut pick = rng.gen_range(0.0..total);
        let mut edge = frontier[0].0;
        for &(i, w) in &frontier {
            if pick < w {
                edge = i;
                break;
            }
            pick -= w;
        }
        let e = &catalog.join_graph[edge];
        let new = if chosen.contains(&e.left) { e.right } else { e.left };
        chosen.push(new);
        joins.push(edge);
    }

    let mut syntactic = chosen.clone();
    syntactic.shuffle(&mut rng);

    let n_preds = rng.gen_range(0..=mix.max_predicates);
    let predicates = (0..n_preds)
        .map(|_| {
            let t = chosen[rng.gen_range(0..chosen.len())];
            let column = rng.gen_range(0..catalog.tables[t].column_count);
            let (op, literal) = if rng.gen_bool(mix.p_eq) {
                (PredOp::Eq, rng.gen_range(0.0..1.0))
            } else {
                (PredOp::Range, 10f64.powf(rng.gen_range(-2.0..-0.05)))
            };
            Predicate {
                table: catalog.tables[t].name.clone(),
                column,
                op,
                literal,
            }
        })
        .collect();

    let aggregate = rng.gen_bool(mix.p_aggregate).then(|| Aggregation {
        groups: 10f64.powf(rng.gen_range(0.5..4.5)).round(),
    });

    let union = (chosen.contains(&0) && rng.gen_bool(mix.p_union)).then(|| {
        let arms = if rng.gen_bool(0.3) { 3 } else { 2 };
        let raw: Vec<f64> = (0..arms).map(|_| rng.gen_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        UnionSpec {
            arm_fractions: raw.iter().map(|r| r / total).collect(),
            post_filter: rng.gen_bool(0.6).then(|| rng.gen_range(0.05..0.9)),
        }
    });

    Query {
        id: format!("{workload_id}-q{index:04}"),
        workload_id: workload_id.to_string(),
        tables: syntactic.iter().map(|&t| catalog.tables[t].name.clone()).collect(),
        predicates,
        joins,
        aggregate,
        union,
    }
}

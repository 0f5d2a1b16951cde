//! Synthetic catalogs with controllable scale, skew and table magnitude.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Knobs for [`generate_catalog`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogSpec {
    pub n_tables: usize,
    /// Rows of the largest table at scale factor 1.
    pub max_rows: u64,
    /// Skew coefficient assigned to skewed columns, in [0, 1].
    pub skew: f64,
    pub scale_factor: f64,
    /// Total column count across tables; at least one column per table.
    pub n_columns: usize,
}

impl CatalogSpec {
    /// Synthetic analogs of the benchmark schemas (table count, column count,
    /// largest-table magnitude). Returns `None` for an unknown name.
    pub fn preset(name: &str) -> Option<CatalogSpec> {
        let spec = |n_tables, n_columns, max_rows, scale_factor, skew| CatalogSpec {
            n_tables,
            max_rows,
            skew,
            scale_factor,
            n_columns,
        };
        Some(match name {
            "job" => spec(21, 60, 36_000_000, 1.0, 0.0),
            "job_light" => spec(6, 8, 36_000_000, 1.0, 0.0),
            "job_light_ranges" => spec(6, 13, 36_000_000, 1.0, 0.0),
            "job_e" => spec(16, 41, 36_000_000, 1.0, 0.0),
            "job_m" => spec(16, 16, 36_000_000, 1.0, 0.0),
            "tpch1" => spec(8, 53, 6_000_000, 1.0, 0.0),
            "tpch10" => spec(8, 53, 6_000_000, 10.0, 0.0),
            "tpch100" => spec(8, 53, 6_000_000, 100.0, 0.0),
            "jcch" => spec(8, 53, 6_000_000, 10.0, 0.9),
            "tpcds1" => spec(24, 248, 3_000_000, 1.0, 0.0),
            "tpcds10" => spec(24, 248, 3_000_000, 10.0, 0.0),
            "stack" => spec(10, 39, 92_000_000, 1.0, 0.0),
            "corporate" => spec(78, 312, 254_000_000, 1.0, 0.0),
            _ => return None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tables == 0 {
            return Err(Error::InvalidSpec("n_tables must be at least 1".into()));
        }
        if self.max_rows == 0 {
            return Err(Error::InvalidSpec("max_rows must be at least 1".into()));
        }
        if !(self.scale_factor > 0.0 && self.scale_factor.is_finite()) {
            return Err(Error::InvalidSpec("scale_factor must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.skew) {
            return Err(Error::InvalidSpec("skew must lie in [0, 1]".into()));
        }
        if self.n_columns < self.n_tables {
            return Err(Error::InvalidSpec("need at least one column per table".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub row_count: u64,
    pub column_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JoinKind {
    Equi,
    /// Column-to-column inequality (band) join.
    Inequality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinEdge {
    pub left: usize,
    pub left_column: u32,
    pub right: usize,
    pub right_column: u32,
    pub kind: JoinKind,
    pub selectivity: f64,
}

impl JoinEdge {
    pub fn touches(&self, table: usize) -> bool {
        self.left == table || self.right == table
    }

    pub fn other(&self, table: usize) -> usize {
        if self.left == table {
            self.right
        } else {
            self.left
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub name: String,
    pub tables: Vec<Table>,
    pub join_graph: Vec<JoinEdge>,
    /// `skew[t][c]` is the skew coefficient of column `c` of table `t`.
    pub skew: Vec<Vec<f64>>,
    pub scale_factor: f64,
    pub seed: u64,
}

impl Catalog {
    pub fn table_index(&self, name: &str) -> Result<usize> {
        self.tables
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::UnknownTable(name.to_string()))
    }

    pub fn column_skew(&self, table: usize, column: u32) -> f64 {
        self.skew
            .get(table)
            .and_then(|cols| cols.get(column as usize))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn max_records(&self) -> u64 {
        self.tables.iter().map(|t| t.row_count).max().unwrap_or(0)
    }

    pub fn n_columns(&self) -> u64 {
        self.tables.iter().map(|t| u64::from(t.column_count)).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.tables.is_empty() {
            return Err(Error::InvalidSpec("catalog has no tables".into()));
        }
        if !(self.scale_factor > 0.0) {
            return Err(Error::InvalidSpec("scale_factor must be positive".into()));
        }
        for t in &self.tables {
            if t.row_count < 1 {
                return Err(Error::InvalidSpec(format!("table {} has no rows", t.name)));
            }
        }
        for e in &self.join_graph {
            if !(e.selectivity > 0.0 && e.selectivity <= 1.0) {
                return Err(Error::InvalidSpec(format!(
                    "edge selectivity {} outside (0, 1]",
                    e.selectivity
                )));
            }
            if e.left >= self.tables.len() || e.right >= self.tables.len() {
                return Err(Error::InvalidSpec("edge references missing table".into()));
            }
        }
        Ok(())
    }
}

/// Builds a snowflake-shaped catalog: table 0 is the fact table, every other
/// table hangs off an earlier one through an equi-join, and a few inequality
/// edges connect non-adjacent tables.
pub fn generate_catalog(spec: &CatalogSpec, seed: u64) -> Result<Catalog> {
    spec.validate()?;
    let mut rng = seed::rng(seed::derive(seed, b"catalog"));
    let largest = ((spec.max_rows as f64) * spec.scale_factor).round().max(1.0) as u64;

    let mut rows = vec![largest];
    let mut dims: Vec<f64> = (1..spec.n_tables).map(|_| rng.gen_range(0.3..5.0)).collect();
    dims.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    rows.extend(
        dims.iter()
            .map(|e| ((largest as f64) * 10f64.powf(-e)).round().max(1.0) as u64),
    );

    let mut columns = vec![1u32; spec.n_tables];
    for _ in spec.n_tables..spec.n_columns {
        let t = rng.gen_range(0..spec.n_tables);
        columns[t] += 1;
    }

    let tables: Vec<Table> = rows
        .iter()
        .zip(&columns)
        .enumerate()
        .map(|(i, (&row_count, &column_count))| Table {
            name: format!("t{i:02}"),
            row_count,
            column_count,
        })
        .collect();

    let mut join_graph = Vec::new();
    for child in 1..spec.n_tables {
        // Prefer attaching to the fact table or a large early dimension.
        let parent = if rng.gen_bool(0.5) { 0 } else { rng.gen_range(0..child) };
        join_graph.push(JoinEdge {
            left: parent,
            left_column: rng.gen_range(0..columns[parent]),
            right: child,
            right_column: 0,
            kind: JoinKind::Equi,
            selectivity: 1.0 / rows[child] as f64,
        });
    }
    let n_ineq = spec.n_tables / 3;
    let mut attempts = 0;
    let mut added = 0;
    while added < n_ineq && attempts < 50 {
        attempts += 1;
        let a = rng.gen_range(0..spec.n_tables);
        let b = rng.gen_range(0..spec.n_tables);
        if a == b || join_graph.iter().any(|e| e.touches(a) && e.touches(b)) {
            continue;
        }
        let c: f64 = rng.gen_range(0.5..20.0);
        let selectivity = (c / rows[a].max(rows[b]) as f64).min(1.0);
        join_graph.push(JoinEdge {
            left: a.min(b),
            left_column: rng.gen_range(0..columns[a.min(b)]),
            right: a.max(b),
            right_column: rng.gen_range(0..columns[a.max(b)]),
            kind: JoinKind::Inequality,
            selectivity,
        });
        added += 1;
    }

    let mut skew: Vec<Vec<f64>> = columns
        .iter()
        .map(|&c| {
            (0..c)
                .map(|_| {
                    if spec.skew > 0.0 && rng.gen_bool(0.5) {
                        spec.skew
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    if spec.skew > 0.0 {
        // Fact-side join keys carry the skew.
        skew[0].iter_mut().for_each(|s| *s = spec.skew);
        for e in &join_graph {
            skew[e.left][e.left_column as usize] = spec.skew;
        }
    }

    let catalog = Catalog {
        name: "catalog".into(),
        tables,
        join_graph,
        skew,
        scale_factor: spec.scale_factor,
        seed,
    };
    catalog.validate()?;
    Ok(catalog)
}

/// Classifier input: the statistics of one workload's catalog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadStats {
    pub workload_id: String,
    pub scale_factor: f64,
    pub skew_flag: bool,
    pub n_tables: u64,
    pub n_columns: u64,
    pub max_records: u64,
}

/// Skew coefficient at or above which a workload counts as skewed.
pub const DEFAULT_SKEW_THRESHOLD: f64 = 0.5;

pub fn workload_stats(catalog: &Catalog, workload_id: &str, skew_threshold: f64) -> WorkloadStats {
    let skew_flag = catalog.skew.iter().flatten().any(|&s| s >= skew_threshold);
    WorkloadStats {
        workload_id: workload_id.to_string(),
        scale_factor: catalog.scale_factor,
        skew_flag,
        n_tables: catalog.tables.len() as u64,
        n_columns: catalog.n_columns(),
        max_records: catalog.max_records(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tpch10_analog_has_sixty_million_row_fact() {
        let spec = CatalogSpec {
            n_tables: 8,
            max_rows: 6_000_000,
            skew: 0.0,
            scale_factor: 10.0,
            n_columns: 53,
        };
        let cat = generate_catalog(&spec, 7).unwrap();
        assert_eq!(cat.max_records(), 60_000_000);
        assert_eq!(cat.tables.len(), 8);
        assert_eq!(cat.n_columns(), 53);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = CatalogSpec::preset("tpcds1").unwrap();
        let a = serde_json::to_vec(&generate_catalog(&spec, 11).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_catalog(&spec, 11).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = serde_json::to_vec(&generate_catalog(&spec, 12).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn skew_propagates_to_columns() {
        let spec = CatalogSpec {
            skew: 0.9,
            ..CatalogSpec::preset("tpch1").unwrap()
        };
        let cat = generate_catalog(&spec, 3).unwrap();
        assert!(cat.skew.iter().flatten().any(|&s| s == 0.9));
        assert!(workload_stats(&cat, "x", DEFAULT_SKEW_THRESHOLD).skew_flag);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = CatalogSpec::preset("tpch1").unwrap();
        spec.n_tables = 0;
        assert!(matches!(generate_catalog(&spec, 1), Err(Error::InvalidSpec(_))));
        let mut spec = CatalogSpec::preset("tpch1").unwrap();
        spec.scale_factor = 0.0;
        assert!(matches!(generate_catalog(&spec, 1), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn stats_match_benchmark_magnitudes() {
        let stats = |name: &str| {
            let cat = generate_catalog(&CatalogSpec::preset(name).unwrap(), 5).unwrap();
            workload_stats(&cat, name, DEFAULT_SKEW_THRESHOLD)
        };
        let tpch10 = stats("tpch10");
        assert_eq!(tpch10.max_records, 60_000_000);
        assert!(!tpch10.skew_flag);
        let jcch = stats("jcch");
        assert_eq!(jcch.max_records, 60_000_000);
        assert!(jcch.skew_flag);
        assert_eq!(stats("tpcds1").max_records, 3_000_000);
    }

    #[test]
    fn catalog_invariants_hold() {
        for name in ["job", "tpch100", "stack", "corporate"] {
            let cat = generate_catalog(&CatalogSpec::preset(name).unwrap(), 2).unwrap();
            cat.validate().unwrap();
            assert!(cat
                .join_graph
                .iter()
                .all(|e| e.selectivity > 0.0 && e.selectivity <= 1.0));
        }
    }
}

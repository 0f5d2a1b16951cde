//! The simulated expert optimizer.
//!
//! Compilation is split in two: the optimizer makes its decisions from
//! *estimated* cardinalities (producing a [`Shape`]), then the shape is
//! annotated with both the estimates shown in the ASP and the true
//! cardinalities only the executor sees. Estimates differ from the truth
//! by a per-subexpression error that grows with join depth, and skewed
//! columns inflate true join fan-out beyond what the independence
//! assumption predicts.

use serde::{Deserialize, Serialize};

use super::catalog::{Catalog, JoinKind};
use super::plan::{AbstractPlan, CompiledPlan, Operator, PlanNode, TruthNode};
use super::query::{PredOp, Query};
use crate::error::{Error, Result};
use crate::hints::{HintConfig, HintMask, HintSet};
use crate::seed;

/// Per-operator cost coefficients the optimizer believes in (ms per work unit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateModel {
    pub coefficients: [f64; 10],
    /// Log-space estimation error added per joined table.
    pub error_per_join: f64,
}

impl Default for EstimateModel {
    fn default() -> Self {
        EstimateModel {
            coefficients: [
                1.0e-6, // TableScan
                3.0e-6, // IndexScan
                2.0e-6, // HashJoin
                1.0e-6, // IndexJoin
                3.0e-7, // RangeJoin
                1.5e-6, // HashedRangeJoin
                2.0e-8, // NestedLoopJoin
                4.0e-7, // Filter
                2.0e-6, // Aggregate
                2.0e-7, // Union
            ],
            error_per_join: 0.25,
        }
    }
}

impl EstimateModel {
    pub fn coefficient(&self, op: Operator) -> f64 {
        self.coefficients[op.index()]
    }
}

/// Exponent linking key-side filter selectivity to fan-out under skew.
const SKEW_CORRELATION: f64 = 0.5;
/// Only weak range filters are worth deferring.
const LATE_FILTER_MIN_SEL: f64 = 0.02;
/// Semi-join reduction needs a selective source.
const SEMI_JOIN_MAX_SEL: f64 = 0.5;

/// Hint ids the simulator interprets, resolved by name from a hint config.
#[derive(Debug, Clone, Default)]
struct KnobIds {
    hash_join: Option<u8>,
    index_join: Option<u8>,
    range_join: Option<u8>,
    hashed_range_join: Option<u8>,
    join_thru_aggr: Option<u8>,
    aggr_thru_join: Option<u8>,
    filter_thru_join: Option<u8>,
    filter_thru_union: Option<u8>,
    aggr_before_union: Option<u8>,
    join_thru_union: Option<u8>,
    index_search: Option<u8>,
    bushy_join: Option<u8>,
    large_table_first: Option<u8>,
    late_filter: Option<u8>,
    syntactic_join_order: Option<u8>,
}

impl KnobIds {
    fn from_config(cfg: &HintConfig) -> Self {
        let id = |n: &str| cfg.hint_id(n);
        KnobIds {
            hash_join: id("hash_join"),
            index_join: id("index_join"),
            range_join: id("range_join"),
            hashed_range_join: id("hashed_range_join"),
            join_thru_aggr: id("join_thru_aggr"),
            aggr_thru_join: id("aggr_thru_join"),
            filter_thru_join: id("filter_thru_join"),
            filter_thru_union: id("filter_thru_union"),
            aggr_before_union: id("aggr_before_union"),
            join_thru_union: id("join_thru_union"),
            index_search: id("index_search"),
            bushy_join: id("bushy_join"),
            large_table_first: id("large_table_first"),
            late_filter: id("late_filter"),
            syntactic_join_order: id("syntactic_join_order"),
        }
    }

    fn knobs(&self, mask: HintMask, complexity: usize) -> Knobs {
        let on = |id: Option<u8>| id.is_some_and(|i| mask.contains(i));
        let mut k = Knobs {
            hash_join: on(self.hash_join),
            index_join: on(self.index_join),
            range_join: on(self.range_join),
            hashed_range_join: on(self.hashed_range_join),
            join_thru_aggr: on(self.join_thru_aggr),
            aggr_thru_join: on(self.aggr_thru_join),
            filter_thru_join: on(self.filter_thru_join),
            filter_thru_union: on(self.filter_thru_union),
            aggr_before_union: on(self.aggr_before_union),
            join_thru_union: on(self.join_thru_union),
            index_search: on(self.index_search),
            bushy_join: on(self.bushy_join),
            large_table_first: on(self.large_table_first),
            late_filter: on(self.late_filter),
            syntactic_join_order: on(self.syntactic_join_order),
        };
        k.resolve_phases();
        k.apply_budget(complexity);
        k
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Knobs {
    hash_join: bool,
    index_join: bool,
    range_join: bool,
    hashed_range_join: bool,
    join_thru_aggr: bool,
    aggr_thru_join: bool,
    filter_thru_join: bool,
    filter_thru_union: bool,
    aggr_before_union: bool,
    join_thru_union: bool,
    index_search: bool,
    bushy_join: bool,
    large_table_first: bool,
    late_filter: bool,
    syntactic_join_order: bool,
}

impl Knobs {
    /// The optimizer applies at most one logical rewrite per phase; when
    /// several are requested the earliest in precedence order wins.
    fn resolve_phases(&mut self) {
        let mut rewrite = [
            &mut self.aggr_thru_join,
            &mut self.join_thru_aggr,
            &mut self.aggr_before_union,
            &mut self.filter_thru_union,
            &mut self.filter_thru_join,
            &mut self.late_filter,
            &mut self.index_search,
        ];
        keep_first(&mut rewrite);
        let mut order = [
            &mut self.join_thru_union,
            &mut self.bushy_join,
            &mut self.large_table_first,
            &mut self.syntactic_join_order,
        ];
        keep_first(&mut order);
    }
}

impl Knobs {
    /// Larger queries exhaust the exploration budget sooner, so fewer
    /// requested hints survive; the join-method hint is dropped first.
    fn apply_budget(&mut self, complexity: usize) {
        let budget = match complexity {
            0..=3 => 3,
            4..=6 => 2,
            _ => 1,
        };
        let mut flags = [
            &mut self.hash_join,
            &mut self.index_join,
            &mut self.range_join,
            &mut self.hashed_range_join,
            &mut self.syntactic_join_order,
            &mut self.large_table_first,
            &mut self.bushy_join,
            &mut self.join_thru_union,
            &mut self.index_search,
            &mut self.late_filter,
            &mut self.filter_thru_join,
            &mut self.filter_thru_union,
            &mut self.aggr_before_union,
            &mut self.join_thru_aggr,
            &mut self.aggr_thru_join,
        ];
        let mut active = flags.iter().filter(|f| ***f).count();
        for f in flags.iter_mut() {
            if active <= budget {
                break;
            }
            if **f {
                **f = false;
                active -= 1;
            }
        }
    }
}

fn keep_first(flags: &mut [&mut bool]) {
    let mut seen = false;
    for f in flags.iter_mut() {
        if seen {
            **f = false;
        }
        seen |= **f;
    }
}

/// Catalog-independent description of a physical plan.
///
/// Table and predicate references are positions within the query, so the
/// same shape can be re-annotated against a modified catalog.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Access {
        pos: usize,
        /// Equality predicate answered by an index, if any.
        index_pred: Option<usize>,
        /// Predicates evaluated in a filter above the scan.
        preds: Vec<usize>,
        arm: Option<usize>,
        /// Semi-join reduction transferred from this source table.
        semi_source: Option<usize>,
    },
    Join {
        method: Operator,
        join: usize,
        left: Box<Shape>,
        right: Box<Shape>,
    },
    LateFilter {
        preds: Vec<usize>,
        input: Box<Shape>,
    },
    PostFilter {
        input: Box<Shape>,
    },
    Aggregate {
        partial: bool,
        input: Box<Shape>,
    },
    Union {
        arms: Vec<Shape>,
    },
}

/// Per-query view of the catalog: resolved positions and selectivities.
struct QueryCtx<'a> {
    catalog: &'a Catalog,
    query: &'a Query,
    qseed: u64,
    /// Catalog index of each referenced table, by position.
    table_of: Vec<usize>,
    /// Position of each predicate's table.
    pred_pos: Vec<usize>,
    pred_est: Vec<f64>,
    pred_true: Vec<f64>,
    /// (left pos, right pos, kind, est selectivity, true selectivity) per query join.
    joins: Vec<(usize, usize, JoinKind, f64, f64)>,
    fact_pos: Option<usize>,
    est: &'a EstimateModel,
}

impl<'a> QueryCtx<'a> {
    fn new(catalog: &'a Catalog, query: &'a Query, est: &'a EstimateModel) -> Result<Self> {
        let table_of = query.validate(catalog)?;
        let qseed = seed::derive(catalog.seed, query.id.as_bytes());
        let pos_of = |t: usize| table_of.iter().position(|&x| x == t).expect("validated");

        let mut pred_pos = Vec::new();
        let mut pred_est = Vec::new();
        let mut pred_true = Vec::new();
        for (i, p) in query.predicates.iter().enumerate() {
            let t = catalog.table_index(&p.table)?;
            let pos = table_of
                .iter()
                .position(|&x| x == t)
                .ok_or_else(|| Error::UnknownTable(p.table.clone()))?;
            let skew = catalog.column_skew(t, p.column);
            let u = seed::unit(seed::derive_ints(qseed, &[1, i as u64]));
            let (est, truth) = match p.op {
                PredOp::Eq => {
                    let alpha =
                        0.3 + 0.5 * seed::unit(seed::derive_ints(catalog.seed, &[t as u64, u64::from(p.column)]));
                    let rows = catalog.tables[t].row_count as f64;
                    let est = 1.0 / rows.powf(alpha).max(2.0);
                    let spread = 0.3 + 2.0 * skew;
                    (est, est * (spread * (2.0 * u - 1.0)).exp())
                }
                PredOp::Range => {
                    let est = p.literal.clamp(1e-6, 1.0);
                    let spread = 0.3 + 1.5 * skew;
                    (est, est * (spread * (2.0 * u - 1.0)).exp())
                }
            };
            pred_pos.push(pos);
            pred_est.push(est.min(1.0));
            pred_true.push(truth.min(1.0));
        }

        let mut filtered = vec![1.0; table_of.len()];
        for (&pos, &t) in pred_pos.iter().zip(&pred_true) {
            filtered[pos] *= t;
        }
        let joins = query
            .joins
            .iter()
            .enumerate()
            .map(|(j, &e)| {
                let edge = &catalog.join_graph[e];
                let skew = catalog
                    .column_skew(edge.left, edge.left_column)
                    .max(catalog.column_skew(edge.right, edge.right_column));
                let inflate = match edge.kind {
                    // Filters on the key side select heavy hitters of a
                    // skewed foreign key more often than uniform would.
                    JoinKind::Equi => filtered[pos_of(edge.right)].powf(-SKEW_CORRELATION * skew),
                    JoinKind::Inequality => {
                        let u = seed::unit(seed::derive_ints(qseed, &[2, j as u64]));
                        (1.2 * skew + 0.8 * (2.0 * u - 1.0)).exp()
                    }
                };
                (
                    pos_of(edge.left),
                    pos_of(edge.right),
                    edge.kind,
                    edge.selectivity,
                    (edge.selectivity * inflate).min(1.0),
                )
            })
            .collect();

        let fact_pos = table_of.iter().position(|&t| t == 0);
        Ok(QueryCtx {
            catalog,
            query,
            qseed,
            table_of,
            pred_pos,
            pred_est,
            pred_true,
            joins,
            fact_pos,
            est,
        })
    }

    fn base_rows(&self, pos: usize) -> f64 {
        self.catalog.tables[self.table_of[pos]].row_count as f64
    }

    fn preds_of(&self, pos: usize) -> Vec<usize> {
        (0..self.pred_pos.len()).filter(|&i| self.pred_pos[i] == pos).collect()
    }

    fn join_error(&self, mask: u32, arm: Option<usize>) -> f64 {
        let n = mask.count_ones();
        if n < 2 {
            return 1.0;
        }
        let arm = arm.map_or(0, |a| a as u64 + 1);
        let z = seed::normal(seed::derive_ints(self.qseed, &[3, u64::from(mask), arm]));
        (self.est.error_per_join * f64::from(n - 1) * z).exp()
    }

    fn groups(&self) -> (f64, f64) {
        let g = self.query.aggregate.as_ref().map_or(1.0, |a| a.groups.max(1.0));
        let z = seed::normal(seed::derive_ints(self.qseed, &[4]));
        ((g * (0.5 * z).exp()).max(1.0), g)
    }

    fn post_filter(&self) -> (f64, f64) {
        let f = self.query.union.as_ref().and_then(|u| u.post_filter).unwrap_or(1.0);
        let u = seed::unit(seed::derive_ints(self.qseed, &[5]));
        (f, (f * (0.4 * (2.0 * u - 1.0)).exp()).min(1.0))
    }

    fn arm_fraction(&self, arm: Option<usize>) -> f64 {
        match (arm, &self.query.union) {
            (Some(a), Some(u)) => u.arm_fractions.get(a).copied().unwrap_or(1.0),
            _ => 1.0,
        }
    }
}

/// An annotated subplan: ASP node, truth node and bookkeeping.
#[derive(Debug, Clone)]
struct Ann {
    shape: Shape,
    node: PlanNode,
    truth: TruthNode,
    est_rows: f64,
    true_rows: f64,
    tables: u32,
    /// Semi-join reductions not yet cancelled by joining their source.
    pending: Vec<(usize, f64, f64)>,
    is_access: bool,
}

fn node(ctx: &QueryCtx, op: Operator, children: Vec<&Ann>, est_out: f64, base: f64) -> PlanNode {
    let inputs: Vec<f64> = children.iter().map(|c| c.est_rows).collect();
    let own = ctx.est.coefficient(op) * op.work(&inputs, est_out, base);
    let below: f64 = children.iter().map(|c| c.node.est_cost).sum();
    PlanNode {
        operator: op,
        est_cost: own + below,
        est_size: est_out,
        children: children.into_iter().map(|c| c.node.clone()).collect(),
    }
}

fn ann_access(
    ctx: &QueryCtx,
    pos: usize,
    index_pred: Option<usize>,
    preds: Vec<usize>,
    arm: Option<usize>,
    semi_source: Option<usize>,
) -> Ann {
    let base = ctx.base_rows(pos);
    let fraction = if arm.is_some() && ctx.fact_pos == Some(pos) {
        ctx.arm_fraction(arm)
    } else {
        1.0
    };
    let (scan_op, scan_est, scan_true) = match index_pred {
        Some(p) => (Operator::IndexScan, base * ctx.pred_est[p], base * ctx.pred_true[p]),
        None => (Operator::TableScan, base, base),
    };
    let scan = Ann {
        shape: Shape::Access {
            pos,
            index_pred,
            preds: Vec::new(),
            arm: None,
            semi_source: None,
        },
        node: PlanNode::leaf(
            scan_op,
            ctx.est.coefficient(scan_op) * scan_op.work(&[], scan_est, base),
            scan_est,
        ),
        truth: TruthNode {
            rows: scan_true,
            base_rows: base,
            children: Vec::new(),
        },
        est_rows: scan_est,
        true_rows: scan_true,
        tables: 1 << pos,
        pending: Vec::new(),
        is_access: true,
    };

    let mut out = scan;
    if !preds.is_empty() || fraction < 1.0 {
        let est = out.est_rows * preds.iter().map(|&p| ctx.pred_est[p]).product::<f64>() * fraction;
        let tru = out.true_rows * preds.iter().map(|&p| ctx.pred_true[p]).product::<f64>() * fraction;
        out = unary(ctx, Operator::Filter, out, est, tru, base);
    }
    if let Some(src) = semi_source {
        let src_preds = ctx.preds_of(src);
        let re = src_preds.iter().map(|&p| ctx.pred_est[p]).product::<f64>().sqrt();
        let rt = src_preds.iter().map(|&p| ctx.pred_true[p]).product::<f64>().sqrt();
        let (est, tru) = (out.est_rows * re, out.true_rows * rt);
        out = unary(ctx, Operator::Filter, out, est, tru, base);
        out.pending.push((src, re, rt));
    }
    out.shape = Shape::Access {
        pos,
        index_pred,
        preds,
        arm,
        semi_source,
    };
    out.is_access = true;
    out
}

fn unary(ctx: &QueryCtx, op: Operator, input: Ann, est: f64, tru: f64, base: f64) -> Ann {
    let node = node(ctx, op, vec![&input], est, base);
    Ann {
        shape: input.shape.clone(),
        node,
        truth: TruthNode {
            rows: tru,
            base_rows: base,
            children: vec![input.truth],
        },
        est_rows: est,
        true_rows: tru,
        tables: input.tables,
        pending: input.pending,
        is_access: false,
    }
}

fn ann_join(ctx: &QueryCtx, method: Operator, join: usize, left: Ann, right: Ann, arm: Option<usize>) -> Ann {
    let (_, _, _, sel_est, sel_true) = ctx.joins[join];
    let tables = left.tables | right.tables;
    let mut est = left.est_rows * right.est_rows * sel_est * ctx.join_error(tables, arm);
    let mut tru = left.true_rows * right.true_rows * sel_true;
    let mut pending = Vec::new();
    for &(src, re, rt) in left.pending.iter().chain(&right.pending) {
        if tables & (1 << src) != 0 {
            est /= re;
            tru /= rt;
        } else {
            pending.push((src, re, rt));
        }
    }
    let base = if right.is_access {
        right.truth_base()
    } else {
        right.est_rows
    };
    let node = node(ctx, method, vec![&left, &right], est, base);
    let true_base = if right.is_access { base } else { right.true_rows };
    Ann {
        shape: Shape::Join {
            method,
            join,
            left: Box::new(left.shape.clone()),
            right: Box::new(right.shape.clone()),
        },
        node,
        truth: TruthNode {
            rows: tru,
            base_rows: true_base,
            children: vec![left.truth, right.truth],
        },
        est_rows: est,
        true_rows: tru,
        tables,
        pending,
        is_access: false,
    }
}

impl Ann {
    fn truth_base(&self) -> f64 {
        // Scans record their table size; filters above them inherit it.
        let mut t = &self.truth;
        while let Some(c) = t.children.first() {
            t = c;
        }
        t.base_rows
    }
}

fn ann_late_filter(ctx: &QueryCtx, preds: Vec<usize>, input: Ann) -> Ann {
    let est = input.est_rows * preds.iter().map(|&p| ctx.pred_est[p]).product::<f64>();
    let tru = input.true_rows * preds.iter().map(|&p| ctx.pred_true[p]).product::<f64>();
    let inner = input.shape.clone();
    let mut out = unary(ctx, Operator::Filter, input, est, tru, 0.0);
    out.shape = Shape::LateFilter {
        preds,
        input: Box::new(inner),
    };
    out
}

fn ann_post_filter(ctx: &QueryCtx, input: Ann) -> Ann {
    let (fe, ft) = ctx.post_filter();
    let (est, tru) = (input.est_rows * fe, input.true_rows * ft);
    let inner = input.shape.clone();
    let mut out = unary(ctx, Operator::Filter, input, est, tru, 0.0);
    out.shape = Shape::PostFilter { input: Box::new(inner) };
    out
}

fn ann_aggregate(ctx: &QueryCtx, partial: bool, input: Ann) -> Ann {
    let (ge, gt) = ctx.groups();
    let k = if partial { 4.0 } else { 1.0 };
    let est = input.est_rows.min(k * ge);
    let tru = input.true_rows.min(k * gt);
    let inner = input.shape.clone();
    let mut out = unary(ctx, Operator::Aggregate, input, est, tru, 0.0);
    out.shape = Shape::Aggregate {
        partial,
        input: Box::new(inner),
    };
    out
}

fn ann_union(ctx: &QueryCtx, arms: Vec<Ann>) -> Ann {
    let est: f64 = arms.iter().map(|a| a.est_rows).sum();
    let tru: f64 = arms.iter().map(|a| a.true_rows).sum();
    let node = node(ctx, Operator::Union, arms.iter().collect(), est, 0.0);
    let tables = arms.iter().fold(0, |m, a| m | a.tables);
    Ann {
        shape: Shape::Union {
            arms: arms.iter().map(|a| a.shape.clone()).collect(),
        },
        node,
        truth: TruthNode {
            rows: tru,
            base_rows: 0.0,
            children: arms.into_iter().map(|a| a.truth).collect(),
        },
        est_rows: est,
        true_rows: tru,
        tables,
        pending: Vec::new(),
        is_access: false,
    }
}

/// Re-annotates a shape; used both when building and for what-if analysis.
fn annotate(ctx: &QueryCtx, shape: &Shape, arm: Option<usize>) -> Ann {
    match shape {
        Shape::Access {
            pos,
            index_pred,
            preds,
            arm: a,
            semi_source,
        } => ann_access(ctx, *pos, *index_pred, preds.clone(), *a, *semi_source),
        Shape::Join {
            method,
            join,
            left,
            right,
        } => {
            let l = annotate(ctx, left, arm);
            let r = annotate(ctx, right, arm);
            ann_join(ctx, *method, *join, l, r, arm)
        }
        Shape::LateFilter { preds, input } => ann_late_filter(ctx, preds.clone(), annotate(ctx, input, arm)),
        Shape::PostFilter { input } => ann_post_filter(ctx, annotate(ctx, input, arm)),
        Shape::Aggregate { partial, input } => ann_aggregate(ctx, *partial, annotate(ctx, input, arm)),
        Shape::Union { arms } => ann_union(
            ctx,
            arms.iter()
                .enumerate()
                .map(|(i, s)| annotate(ctx, s, Some(i)))
                .collect(),
        ),
    }
}

/// Compiles queries of one catalog into plans.
#[derive(Debug, Clone)]
pub struct Compiler<'a> {
    catalog: &'a Catalog,
    knob_ids: KnobIds,
    estimates: EstimateModel,
}

impl<'a> Compiler<'a> {
    pub fn new(catalog: &'a Catalog, hints: &HintConfig) -> Self {
        Compiler {
            catalog,
            knob_ids: KnobIds::from_config(hints),
            estimates: EstimateModel::default(),
        }
    }

    pub fn with_estimates(mut self, estimates: EstimateModel) -> Self {
        self.estimates = estimates;
        self
    }

    pub fn catalog(&self) -> &Catalog {
        self.catalog
    }

    /// Compiles `query` under `hintset`. Pure and deterministic.
    pub fn compile(&self, query: &Query, hintset: &HintSet) -> Result<CompiledPlan> {
        let ctx = QueryCtx::new(self.catalog, query, &self.estimates)?;
        let knobs = self.knob_ids.knobs(hintset.enabled, query_complexity(&ctx));
        let ann = Planner { ctx: &ctx, knobs }.plan();
        Ok(finish(ann, self.catalog))
    }

    /// The optimizer's decisions for `query` under `hintset`.
    pub fn shape(&self, query: &Query, hintset: &HintSet) -> Result<Shape> {
        let ctx = QueryCtx::new(self.catalog, query, &self.estimates)?;
        let knobs = self.knob_ids.knobs(hintset.enabled, query_complexity(&ctx));
        Ok(Planner { ctx: &ctx, knobs }.plan().shape)
    }

    /// Annotates a fixed shape against this compiler's catalog.
    pub fn annotate(&self, query: &Query, shape: &Shape) -> Result<CompiledPlan> {
        let ctx = QueryCtx::new(self.catalog, query, &self.estimates)?;
        Ok(finish(annotate(&ctx, shape, None), self.catalog))
    }
}

/// Table count, plus one per extra union arm and per inequality join.
fn query_complexity(ctx: &QueryCtx) -> usize {
    let q = ctx.query;
    let arms = q.union.as_ref().map_or(0, |u| u.arm_fractions.len().saturating_sub(1));
    let inequality = ctx.joins.iter().filter(|j| j.2 == JoinKind::Inequality).count();
    q.tables.len() + arms + inequality
}

fn finish(ann: Ann, catalog: &Catalog) -> CompiledPlan {
    CompiledPlan {
        asp: AbstractPlan::new(ann.node),
        truth: ann.truth,
        database_rows: catalog.max_records() as f64,
    }
}

struct Planner<'c, 'a> {
    ctx: &'c QueryCtx<'a>,
    knobs: Knobs,
}

impl Planner<'_, '_> {
    fn plan(&self) -> Ann {
        let ctx = self.ctx;
        let all: Vec<usize> = (0..ctx.table_of.len()).collect();
        match &ctx.query.union {
            Some(u) if !u.arm_fractions.is_empty() => {
                self.plan_union(&all, u.arm_fractions.len(), u.post_filter.is_some())
            }
            _ => {
                let block = self.block(&all, None);
                match ctx.query.aggregate {
                    Some(_) => self.aggregate(block),
                    None => block,
                }
            }
        }
    }

    fn plan_union(&self, all: &[usize], n_arms: usize, has_post: bool) -> Ann {
        let ctx = self.ctx;
        let k = self.knobs;
        let factored = if k.join_thru_union && all.len() >= 2 {
            self.factor_candidate(all)
        } else {
            None
        };
        let arm_tables: Vec<usize> = all
            .iter()
            .copied()
            .filter(|&p| Some(p) != factored.map(|f| f.0))
            .collect();

        let mut arms = Vec::with_capacity(n_arms);
        for a in 0..n_arms {
            let mut arm = self.block(&arm_tables, Some(a));
            if has_post && k.filter_thru_union {
                arm = ann_post_filter(ctx, arm);
            }
            if ctx.query.aggregate.is_some() && k.aggr_before_union && factored.is_none() {
                arm = ann_aggregate(ctx, true, arm);
            }
            arms.push(arm);
        }
        let mut top = ann_union(ctx, arms);
        if has_post && !k.filter_thru_union {
            top = ann_post_filter(ctx, top);
        }
        if let Some((pos, join)) = factored {
            let right = self.access(pos, &ctx.preds_of(pos), None, None);
            top = self.best_join(join, top, right, None);
        }
        if ctx.query.aggregate.is_some() {
            top = ann_aggregate(ctx, false, top);
        }
        top
    }

    /// Smallest non-fact leaf of the join tree, with its join.
    fn factor_candidate(&self, all: &[usize]) -> Option<(usize, usize)> {
        let ctx = self.ctx;
        all.iter()
            .copied()
            .filter(|&p| Some(p) != ctx.fact_pos)
            .filter_map(|p| {
                let incident: Vec<usize> = (0..ctx.joins.len())
                    .filter(|&j| ctx.joins[j].0 == p || ctx.joins[j].1 == p)
                    .collect();
                (incident.len() == 1).then(|| (p, incident[0]))
            })
            .min_by(|a, b| {
                ctx.base_rows(a.0)
                    .partial_cmp(&ctx.base_rows(b.0))
                    .expect("finite")
                    .then(a.0.cmp(&b.0))
            })
    }

    fn block(&self, tables: &[usize], arm: Option<usize>) -> Ann {
        let ctx = self.ctx;
        let k = self.knobs;
        let range_preds: Vec<usize> = tables
            .iter()
            .flat_map(|&p| ctx.preds_of(p))
            .filter(|&i| ctx.query.predicates[i].op == PredOp::Range && ctx.pred_est[i] >= LATE_FILTER_MIN_SEL)
            .collect();
        let deferred: Vec<usize> = if k.late_filter && tables.len() >= 2 {
            range_preds
        } else {
            Vec::new()
        };

        let scan_preds =
            |p: usize| -> Vec<usize> { ctx.preds_of(p).into_iter().filter(|i| !deferred.contains(i)).collect() };

        let semi = if k.filter_thru_join {
            self.semi_join_target(tables, &scan_preds)
        } else {
            None
        };

        let mut access: Vec<Option<Ann>> = vec![None; ctx.table_of.len()];
        for &p in tables {
            let src = semi.filter(|&(_, partner)| partner == p).map(|(s, _)| s);
            access[p] = Some(self.access(p, &scan_preds(p), arm, src));
        }

        let joined = if k.bushy_join && tables.len() >= 4 {
            self.bushy(tables, &mut access, arm)
        } else {
            self.left_deep(tables, &mut access, arm)
        };

        if deferred.is_empty() {
            joined
        } else {
            ann_late_filter(ctx, deferred, joined)
        }
    }

    /// (source, partner) for the semi-join reduction rewrite.
    fn semi_join_target(&self, tables: &[usize], scan_preds: &dyn Fn(usize) -> Vec<usize>) -> Option<(usize, usize)> {
        let ctx = self.ctx;
        let mut best: Option<(f64, usize, usize)> = None;
        for &s in tables {
            let preds = scan_preds(s);
            if preds.is_empty() {
                continue;
            }
            let sel: f64 = preds.iter().map(|&p| ctx.pred_est[p]).product();
            if sel > SEMI_JOIN_MAX_SEL {
                continue;
            }
            let partner = ctx
                .joins
                .iter()
                .filter(|j| j.2 == JoinKind::Equi)
                .filter_map(|j| {
                    if j.0 == s {
                        Some(j.1)
                    } else if j.1 == s {
                        Some(j.0)
                    } else {
                        None
                    }
                })
                .filter(|p| tables.contains(p))
                .max_by(|a, b| {
                    ctx.base_rows(*a)
                        .partial_cmp(&ctx.base_rows(*b))
                        .expect("finite")
                        .then(b.cmp(a))
                });
            if let Some(partner) = partner {
                if best.map_or(true, |(bs, _, _)| sel < bs) {
                    best = Some((sel, s, partner));
                }
            }
        }
        best.map(|(_, s, p)| (s, p))
    }

    fn access(&self, pos: usize, preds: &[usize], arm: Option<usize>, semi: Option<usize>) -> Ann {
        let ctx = self.ctx;
        let eq = preds
            .iter()
            .copied()
            .filter(|&i| ctx.query.predicates[i].op == PredOp::Eq)
            .min_by(|&a, &b| {
                ctx.pred_est[a]
                    .partial_cmp(&ctx.pred_est[b])
                    .expect("finite")
                    .then(a.cmp(&b))
            });
        let scan = ann_access(ctx, pos, None, preds.to_vec(), arm, semi);
        let Some(ix) = eq else { return scan };
        let rest: Vec<usize> = preds.iter().copied().filter(|&i| i != ix).collect();
        let index = ann_access(ctx, pos, Some(ix), rest, arm, semi);
        if self.knobs.index_search || index.node.est_cost < scan.node.est_cost {
            index
        } else {
            scan
        }
    }

    fn connecting_join(&self, left: u32, right: u32) -> Option<usize> {
        self.ctx.joins.iter().position(|&(a, b, ..)| {
            (left & 1 << a != 0 && right & 1 << b != 0) || (left & 1 << b != 0 && right & 1 << a != 0)
        })
    }

    fn left_deep(&self, tables: &[usize], access: &mut [Option<Ann>], arm: Option<usize>) -> Ann {
        let order = self.join_order(tables, access, arm);
        let mut acc = access[order[0]].take().expect("access");
        for &next in &order[1..] {
            let join = self
                .connecting_join(acc.tables, 1 << next)
                .expect("join order is connected");
            let right = access[next].take().expect("access");
            acc = self.best_join(join, acc, right, arm);
        }
        acc
    }

    fn join_order(&self, tables: &[usize], access: &[Option<Ann>], arm: Option<usize>) -> Vec<usize> {
        let ctx = self.ctx;
        let k = self.knobs;
        let start = k.large_table_first.then(|| {
            *tables
                .iter()
                .max_by(|&&a, &&b| {
                    ctx.base_rows(a)
                        .partial_cmp(&ctx.base_rows(b))
                        .expect("finite")
                        .then(b.cmp(&a))
                })
                .expect("non-empty block")
        });
        if k.syntactic_join_order {
            let mut order = vec![start.unwrap_or_else(|| *tables.iter().min().expect("non-empty block"))];
            let mut mask = 1u32 << order[0];
            while order.len() < tables.len() {
                let next = *tables
                    .iter()
                    .filter(|&&p| mask & 1 << p == 0 && self.connecting_join(mask, 1 << p).is_some())
                    .min()
                    .expect("connected block");
                order.push(next);
                mask |= 1 << next;
            }
            return order;
        }

        // Left-deep dynamic programming over connected subsets, minimizing
        // the sum of estimated intermediate result sizes.
        let n = tables.len();
        let pos_mask = |sub: usize| -> u32 { (0..n).filter(|i| sub & 1 << i != 0).fold(0, |m, i| m | 1 << tables[i]) };
        let mut best: Vec<Option<(f64, Vec<usize>)>> = vec![None; 1 << n];
        for (i, &p) in tables.iter().enumerate() {
            if start.map_or(true, |s| s == p) {
                best[1 << i] = Some((0.0, vec![p]));
            }
        }
        for sub in 1..(1usize << n) {
            let Some((cost, order)) = best[sub].clone() else {
                continue;
            };
            let joined = pos_mask(sub);
            for (i, &p) in tables.iter().enumerate() {
                if sub & 1 << i != 0 || self.connecting_join(joined, 1 << p).is_none() {
                    continue;
                }
                let next = sub | 1 << i;
                let c = cost + self.subset_estimate(pos_mask(next), access, arm);
                if best[next].as_ref().map_or(true, |b| c < b.0) {
                    let mut o = order.clone();
                    o.push(p);
                    best[next] = Some((c, o));
                }
            }
        }
        best[(1 << n) - 1].take().expect("connected block").1
    }

    /// Estimated rows of joining the tables in `mask`; independent of order.
    fn subset_estimate(&self, mask: u32, access: &[Option<Ann>], arm: Option<usize>) -> f64 {
        let ctx = self.ctx;
        let mut est = ctx.join_error(mask, arm);
        for (p, a) in access.iter().enumerate() {
            if mask & 1 << p == 0 {
                continue;
            }
            let a = a.as_ref().expect("access");
            est *= a.est_rows;
            for &(src, re, _) in &a.pending {
                if mask & 1 << src != 0 {
                    est /= re;
                }
            }
        }
        for &(l, r, _, sel, _) in &ctx.joins {
            if mask & 1 << l != 0 && mask & 1 << r != 0 {
                est *= sel;
            }
        }
        est
    }

    fn bushy(&self, tables: &[usize], access: &mut [Option<Ann>], arm: Option<usize>) -> Ann {
        let ctx = self.ctx;
        let inner: Vec<usize> = (0..ctx.joins.len())
            .filter(|&j| tables.contains(&ctx.joins[j].0) && tables.contains(&ctx.joins[j].1))
            .collect();
        let mut best: Option<(usize, usize, Vec<usize>)> = None;
        for &cut in &inner {
            let side = self.component(tables, &inner, cut, ctx.joins[cut].0);
            let imbalance = side.len().abs_diff(tables.len() - side.len());
            if best.as_ref().map_or(true, |b| imbalance < b.0) {
                best = Some((imbalance, cut, side));
            }
        }
        let (_, cut, side_a) = best.expect("block with joins");
        let side_b: Vec<usize> = tables.iter().copied().filter(|p| !side_a.contains(p)).collect();
        let a = self.left_deep(&side_a, access, arm);
        let b = self.left_deep(&side_b, access, arm);
        let (l, r) = if a.est_rows >= b.est_rows { (a, b) } else { (b, a) };
        self.best_join(cut, l, r, arm)
    }

    fn component(&self, tables: &[usize], joins: &[usize], cut: usize, from: usize) -> Vec<usize> {
        let mut seen = vec![from];
        let mut frontier = vec![from];
        while let Some(p) = frontier.pop() {
            for &j in joins {
                if j == cut {
                    continue;
                }
                let (a, b, ..) = self.ctx.joins[j];
                let other = if a == p {
                    b
                } else if b == p {
                    a
                } else {
                    continue;
                };
                if tables.contains(&other) && !seen.contains(&other) {
                    seen.push(other);
                    frontier.push(other);
                }
            }
        }
        seen.sort_unstable();
        seen
    }

    fn join_methods(&self, join: usize, right_is_access: bool) -> Vec<Operator> {
        let k = self.knobs;
        match self.ctx.joins[join].2 {
            JoinKind::Equi => {
                if k.hash_join {
                    vec![Operator::HashJoin]
                } else if k.index_join && right_is_access {
                    vec![Operator::IndexJoin]
                } else if right_is_access {
                    vec![Operator::HashJoin, Operator::IndexJoin, Operator::NestedLoopJoin]
                } else {
                    vec![Operator::HashJoin, Operator::NestedLoopJoin]
                }
            }
            JoinKind::Inequality => match (k.range_join, k.hashed_range_join) {
                (true, true) => vec![Operator::RangeJoin, Operator::HashedRangeJoin],
                (true, false) => vec![Operator::RangeJoin],
                (false, true) => vec![Operator::HashedRangeJoin],
                (false, false) => vec![Operator::RangeJoin, Operator::HashedRangeJoin, Operator::NestedLoopJoin],
            },
        }
    }

    fn best_join(&self, join: usize, left: Ann, right: Ann, arm: Option<usize>) -> Ann {
        let methods = self.join_methods(join, right.is_access);
        let mut best: Option<Ann> = None;
        for m in methods {
            let cand = ann_join(self.ctx, m, join, left.clone(), right.clone(), arm);
            if best.as_ref().map_or(true, |b| cand.node.est_cost < b.node.est_cost) {
                best = Some(cand);
            }
        }
        best.expect("at least one join method")
    }

    fn aggregate(&self, block: Ann) -> Ann {
        let ctx = self.ctx;
        let k = self.knobs;
        let lazy = ann_aggregate(ctx, false, block.clone());
        let Shape::Join { join, left, right, .. } = &block.shape else {
            return lazy;
        };
        if k.join_thru_aggr {
            return lazy;
        }
        let l = annotate(ctx, left, None);
        let r = annotate(ctx, right, None);
        // Pre-aggregation is only a valid rewrite when it shrinks its input.
        let larger = l.est_rows.max(r.est_rows);
        if 4.0 * ctx.groups().0 > 0.1 * larger {
            return lazy;
        }
        let (l, r) = if l.est_rows >= r.est_rows {
            (ann_aggregate(ctx, true, l), r)
        } else {
            (l, ann_aggregate(ctx, true, r))
        };
        let eager = ann_aggregate(ctx, false, self.best_join(*join, l, r, None));
        if k.aggr_thru_join || eager.node.est_cost < lazy.node.est_cost {
            eager
        } else {
            lazy
        }
    }
}

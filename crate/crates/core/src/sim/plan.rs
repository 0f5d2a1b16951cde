//! Abstract plans (ASPs) and the hidden ground truth that travels with them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Operator {
    TableScan,
    IndexScan,
    HashJoin,
    IndexJoin,
    RangeJoin,
    HashedRangeJoin,
    NestedLoopJoin,
    Filter,
    Aggregate,
    Union,
}

impl Operator {
    pub const ALL: [Operator; 10] = [
        Operator::TableScan,
        Operator::IndexScan,
        Operator::HashJoin,
        Operator::IndexJoin,
        Operator::RangeJoin,
        Operator::HashedRangeJoin,
        Operator::NestedLoopJoin,
        Operator::Filter,
        Operator::Aggregate,
        Operator::Union,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Operator::TableScan => "TableScan",
            Operator::IndexScan => "IndexScan",
            Operator::HashJoin => "HashJoin",
            Operator::IndexJoin => "IndexJoin",
            Operator::RangeJoin => "RangeJoin",
            Operator::HashedRangeJoin => "HashedRangeJoin",
            Operator::NestedLoopJoin => "NestedLoopJoin",
            Operator::Filter => "Filter",
            Operator::Aggregate => "Aggregate",
            Operator::Union => "Union",
        }
    }

    pub fn is_scan(self) -> bool {
        matches!(self, Operator::TableScan | Operator::IndexScan)
    }

    pub fn is_join(self) -> bool {
        matches!(
            self,
            Operator::HashJoin
                | Operator::IndexJoin
                | Operator::RangeJoin
                | Operator::HashedRangeJoin
                | Operator::NestedLoopJoin
        )
    }

    /// Abstract work units performed by one operator instance.
    ///
    /// `inputs` are the child output cardinalities in child order, `out` the
    /// operator's own output cardinality and `base` the row count of the
    /// underlying table for scans and index lookups. Every formula is
    /// non-decreasing in each argument.
    pub fn work(self, inputs: &[f64], out: f64, base: f64) -> f64 {
        let l = inputs.first().copied().unwrap_or(0.0);
        let r = inputs.get(1).copied().unwrap_or(0.0);
        match self {
            Operator::TableScan => base,
            Operator::IndexScan => 50.0 * (base + 1.0).log2() + out,
            Operator::Filter => l,
            Operator::HashJoin => l + 2.0 * r + out,
            Operator::IndexJoin => l * (base + 1.0).log2() + out,
            Operator::NestedLoopJoin => l * r + out,
            Operator::RangeJoin => l * (l + 2.0).log2() + r * (r + 2.0).log2() + out,
            Operator::HashedRangeJoin => 3.0 * (l + r) + 1.5 * out,
            Operator::Aggregate => l + out,
            Operator::Union => inputs.iter().sum(),
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Operator::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::UnknownOperator(s.to_string()))
    }
}

/// One node of an abstract plan, as shown to the learned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub operator: Operator,
    pub est_cost: f64,
    pub est_size: f64,
    pub children: Vec<PlanNode>,
}

impl PlanNode {
    pub fn leaf(operator: Operator, est_cost: f64, est_size: f64) -> Self {
        PlanNode {
            operator,
            est_cost,
            est_size,
            children: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(PlanNode::node_count).sum::<usize>()
    }

    pub fn contains(&self, op: Operator) -> bool {
        self.operator == op || self.children.iter().any(|c| c.contains(op))
    }

    pub fn preorder(&self) -> Vec<&PlanNode> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(n.children.iter().rev());
        }
        out
    }

    fn write_canonical(&self, out: &mut String) {
        out.push_str(self.operator.name());
        out.push('(');
        out.push_str(&quantize(self.est_cost));
        out.push(',');
        out.push_str(&quantize(self.est_size));
        out.push(')');
        if !self.children.is_empty() {
            out.push('[');
            for (i, c) in self.children.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                c.write_canonical(out);
            }
            out.push(']');
        }
    }
}

/// Three significant digits, so float jitter below the grid cannot split plans.
fn quantize(v: f64) -> String {
    format!("{v:.2e}")
}

/// An operator tree produced by compiling a query under one hintset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AbstractPlan {
    pub root: PlanNode,
}

impl AbstractPlan {
    pub fn new(root: PlanNode) -> Self {
        AbstractPlan { root }
    }

    /// Structure, operators and quantized estimates; the dedup key.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        self.root.write_canonical(&mut s);
        s
    }

    pub fn plan_hash(&self) -> PlanHash {
        let d = Sha256::digest(self.canonical().as_bytes());
        let mut b = [0u8; 8];
        b.copy_from_slice(&d[..8]);
        PlanHash(u64::from_be_bytes(b))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plans always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, Error> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PlanHash(pub u64);

impl fmt::Display for PlanHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

/// True cardinalities for the nodes of an [`AbstractPlan`], same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthNode {
    pub rows: f64,
    /// Underlying table size for scans and the inner side of index joins.
    pub base_rows: f64,
    pub children: Vec<TruthNode>,
}

/// A compiled plan: what the model sees plus what only the executor sees.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledPlan {
    pub asp: AbstractPlan,
    pub truth: TruthNode,
    /// Row count of the largest table in the database.
    pub database_rows: f64,
}

impl CompiledPlan {
    pub fn plan_hash(&self) -> PlanHash {
        self.asp.plan_hash()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> AbstractPlan {
        AbstractPlan::new(PlanNode {
            operator: Operator::HashJoin,
            est_cost: 12.5,
            est_size: 40.0,
            children: vec![
                PlanNode::leaf(Operator::TableScan, 5.0, 100.0),
                PlanNode::leaf(Operator::IndexScan, 2.0, 10.0),
            ],
        })
    }

    #[test]
    fn json_has_exactly_the_asp_fields() {
        let v: serde_json::Value = serde_json::from_str(&sample().to_json()).unwrap();
        let obj = v.as_object().unwrap();
        let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["children", "est_cost", "est_size", "operator"]);
        assert_eq!(obj["operator"], "HashJoin");
        assert_eq!(AbstractPlan::from_json(&sample().to_json()).unwrap(), sample());
    }

    #[test]
    fn hash_ignores_jitter_below_grid() {
        let a = sample();
        let mut b = sample();
        b.root.est_cost = 12.5000001;
        b.root.children[0].est_size = 100.0000004;
        assert_eq!(a.plan_hash(), b.plan_hash());
        let mut c = sample();
        c.root.est_cost = 12.7;
        assert_ne!(a.plan_hash(), c.plan_hash());
        let mut d = sample();
        d.root.operator = Operator::NestedLoopJoin;
        assert_ne!(a.plan_hash(), d.plan_hash());
    }

    #[test]
    fn operator_names_parse() {
        for op in Operator::ALL {
            assert_eq!(op.name().parse::<Operator>().unwrap(), op);
        }
        assert!(matches!("Sort".parse::<Operator>(), Err(Error::UnknownOperator(_))));
    }

    #[test]
    fn work_is_monotone_in_inputs() {
        for op in Operator::ALL {
            let lo = op.work(&[10.0, 20.0], 5.0, 100.0);
            let hi = op.work(&[11.0, 21.0], 6.0, 101.0);
            assert!(hi >= lo, "{op}");
        }
    }
}

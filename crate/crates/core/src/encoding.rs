//! Plan featurization for the value network.

use crate::sim::plan::{AbstractPlan, Operator, PlanNode};

/// Operator one-hot, log1p(cost), log1p(size), null flag.
pub const FEATURE_DIM: usize = Operator::ALL.len() + 3;

/// A plan as a binary tree of fixed-width feature vectors.
///
/// Node 0 is the root; nodes are stored in preorder. Null pads are all the
/// same vector, so they share one node.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedTree {
    pub features: Vec<[f64; FEATURE_DIM]>,
    /// Child indices, `-1` when absent.
    pub left: Vec<i32>,
    pub right: Vec<i32>,
}

impl EncodedTree {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }
}

/// A node of the binarized plan; `None` is a null pad.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryNode {
    pub node: Option<PlanNode>,
    pub left: Option<Box<BinaryNode>>,
    pub right: Option<Box<BinaryNode>>,
}

impl BinaryNode {
    fn null() -> Self {
        BinaryNode {
            node: None,
            left: None,
            right: None,
        }
    }

    pub fn is_null(&self) -> bool {
        self.node.is_none()
    }
}

/// Every plan node gets exactly two children: missing ones become null
/// pads and n-ary nodes are folded left-deep through carrier copies of the
/// parent operator.
pub fn binarize(plan: &AbstractPlan) -> BinaryNode {
    binarize_node(&plan.root)
}

fn binarize_node(n: &PlanNode) -> BinaryNode {
    let bare = |est_cost, est_size| PlanNode {
        operator: n.operator,
        est_cost,
        est_size,
        children: Vec::new(),
    };
    let kids: Vec<BinaryNode> = n.children.iter().map(binarize_node).collect();
    match kids.len() {
        0 => BinaryNode {
            node: Some(bare(n.est_cost, n.est_size)),
            left: Some(Box::new(BinaryNode::null())),
            right: Some(Box::new(BinaryNode::null())),
        },
        1 => BinaryNode {
            node: Some(bare(n.est_cost, n.est_size)),
            left: Some(Box::new(kids.into_iter().next().expect("one child"))),
            right: Some(Box::new(BinaryNode::null())),
        },
        _ => {
            let mut it = n.children.iter().zip(kids);
            let (c0, b0) = it.next().expect("first child");
            let (c1, b1) = it.next().expect("second child");
            let mut cost = c0.est_cost + c1.est_cost;
            let mut size = c0.est_size + c1.est_size;
            let mut acc = BinaryNode {
                node: Some(bare(cost, size)),
                left: Some(Box::new(b0)),
                right: Some(Box::new(b1)),
            };
            for (c, b) in it {
                cost += c.est_cost;
                size += c.est_size;
                acc = BinaryNode {
                    node: Some(bare(cost, size)),
                    left: Some(Box::new(acc)),
                    right: Some(Box::new(b)),
                };
            }
            // The outermost carrier is the real node.
            acc.node = Some(bare(n.est_cost, n.est_size));
            acc
        }
    }
}

pub fn node_features(node: Option<&PlanNode>) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    match node {
        Some(n) => {
            f[n.operator.index()] = 1.0;
            let k = Operator::ALL.len();
            f[k] = n.est_cost.max(0.0).ln_1p();
            f[k + 1] = n.est_size.max(0.0).ln_1p();
        }
        None => f[FEATURE_DIM - 1] = 1.0,
    }
    f
}

pub fn featurize(plan: &AbstractPlan) -> EncodedTree {
    let mut tree = EncodedTree {
        features: Vec::new(),
        left: Vec::new(),
        right: Vec::new(),
    };
    push(&binarize(plan), &mut tree, &mut None);
    tree
}

fn push(b: &BinaryNode, t: &mut EncodedTree, null: &mut Option<i32>) -> i32 {
    if b.is_null() {
        if let Some(i) = *null {
            return i;
        }
    }
    let idx = t.features.len();
    if b.is_null() {
        *null = Some(idx as i32);
    }
    t.features.push(node_features(b.node.as_ref()));
    t.left.push(-1);
    t.right.push(-1);
    if let Some(l) = &b.left {
        t.left[idx] = push(l, t, null);
    }
    if let Some(r) = &b.right {
        t.right[idx] = push(r, t, null);
    }
    idx as i32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_gets_two_null_children() {
        let plan = AbstractPlan::new(PlanNode::leaf(Operator::TableScan, 0.0, 0.0));
        let b = binarize(&plan);
        assert!(b.left.as_ref().unwrap().is_null() && b.right.as_ref().unwrap().is_null());
        let t = featurize(&plan);
        assert_eq!(t.len(), 2);
        assert_eq!((t.left[0], t.right[0]), (1, 1));
        let mut expect = [0.0; FEATURE_DIM];
        expect[Operator::TableScan.index()] = 1.0;
        assert_eq!(t.features[0], expect);
        assert_eq!(t.features[1][FEATURE_DIM - 1], 1.0);
        assert!(t.features[1][..FEATURE_DIM - 1].iter().all(|&v| v == 0.0));
        assert_eq!((t.left[1], t.right[1]), (-1, -1));
    }

    #[test]
    fn null_pads_share_one_node() {
        let leaf = |s| PlanNode::leaf(Operator::TableScan, 1.0, s);
        let plan = AbstractPlan::new(PlanNode {
            operator: Operator::HashJoin,
            est_cost: 3.0,
            est_size: 2.0,
            children: vec![leaf(1.0), leaf(2.0)],
        });
        // Three real nodes and one shared pad.
        assert_eq!(featurize(&plan).len(), 4);
    }

    #[test]
    fn ternary_node_folds_left_deep() {
        let leaf = |s| PlanNode::leaf(Operator::TableScan, 1.0, s);
        let plan = AbstractPlan::new(PlanNode {
            operator: Operator::Union,
            est_cost: 9.0,
            est_size: 6.0,
            children: vec![leaf(1.0), leaf(2.0), leaf(3.0)],
        });
        let b = binarize(&plan);
        let inner = b.left.as_ref().unwrap();
        assert_eq!(inner.node.as_ref().unwrap().operator, Operator::Union);
        assert_eq!(inner.left.as_ref().unwrap().node.as_ref().unwrap().est_size, 1.0);
        assert_eq!(inner.right.as_ref().unwrap().node.as_ref().unwrap().est_size, 2.0);
        assert_eq!(b.right.as_ref().unwrap().node.as_ref().unwrap().est_size, 3.0);
        assert_eq!(b.node.as_ref().unwrap().est_cost, 9.0);
    }

    #[test]
    fn log_scaling_is_applied() {
        let plan = AbstractPlan::new(PlanNode::leaf(Operator::IndexScan, 99.0, 9.0));
        let f = featurize(&plan).features[0];
        let k = Operator::ALL.len();
        assert!((f[k] - 100f64.ln()).abs() < 1e-12);
        assert!((f[k + 1] - 10f64.ln()).abs() < 1e-12);
    }
}

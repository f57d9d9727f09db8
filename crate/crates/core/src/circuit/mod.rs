//! Discrete probabilistic circuits.
//!
//! A circuit is a rooted DAG whose internal nodes are weighted sums and
//! products and whose leaves are indicator or categorical distributions over
//! single variables. Nodes are stored in a flat vector in topological order
//! (children strictly before parents), so a single forward scan visits every
//! child before its parents and a reverse scan does the opposite. Evaluation
//! is performed in log space.

mod build;
mod checks;
mod eval;
mod format;
mod sample;

pub use build::CircuitBuilder;
pub use eval::EvalBuffer;
pub(crate) use eval::log_sum_exp;

use crate::error::{Error, Result};

/// Index of a variable within a schema. Dense, starting at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub usize);

/// Index of a node within a circuit's node vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// A discrete variable: dense id, number of values, display name.
#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub id: VarId,
    pub arity: usize,
    pub name: String,
}

impl Variable {
    pub fn new(id: VarId, arity: usize, name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if arity < 2 {
            return Err(Error::InvalidParameter(format!(
                "variable {name:?} must have arity >= 2, got {arity}"
            )));
        }
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidParameter(format!(
                "variable name {name:?} must be non-empty and contain no whitespace"
            )));
        }
        Ok(Variable { id, arity, name })
    }
}

/// Distribution carried by a leaf node.
#[derive(Debug, Clone, PartialEq)]
pub enum LeafKind {
    /// `[V = value]`: 1 when the variable takes the given value, else 0.
    Indicator(usize),
    /// Full categorical over the variable; entries are nonnegative and sum
    /// to 1 within `WEIGHT_SUM_TOLERANCE`.
    Categorical(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf { var: VarId, kind: LeafKind },
    Product { children: Vec<NodeId> },
    Sum { children: Vec<NodeId>, log_weights: Vec<f64> },
}

impl Node {
    pub fn children(&self) -> &[NodeId] {
        match self {
            Node::Leaf { .. } => &[],
            Node::Product { children } => children,
            Node::Sum { children, .. } => children,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Node::Leaf { .. })
    }
}

/// Allowed deviation of a sum node's weights (or a categorical PMF) from
/// summing to exactly 1.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Set of variables, stored as a fixed-width bitset over a schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarSet {
    n_vars: usize,
    bits: Vec<u64>,
}

impl VarSet {
    pub fn empty(n_vars: usize) -> Self {
        VarSet {
            n_vars,
            bits: vec![0; n_vars.div_ceil(64)],
        }
    }

    pub fn singleton(n_vars: usize, var: VarId) -> Self {
        let mut s = Self::empty(n_vars);
        s.insert(var);
        s
    }

    pub fn insert(&mut self, var: VarId) {
        debug_assert!(var.0 < self.n_vars);
        self.bits[var.0 / 64] |= 1 << (var.0 % 64);
    }

    pub fn contains(&self, var: VarId) -> bool {
        var.0 < self.n_vars && self.bits[var.0 / 64] >> (var.0 % 64) & 1 == 1
    }

    pub fn union_with(&mut self, other: &VarSet) {
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    pub fn is_disjoint(&self, other: &VarSet) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| a & b == 0)
    }

    pub fn is_subset(&self, other: &VarSet) -> bool {
        self.bits.iter().zip(&other.bits).all(|(a, b)| a & !b == 0)
    }

    pub fn len(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|b| *b == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = VarId> + '_ {
        (0..self.n_vars)
            .map(VarId)
            .filter(move |v| self.contains(*v))
    }
}

/// A partial assignment of values to variables; unset variables are
/// interpreted as marginalized during evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialAssignment {
    values: Vec<Option<usize>>,
}

impl PartialAssignment {
    pub fn empty(n_vars: usize) -> Self {
        PartialAssignment {
            values: vec![None; n_vars],
        }
    }

    pub fn from_pairs(n_vars: usize, pairs: &[(VarId, usize)]) -> Self {
        let mut a = Self::empty(n_vars);
        for (v, x) in pairs {
            a.set(*v, *x);
        }
        a
    }

    pub fn set(&mut self, var: VarId, value: usize) {
        self.values[var.0] = Some(value);
    }

    pub fn clear(&mut self, var: VarId) {
        self.values[var.0] = None;
    }

    pub fn get(&self, var: VarId) -> Option<usize> {
        self.values.get(var.0).copied().flatten()
    }

    pub fn n_vars(&self) -> usize {
        self.values.len()
    }

    pub fn observed(&self) -> impl Iterator<Item = (VarId, usize)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|x| (VarId(i), x)))
    }

    /// Union of two assignments; `None` when they disagree on a variable.
    pub fn merged(&self, other: &PartialAssignment) -> Option<PartialAssignment> {
        let mut out = self.clone();
        for (v, x) in other.observed() {
            match out.get(v) {
                Some(y) if y != x => return None,
                _ => out.set(v, x),
            }
        }
        Some(out)
    }
}

/// Read-only view of an assignment. Implemented by [`PartialAssignment`] and
/// by row views over data tables, so evaluation code is generic over both.
pub trait Assignment {
    fn value(&self, var: VarId) -> Option<usize>;
}

impl Assignment for PartialAssignment {
    fn value(&self, var: VarId) -> Option<usize> {
        self.get(var)
    }
}

impl<A: Assignment + ?Sized> Assignment for &A {
    fn value(&self, var: VarId) -> Option<usize> {
        (**self).value(var)
    }
}

/// Structural properties established once at construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct StructuralProps {
    pub smooth: bool,
    pub decomposable: bool,
    /// True when determinism was verified, either structurally or by
    /// exhaustive enumeration on small scopes. False means "not verified":
    /// non-structural circuits beyond the enumeration budget are treated as
    /// non-deterministic.
    pub deterministic: bool,
}

/// An immutable probabilistic circuit. Construct through [`CircuitBuilder`].
#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    vars: Vec<Variable>,
    nodes: Vec<Node>,
    root: NodeId,
    scopes: Vec<VarSet>,
    /// Prefix sums of child counts: edges of node `n` occupy slots
    /// `edge_offsets[n] .. edge_offsets[n + 1]` in flow tables.
    edge_offsets: Vec<usize>,
    /// Per-node offset into categorical-leaf count slots; `usize::MAX` for
    /// nodes that carry no leaf distribution.
    leaf_offsets: Vec<usize>,
    n_leaf_slots: usize,
    props: StructuralProps,
}

impl Circuit {
    pub fn vars(&self) -> &[Variable] {
        &self.vars
    }

    pub fn n_vars(&self) -> usize {
        self.vars.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn scope(&self, id: NodeId) -> &VarSet {
        &self.scopes[id.0]
    }

    /// Every sum node has children whose scopes all equal the node's scope.
    pub fn is_smooth(&self) -> bool {
        self.props.smooth
    }

    /// Every product node has children with pairwise disjoint scopes.
    pub fn is_decomposable(&self) -> bool {
        self.props.decomposable
    }

    /// At most one child of every sum node is nonzero on any complete input.
    /// Verified structurally (children separated by the values they admit for
    /// some shared variable), with an exhaustive fallback for scopes of at
    /// most 2^20 joint assignments; larger non-structural circuits report
    /// false.
    pub fn is_deterministic(&self) -> bool {
        self.props.deterministic
    }

    pub fn n_edges(&self) -> usize {
        *self.edge_offsets.last().unwrap()
    }

    /// Flow-table slot for the `ordinal`-th edge out of `node`.
    pub fn edge_slot(&self, node: NodeId, ordinal: usize) -> usize {
        debug_assert!(ordinal < self.nodes[node.0].children().len());
        self.edge_offsets[node.0] + ordinal
    }

    pub(crate) fn edge_offset(&self, node: NodeId) -> usize {
        self.edge_offsets[node.0]
    }

    /// Count-table slot for value `value` of the categorical leaf `node`;
    /// `None` for indicator leaves and internal nodes.
    pub fn leaf_slot(&self, node: NodeId, value: usize) -> Option<usize> {
        let off = self.leaf_offsets[node.0];
        (off != usize::MAX).then_some(off + value)
    }

    pub fn n_leaf_slots(&self) -> usize {
        self.n_leaf_slots
    }

    pub fn sum_log_weights(&self, node: NodeId) -> &[f64] {
        match &self.nodes[node.0] {
            Node::Sum { log_weights, .. } => log_weights,
            _ => panic!("node {} is not a sum", node.0),
        }
    }

    /// Linear-space weights of a sum node.
    pub fn sum_weights(&self, node: NodeId) -> Vec<f64> {
        self.sum_log_weights(node)
            .iter()
            .map(|w| w.exp())
            .collect()
    }

    pub fn leaf_pmf(&self, node: NodeId) -> Option<&[f64]> {
        match &self.nodes[node.0] {
            Node::Leaf {
                kind: LeafKind::Categorical(pmf),
                ..
            } => Some(pmf),
            _ => None,
        }
    }

    /// Ids of sum nodes, ascending.
    pub fn sum_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n, Node::Sum { .. }))
            .map(|(i, _)| NodeId(i))
    }

    /// Per-node bitmask of values of each variable reachable with nonzero
    /// weight; saturates for arities above 64.
    pub(crate) fn support_masks(&self) -> Vec<Vec<u64>> {
        checks::support_value_masks(&self.vars, &self.nodes, &self.scopes)
    }

    /// Ids of categorical leaves, ascending.
    pub fn categorical_leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| {
                matches!(
                    n,
                    Node::Leaf {
                        kind: LeafKind::Categorical(_),
                        ..
                    }
                )
            })
            .map(|(i, _)| NodeId(i))
    }

    /// Overwrite the weights of a sum node with normalized linear weights.
    /// Callers must re-establish normalization; structural properties are
    /// unaffected because supports can only shrink when weights reach zero.
    pub(crate) fn set_sum_weights(&mut self, node: NodeId, weights: &[f64]) {
        match &mut self.nodes[node.0] {
            Node::Sum {
                children,
                log_weights,
            } => {
                assert_eq!(children.len(), weights.len());
                for (lw, w) in log_weights.iter_mut().zip(weights) {
                    *lw = w.ln();
                }
            }
            _ => panic!("node {} is not a sum", node.0),
        }
    }

    pub(crate) fn set_leaf_pmf(&mut self, node: NodeId, pmf: &[f64]) {
        match &mut self.nodes[node.0] {
            Node::Leaf {
                kind: LeafKind::Categorical(p),
                ..
            } => {
                assert_eq!(p.len(), pmf.len());
                p.copy_from_slice(pmf);
            }
            _ => panic!("node {} is not a categorical leaf", node.0),
        }
    }

    /// Structural audit used by file validation: returns human-readable
    /// descriptions of every violated invariant instead of stopping at the
    /// first.
    pub fn validate(&self) -> Vec<String> {
        let mut violations = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match node {
                Node::Sum { log_weights, .. } => {
                    let total: f64 = log_weights.iter().map(|w| w.exp()).sum();
                    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                        violations.push(format!(
                            "sum node {i}: weights sum to {total}, expected 1"
                        ));
                    }
                }
                Node::Leaf {
                    var,
                    kind: LeafKind::Categorical(pmf),
                } => {
                    let total: f64 = pmf.iter().sum();
                    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
                        violations.push(format!(
                            "categorical leaf {i} over {}: PMF sums to {total}, expected 1",
                            self.vars[var.0].name
                        ));
                    }
                    if pmf.iter().any(|p| *p < 0.0 || !p.is_finite()) {
                        violations.push(format!(
                            "categorical leaf {i} over {}: PMF has negative or non-finite entries",
                            self.vars[var.0].name
                        ));
                    }
                }
                _ => {}
            }
        }
        if !self.is_smooth() {
            violations.push("circuit is not smooth".to_string());
        }
        if !self.is_decomposable() {
            violations.push("circuit is not decomposable".to_string());
        }
        violations
    }
}

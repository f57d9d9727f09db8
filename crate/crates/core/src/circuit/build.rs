//! Circuit construction.

use super::checks::compute_props;
use super::{
    Circuit, LeafKind, Node, NodeId, VarId, VarSet, Variable, WEIGHT_SUM_TOLERANCE,
};
use crate::error::{Error, Result};

/// Incremental builder. Nodes are appended children-first, which makes the
/// stored order topological by construction; `finish` wires scopes, edge
/// slots, and structural property flags.
pub struct CircuitBuilder {
    vars: Vec<Variable>,
    nodes: Vec<Node>,
}

impl CircuitBuilder {
    pub fn new(vars: Vec<Variable>) -> Result<Self> {
        for (i, v) in vars.iter().enumerate() {
            if v.id.0 != i {
                return Err(Error::Structure(format!(
                    "variable ids must be dense and ascending; position {i} holds id {}",
                    v.id.0
                )));
            }
        }
        Ok(CircuitBuilder {
            vars,
            nodes: Vec::new(),
        })
    }

    pub fn vars(&self) -> &[Variable] {
        &self.vars
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn check_var(&self, var: VarId, value: Option<usize>) -> Result<()> {
        let v = self
            .vars
            .get(var.0)
            .ok_or_else(|| Error::Structure(format!("unknown variable id {}", var.0)))?;
        if let Some(x) = value {
            if x >= v.arity {
                return Err(Error::Structure(format!(
                    "value {x} out of range for variable {} (arity {})",
                    v.name, v.arity
                )));
            }
        }
        Ok(())
    }

    fn check_children(&self, children: &[NodeId]) -> Result<()> {
        for c in children {
            if c.0 >= self.nodes.len() {
                return Err(Error::Structure(format!(
                    "child {} does not exist yet; children must be added before parents",
                    c.0
                )));
            }
        }
        Ok(())
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        NodeId(self.nodes.len() - 1)
    }

    /// Append a node that has already been range-checked by the caller,
    /// bypassing normalization validation (lenient file loading).
    pub(crate) fn push_unchecked(&mut self, node: Node) {
        self.push(node);
    }

    pub fn indicator(&mut self, var: VarId, value: usize) -> Result<NodeId> {
        self.check_var(var, Some(value))?;
        Ok(self.push(Node::Leaf {
            var,
            kind: LeafKind::Indicator(value),
        }))
    }

    pub fn categorical(&mut self, var: VarId, pmf: Vec<f64>) -> Result<NodeId> {
        self.check_var(var, None)?;
        let arity = self.vars[var.0].arity;
        if pmf.len() != arity {
            return Err(Error::Structure(format!(
                "PMF length {} does not match arity {arity} of variable {}",
                pmf.len(),
                self.vars[var.0].name
            )));
        }
        validate_pmf(&pmf)?;
        Ok(self.push(Node::Leaf {
            var,
            kind: LeafKind::Categorical(pmf),
        }))
    }

    pub fn product(&mut self, children: Vec<NodeId>) -> Result<NodeId> {
        if children.len() < 2 {
            return Err(Error::Structure(
                "product nodes need at least two children".to_string(),
            ));
        }
        self.check_children(&children)?;
        Ok(self.push(Node::Product { children }))
    }

    /// Sum node from linear-space weights.
    pub fn sum(&mut self, edges: Vec<(NodeId, f64)>) -> Result<NodeId> {
        let weights: Vec<f64> = edges.iter().map(|(_, w)| *w).collect();
        validate_pmf(&weights)?;
        let log_edges = edges.into_iter().map(|(c, w)| (c, w.ln())).collect();
        self.sum_log(log_edges)
    }

    /// Sum node from log-space weights; `-inf` encodes a zero weight.
    pub fn sum_log(&mut self, edges: Vec<(NodeId, f64)>) -> Result<NodeId> {
        if edges.is_empty() {
            return Err(Error::Structure(
                "sum nodes need at least one child".to_string(),
            ));
        }
        let children: Vec<NodeId> = edges.iter().map(|(c, _)| *c).collect();
        self.check_children(&children)?;
        let log_weights: Vec<f64> = edges.iter().map(|(_, w)| *w).collect();
        let total: f64 = log_weights.iter().map(|w| w.exp()).sum();
        if !total.is_finite() || (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::Structure(format!(
                "sum weights must sum to 1, got {total}"
            )));
        }
        Ok(self.push(Node::Sum {
            children,
            log_weights,
        }))
    }

    /// Splice another circuit's reachable nodes into this builder and return
    /// the id its root received. The other circuit must be defined over the
    /// same variable table.
    pub fn subcircuit(&mut self, other: &Circuit) -> Result<NodeId> {
        if other.vars != self.vars {
            return Err(Error::SchemaMismatch(
                "subcircuit is defined over a different variable table".to_string(),
            ));
        }
        let mut map = vec![NodeId(usize::MAX); other.n_nodes()];
        let reachable = reachable_set(other.nodes(), other.root());
        for (i, node) in other.nodes().iter().enumerate() {
            if !reachable[i] {
                continue;
            }
            let remapped = remap_children(node, &map);
            map[i] = self.push(remapped);
        }
        Ok(map[other.root().0])
    }

    pub fn finish(self, root: NodeId) -> Result<Circuit> {
        let CircuitBuilder { vars, nodes } = self;
        if root.0 >= nodes.len() {
            return Err(Error::Structure(format!("root {} does not exist", root.0)));
        }

        let n_vars = vars.len();
        let mut scopes: Vec<VarSet> = Vec::with_capacity(nodes.len());
        for node in &nodes {
            let scope = match node {
                Node::Leaf { var, .. } => VarSet::singleton(n_vars, *var),
                _ => {
                    let mut s = VarSet::empty(n_vars);
                    for c in node.children() {
                        s.union_with(&scopes[c.0]);
                    }
                    s
                }
            };
            if scope.is_empty() {
                return Err(Error::Structure(
                    "node with empty scope".to_string(),
                ));
            }
            scopes.push(scope);
        }

        let mut edge_offsets = Vec::with_capacity(nodes.len() + 1);
        let mut leaf_offsets = Vec::with_capacity(nodes.len());
        let mut n_edges = 0;
        let mut n_leaf_slots = 0;
        for node in &nodes {
            edge_offsets.push(n_edges);
            n_edges += node.children().len();
            match node {
                Node::Leaf {
                    kind: LeafKind::Categorical(pmf),
                    ..
                } => {
                    leaf_offsets.push(n_leaf_slots);
                    n_leaf_slots += pmf.len();
                }
                _ => leaf_offsets.push(usize::MAX),
            }
        }
        edge_offsets.push(n_edges);

        let props = compute_props(&vars, &nodes, &scopes);
        Ok(Circuit {
            vars,
            nodes,
            root,
            scopes,
            edge_offsets,
            leaf_offsets,
            n_leaf_slots,
            props,
        })
    }
}

impl Circuit {
    /// Rebuild this circuit over a new variable table, translating each
    /// variable through `map` (indexed by old variable id). Used to embed
    /// circuits learned over a projected schema into a larger one.
    pub fn remapped(&self, vars: Vec<Variable>, map: &[VarId]) -> Result<Self> {
        if map.len() != self.n_vars() {
            return Err(Error::LengthMismatch(map.len(), self.n_vars()));
        }
        let mut b = CircuitBuilder::new(vars)?;
        for node in &self.nodes {
            let node = match node {
                Node::Leaf { var, kind } => Node::Leaf {
                    var: map[var.0],
                    kind: kind.clone(),
                },
                other => other.clone(),
            };
            if let Node::Leaf { var, kind } = &node {
                b.check_var(*var, None)?;
                if let LeafKind::Categorical(pmf) = kind {
                    if pmf.len() != b.vars[var.0].arity {
                        return Err(Error::SchemaMismatch(format!(
                            "arity changed for remapped variable {}",
                            b.vars[var.0].name
                        )));
                    }
                }
            }
            b.nodes.push(node);
        }
        b.finish(self.root)
    }

    /// Copy of this circuit containing only nodes reachable from the root.
    pub fn pruned(&self) -> Result<Self> {
        let mut b = CircuitBuilder::new(self.vars.clone())?;
        let root = b.subcircuit(self)?;
        b.finish(root)
    }
}

fn remap_children(node: &Node, map: &[NodeId]) -> Node {
    match node {
        Node::Leaf { .. } => node.clone(),
        Node::Product { children } => Node::Product {
            children: children.iter().map(|c| map[c.0]).collect(),
        },
        Node::Sum {
            children,
            log_weights,
        } => Node::Sum {
            children: children.iter().map(|c| map[c.0]).collect(),
            log_weights: log_weights.clone(),
        },
    }
}

pub(crate) fn reachable_set(nodes: &[Node], root: NodeId) -> Vec<bool> {
    let mut reachable = vec![false; nodes.len()];
    reachable[root.0] = true;
    for i in (0..=root.0).rev() {
        if !reachable[i] {
            continue;
        }
        for c in nodes[i].children() {
            reachable[c.0] = true;
        }
    }
    reachable
}

fn validate_pmf(pmf: &[f64]) -> Result<()> {
    if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::Structure(
            "probabilities must be finite and nonnegative".to_string(),
        ));
    }
    let total: f64 = pmf.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(Error::Structure(format!(
            "probabilities must sum to 1, got {total}"
        )));
    }
    Ok(())
}

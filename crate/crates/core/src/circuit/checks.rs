//! Structural property verification.
//!
//! Smoothness and decomposability are purely structural. Determinism is
//! verified structurally through the sets of values each child admits for
//! shared variables: two children of a sum node have provably disjoint
//! supports when some variable appears in both scopes with disjoint admitted
//! value sets. Circuits that fail the structural argument fall back to
//! exhaustive enumeration when the joint assignment space has at most
//! 2^20 states; beyond that they are reported non-deterministic ("not
//! verifiable") rather than silently accepted.

use super::{LeafKind, Node, StructuralProps, VarSet, Variable};

/// Budget for the exhaustive determinism fallback.
const EXHAUSTIVE_LIMIT: u64 = 1 << 20;

/// Admitted-value masks are capped at 64 values per variable; wider
/// variables saturate to "any value", which keeps the check sound.
fn full_mask(arity: usize) -> u64 {
    if arity >= 64 {
        u64::MAX
    } else {
        (1u64 << arity) - 1
    }
}

/// For every node and every variable in its scope, a bitmask of the values
/// the variable can take on inputs where the node is nonzero (an
/// overapproximation: the true support is a subset of the product of these
/// sets).
pub(crate) fn support_value_masks(
    vars: &[Variable],
    nodes: &[Node],
    scopes: &[VarSet],
) -> Vec<Vec<u64>> {
    let n_vars = vars.len();
    let mut masks = vec![vec![0u64; n_vars]; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        match node {
            Node::Leaf { var, kind } => {
                masks[i][var.0] = match kind {
                    LeafKind::Indicator(v) => {
                        if *v >= 64 {
                            u64::MAX
                        } else {
                            1u64 << v
                        }
                    }
                    LeafKind::Categorical(pmf) => {
                        let mut m = 0u64;
                        for (v, p) in pmf.iter().enumerate() {
                            if *p > 0.0 {
                                m |= if v >= 64 { u64::MAX } else { 1u64 << v };
                            }
                        }
                        m
                    }
                };
            }
            Node::Product { children } => {
                for v in scopes[i].iter() {
                    let mut m = full_mask(vars[v.0].arity);
                    for c in children {
                        if scopes[c.0].contains(v) {
                            m &= masks[c.0][v.0];
                        }
                    }
                    masks[i][v.0] = m;
                }
            }
            Node::Sum { children, .. } => {
                for v in scopes[i].iter() {
                    let mut m = 0u64;
                    for c in children {
                        m |= if scopes[c.0].contains(v) {
                            masks[c.0][v.0]
                        } else {
                            full_mask(vars[v.0].arity)
                        };
                    }
                    masks[i][v.0] = m;
                }
            }
        }
    }
    masks
}

pub(crate) fn compute_props(
    vars: &[Variable],
    nodes: &[Node],
    scopes: &[VarSet],
) -> StructuralProps {
    let smooth = nodes.iter().enumerate().all(|(i, n)| match n {
        Node::Sum { children, .. } => children.iter().all(|c| scopes[c.0] == scopes[i]),
        _ => true,
    });
    let decomposable = nodes.iter().all(|n| match n {
        Node::Product { children } => {
            children.iter().enumerate().all(|(i, a)| {
                children[i + 1..]
                    .iter()
                    .all(|b| scopes[a.0].is_disjoint(&scopes[b.0]))
            })
        }
        _ => true,
    });
    let deterministic = check_deterministic(vars, nodes, scopes);
    StructuralProps {
        smooth,
        decomposable,
        deterministic,
    }
}

fn check_deterministic(vars: &[Variable], nodes: &[Node], scopes: &[VarSet]) -> bool {
    let masks = support_value_masks(vars, nodes, scopes);
    let structural = nodes.iter().all(|n| match n {
        Node::Sum { children, .. } => children.iter().enumerate().all(|(i, a)| {
            children[i + 1..]
                .iter()
                .all(|b| separated(&scopes[a.0], &masks[a.0], &scopes[b.0], &masks[b.0]))
        }),
        _ => true,
    });
    if structural {
        return true;
    }
    exhaustive_deterministic(vars, nodes, scopes).unwrap_or(false)
}

/// True when some variable shared by both scopes admits disjoint value sets.
fn separated(scope_a: &VarSet, masks_a: &[u64], scope_b: &VarSet, masks_b: &[u64]) -> bool {
    scope_a
        .iter()
        .any(|v| scope_b.contains(v) && masks_a[v.0] & masks_b[v.0] == 0)
}

/// Enumerate every joint assignment of the scoped variables and confirm that
/// no sum node ever sees two nonzero children. `None` when the assignment
/// space exceeds the enumeration budget.
fn exhaustive_deterministic(
    vars: &[Variable],
    nodes: &[Node],
    scopes: &[VarSet],
) -> Option<bool> {
    let mut scoped = VarSet::empty(vars.len());
    for s in scopes {
        scoped.union_with(s);
    }
    let scoped: Vec<usize> = scoped.iter().map(|v| v.0).collect();
    let mut total: u64 = 1;
    for v in &scoped {
        total = total.checked_mul(vars[*v].arity as u64)?;
        if total > EXHAUSTIVE_LIMIT {
            return None;
        }
    }

    // Support indicators suffice: weights do not enter the definition.
    let mut assignment = vec![0usize; vars.len()];
    let mut nonzero = vec![false; nodes.len()];
    for mut idx in 0..total {
        for v in &scoped {
            assignment[*v] = (idx % vars[*v].arity as u64) as usize;
            idx /= vars[*v].arity as u64;
        }
        for (i, node) in nodes.iter().enumerate() {
            nonzero[i] = match node {
                Node::Leaf { var, kind } => match kind {
                    LeafKind::Indicator(v) => assignment[var.0] == *v,
                    LeafKind::Categorical(pmf) => pmf[assignment[var.0]] > 0.0,
                },
                Node::Product { children } => children.iter().all(|c| nonzero[c.0]),
                Node::Sum { children, .. } => {
                    let active = children.iter().filter(|c| nonzero[c.0]).count();
                    if active > 1 {
                        return Some(false);
                    }
                    active == 1
                }
            };
        }
    }
    Some(true)
}

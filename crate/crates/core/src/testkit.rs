//! Reference implementations used by tests: naive evaluators and oracles
//! that recompute circuit quantities by direct enumeration, plus fixtures
//! and a generator for random structured circuits.
//!
//! Everything here trades speed for obviousness. The naive evaluator works
//! in linear space over every node; the flow oracles enumerate complete
//! assignments and average indicator flows, which is the definition the
//! fast implementations are checked against.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::circuit::{
    Assignment, Circuit, CircuitBuilder, LeafKind, Node, NodeId, PartialAssignment, VarId, VarSet,
    Variable,
};

/// Linear-space value of every node under `a`, bottom-up. Unobserved leaves
/// evaluate to 1, matching marginal semantics.
pub fn naive_values<A: Assignment>(c: &Circuit, a: &A) -> Vec<f64> {
    let mut vals = vec![0.0; c.n_nodes()];
    for (i, node) in c.nodes().iter().enumerate() {
        vals[i] = match node {
            Node::Leaf { var, kind } => match (a.value(*var), kind) {
                (None, _) => 1.0,
                (Some(x), LeafKind::Indicator(v)) => {
                    if x == *v {
                        1.0
                    } else {
                        0.0
                    }
                }
                (Some(x), LeafKind::Categorical(pmf)) => pmf[x],
            },
            Node::Product { children } => children.iter().map(|ch| vals[ch.0]).product(),
            Node::Sum {
                children,
                log_weights,
            } => children
                .iter()
                .zip(log_weights)
                .map(|(ch, lw)| lw.exp() * vals[ch.0])
                .sum(),
        };
    }
    vals
}

/// Root value under `a` in linear space.
pub fn naive_root(c: &Circuit, a: &PartialAssignment) -> f64 {
    naive_values(c, a)[c.root().0]
}

/// Every complete assignment of the variables in `scope`, in lexicographic
/// order. Variables outside the scope stay unobserved.
pub fn scope_assignments(c: &Circuit, scope: &VarSet) -> Vec<PartialAssignment> {
    let vars: Vec<VarId> = scope.iter().collect();
    let mut out = Vec::new();
    let mut current = PartialAssignment::empty(c.n_vars());
    fill(c, &vars, 0, &mut current, &mut out);
    out
}

fn fill(
    c: &Circuit,
    vars: &[VarId],
    depth: usize,
    current: &mut PartialAssignment,
    out: &mut Vec<PartialAssignment>,
) {
    if depth == vars.len() {
        out.push(current.clone());
        return;
    }
    let var = vars[depth];
    for value in 0..c.vars()[var.0].arity {
        current.set(var, value);
        fill(c, vars, depth + 1, current, out);
    }
    current.clear(var);
}

/// Every complete assignment of the root scope.
pub fn root_assignments(c: &Circuit) -> Vec<PartialAssignment> {
    scope_assignments(c, c.scope(c.root()))
}

/// Whether `x` agrees with every variable observed in `e`.
pub fn consistent(x: &PartialAssignment, e: &PartialAssignment) -> bool {
    e.observed().all(|(var, value)| x.get(var) == Some(value))
}

/// Marginal probability of `e` by summing complete evaluations.
pub fn brute_marginal(c: &Circuit, e: &PartialAssignment) -> f64 {
    root_assignments(c)
        .iter()
        .filter(|x| consistent(x, e))
        .map(|x| naive_root(c, x))
        .sum()
}

/// Conditional probability of `q` given `e`; `None` when `e` has zero mass.
pub fn brute_conditional(c: &Circuit, q: &PartialAssignment, e: &PartialAssignment) -> Option<f64> {
    let pe = brute_marginal(c, e);
    if pe <= 0.0 {
        return None;
    }
    let joint = match q.merged(e) {
        Some(qe) => brute_marginal(c, &qe),
        None => 0.0,
    };
    Some(joint / pe)
}

/// Per-edge flows and per-value categorical leaf counts, indexed by
/// [`Circuit::edge_slot`] and [`Circuit::leaf_slot`].
#[derive(Debug, Clone, PartialEq)]
pub struct BruteFlows {
    pub edges: Vec<f64>,
    pub leaf_counts: Vec<f64>,
}

impl BruteFlows {
    fn zero(c: &Circuit) -> Self {
        BruteFlows {
            edges: vec![0.0; c.n_edges()],
            leaf_counts: vec![0.0; c.n_leaf_slots()],
        }
    }

    fn add_scaled(&mut self, other: &BruteFlows, scale: f64) {
        for (a, b) in self.edges.iter_mut().zip(&other.edges) {
            *a += scale * b;
        }
        for (a, b) in self.leaf_counts.iter_mut().zip(&other.leaf_counts) {
            *a += scale * b;
        }
    }
}

/// 0/1 edge flows of a complete assignment: the root carries flow 1 when it
/// evaluates nonzero, a sum passes its flow to its unique nonzero child, and
/// a product passes its flow to every child. Panics when a sum has several
/// nonzero children, which would mean the circuit is not deterministic.
pub fn unit_flows(c: &Circuit, x: &PartialAssignment) -> BruteFlows {
    let vals = naive_values(c, x);
    let mut out = BruteFlows::zero(c);
    if vals[c.root().0] <= 0.0 {
        return out;
    }
    let mut node_flow = vec![0.0; c.n_nodes()];
    node_flow[c.root().0] = 1.0;
    for i in (0..c.n_nodes()).rev() {
        let f = node_flow[i];
        if f == 0.0 {
            continue;
        }
        match c.node(NodeId(i)) {
            Node::Leaf { var, kind } => {
                if let LeafKind::Categorical(_) = kind {
                    let value = x.get(*var).expect("complete assignment observes leaf var");
                    let slot = c.leaf_slot(NodeId(i), value).expect("categorical slot");
                    out.leaf_counts[slot] += f;
                }
            }
            Node::Product { children } => {
                for (k, ch) in children.iter().enumerate() {
                    out.edges[c.edge_slot(NodeId(i), k)] += f;
                    node_flow[ch.0] += f;
                }
            }
            Node::Sum { children, .. } => {
                let active: Vec<usize> = (0..children.len())
                    .filter(|&k| vals[children[k].0] > 0.0)
                    .collect();
                assert!(
                    active.len() == 1,
                    "sum node {i} has {} nonzero children on a complete input",
                    active.len()
                );
                let k = active[0];
                out.edges[c.edge_slot(NodeId(i), k)] += f;
                node_flow[children[k].0] += f;
            }
        }
    }
    out
}

/// Expected flows under evidence `e`: the average of [`unit_flows`] over all
/// completions of `e`, weighted by each completion's probability given `e`.
/// `None` when `e` has zero mass.
pub fn brute_expected_flows(c: &Circuit, e: &PartialAssignment) -> Option<BruteFlows> {
    let mut total = 0.0;
    let mut acc = BruteFlows::zero(c);
    for x in root_assignments(c) {
        if !consistent(&x, e) {
            continue;
        }
        let px = naive_root(c, &x);
        if px <= 0.0 {
            continue;
        }
        total += px;
        acc.add_scaled(&unit_flows(c, &x), px);
    }
    if total <= 0.0 {
        return None;
    }
    for v in acc.edges.iter_mut().chain(acc.leaf_counts.iter_mut()) {
        *v /= total;
    }
    Some(acc)
}

/// Two-variable mixture used as a worked example across tests: a root sum
/// with weights (0.6, 0.4) over two products, each pairing an indicator of
/// the first variable with a categorical distribution over the second
/// ((0.3, 0.7) behind `a=1`, (0.8, 0.2) behind `a=0`).
pub fn two_var_mixture() -> Circuit {
    let vars = vec![
        Variable::new(VarId(0), 2, "a").unwrap(),
        Variable::new(VarId(1), 2, "b").unwrap(),
    ];
    let mut b = CircuitBuilder::new(vars).unwrap();
    let a1 = b.indicator(VarId(0), 1).unwrap();
    let b1 = b.categorical(VarId(1), vec![0.3, 0.7]).unwrap();
    let p1 = b.product(vec![a1, b1]).unwrap();
    let a0 = b.indicator(VarId(0), 0).unwrap();
    let b0 = b.categorical(VarId(1), vec![0.8, 0.2]).unwrap();
    let p2 = b.product(vec![a0, b0]).unwrap();
    let root = b.sum(vec![(p1, 0.6), (p2, 0.4)]).unwrap();
    b.finish(root).unwrap()
}

/// Strictly positive random distribution over `k` values.
pub fn random_pmf<R: Rng>(rng: &mut R, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k)
        .map(|_| (-rng.random::<f64>().ln()).max(1e-12))
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Random evidence observing each variable independently with probability
/// `p_observe`.
pub fn random_evidence<R: Rng>(rng: &mut R, c: &Circuit, p_observe: f64) -> PartialAssignment {
    let mut e = PartialAssignment::empty(c.n_vars());
    for v in c.vars() {
        if rng.random::<f64>() < p_observe {
            e.set(v.id, rng.random_range(0..v.arity));
        }
    }
    e
}

/// Random smooth, decomposable, deterministic circuit over variables with
/// the given arities. Sum nodes split on a variable's values, products split
/// the scope, and repeated scopes sometimes reuse an earlier subcircuit so
/// shared nodes are exercised. All parameters are strictly positive.
pub fn random_structured(seed: u64, arities: &[usize]) -> Circuit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vars: Vec<Variable> = arities
        .iter()
        .enumerate()
        .map(|(i, &a)| Variable::new(VarId(i), a, format!("v{i}")).unwrap())
        .collect();
    let mut b = CircuitBuilder::new(vars).unwrap();
    let mut cache: HashMap<Vec<usize>, NodeId> = HashMap::new();
    let scope: Vec<usize> = (0..arities.len()).collect();
    let root = grow(&mut b, &mut rng, &mut cache, &scope, arities);
    b.finish(root).unwrap()
}

fn grow(
    b: &mut CircuitBuilder,
    rng: &mut ChaCha8Rng,
    cache: &mut HashMap<Vec<usize>, NodeId>,
    scope: &[usize],
    arities: &[usize],
) -> NodeId {
    if let Some(&hit) = cache.get(scope) {
        if rng.random::<f64>() < 0.5 {
            return hit;
        }
    }
    let id = if scope.len() == 1 {
        let v = scope[0];
        if rng.random::<f64>() < 0.5 {
            b.categorical(VarId(v), random_pmf(rng, arities[v])).unwrap()
        } else {
            let w = random_pmf(rng, arities[v]);
            let edges = (0..arities[v])
                .map(|k| (b.indicator(VarId(v), k).unwrap(), w[k]))
                .collect();
            b.sum(edges).unwrap()
        }
    } else if rng.random::<f64>() < 0.4 {
        let mut shuffled = scope.to_vec();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let cut = rng.random_range(1..shuffled.len());
        let (left, right) = shuffled.split_at(cut);
        let mut left = left.to_vec();
        let mut right = right.to_vec();
        left.sort_unstable();
        right.sort_unstable();
        let lc = grow(b, rng, cache, &left, arities);
        let rc = grow(b, rng, cache, &right, arities);
        b.product(vec![lc, rc]).unwrap()
    } else {
        let v = scope[rng.random_range(0..scope.len())];
        let rest: Vec<usize> = scope.iter().copied().filter(|&u| u != v).collect();
        let w = random_pmf(rng, arities[v]);
        let mut edges = Vec::with_capacity(arities[v]);
        for k in 0..arities[v] {
            let ind = b.indicator(VarId(v), k).unwrap();
            let sub = grow(b, rng, cache, &rest, arities);
            let child = b.product(vec![ind, sub]).unwrap();
            edges.push((child, w[k]));
        }
        b.sum(edges).unwrap()
    };
    cache.insert(scope.to_vec(), id);
    id
}

//! Structure learning: tree-shaped initialization from pairwise mutual
//! information, compilation of rooted trees into circuits, and greedy
//! flow-guided edge splitting with validation early stopping.

use std::collections::{HashMap, VecDeque};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::circuit::{
    log_sum_exp, Assignment, Circuit, CircuitBuilder, LeafKind, Node, NodeId, VarId, Variable,
};
use crate::error::{Error, Result};
use crate::flows::{aggregate_flows, FlowTable};
use crate::metrics::log_likelihood_rows;
use crate::params::{em_step, mle_complete};

/// Symmetric pairwise mutual information estimates in nats; diagonal 0.
#[derive(Debug, Clone)]
pub struct MiMatrix {
    n: usize,
    data: Vec<f64>,
}

impl MiMatrix {
    fn zero(n: usize) -> Self {
        MiMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn n_vars(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
        self.data[j * self.n + i] = v;
    }

    /// Sum of MI(v, u) over the given variables; the diagonal contributes 0.
    pub fn scoped_sum(&self, v: usize, scope: impl IntoIterator<Item = usize>) -> f64 {
        scope.into_iter().map(|u| self.get(v, u)).sum()
    }
}

/// Pairwise mutual information from add-alpha smoothed joint counts. A row
/// contributes to a pair only when both cells are observed; marginals come
/// from the smoothed joint. Entries are clamped to be nonnegative.
pub fn pairwise_mi<A: Assignment + Sync>(
    vars: &[Variable],
    rows: &[A],
    weights: Option<&[f64]>,
    alpha: f64,
) -> Result<MiMatrix> {
    if vars.is_empty() {
        return Err(Error::InvalidParameter("no variables".to_string()));
    }
    if alpha < 0.0 {
        return Err(Error::InvalidParameter(format!("alpha must be nonnegative, got {alpha}")));
    }
    if let Some(w) = weights {
        if w.len() != rows.len() {
            return Err(Error::LengthMismatch(rows.len(), w.len()));
        }
    }
    let mut seen = vec![0.0f64; vars.len()];
    for (r, row) in rows.iter().enumerate() {
        let w = weights.map_or(1.0, |ws| ws[r]);
        if w == 0.0 {
            continue;
        }
        for v in vars {
            if row.value(v.id).is_some() {
                seen[v.id.0] += w;
            }
        }
    }
    for v in vars {
        if seen[v.id.0] <= 0.0 {
            return Err(Error::InsufficientData(format!(
                "variable {} is observed in zero rows",
                v.name
            )));
        }
    }
    let pairs: Vec<(usize, usize)> = (0..vars.len())
        .flat_map(|i| (i + 1..vars.len()).map(move |j| (i, j)))
        .collect();
    let values: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let ki = vars[i].arity;
            let kj = vars[j].arity;
            let mut counts = vec![0.0f64; ki * kj];
            for (r, row) in rows.iter().enumerate() {
                let w = weights.map_or(1.0, |ws| ws[r]);
                if w == 0.0 {
                    continue;
                }
                if let (Some(a), Some(b)) = (row.value(vars[i].id), row.value(vars[j].id)) {
                    counts[a * kj + b] += w;
                }
            }
            smoothed_mi(&counts, ki, kj, alpha)
        })
        .collect();
    let mut m = MiMatrix::zero(vars.len());
    for (&(i, j), v) in pairs.iter().zip(values) {
        m.set(i, j, v);
    }
    Ok(m)
}

fn smoothed_mi(counts: &[f64], ki: usize, kj: usize, alpha: f64) -> f64 {
    let total: f64 = counts.iter().sum::<f64>() + alpha * (ki * kj) as f64;
    if total <= 0.0 {
        return 0.0;
    }
    let mut pi = vec![0.0; ki];
    let mut pj = vec![0.0; kj];
    let mut p = vec![0.0; counts.len()];
    for a in 0..ki {
        for b in 0..kj {
            let v = (counts[a * kj + b] + alpha) / total;
            p[a * kj + b] = v;
            pi[a] += v;
            pj[b] += v;
        }
    }
    let mut mi = 0.0;
    for a in 0..ki {
        for b in 0..kj {
            let v = p[a * kj + b];
            if v > 0.0 {
                mi += v * (v / (pi[a] * pj[b])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Rooted spanning tree over variable indices.
#[derive(Debug, Clone)]
pub struct TreeShape {
    parent: Vec<Option<usize>>,
    /// Parents before children, starting at the root.
    order: Vec<usize>,
}

impl TreeShape {
    /// Orient an undirected spanning tree away from `root`.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], root: usize) -> Result<Self> {
        if root >= n {
            return Err(Error::Structure(format!("root {root} out of range")));
        }
        if edges.len() + 1 != n {
            return Err(Error::Structure(format!(
                "{} edges cannot span {n} variables",
                edges.len()
            )));
        }
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n || a == b {
                return Err(Error::Structure(format!("bad edge ({a}, {b})")));
            }
            adj[a].push(b);
            adj[b].push(a);
        }
        for l in &mut adj {
            l.sort_unstable();
        }
        let mut parent = vec![None; n];
        let mut order = Vec::with_capacity(n);
        let mut visited = vec![false; n];
        let mut queue = VecDeque::from([root]);
        visited[root] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            for &u in &adj[v] {
                if !visited[u] {
                    visited[u] = true;
                    parent[u] = Some(v);
                    queue.push_back(u);
                }
            }
        }
        if order.len() != n {
            return Err(Error::Structure(
                "edges do not form a spanning tree".to_string(),
            ));
        }
        Ok(TreeShape { parent, order })
    }

    pub fn n_vars(&self) -> usize {
        self.parent.len()
    }

    pub fn root(&self) -> usize {
        self.order[0]
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parent[v]
    }

    /// Undirected edges normalized as (min, max), sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e: Vec<(usize, usize)> = self
            .parent
            .iter()
            .enumerate()
            .filter_map(|(v, p)| p.map(|p| (p.min(v), p.max(v))))
            .collect();
        e.sort_unstable();
        e
    }

    fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.parent.len()];
        for (v, p) in self.parent.iter().enumerate() {
            if let Some(p) = p {
                ch[*p].push(v);
            }
        }
        ch
    }
}

/// Maximum-weight spanning tree over the MI matrix, rooted at variable 0.
/// Equal weights prefer the lexicographically smallest (min id, max id)
/// edge, so the result is deterministic.
pub fn mi_spanning_tree(mi: &MiMatrix) -> TreeShape {
    let n = mi.n_vars();
    let mut cand: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .collect();
    cand.sort_by(|&(a, b), &(c, d)| {
        mi.get(c, d)
            .total_cmp(&mi.get(a, b))
            .then(a.cmp(&c))
            .then(b.cmp(&d))
    });
    fn find(uf: &mut [usize], mut x: usize) -> usize {
        while uf[x] != x {
            uf[x] = uf[uf[x]];
            x = uf[x];
        }
        x
    }
    let mut uf: Vec<usize> = (0..n).collect();
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    for (a, b) in cand {
        let ra = find(&mut uf, a);
        let rb = find(&mut uf, b);
        if ra != rb {
            uf[ra] = rb;
            edges.push((a, b));
            if edges.len() + 1 == n {
                break;
            }
        }
    }
    TreeShape::from_edges(n, &edges, 0).expect("spanning tree by construction")
}

/// Root marginal plus per-edge conditionals: `cpt[v][p][x]` is the
/// probability of `v = x` given its tree parent takes value `p`. Empty for
/// the root.
#[derive(Debug, Clone)]
pub struct TreeParams {
    pub root_pmf: Vec<f64>,
    pub cpt: Vec<Vec<Vec<f64>>>,
}

/// Smoothed count estimates over pairwise-complete rows, one table per
/// tree edge. Parent values with no mass fall back to uniform.
pub fn estimate_tree_params<A: Assignment + Sync>(
    vars: &[Variable],
    shape: &TreeShape,
    rows: &[A],
    weights: Option<&[f64]>,
    alpha: f64,
) -> Result<TreeParams> {
    if vars.len() != shape.n_vars() {
        return Err(Error::LengthMismatch(vars.len(), shape.n_vars()));
    }
    if let Some(w) = weights {
        if w.len() != rows.len() {
            return Err(Error::LengthMismatch(rows.len(), w.len()));
        }
    }
    let root = shape.root();
    let mut root_counts = vec![0.0f64; vars[root].arity];
    for (r, row) in rows.iter().enumerate() {
        let w = weights.map_or(1.0, |ws| ws[r]);
        if w == 0.0 {
            continue;
        }
        if let Some(x) = row.value(vars[root].id) {
            root_counts[x] += w;
        }
    }
    let root_pmf = normalize_smoothed(&root_counts, alpha);
    let jobs: Vec<usize> = (0..vars.len()).filter(|v| *v != root).collect();
    let tables: Vec<Vec<Vec<f64>>> = jobs
        .par_iter()
        .map(|&v| {
            let p = shape.parent(v).expect("non-root variable has a parent");
            let kv = vars[v].arity;
            let kp = vars[p].arity;
            let mut counts = vec![vec![0.0f64; kv]; kp];
            for (r, row) in rows.iter().enumerate() {
                let w = weights.map_or(1.0, |ws| ws[r]);
                if w == 0.0 {
                    continue;
                }
                if let (Some(pv), Some(xv)) = (row.value(vars[p].id), row.value(vars[v].id)) {
                    counts[pv][xv] += w;
                }
            }
            counts.iter().map(|row| normalize_smoothed(row, alpha)).collect()
        })
        .collect();
    let mut cpt = vec![Vec::new(); vars.len()];
    for (&v, t) in jobs.iter().zip(tables) {
        cpt[v] = t;
    }
    Ok(TreeParams { root_pmf, cpt })
}

/// Add-alpha normalized distribution; zero mass with zero alpha falls back
/// to uniform.
fn normalize_smoothed(counts: &[f64], alpha: f64) -> Vec<f64> {
    let total: f64 = counts.iter().sum::<f64>() + alpha * counts.len() as f64;
    if total <= 0.0 {
        return vec![1.0 / counts.len() as f64; counts.len()];
    }
    counts.iter().map(|c| (c + alpha) / total).collect()
}

/// Compile a rooted tree into a circuit. Each variable becomes sums over
/// its values, one per parent value, sharing per-value product nodes that
/// pin the variable with an indicator and chain the child subtrees;
/// childless variables become categorical leaves.
pub fn compile_tree(vars: &[Variable], shape: &TreeShape, params: &TreeParams) -> Result<Circuit> {
    let n = vars.len();
    if n != shape.n_vars() {
        return Err(Error::LengthMismatch(n, shape.n_vars()));
    }
    let root = shape.root();
    if params.root_pmf.len() != vars[root].arity {
        return Err(Error::LengthMismatch(vars[root].arity, params.root_pmf.len()));
    }
    for v in 0..n {
        if v == root {
            continue;
        }
        let p = shape.parent(v).expect("non-root variable has a parent");
        if params.cpt[v].len() != vars[p].arity
            || params.cpt[v].iter().any(|row| row.len() != vars[v].arity)
        {
            return Err(Error::LengthMismatch(vars[p].arity, params.cpt[v].len()));
        }
    }
    let mut b = CircuitBuilder::new(vars.to_vec())?;
    if n == 1 {
        let leaf = b.categorical(vars[0].id, params.root_pmf.clone())?;
        return b.finish(leaf);
    }
    let children = shape.children();
    // conditional subcircuit per variable and parent value
    let mut cond: Vec<Vec<NodeId>> = vec![Vec::new(); n];
    for &v in shape.order.iter().rev() {
        if v == root {
            continue;
        }
        let p = shape.parent(v).expect("non-root variable has a parent");
        let kp = vars[p].arity;
        if children[v].is_empty() {
            cond[v] = (0..kp)
                .map(|pv| b.categorical(vars[v].id, params.cpt[v][pv].clone()))
                .collect::<Result<_>>()?;
        } else {
            let prods = value_products(&mut b, vars, v, &children[v], &cond)?;
            cond[v] = (0..kp)
                .map(|pv| {
                    b.sum(
                        prods
                            .iter()
                            .copied()
                            .zip(params.cpt[v][pv].iter().copied())
                            .collect(),
                    )
                })
                .collect::<Result<_>>()?;
        }
    }
    let prods = value_products(&mut b, vars, root, &children[root], &cond)?;
    let top = b.sum(
        prods
            .iter()
            .copied()
            .zip(params.root_pmf.iter().copied())
            .collect(),
    )?;
    b.finish(top)
}

/// One product per value of `v`: the indicator for that value joined with
/// every child subtree conditioned on it.
fn value_products(
    b: &mut CircuitBuilder,
    vars: &[Variable],
    v: usize,
    children: &[usize],
    cond: &[Vec<NodeId>],
) -> Result<Vec<NodeId>> {
    (0..vars[v].arity)
        .map(|x| {
            let mut parts = vec![b.indicator(vars[v].id, x)?];
            parts.extend(children.iter().map(|&c| cond[c][x]));
            b.product(parts)
        })
        .collect()
}

/// Tree-distribution circuit: maximum-MI spanning tree rooted at the
/// lowest variable id, with smoothed count parameters.
pub fn chow_liu<A: Assignment + Sync>(
    vars: &[Variable],
    rows: &[A],
    weights: Option<&[f64]>,
    alpha: f64,
) -> Result<Circuit> {
    let mi = pairwise_mi(vars, rows, weights, alpha)?;
    let shape = mi_spanning_tree(&mi);
    let params = estimate_tree_params(vars, &shape, rows, weights, alpha)?;
    compile_tree(vars, &shape, &params)
}

/// Replace sum edge `(node, ordinal)` by one edge per supported value of
/// `var`. Each new child pins `var` with an indicator and carries the old
/// child conditioned on that value; new weights scale the old weight by
/// the child's probability of the value, so the represented distribution
/// is unchanged and all structural properties are preserved.
pub fn split(c: &Circuit, edge: (NodeId, usize), var: VarId) -> Result<Circuit> {
    if !(c.is_smooth() && c.is_decomposable() && c.is_deterministic()) {
        return Err(Error::UnsupportedQuery(
            "split requires a smooth, decomposable, deterministic circuit".to_string(),
        ));
    }
    let (n, k) = edge;
    let Node::Sum { children, log_weights } = c.node(n) else {
        return Err(Error::Structure(format!("node {} is not a sum", n.0)));
    };
    if k >= children.len() {
        return Err(Error::Structure(format!(
            "sum {} has no child ordinal {k}",
            n.0
        )));
    }
    let child = children[k];
    if !c.scope(child).contains(var) {
        return Err(Error::Scope(format!(
            "variable {} is not in the scope of child {}",
            var.0, child.0
        )));
    }
    let mut b = CircuitBuilder::new(c.vars().to_vec())?;
    let mut map = Vec::with_capacity(c.n_nodes());
    for i in 0..n.0 {
        map.push(copy_node(&mut b, c.node(NodeId(i)), &map)?);
    }
    let mut pinned = Vec::new();
    for x in 0..c.vars()[var.0].arity {
        let mut memo = HashMap::new();
        let (log_mass, sub) = condition(c, &mut b, &map, child, var, x, &mut memo)?;
        if log_mass == f64::NEG_INFINITY {
            continue;
        }
        let ind = b.indicator(var, x)?;
        let node = match sub {
            Some(s) => b.product(vec![ind, s])?,
            None => ind,
        };
        pinned.push((node, log_mass));
    }
    if pinned.is_empty() {
        return Err(Error::Structure(format!(
            "child {} has no support over variable {}",
            child.0, var.0
        )));
    }
    let total = log_sum_exp(pinned.iter().map(|(_, m)| *m));
    let mut edges = Vec::with_capacity(children.len() + pinned.len() - 1);
    for (j, (&ch, &lw)) in children.iter().zip(log_weights).enumerate() {
        if j == k {
            edges.extend(pinned.iter().map(|&(p, m)| (p, lw + m - total)));
        } else {
            edges.push((map[ch.0], lw));
        }
    }
    map.push(b.sum_log(edges)?);
    for i in n.0 + 1..c.n_nodes() {
        map.push(copy_node(&mut b, c.node(NodeId(i)), &map)?);
    }
    b.finish(map[c.root().0])?.pruned()
}

fn copy_node(b: &mut CircuitBuilder, node: &Node, map: &[NodeId]) -> Result<NodeId> {
    match node {
        Node::Leaf { var, kind: LeafKind::Indicator(x) } => b.indicator(*var, *x),
        Node::Leaf { var, kind: LeafKind::Categorical(pmf) } => b.categorical(*var, pmf.clone()),
        Node::Product { children } => b.product(children.iter().map(|c| map[c.0]).collect()),
        Node::Sum { children, log_weights } => b.sum_log(
            children
                .iter()
                .map(|c| map[c.0])
                .zip(log_weights.iter().copied())
                .collect(),
        ),
    }
}

/// Condition `node` on `var = x`, emitting any new nodes through the
/// builder. Returns the log probability mass of the restriction and the
/// residual subcircuit over the remaining scope (`None` when nothing
/// remains). Subcircuits without `var` are reused through `map`.
fn condition(
    c: &Circuit,
    b: &mut CircuitBuilder,
    map: &[NodeId],
    node: NodeId,
    var: VarId,
    x: usize,
    memo: &mut HashMap<usize, (f64, Option<NodeId>)>,
) -> Result<(f64, Option<NodeId>)> {
    if !c.scope(node).contains(var) {
        return Ok((0.0, Some(map[node.0])));
    }
    if let Some(hit) = memo.get(&node.0) {
        return Ok(*hit);
    }
    let out = match c.node(node) {
        Node::Leaf { kind, .. } => match kind {
            LeafKind::Indicator(y) => {
                (if *y == x { 0.0 } else { f64::NEG_INFINITY }, None)
            }
            LeafKind::Categorical(pmf) => (pmf[x].ln(), None),
        },
        Node::Product { children } => {
            let mut log_mass = 0.0;
            let mut parts = Vec::with_capacity(children.len());
            for &ch in children {
                if c.scope(ch).contains(var) {
                    let (lm, sub) = condition(c, b, map, ch, var, x, memo)?;
                    log_mass += lm;
                    if let Some(s) = sub {
                        parts.push(s);
                    }
                } else {
                    parts.push(map[ch.0]);
                }
            }
            if log_mass == f64::NEG_INFINITY {
                (f64::NEG_INFINITY, None)
            } else {
                let sub = match parts.len() {
                    0 => None,
                    1 => Some(parts[0]),
                    _ => Some(b.product(parts)?),
                };
                (log_mass, sub)
            }
        }
        Node::Sum { children, log_weights } => {
            let mut kept: Vec<(Option<NodeId>, f64)> = Vec::new();
            for (&ch, &lw) in children.iter().zip(log_weights) {
                if lw == f64::NEG_INFINITY {
                    continue;
                }
                let (lm, sub) = condition(c, b, map, ch, var, x, memo)?;
                if lw + lm == f64::NEG_INFINITY {
                    continue;
                }
                kept.push((sub, lw + lm));
            }
            if kept.is_empty() {
                (f64::NEG_INFINITY, None)
            } else {
                let total = log_sum_exp(kept.iter().map(|(_, j)| *j));
                if kept.iter().all(|(s, _)| s.is_none()) {
                    (total, None)
                } else {
                    debug_assert!(
                        kept.iter().all(|(s, _)| s.is_some()),
                        "smooth sums condition uniformly across children"
                    );
                    let sub = if kept.len() == 1 {
                        kept[0].0
                    } else {
                        Some(b.sum_log(
                            kept.iter()
                                .map(|(s, j)| (s.expect("checked above"), j - total))
                                .collect(),
                        )?)
                    };
                    (total, sub)
                }
            }
        }
    };
    memo.insert(node.0, out);
    Ok(out)
}

/// Knobs for the greedy split search.
#[derive(Debug, Clone)]
pub struct StructureConfig {
    /// Budget of split operations.
    pub max_splits: usize,
    /// Holdout share scored for early stopping; 0 scores training rows.
    pub validation_fraction: f64,
    pub seed: u64,
    /// Add-alpha smoothing for counts and re-estimation.
    pub alpha: f64,
    /// Consecutive non-improving splits tolerated before stopping.
    pub patience: usize,
}

impl Default for StructureConfig {
    fn default() -> Self {
        StructureConfig {
            max_splits: 200,
            validation_fraction: 0.2,
            seed: 0,
            alpha: 1.0,
            patience: 3,
        }
    }
}

/// Outcome of the greedy search: the circuit with the best validation
/// score, the score after every split tried, and how many splits the
/// returned circuit carries.
#[derive(Debug, Clone)]
pub struct StrudelFit {
    pub circuit: Circuit,
    /// Score of the tree-shaped starting circuit.
    pub initial_ll: f64,
    /// Mean holdout log-likelihood after each split.
    pub validation_trace: Vec<f64>,
    pub splits_applied: usize,
}

/// Greedy structure search: start from a tree circuit, repeatedly fan out
/// the sum edge with the highest aggregated flow on the variable whose MI
/// row sum over the child scope is largest, re-estimating parameters after
/// each split. Stops at the split budget or after `patience` consecutive
/// splits without a new best holdout score; the best-scoring circuit wins.
pub fn strudel_learn<A: Assignment + Sync + Clone>(
    vars: &[Variable],
    rows: &[A],
    weights: Option<&[f64]>,
    config: &StructureConfig,
) -> Result<StrudelFit> {
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(Error::InvalidParameter(format!(
            "validation_fraction must be in [0,1), got {}",
            config.validation_fraction
        )));
    }
    if rows.is_empty() {
        return Err(Error::InsufficientData("no rows".to_string()));
    }
    if let Some(w) = weights {
        if w.len() != rows.len() {
            return Err(Error::LengthMismatch(rows.len(), w.len()));
        }
    }
    let n = rows.len();
    let n_val = (n as f64 * config.validation_fraction).round() as usize;
    let (train_idx, val_idx) = if n_val == 0 {
        ((0..n).collect::<Vec<_>>(), Vec::new())
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let mut val = idx[..n_val].to_vec();
        let mut train = idx[n_val..].to_vec();
        val.sort_unstable();
        train.sort_unstable();
        (train, val)
    };
    if train_idx.is_empty() {
        return Err(Error::InsufficientData(
            "validation holdout leaves no training rows".to_string(),
        ));
    }
    let train: Vec<A> = train_idx.iter().map(|&i| rows[i].clone()).collect();
    let train_w: Option<Vec<f64>> = weights.map(|w| train_idx.iter().map(|&i| w[i]).collect());
    let val: Vec<A> = val_idx.iter().map(|&i| rows[i].clone()).collect();
    let val_w: Option<Vec<f64>> = weights.map(|w| val_idx.iter().map(|&i| w[i]).collect());

    let mi = pairwise_mi(vars, &train, train_w.as_deref(), config.alpha)?;
    let shape = mi_spanning_tree(&mi);
    let params = estimate_tree_params(vars, &shape, &train, train_w.as_deref(), config.alpha)?;
    let mut current = compile_tree(vars, &shape, &params)?;

    let incomplete = train
        .iter()
        .any(|r| vars.iter().any(|v| r.value(v.id).is_none()));
    let score = |c: &Circuit| -> Result<f64> {
        let stats = if val.is_empty() {
            log_likelihood_rows(c, &train, train_w.as_deref())?
        } else {
            log_likelihood_rows(c, &val, val_w.as_deref())?
        };
        Ok(stats.mean())
    };

    let initial_ll = score(&current)?;
    let mut best = current.clone();
    let mut best_ll = initial_ll;
    let mut best_splits = 0usize;
    let mut trace = Vec::new();
    let mut since_best = 0usize;

    for split_i in 1..=config.max_splits {
        let agg = aggregate_flows(&current, &train, train_w.as_deref())?;
        let Some((edge, var)) = choose_split(&current, &agg.flows, &mi) else {
            break;
        };
        current = split(&current, edge, var)?;
        if incomplete {
            em_step(&mut current, &train, train_w.as_deref(), config.alpha, None)?;
        } else {
            mle_complete(&mut current, &train, train_w.as_deref(), config.alpha, None)?;
        }
        let ll = score(&current)?;
        trace.push(ll);
        if ll > best_ll {
            best_ll = ll;
            best = current.clone();
            best_splits = split_i;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    Ok(StrudelFit {
        circuit: best,
        initial_ll,
        validation_trace: trace,
        splits_applied: best_splits,
    })
}

/// Highest-flow sum edge whose child scope offers a variable with at least
/// two supported values; the variable maximizes its MI row sum over that
/// scope. Ties prefer lower node id, then ordinal, then variable id.
fn choose_split(
    c: &Circuit,
    flows: &FlowTable,
    mi: &MiMatrix,
) -> Option<((NodeId, usize), VarId)> {
    let masks = c.support_masks();
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    for node in c.sum_nodes() {
        for (k, f) in flows.node_edges(c, node).iter().enumerate() {
            edges.push((*f, node.0, k));
        }
    }
    edges.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (_, n, k) in edges {
        let node = NodeId(n);
        let child = c.node(node).children()[k];
        let scope: Vec<usize> = c.scope(child).iter().map(|v| v.0).collect();
        let mut pick: Option<(f64, usize)> = None;
        for &v in &scope {
            if masks[child.0][v].count_ones() < 2 {
                continue;
            }
            let s = mi.scoped_sum(v, scope.iter().copied());
            if pick.is_none_or(|(bs, _)| s > bs) {
                pick = Some((s, v));
            }
        }
        if let Some((_, v)) = pick {
            return Some(((node, k), VarId(v)));
        }
    }
    None
}

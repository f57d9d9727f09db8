//! Circuit flows and expected flows.
//!
//! The flow of a complete row marks, with 1s, the edges the row activates:
//! the root is active, an active sum node activates its unique nonzero
//! child, and an active product node activates every child. The expected
//! flow of a partial row is the conditional expectation of those indicators
//! given the observed values, computed exactly in one top-down pass over the
//! node log values: a sum edge receives `flow(n) * w * p(c) / p(n)` and a
//! product edge passes `flow(n)` through.
//!
//! Tables also carry expected per-value counts for every categorical leaf
//! (the leaf's flow times the observed value's indicator, or times the
//! leaf's own distribution when the variable is missing), which is what
//! leaf distribution re-estimation consumes.
//!
//! Flows are defined for smooth, decomposable, deterministic circuits;
//! other circuits are rejected.

use rayon::prelude::*;

use crate::circuit::{Assignment, Circuit, EvalBuffer, LeafKind, Node, NodeId, PartialAssignment};
use crate::error::{Error, Result};

/// Rows per parallel work unit. Chunk boundaries and the merge order are
/// fixed, so aggregate results are identical for every thread count.
pub const PARALLEL_CHUNK_ROWS: usize = 512;

/// Per-edge flows and per-value categorical leaf counts, accumulated over
/// one or more weighted rows. Slots are assigned by [`Circuit::edge_slot`]
/// and [`Circuit::leaf_slot`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTable {
    edges: Vec<f64>,
    leaf_counts: Vec<f64>,
    covered: f64,
}

/// Expected flows have the same shape as complete-row flows; on complete
/// rows the two coincide bit for bit.
pub type ExpectedFlowTable = FlowTable;

impl FlowTable {
    pub fn zero(c: &Circuit) -> Self {
        FlowTable {
            edges: vec![0.0; c.n_edges()],
            leaf_counts: vec![0.0; c.n_leaf_slots()],
            covered: 0.0,
        }
    }

    /// Flow slots in edge order; index with [`Circuit::edge_slot`].
    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Count slots for categorical leaves; index with [`Circuit::leaf_slot`].
    pub fn leaf_counts(&self) -> &[f64] {
        &self.leaf_counts
    }

    /// Total weight of the rows accumulated into this table.
    pub fn covered(&self) -> f64 {
        self.covered
    }

    /// Flow of the `ordinal`-th edge out of `node`.
    pub fn edge(&self, c: &Circuit, node: NodeId, ordinal: usize) -> f64 {
        self.edges[c.edge_slot(node, ordinal)]
    }

    /// Flows of every edge out of `node`, in child order.
    pub fn node_edges(&self, c: &Circuit, node: NodeId) -> &[f64] {
        let base = c.edge_offset(node);
        &self.edges[base..base + c.node(node).children().len()]
    }

    /// Expected counts per value of a categorical leaf; `None` otherwise.
    pub fn leaf_values(&self, c: &Circuit, node: NodeId) -> Option<&[f64]> {
        let base = c.leaf_slot(node, 0)?;
        let arity = match c.node(node) {
            Node::Leaf { var, .. } => c.vars()[var.0].arity,
            _ => return None,
        };
        Some(&self.leaf_counts[base..base + arity])
    }

    fn merge(&mut self, other: &FlowTable) {
        for (a, b) in self.edges.iter_mut().zip(&other.edges) {
            *a += b;
        }
        for (a, b) in self.leaf_counts.iter_mut().zip(&other.leaf_counts) {
            *a += b;
        }
        self.covered += other.covered;
    }
}

/// Reusable buffers for repeated flow computations on one thread.
#[derive(Debug, Default)]
pub struct FlowScratch {
    buf: EvalBuffer,
    node_flow: Vec<f64>,
}

impl FlowScratch {
    pub fn new() -> Self {
        Self::default()
    }
}

fn check_flow_support(c: &Circuit) -> Result<()> {
    if !c.is_smooth() || !c.is_decomposable() {
        return Err(Error::UnsupportedQuery(
            "flows require a smooth and decomposable circuit".to_string(),
        ));
    }
    if !c.is_deterministic() {
        return Err(Error::UnsupportedQuery(
            "flows require a deterministic circuit".to_string(),
        ));
    }
    Ok(())
}

/// One top-down pass. Accumulates `weight`-scaled flows into `out` and
/// returns the row's log-likelihood. [`Error::NullEvidence`] when the row
/// has probability zero.
///
/// Nodes with zero flow are skipped outright, so log values of unreachable
/// children are never exponentiated; every node that does carry flow has a
/// finite log value and the sum-edge share `exp(lw + logp(c) - logp(n))` is
/// well defined. On complete rows the unique active child's share is
/// exactly 1, which keeps complete-row flows exact 0/1 values.
fn accumulate_row<A: Assignment>(
    c: &Circuit,
    a: &A,
    weight: f64,
    scratch: &mut FlowScratch,
    out: &mut FlowTable,
) -> Result<f64> {
    c.fill_log_values(a, &mut scratch.buf);
    let logp = scratch.buf.node_log_values();
    let root_ll = logp[c.root().0];
    if root_ll == f64::NEG_INFINITY {
        return Err(Error::NullEvidence);
    }
    scratch.node_flow.clear();
    scratch.node_flow.resize(c.n_nodes(), 0.0);
    scratch.node_flow[c.root().0] = 1.0;
    for i in (0..c.n_nodes()).rev() {
        let f = scratch.node_flow[i];
        if f == 0.0 {
            continue;
        }
        let id = NodeId(i);
        match c.node(id) {
            Node::Leaf { var, kind } => {
                if let LeafKind::Categorical(pmf) = kind {
                    match a.value(*var) {
                        Some(x) => {
                            let slot = c.leaf_slot(id, x).expect("categorical has slots");
                            out.leaf_counts[slot] += weight * f;
                        }
                        None => {
                            let base = c.leaf_slot(id, 0).expect("categorical has slots");
                            for (v, p) in pmf.iter().enumerate() {
                                out.leaf_counts[base + v] += weight * f * p;
                            }
                        }
                    }
                }
            }
            Node::Product { children } => {
                let base = c.edge_offset(id);
                for (k, ch) in children.iter().enumerate() {
                    out.edges[base + k] += weight * f;
                    scratch.node_flow[ch.0] += f;
                }
            }
            Node::Sum {
                children,
                log_weights,
            } => {
                let base = c.edge_offset(id);
                for (k, (ch, lw)) in children.iter().zip(log_weights).enumerate() {
                    let share = (lw + logp[ch.0] - logp[i]).exp();
                    if share > 0.0 {
                        let ef = f * share;
                        out.edges[base + k] += weight * ef;
                        scratch.node_flow[ch.0] += ef;
                    }
                }
            }
        }
    }
    out.covered += weight;
    Ok(root_ll)
}

/// Flows of one complete row. Every variable in the root scope must be
/// observed; a zero-probability row is [`Error::NullEvidence`].
pub fn circuit_flow(c: &Circuit, x: &PartialAssignment) -> Result<FlowTable> {
    check_flow_support(c)?;
    c.check_values(x)?;
    for var in c.scope(c.root()).iter() {
        if x.get(var).is_none() {
            return Err(Error::IncompleteAssignment(c.vars()[var.0].name.clone()));
        }
    }
    let mut out = FlowTable::zero(c);
    accumulate_row(c, x, 1.0, &mut FlowScratch::new(), &mut out)?;
    Ok(out)
}

/// Expected flows of one row with any subset of variables observed.
pub fn expected_flow(c: &Circuit, e: &PartialAssignment) -> Result<ExpectedFlowTable> {
    check_flow_support(c)?;
    c.check_values(e)?;
    let mut out = FlowTable::zero(c);
    accumulate_row(c, e, 1.0, &mut FlowScratch::new(), &mut out)?;
    Ok(out)
}

/// Expected flows of one row, accumulated `weight`-scaled into an existing
/// table with caller-managed scratch space. Returns the row log-likelihood.
pub fn expected_flow_with<A: Assignment>(
    c: &Circuit,
    e: &A,
    weight: f64,
    scratch: &mut FlowScratch,
    out: &mut ExpectedFlowTable,
) -> Result<f64> {
    check_flow_support(c)?;
    accumulate_row(c, e, weight, scratch, out)
}

/// Expected flows and total log-likelihood of a weighted row set.
#[derive(Debug, Clone)]
pub struct FlowAggregate {
    pub flows: ExpectedFlowTable,
    /// Sum of weighted row log-likelihoods.
    pub log_likelihood: f64,
}

/// Accumulate expected flows over all rows, in parallel over fixed chunks.
///
/// Rows with weight 0 are skipped. A zero-probability row fails the whole
/// aggregation with [`Error::RowImpossible`] carrying the smallest such row
/// index. Results are bitwise independent of the thread count.
pub fn aggregate_flows<A: Assignment + Sync>(
    c: &Circuit,
    rows: &[A],
    weights: Option<&[f64]>,
) -> Result<FlowAggregate> {
    check_flow_support(c)?;
    if let Some(w) = weights {
        if w.len() != rows.len() {
            return Err(Error::LengthMismatch(rows.len(), w.len()));
        }
    }
    let chunk_results: Vec<Result<(FlowTable, f64)>> = rows
        .par_chunks(PARALLEL_CHUNK_ROWS)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut scratch = FlowScratch::new();
            let mut table = FlowTable::zero(c);
            let mut ll = 0.0;
            for (j, row) in chunk.iter().enumerate() {
                let idx = ci * PARALLEL_CHUNK_ROWS + j;
                let w = weights.map_or(1.0, |ws| ws[idx]);
                if w == 0.0 {
                    continue;
                }
                let row_ll =
                    accumulate_row(c, row, w, &mut scratch, &mut table).map_err(|e| match e {
                        Error::NullEvidence => Error::RowImpossible { row: idx },
                        other => other,
                    })?;
                ll += w * row_ll;
            }
            Ok((table, ll))
        })
        .collect();
    let mut parts = Vec::with_capacity(chunk_results.len());
    for r in chunk_results {
        parts.push(r?);
    }
    Ok(tree_merge(c, parts))
}

fn tree_merge(c: &Circuit, mut parts: Vec<(FlowTable, f64)>) -> FlowAggregate {
    if parts.is_empty() {
        return FlowAggregate {
            flows: FlowTable::zero(c),
            log_likelihood: 0.0,
        };
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                a.0.merge(&b.0);
                a.1 += b.1;
            }
            next.push(a);
        }
        parts = next;
    }
    let (flows, log_likelihood) = parts.pop().expect("nonempty");
    FlowAggregate {
        flows,
        log_likelihood,
    }
}

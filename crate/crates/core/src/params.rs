//! Parameter estimation driven by expected flows.
//!
//! Complete data admits a closed form: every sum node's weights are its
//! edge flows normalized with Laplace smoothing, and every categorical
//! leaf's distribution is its per-value counts normalized the same way.
//! Incomplete data runs EM, whose E-step is the expected-flow aggregation
//! and whose M-step is that same normalization.
//!
//! Edges and leaf values with weight exactly zero are treated as structural
//! zeros: smoothing never resurrects them, so the support of every node,
//! and with it determinism, is preserved across updates.
//!
//! Models with parameter sharing (several sum nodes deriving their weights
//! from common factors) plug in through [`TiedUpdate`], which claims its
//! sum nodes and replaces the independent update for them.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use std::collections::HashSet;

use crate::circuit::{Assignment, Circuit, NodeId};
use crate::error::{Error, Result};
use crate::flows::{aggregate_flows, ExpectedFlowTable};

/// Stopping and smoothing controls for iterative fitting.
#[derive(Debug, Clone)]
pub struct EmConfig {
    /// Upper bound on measured iterations.
    pub max_iterations: usize,
    /// Relative log-likelihood improvement below which EM stops.
    pub ll_tolerance: f64,
    /// Laplace smoothing pseudocount added per admitted value.
    pub alpha: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iterations: 500,
            ll_tolerance: 1e-6,
            alpha: 1.0,
        }
    }
}

/// Starting point for iterative fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmInit {
    /// Model-informed starting parameters; circuits without a tied update
    /// keep their current parameters.
    Prior,
    /// Seeded random redraw of all free parameters.
    Random { seed: u64 },
    /// Start from the parameters the circuit currently carries.
    Keep,
}

/// Parameter sharing across sum nodes. The independent per-node update
/// skips the nodes claimed by [`TiedUpdate::owned_sums`]; [`TiedUpdate::apply`]
/// re-estimates them from the same expected flows.
pub trait TiedUpdate: Sync {
    /// Sum nodes whose weights this update owns.
    fn owned_sums(&self, c: &Circuit) -> Vec<NodeId>;

    /// Re-estimate owned weights from expected flows. Returns nodes left
    /// unchanged because their flows and smoothing were both zero.
    fn apply(&self, c: &mut Circuit, flows: &ExpectedFlowTable, alpha: f64) -> Result<Vec<NodeId>>;

    /// Model-informed starting parameters.
    fn init_prior(&self, c: &mut Circuit) -> Result<()>;

    /// Random starting parameters consistent with the sharing pattern,
    /// called after the generic redraw of free parameters.
    fn init_random(&self, c: &mut Circuit, rng: &mut ChaCha8Rng) -> Result<()>;

    /// Decision-mechanism snapshot for per-iteration traces, if the model
    /// carries one.
    fn d_mechanism(&self, c: &Circuit) -> Option<[f64; 4]> {
        let _ = c;
        None
    }
}

/// Outcome of one estimation pass.
#[derive(Debug, Clone)]
pub struct FitReport {
    /// Weighted sum of row log-likelihoods under the parameters in effect
    /// when the pass started.
    pub log_likelihood: f64,
    /// Total row weight behind `log_likelihood`.
    pub weight: f64,
    /// Nodes whose parameters were kept because no data reached them and
    /// smoothing was zero.
    pub degenerate: Vec<NodeId>,
}

/// Iteration history of [`em_fit`].
#[derive(Debug, Clone)]
pub struct EmTrace {
    /// Weighted train log-likelihood after each iteration's update.
    pub log_likelihoods: Vec<f64>,
    /// Measured iterations run.
    pub iterations: usize,
    /// Whether the tolerance stopped the run before the iteration cap.
    pub converged: bool,
    /// Decision-mechanism snapshot per iteration, aligned with
    /// `log_likelihoods`, when the tied update exposes one.
    pub d_mech_trace: Vec<[f64; 4]>,
}

/// Closed-form estimation from complete rows: aggregate flows once, then
/// normalize. Rows must observe every variable in the root scope.
pub fn mle_complete<A: Assignment + Sync>(
    c: &mut Circuit,
    rows: &[A],
    weights: Option<&[f64]>,
    alpha: f64,
    ties: Option<&dyn TiedUpdate>,
) -> Result<FitReport> {
    check_complete(c, rows)?;
    step(c, rows, weights, alpha, ties)
}

/// One EM iteration: expected flows under the current parameters, then the
/// normalization update. The reported log-likelihood belongs to the
/// parameters the step started from, so it trails the update by one
/// iteration.
pub fn em_step<A: Assignment + Sync>(
    c: &mut Circuit,
    rows: &[A],
    weights: Option<&[f64]>,
    alpha: f64,
    ties: Option<&dyn TiedUpdate>,
) -> Result<FitReport> {
    step(c, rows, weights, alpha, ties)
}

/// Fit until the relative log-likelihood improvement drops below the
/// tolerance or the iteration cap is reached.
///
/// Each measured iteration reuses the next E-step's likelihood as its
/// post-update value instead of re-evaluating the data, so one extra
/// leading step runs whose starting likelihood (that of the initial
/// parameters) is discarded. Complete data therefore converges at
/// iteration 2: the first update already lands on the closed-form optimum
/// and the second measured iteration improves by exactly zero.
pub fn em_fit<A: Assignment + Sync>(
    c: &mut Circuit,
    rows: &[A],
    weights: Option<&[f64]>,
    config: &EmConfig,
    init: EmInit,
    ties: Option<&dyn TiedUpdate>,
) -> Result<EmTrace> {
    match init {
        EmInit::Keep => {}
        EmInit::Prior => {
            if let Some(t) = ties {
                t.init_prior(c)?;
            }
        }
        EmInit::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            randomize_parameters(c, &mut rng);
            if let Some(t) = ties {
                t.init_random(c, &mut rng)?;
            }
        }
    }
    let mut trace = EmTrace {
        log_likelihoods: Vec::new(),
        iterations: 0,
        converged: false,
        d_mech_trace: Vec::new(),
    };
    if config.max_iterations == 0 {
        return Ok(trace);
    }
    step(c, rows, weights, config.alpha, ties)?;
    for _ in 0..config.max_iterations {
        if let Some(t) = ties {
            if let Some(dm) = t.d_mechanism(c) {
                trace.d_mech_trace.push(dm);
            }
        }
        let report = step(c, rows, weights, config.alpha, ties)?;
        trace.log_likelihoods.push(report.log_likelihood);
        let n = trace.log_likelihoods.len();
        if n >= 2 {
            let old = trace.log_likelihoods[n - 2];
            let new = trace.log_likelihoods[n - 1];
            let scale = old.abs().max(f64::MIN_POSITIVE);
            if (new - old).abs() / scale < config.ll_tolerance {
                trace.converged = true;
                break;
            }
        }
    }
    trace.iterations = trace.log_likelihoods.len();
    Ok(trace)
}

fn step<A: Assignment + Sync>(
    c: &mut Circuit,
    rows: &[A],
    weights: Option<&[f64]>,
    alpha: f64,
    ties: Option<&dyn TiedUpdate>,
) -> Result<FitReport> {
    let agg = aggregate_flows(c, rows, weights)?;
    let covered = agg.flows.covered();
    if covered <= 0.0 {
        return Err(Error::InsufficientData(
            "no rows with positive weight".to_string(),
        ));
    }
    let degenerate = m_step(c, &agg.flows, alpha, ties)?;
    Ok(FitReport {
        log_likelihood: agg.log_likelihood,
        weight: covered,
        degenerate,
    })
}

/// Normalize flows into parameters. Structural zeros (weights or PMF
/// entries that are exactly zero) stay zero and receive no smoothing mass.
fn m_step(
    c: &mut Circuit,
    flows: &ExpectedFlowTable,
    alpha: f64,
    ties: Option<&dyn TiedUpdate>,
) -> Result<Vec<NodeId>> {
    let owned: HashSet<NodeId> = match ties {
        Some(t) => t.owned_sums(c).into_iter().collect(),
        None => HashSet::new(),
    };
    let mut degenerate = Vec::new();
    for node in c.sum_nodes().collect::<Vec<_>>() {
        if owned.contains(&node) {
            continue;
        }
        let support: Vec<bool> = c
            .sum_log_weights(node)
            .iter()
            .map(|lw| *lw != f64::NEG_INFINITY)
            .collect();
        let counts = flows.node_edges(c, node).to_vec();
        match smoothed(&counts, &support, alpha) {
            Some(w) => c.set_sum_weights(node, &w),
            None => degenerate.push(node),
        }
    }
    for node in c.categorical_leaves().collect::<Vec<_>>() {
        let pmf = c.leaf_pmf(node).expect("categorical leaf");
        let support: Vec<bool> = pmf.iter().map(|p| *p != 0.0).collect();
        let counts = flows
            .leaf_values(c, node)
            .expect("categorical leaf has count slots")
            .to_vec();
        match smoothed(&counts, &support, alpha) {
            Some(p) => c.set_leaf_pmf(node, &p),
            None => degenerate.push(node),
        }
    }
    if let Some(t) = ties {
        degenerate.extend(t.apply(c, flows, alpha)?);
    }
    Ok(degenerate)
}

/// `(count + alpha) / (total + alpha * |support|)` over supported entries;
/// `None` when both total and alpha are zero.
fn smoothed(counts: &[f64], support: &[bool], alpha: f64) -> Option<Vec<f64>> {
    let k = support.iter().filter(|s| **s).count();
    let total: f64 = counts
        .iter()
        .zip(support)
        .filter(|(_, s)| **s)
        .map(|(f, _)| f)
        .sum();
    let denom = total + alpha * k as f64;
    if denom <= 0.0 {
        return None;
    }
    Some(
        counts
            .iter()
            .zip(support)
            .map(|(f, s)| if *s { (f + alpha) / denom } else { 0.0 })
            .collect(),
    )
}

/// Redraw every free parameter from a flat Dirichlet over its supported
/// values. Zero weights and zero PMF entries are structural and stay zero.
pub fn randomize_parameters(c: &mut Circuit, rng: &mut ChaCha8Rng) {
    for node in c.sum_nodes().collect::<Vec<_>>() {
        let support: Vec<bool> = c
            .sum_log_weights(node)
            .iter()
            .map(|lw| *lw != f64::NEG_INFINITY)
            .collect();
        let w = dirichlet_on(rng, &support);
        c.set_sum_weights(node, &w);
    }
    for node in c.categorical_leaves().collect::<Vec<_>>() {
        let support: Vec<bool> = c
            .leaf_pmf(node)
            .expect("categorical leaf")
            .iter()
            .map(|p| *p != 0.0)
            .collect();
        let p = dirichlet_on(rng, &support);
        c.set_leaf_pmf(node, &p);
    }
}

fn dirichlet_on(rng: &mut ChaCha8Rng, support: &[bool]) -> Vec<f64> {
    let raw: Vec<f64> = support
        .iter()
        .map(|s| {
            if *s {
                (-rng.random::<f64>().ln()).max(1e-12)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

fn check_complete<A: Assignment>(c: &Circuit, rows: &[A]) -> Result<()> {
    let scope: Vec<_> = c.scope(c.root()).iter().collect();
    for (i, row) in rows.iter().enumerate() {
        for var in &scope {
            if row.value(*var).is_none() {
                return Err(Error::IncompleteAssignment(format!(
                    "row {i}: variable {} unobserved",
                    c.vars()[var.0].name
                )));
            }
        }
    }
    Ok(())
}

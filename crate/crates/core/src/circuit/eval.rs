//! Bottom-up evaluation in log space.
//!
//! A single forward scan over the topologically ordered node vector computes
//! the log value of every node. Unset variables make indicator and
//! categorical leaves evaluate to 1 (log 0.0), which yields the marginal for
//! smooth and decomposable circuits.

use super::{Assignment, Circuit, LeafKind, Node, PartialAssignment};
use crate::error::{Error, Result};

/// Reusable per-node log-value buffer. Evaluation allocates nothing when the
/// caller threads one buffer through repeated queries; concurrent queries
/// need one buffer per thread.
#[derive(Debug, Default, Clone)]
pub struct EvalBuffer {
    pub(crate) logp: Vec<f64>,
}

impl EvalBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn node_log_values(&self) -> &[f64] {
        &self.logp
    }
}

/// Log-sum-exp guarded against empty and all-`-inf` inputs. A single finite
/// term is returned exactly, which downstream flow computations rely on.
pub(crate) fn log_sum_exp(terms: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = terms.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = terms.map(|t| (t - max).exp()).sum();
    max + sum.ln()
}

impl Circuit {
    /// Fill `buf` with the log value of every node under `a`.
    pub(crate) fn fill_log_values<A: Assignment>(&self, a: &A, buf: &mut EvalBuffer) {
        buf.logp.clear();
        buf.logp.reserve(self.nodes().len());
        for node in self.nodes() {
            let lp = match node {
                Node::Leaf { var, kind } => match (kind, a.value(*var)) {
                    (_, None) => 0.0,
                    (LeafKind::Indicator(v), Some(x)) => {
                        if x == *v {
                            0.0
                        } else {
                            f64::NEG_INFINITY
                        }
                    }
                    (LeafKind::Categorical(pmf), Some(x)) => pmf[x].ln(),
                },
                Node::Product { children } => {
                    children.iter().map(|c| buf.logp[c.0]).sum()
                }
                Node::Sum {
                    children,
                    log_weights,
                } => log_sum_exp(
                    children
                        .iter()
                        .zip(log_weights)
                        .map(|(c, lw)| lw + buf.logp[c.0]),
                ),
            };
            buf.logp.push(lp);
        }
    }

    pub(crate) fn check_values<A: Assignment>(&self, a: &A) -> Result<()> {
        for v in self.vars() {
            if let Some(x) = a.value(v.id) {
                if x >= v.arity {
                    return Err(Error::InvalidParameter(format!(
                        "value {x} out of range for variable {} (arity {})",
                        v.name, v.arity
                    )));
                }
            }
        }
        Ok(())
    }

    /// Log of the circuit output on an assignment that covers the root scope.
    pub fn log_complete(&self, a: &PartialAssignment) -> Result<f64> {
        self.check_values(a)?;
        if let Some(missing) = self.scope(self.root()).iter().find(|v| a.value(*v).is_none()) {
            return Err(Error::IncompleteAssignment(
                self.vars()[missing.0].name.clone(),
            ));
        }
        let mut buf = EvalBuffer::new();
        self.fill_log_values(a, &mut buf);
        Ok(buf.logp[self.root().0])
    }

    /// Circuit output on a complete assignment, in linear space.
    pub fn evaluate_complete(&self, a: &PartialAssignment) -> Result<f64> {
        Ok(self.log_complete(a)?.exp())
    }

    fn check_marginal_support(&self) -> Result<()> {
        if !self.is_smooth() || !self.is_decomposable() {
            return Err(Error::UnsupportedQuery(
                "marginal queries require a smooth and decomposable circuit".to_string(),
            ));
        }
        Ok(())
    }

    /// Log marginal probability of partial evidence; unobserved variables are
    /// summed out. `-inf` encodes zero probability.
    pub fn log_marginal(&self, e: &PartialAssignment) -> Result<f64> {
        let mut buf = EvalBuffer::new();
        self.log_marginal_with(e, &mut buf)
    }

    /// As [`Circuit::log_marginal`], reusing a caller-owned buffer.
    pub fn log_marginal_with<A: Assignment>(&self, e: &A, buf: &mut EvalBuffer) -> Result<f64> {
        self.check_marginal_support()?;
        self.check_values(e)?;
        self.fill_log_values(e, buf);
        Ok(buf.logp[self.root().0])
    }

    /// Marginal probability of partial evidence, in linear space.
    pub fn evaluate_marginal(&self, e: &PartialAssignment) -> Result<f64> {
        Ok(self.log_marginal(e)?.exp())
    }

    /// Conditional probability `Pr(q | e)` as the ratio of two marginals.
    /// A query that contradicts the evidence has probability zero; evidence
    /// with zero probability is an error.
    pub fn conditional(&self, q: &PartialAssignment, e: &PartialAssignment) -> Result<f64> {
        let log_e = self.log_marginal(e)?;
        if log_e == f64::NEG_INFINITY {
            return Err(Error::NullEvidence);
        }
        let joint = match q.merged(e) {
            Some(qe) => qe,
            None => return Ok(0.0),
        };
        let log_qe = self.log_marginal(&joint)?;
        Ok((log_qe - log_e).exp())
    }
}

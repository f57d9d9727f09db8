//! Ancestral sampling: descend from the root, choosing one child per sum
//! node and descending into every child of a product node.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Circuit, LeafKind, Node, NodeId, PartialAssignment};
use crate::error::Result;

impl Circuit {
    /// Draw `count` complete assignments over the root scope. The same seed
    /// reproduces the same rows on every run and platform.
    pub fn sample(&self, count: usize, seed: u64) -> Result<Vec<PartialAssignment>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sample_one(&mut rng)).collect()
    }

    /// Draw a single assignment using a caller-managed generator, so callers
    /// can shard work across independent seeded substreams.
    pub fn sample_one<R: Rng>(&self, rng: &mut R) -> Result<PartialAssignment> {
        let mut out = PartialAssignment::empty(self.n_vars());
        let mut stack: Vec<NodeId> = vec![self.root()];
        while let Some(id) = stack.pop() {
            match self.node(id) {
                Node::Leaf { var, kind } => {
                    let value = match kind {
                        LeafKind::Indicator(v) => *v,
                        LeafKind::Categorical(pmf) => sample_pmf(rng, pmf),
                    };
                    debug_assert!(out.get(*var).is_none(), "variable sampled twice");
                    out.set(*var, value);
                }
                Node::Product { children } => stack.extend(children.iter().copied()),
                Node::Sum {
                    children,
                    log_weights,
                } => {
                    let r: f64 = rng.random();
                    let mut cum = 0.0;
                    let mut chosen = *children.last().expect("sum has children");
                    for (c, lw) in children.iter().zip(log_weights) {
                        cum += lw.exp();
                        if r < cum {
                            chosen = *c;
                            break;
                        }
                    }
                    stack.push(chosen);
                }
            }
        }
        Ok(out)
    }
}

fn sample_pmf<R: Rng>(rng: &mut R, pmf: &[f64]) -> usize {
    let r: f64 = rng.random();
    let mut cum = 0.0;
    for (v, p) in pmf.iter().enumerate() {
        cum += p;
        if r < cum {
            return v;
        }
    }
    pmf.len() - 1
}

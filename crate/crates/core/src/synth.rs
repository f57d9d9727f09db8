//! Ground-truth fair distributions and biased observed datasets: a latent
//! head over one random tree distribution per context, sampled into a
//! training table with the fair decision hidden and a test table carrying
//! it for evaluation.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::circuit::{Circuit, VarId, Variable};
use crate::data::{ColumnDef, DataTable, Role, Schema};
use crate::error::{Error, Result};
use crate::fair::{build_fair_pc, FairHeadParams, FairModel, FairSchema, ModelKind};
use crate::structure::{compile_tree, TreeParams, TreeShape};

/// Substream tags, one per generated artifact.
const TREE_TAG: u64 = 1;
const TRAIN_TAG: u64 = 100;
const TEST_TAG: u64 = 101;

/// Synthetic experiment configuration. The default head makes S=1 the
/// minority group, keeps the fair decision balanced and independent of S,
/// and biases the observed label against the minority.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Non-sensitive binary features; experiments range over 10 to 30.
    pub n_features: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub head: FairHeadParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_features: 15,
            n_train: 100_000,
            n_test: 100_000,
            seed: 0,
            head: FairHeadParams {
                phi_s: 0.3,
                phi_df: 0.5,
                d_mech: Some([0.8, 0.9, 0.1, 0.4]),
            },
        }
    }
}

/// A generated experiment: the true model, a training table with the fair
/// decision column all-missing, and a test table keeping its true values.
#[derive(Debug, Clone)]
pub struct SynthBundle {
    pub model: FairModel,
    pub train: DataTable,
    pub test: DataTable,
}

/// splitmix64 over a tagged seed, giving each artifact its own stream so
/// resizing one table never shifts another.
fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Column layout of generated tables: S, X1..Xn, D, D_f.
pub fn synth_schema(n_features: usize) -> Result<Schema> {
    let mut cols = vec![ColumnDef::binary("S", Role::Sensitive)];
    for i in 1..=n_features {
        cols.push(ColumnDef::binary(format!("X{i}"), Role::Feature));
    }
    cols.push(ColumnDef::binary("D", Role::Label));
    cols.push(ColumnDef::binary("D_f", Role::Latent));
    Schema::new(cols)
}

/// Uniformly random spanning tree over the given variables (random Prüfer
/// sequence) with each CPT row drawn Dirichlet(1) and blended with a unit
/// pseudocount, compiled like a learned tree. One variable yields a single
/// categorical leaf.
pub fn random_tree_subcircuit(vars: &[Variable], seed: u64) -> Result<Circuit> {
    if vars.is_empty() {
        return Err(Error::InvalidParameter(
            "random tree needs at least one variable".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = vars.len();
    let edges = prufer_tree(n, &mut rng);
    let shape = TreeShape::from_edges(n, &edges, 0)?;
    let mut root_pmf = Vec::new();
    let mut cpt = vec![Vec::new(); n];
    for v in 0..n {
        match shape.parent(v) {
            None => root_pmf = blended_row(vars[v].arity, &mut rng),
            Some(p) => {
                cpt[v] = (0..vars[p].arity)
                    .map(|_| blended_row(vars[v].arity, &mut rng))
                    .collect();
            }
        }
    }
    compile_tree(vars, &shape, &TreeParams { root_pmf, cpt })
}

/// Build the true model and draw the train/test tables.
pub fn generate(config: &SynthConfig) -> Result<SynthBundle> {
    if config.n_features == 0 {
        return Err(Error::InvalidParameter(
            "at least one feature required".to_string(),
        ));
    }
    let schema = synth_schema(config.n_features)?;
    let fair_schema = FairSchema::from_schema(&schema, ModelKind::FairPc)?;
    let vars = schema.variables();
    let map: Vec<VarId> = fair_schema.features.clone();
    let local_vars: Vec<Variable> = map
        .iter()
        .enumerate()
        .map(|(i, &c)| Variable::new(VarId(i), vars[c.0].arity, vars[c.0].name.clone()))
        .collect::<Result<_>>()?;
    let mut factory = |s: usize, c: usize| -> Result<Circuit> {
        let tag = TREE_TAG + (s * 2 + c) as u64;
        let sub = random_tree_subcircuit(&local_vars, derive_seed(config.seed, tag))?;
        sub.remapped(vars.clone(), &map)
    };
    let circuit = build_fair_pc(&vars, &fair_schema, &config.head, &mut factory)?;
    let latent_col = fair_schema.latent.expect("latent model kind").0;
    let model = FairModel::new(ModelKind::FairPc, circuit, fair_schema)?;
    let train = sample_table(
        model.circuit(),
        &schema,
        config.n_train,
        derive_seed(config.seed, TRAIN_TAG),
        Some(latent_col),
    )?;
    let test = sample_table(
        model.circuit(),
        &schema,
        config.n_test,
        derive_seed(config.seed, TEST_TAG),
        None,
    )?;
    Ok(SynthBundle { model, train, test })
}

fn sample_table(
    c: &Circuit,
    schema: &Schema,
    n: usize,
    seed: u64,
    hide_col: Option<usize>,
) -> Result<DataTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = DataTable::empty(schema.clone());
    let mut row = vec![None; schema.n_cols()];
    for _ in 0..n {
        let a = c.sample_one(&mut rng)?;
        for (col, cell) in row.iter_mut().enumerate() {
            *cell = a.get(VarId(col));
        }
        if let Some(h) = hide_col {
            row[h] = None;
        }
        table.push_row(&row)?;
    }
    Ok(table)
}

/// Dirichlet(1) draw treated as a count vector of total one, then a unit
/// pseudocount per cell.
fn blended_row(k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        for x in &mut w {
            *x /= total;
        }
    } else {
        w = vec![1.0 / k as f64; k];
    }
    w.iter().map(|x| (x + 1.0) / (1.0 + k as f64)).collect()
}

/// Decode a uniformly random Prüfer sequence into its labeled tree.
fn prufer_tree(n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    if n < 2 {
        return Vec::new();
    }
    let seq: Vec<usize> = (0..n - 2).map(|_| rng.random_range(0..n)).collect();
    let mut degree = vec![1usize; n];
    for &s in &seq {
        degree[s] += 1;
    }
    let mut leaves: BinaryHeap<Reverse<usize>> = (0..n)
        .filter(|&v| degree[v] == 1)
        .map(Reverse)
        .collect();
    let mut edges = Vec::with_capacity(n - 1);
    for &s in &seq {
        let Reverse(leaf) = leaves.pop().expect("decoding keeps a leaf available");
        edges.push((leaf, s));
        degree[s] -= 1;
        if degree[s] == 1 {
            leaves.push(Reverse(s));
        }
    }
    let Reverse(u) = leaves.pop().expect("two nodes remain");
    let Reverse(v) = leaves.pop().expect("two nodes remain");
    edges.push((u, v));
    edges
}

//! Fairness model families over a sensitive attribute S, features X, and a
//! decision label D, optionally with a latent fair decision D_f: a shared
//! head whose root keeps D_f independent of S through tied product-form
//! weights, per-context feature subcircuits, tied EM updates, fair
//! prediction, and model files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::circuit::{
    Assignment, Circuit, CircuitBuilder, EvalBuffer, LeafKind, Node, NodeId, VarId, VarSet,
    Variable,
};
use crate::data::{DataTable, Role, Schema};
use crate::error::{Error, Result};
use crate::flows::{ExpectedFlowTable, PARALLEL_CHUNK_ROWS};
use crate::metrics::{self, threshold_labels, Classified};
use crate::params::{em_fit, EmConfig, EmInit, EmTrace, TiedUpdate};
use crate::structure::{strudel_learn, StructureConfig};

/// Head contexts in root child order: (sensitive value, decision value).
const CONTEXTS: [(usize, usize); 4] = [(1, 1), (1, 0), (0, 1), (0, 0)];

/// Softening of the label-copies-decision prior mechanism.
const PRIOR_EPSILON: f64 = 0.1;

/// Index into the decision-mechanism table holding Pr(D=1 | D_f=df, S=s),
/// ordered (df,s) = (1,1), (1,0), (0,1), (0,0).
pub fn d_mech_index(df: usize, s: usize) -> usize {
    (1 - df) * 2 + (1 - s)
}

/// The four model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    /// Latent fair decision with learned feature structure.
    FairPc,
    /// No latent variable, learned feature structure, D tied independent of S.
    NLatPc,
    /// No latent variable, naive Bayes features.
    TwoNb,
    /// Latent fair decision, naive Bayes features.
    LatNb,
}

impl ModelKind {
    pub fn has_latent(self) -> bool {
        matches!(self, ModelKind::FairPc | ModelKind::LatNb)
    }

    pub fn learns_structure(self) -> bool {
        matches!(self, ModelKind::FairPc | ModelKind::NLatPc)
    }

    pub fn token(self) -> &'static str {
        match self {
            ModelKind::FairPc => "fairpc",
            ModelKind::NLatPc => "nlatpc",
            ModelKind::TwoNb => "2nb",
            ModelKind::LatNb => "latnb",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fairpc" => Ok(ModelKind::FairPc),
            "nlatpc" => Ok(ModelKind::NLatPc),
            "2nb" => Ok(ModelKind::TwoNb),
            "latnb" => Ok(ModelKind::LatNb),
            _ => Err(Error::InvalidParameter(format!("unknown model kind {s:?}"))),
        }
    }
}

/// Variable roles for the head. Sensitive, label, and latent are binary;
/// everything else is a feature.
#[derive(Debug, Clone, PartialEq)]
pub struct FairSchema {
    pub sensitive: VarId,
    pub label: VarId,
    /// Latent fair-decision variable; required by latent model kinds.
    pub latent: Option<VarId>,
    pub features: Vec<VarId>,
}

impl FairSchema {
    /// Read roles off a table schema.
    pub fn from_schema(schema: &Schema, kind: ModelKind) -> Result<FairSchema> {
        let sensitive = schema
            .role_col(Role::Sensitive)
            .ok_or_else(|| Error::SchemaMismatch("no sensitive column".to_string()))?;
        let label = schema
            .role_col(Role::Label)
            .ok_or_else(|| Error::SchemaMismatch("no label column".to_string()))?;
        let latents: Vec<usize> = (0..schema.n_cols())
            .filter(|&i| schema.columns[i].role == Role::Latent)
            .collect();
        if latents.len() > 1 {
            return Err(Error::SchemaMismatch(
                "more than one latent column".to_string(),
            ));
        }
        let latent = latents.first().copied();
        if kind.has_latent() && latent.is_none() {
            return Err(Error::SchemaMismatch(format!(
                "model kind {kind} needs a latent column declared in the schema"
            )));
        }
        for col in [Some(sensitive), Some(label), latent].into_iter().flatten() {
            if schema.columns[col].arity != 2 {
                return Err(Error::SchemaMismatch(format!(
                    "column {} must be binary",
                    schema.columns[col].name
                )));
            }
        }
        let features: Vec<VarId> = (0..schema.n_cols())
            .filter(|&i| schema.columns[i].role == Role::Feature)
            .map(VarId)
            .collect();
        if features.is_empty() {
            return Err(Error::SchemaMismatch("no feature columns".to_string()));
        }
        Ok(FairSchema {
            sensitive: VarId(sensitive),
            label: VarId(label),
            latent: latent.map(VarId),
            features,
        })
    }

    fn feature_set(&self, n_vars: usize) -> VarSet {
        let mut s = VarSet::empty(n_vars);
        for &v in &self.features {
            s.insert(v);
        }
        s
    }
}

/// Tied head parameters: Pr(S=1), Pr(decision=1), and for latent kinds the
/// observed-label mechanism Pr(D=1 | D_f, S) indexed by [`d_mech_index`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FairHeadParams {
    pub phi_s: f64,
    pub phi_df: f64,
    pub d_mech: Option<[f64; 4]>,
}

impl FairHeadParams {
    /// Root weights in head child order, the products of the two marginals.
    pub fn thetas(&self) -> [f64; 4] {
        let (s, d) = (self.phi_s, self.phi_df);
        [s * d, s * (1.0 - d), (1.0 - s) * d, (1.0 - s) * (1.0 - d)]
    }

    /// Starting point before fitting: even head marginals and, for latent
    /// kinds, a softened label-copies-decision mechanism.
    pub fn prior(latent: bool) -> FairHeadParams {
        FairHeadParams {
            phi_s: 0.5,
            phi_df: 0.5,
            d_mech: latent.then_some([
                1.0 - PRIOR_EPSILON,
                1.0 - PRIOR_EPSILON,
                PRIOR_EPSILON,
                PRIOR_EPSILON,
            ]),
        }
    }

    fn check(&self) -> Result<()> {
        let mut all = vec![self.phi_s, self.phi_df];
        if let Some(dm) = self.d_mech {
            all.extend(dm);
        }
        if all.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidParameter(
                "head probabilities must lie in [0,1]".to_string(),
            ));
        }
        Ok(())
    }
}

/// Evidence adapter pinning one variable to a fixed value.
struct Pin<'a, A> {
    base: &'a A,
    var: VarId,
    value: usize,
}

impl<A: Assignment> Assignment for Pin<'_, A> {
    fn value(&self, var: VarId) -> Option<usize> {
        if var == self.var {
            Some(self.value)
        } else {
            self.base.value(var)
        }
    }
}

/// Evidence adapter hiding one variable.
struct Hide<'a, A> {
    base: &'a A,
    var: VarId,
}

impl<A: Assignment> Assignment for Hide<'_, A> {
    fn value(&self, var: VarId) -> Option<usize> {
        if var == self.var {
            None
        } else {
            self.base.value(var)
        }
    }
}

/// Latent-head circuit: a root sum over the four (S, D_f) contexts, each a
/// product of the two indicators, a Bernoulli leaf for the observed label
/// D driven by the decision mechanism, and that context's feature
/// subcircuit. Root weights take the tied product form, so D_f is
/// independent of S for every parameterization.
pub fn build_fair_pc(
    vars: &[Variable],
    schema: &FairSchema,
    head: &FairHeadParams,
    factory: &mut dyn FnMut(usize, usize) -> Result<Circuit>,
) -> Result<Circuit> {
    let latent = schema
        .latent
        .ok_or_else(|| Error::Structure("latent head needs a latent variable".to_string()))?;
    let d_mech = head.d_mech.ok_or_else(|| {
        Error::InvalidParameter("latent head needs a decision mechanism".to_string())
    })?;
    build_head(vars, schema, head, latent, Some((schema.label, d_mech)), factory)
}

/// Non-latent head: the same shape keyed on (S, D) with the label pinned
/// by an indicator, and D tied independent of S.
pub fn build_nlat_pc(
    vars: &[Variable],
    schema: &FairSchema,
    head: &FairHeadParams,
    factory: &mut dyn FnMut(usize, usize) -> Result<Circuit>,
) -> Result<Circuit> {
    build_head(vars, schema, head, schema.label, None, factory)
}

/// Non-latent head over naive Bayes features (uniform until fitted).
pub fn build_two_nb(vars: &[Variable], schema: &FairSchema, head: &FairHeadParams) -> Result<Circuit> {
    let features = schema.features.clone();
    build_nlat_pc(vars, schema, head, &mut |_, _| {
        factorized_uniform(vars, &features)
    })
}

/// Latent head over naive Bayes features (uniform until fitted).
pub fn build_lat_nb(vars: &[Variable], schema: &FairSchema, head: &FairHeadParams) -> Result<Circuit> {
    let features = schema.features.clone();
    build_fair_pc(vars, schema, head, &mut |_, _| {
        factorized_uniform(vars, &features)
    })
}

fn build_head(
    vars: &[Variable],
    schema: &FairSchema,
    head: &FairHeadParams,
    context_var: VarId,
    d_leaf: Option<(VarId, [f64; 4])>,
    factory: &mut dyn FnMut(usize, usize) -> Result<Circuit>,
) -> Result<Circuit> {
    head.check()?;
    let features = schema.feature_set(vars.len());
    let thetas = head.thetas();
    let mut b = CircuitBuilder::new(vars.to_vec())?;
    let mut edges = Vec::with_capacity(4);
    for (i, &(s, c)) in CONTEXTS.iter().enumerate() {
        let sub = factory(s, c)?;
        let scope = sub.scope(sub.root());
        if !(scope.is_subset(&features) && features.is_subset(scope)) {
            return Err(Error::Scope(format!(
                "feature subcircuit for context (S={s}, decision={c}) does not cover exactly the features"
            )));
        }
        if !(sub.is_smooth() && sub.is_decomposable() && sub.is_deterministic()) {
            return Err(Error::Structure(format!(
                "feature subcircuit for context (S={s}, decision={c}) fails a structural check"
            )));
        }
        let mut parts = vec![
            b.indicator(schema.sensitive, s)?,
            b.indicator(context_var, c)?,
        ];
        if let Some((label, dm)) = d_leaf {
            let p1 = dm[d_mech_index(c, s)];
            parts.push(b.categorical(label, vec![1.0 - p1, p1])?);
        }
        parts.push(b.subcircuit(&sub)?);
        edges.push((b.product(parts)?, thetas[i]));
    }
    let root = b.sum(edges)?;
    b.finish(root)
}

/// One uniform categorical leaf per feature, joined by a product.
fn factorized_uniform(vars: &[Variable], features: &[VarId]) -> Result<Circuit> {
    let mut b = CircuitBuilder::new(vars.to_vec())?;
    let parts: Vec<NodeId> = features
        .iter()
        .map(|&v| {
            let k = vars[v.0].arity;
            b.categorical(v, vec![1.0 / k as f64; k])
        })
        .collect::<Result<_>>()?;
    let root = if parts.len() == 1 {
        parts[0]
    } else {
        b.product(parts)?
    };
    b.finish(root)
}

/// Tied update keeping the root in product form: both marginals are
/// re-estimated by pooling expected root flows over their branch pairs,
/// which is the maximum-likelihood update under the independence
/// constraint. Label leaves stay free parameters handled by the generic
/// update.
#[derive(Debug, Clone)]
pub struct HeadTie {
    root: NodeId,
    /// Bernoulli label leaves in [`d_mech_index`] order, latent kinds only.
    d_leaves: Option<[NodeId; 4]>,
}

impl TiedUpdate for HeadTie {
    fn owned_sums(&self, _c: &Circuit) -> Vec<NodeId> {
        vec![self.root]
    }

    fn apply(&self, c: &mut Circuit, flows: &ExpectedFlowTable, alpha: f64) -> Result<Vec<NodeId>> {
        let ef = flows.node_edges(c, self.root);
        let total: f64 = ef.iter().sum();
        if total + 2.0 * alpha <= 0.0 {
            return Ok(vec![self.root]);
        }
        let head = FairHeadParams {
            phi_s: (ef[0] + ef[1] + alpha) / (total + 2.0 * alpha),
            phi_df: (ef[0] + ef[2] + alpha) / (total + 2.0 * alpha),
            d_mech: None,
        };
        c.set_sum_weights(self.root, &head.thetas());
        Ok(Vec::new())
    }

    fn init_prior(&self, c: &mut Circuit) -> Result<()> {
        let prior = FairHeadParams::prior(self.d_leaves.is_some());
        c.set_sum_weights(self.root, &prior.thetas());
        if let (Some(leaves), Some(dm)) = (self.d_leaves, prior.d_mech) {
            for (leaf, p1) in leaves.iter().zip(dm) {
                c.set_leaf_pmf(*leaf, &[1.0 - p1, p1]);
            }
        }
        Ok(())
    }

    fn init_random(&self, c: &mut Circuit, rng: &mut ChaCha8Rng) -> Result<()> {
        // keep both marginals away from the boundary so no root weight
        // becomes a structural zero
        let head = FairHeadParams {
            phi_s: rng.random::<f64>().clamp(1e-6, 1.0 - 1e-6),
            phi_df: rng.random::<f64>().clamp(1e-6, 1.0 - 1e-6),
            d_mech: None,
        };
        c.set_sum_weights(self.root, &head.thetas());
        Ok(())
    }

    fn d_mechanism(&self, c: &Circuit) -> Option<[f64; 4]> {
        self.d_leaves.map(|leaves| {
            leaves.map(|l| c.leaf_pmf(l).expect("head label leaf is categorical")[1])
        })
    }
}

/// A constructed or fitted fairness model: the circuit, its role map, and
/// the head node ids driving tied updates and reporting.
#[derive(Debug, Clone)]
pub struct FairModel {
    kind: ModelKind,
    circuit: Circuit,
    schema: FairSchema,
    head: HeadTie,
}

/// Threshold-free evaluation summary of one model on one table.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub loglik: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub discrimination: f64,
    pub n_test: usize,
}

/// Fitting configuration shared by all model kinds.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub em: EmConfig,
    pub structure: StructureConfig,
    pub init: EmInit,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            em: EmConfig::default(),
            structure: StructureConfig::default(),
            init: EmInit::Prior,
        }
    }
}

/// A fitted model with its iteration history.
#[derive(Debug, Clone)]
pub struct FairFit {
    pub model: FairModel,
    pub trace: EmTrace,
}

impl FairModel {
    /// Wrap a head-shaped circuit, verifying and indexing its head: a
    /// four-child root sum whose products carry the context indicators
    /// and, for latent kinds, a Bernoulli label leaf.
    pub fn new(kind: ModelKind, circuit: Circuit, schema: FairSchema) -> Result<FairModel> {
        let head = locate_head(&circuit, &schema, kind)?;
        Ok(FairModel {
            kind,
            circuit,
            schema,
            head,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn circuit(&self) -> &Circuit {
        &self.circuit
    }

    pub fn schema(&self) -> &FairSchema {
        &self.schema
    }

    /// The variable predictions rank: the latent fair decision when the
    /// kind has one, otherwise the observed label.
    pub fn decision_var(&self) -> VarId {
        if self.kind.has_latent() {
            self.schema.latent.expect("latent kinds carry a latent variable")
        } else {
            self.schema.label
        }
    }

    /// Head parameters read back from the circuit: the root weight
    /// marginals and, for latent kinds, the label-leaf mechanism.
    pub fn head_params(&self) -> FairHeadParams {
        let th = self.circuit.sum_weights(self.head.root);
        FairHeadParams {
            phi_s: th[0] + th[1],
            phi_df: th[0] + th[2],
            d_mech: self.head.d_mechanism(&self.circuit),
        }
    }

    /// Largest deviation of the stored root weights from the product form
    /// induced by their own marginals; 0 for a freshly tied head.
    pub fn tying_residual(&self) -> f64 {
        let stored = self.circuit.sum_weights(self.head.root);
        let ideal = self.head_params().thetas();
        stored
            .iter()
            .zip(ideal)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Pr(decision = 1 | evidence). Evidence should range over features
    /// and the sensitive attribute; the decision variable itself is
    /// ignored if present. Empty evidence yields the decision marginal.
    pub fn predict_positive<A: Assignment>(&self, evidence: &A) -> Result<f64> {
        let mut buf = EvalBuffer::new();
        self.predict_positive_with(evidence, &mut buf)
    }

    fn predict_positive_with<A: Assignment>(&self, evidence: &A, buf: &mut EvalBuffer) -> Result<f64> {
        let target = self.decision_var();
        let e = Hide { base: evidence, var: target };
        let log_e = self.circuit.log_marginal_with(&e, buf)?;
        if log_e == f64::NEG_INFINITY {
            return Err(Error::NullEvidence);
        }
        let q = Pin { base: &e, var: target, value: 1 };
        let log_q = self.circuit.log_marginal_with(&q, buf)?;
        Ok((log_q - log_e).exp().min(1.0))
    }

    /// Per-row decision probabilities and labels, with evidence restricted
    /// to the observed features and sensitive attribute. Probabilities at
    /// or above the threshold label positive.
    pub fn classify(&self, table: &DataTable, threshold: f64) -> Result<Classified> {
        self.check_table(table)?;
        let mut visible = self.schema.feature_set(self.circuit.n_vars());
        visible.insert(self.schema.sensitive);
        let rows = table.rows_masked(&visible);
        let chunks: Vec<Result<Vec<f64>>> = rows
            .par_chunks(PARALLEL_CHUNK_ROWS)
            .enumerate()
            .map(|(ci, chunk)| {
                let base = ci * PARALLEL_CHUNK_ROWS;
                let mut buf = EvalBuffer::new();
                let mut out = Vec::with_capacity(chunk.len());
                for (j, row) in chunk.iter().enumerate() {
                    let p = self.predict_positive_with(row, &mut buf).map_err(|e| match e {
                        Error::NullEvidence => Error::RowImpossible { row: base + j },
                        other => other,
                    })?;
                    out.push(p);
                }
                Ok(out)
            })
            .collect();
        let mut probabilities = Vec::with_capacity(table.n_rows());
        for c in chunks {
            probabilities.extend(c?);
        }
        let labels = threshold_labels(&probabilities, threshold);
        Ok(Classified {
            probabilities,
            labels,
        })
    }

    /// Score the model on a table: mean marginal log-likelihood over the
    /// observable columns, then accuracy, F1, and discrimination of the
    /// thresholded predictions against the given truth column, computed on
    /// rows where the truth and the sensitive attribute are both observed.
    pub fn evaluate(&self, table: &DataTable, truth: VarId, threshold: f64) -> Result<EvalSummary> {
        self.check_table(table)?;
        let loglik = metrics::log_likelihood(&self.circuit, table)?;
        let cls = self.classify(table, threshold)?;
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        let mut probs = Vec::new();
        let mut sens = Vec::new();
        for r in 0..table.n_rows() {
            if let (Some(t), Some(s)) = (
                table.get(r, truth.0),
                table.get(r, self.schema.sensitive.0),
            ) {
                preds.push(cls.labels[r]);
                truths.push(t);
                probs.push(cls.probabilities[r]);
                sens.push(s);
            }
        }
        if preds.is_empty() {
            return Err(Error::InsufficientData(
                "no rows with observed truth and sensitive values".to_string(),
            ));
        }
        Ok(EvalSummary {
            loglik,
            accuracy: metrics::accuracy(&preds, &truths)?,
            f1: metrics::f1(&preds, &truths)?,
            discrimination: metrics::discrimination_score(&probs, &sens)?,
            n_test: table.n_rows(),
        })
    }

    fn check_table(&self, table: &DataTable) -> Result<()> {
        let vars = self.circuit.vars();
        if table.n_cols() != vars.len() {
            return Err(Error::SchemaMismatch(format!(
                "model has {} variables, table has {} columns",
                vars.len(),
                table.n_cols()
            )));
        }
        for (v, col) in vars.iter().zip(&table.schema().columns) {
            if v.name != col.name || v.arity != col.arity {
                return Err(Error::SchemaMismatch(format!(
                    "column {} ({} values) does not match model variable {} ({} values)",
                    col.name, col.arity, v.name, v.arity
                )));
            }
        }
        Ok(())
    }

    /// Write the circuit file with the head metadata sidecar comment.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.circuit.save(path, &[self.sidecar_line()])
    }

    fn sidecar_line(&self) -> String {
        let hp = self.head_params();
        let mut line = format!("fair-head phi_s={} phi_df={}", hp.phi_s, hp.phi_df);
        if let Some(dm) = hp.d_mech {
            line.push_str(&format!(" dmech={},{},{},{}", dm[0], dm[1], dm[2], dm[3]));
        }
        line.push_str(&format!(
            " kind={} sensitive={} label={}",
            self.kind, self.schema.sensitive.0, self.schema.label.0
        ));
        if let Some(l) = self.schema.latent {
            line.push_str(&format!(" latent={}", l.0));
        }
        line
    }

    /// Read a model file, rebuild the role map from the head metadata
    /// comment, and cross-check the recorded parameters against the
    /// circuit.
    pub fn load(path: impl AsRef<Path>) -> Result<FairModel> {
        let (circuit, comments) = Circuit::load(path)?;
        let line = comments
            .iter()
            .find(|c| c.starts_with("fair-head"))
            .ok_or_else(|| Error::Parse {
                line: 0,
                msg: "missing fair-head metadata comment".to_string(),
            })?;
        let (kind, schema, recorded) = parse_sidecar(line, circuit.n_vars())?;
        let model = FairModel::new(kind, circuit, schema)?;
        let actual = model.head_params();
        let mut drift = (actual.phi_s - recorded.phi_s)
            .abs()
            .max((actual.phi_df - recorded.phi_df).abs());
        if let (Some(a), Some(r)) = (actual.d_mech, recorded.d_mech) {
            for (x, y) in a.iter().zip(r) {
                drift = drift.max((x - y).abs());
            }
        }
        if drift > 1e-6 {
            return Err(Error::Parse {
                line: 0,
                msg: format!(
                    "fair-head metadata disagrees with circuit parameters by {drift:.2e}"
                ),
            });
        }
        Ok(model)
    }

    /// Fit a model of the given kind to a table. Latent kinds proxy the
    /// unobservable fair decision by the observed label when grouping rows
    /// for per-context structure learning; EM then re-estimates all
    /// parameters with the fair decision marginalized.
    pub fn fit(kind: ModelKind, table: &DataTable, config: &FitConfig) -> Result<FairFit> {
        let schema = FairSchema::from_schema(table.schema(), kind)?;
        let vars = table.schema().variables();
        let feature_cols: Vec<usize> = schema.features.iter().map(|v| v.0).collect();
        let head_prior = FairHeadParams::prior(kind.has_latent());
        let circuit = if kind.learns_structure() {
            let mut factory = |s: usize, c: usize| -> Result<Circuit> {
                let idx: Vec<usize> = (0..table.n_rows())
                    .filter(|&r| {
                        table.get(r, schema.sensitive.0) == Some(s)
                            && table.get(r, schema.label.0) == Some(c)
                    })
                    .collect();
                context_subcircuit(
                    table,
                    &feature_cols,
                    &vars,
                    &schema.features,
                    &idx,
                    (s * 2 + c) as u64,
                    &config.structure,
                )
            };
            match kind {
                ModelKind::FairPc => build_fair_pc(&vars, &schema, &head_prior, &mut factory)?,
                ModelKind::NLatPc => build_nlat_pc(&vars, &schema, &head_prior, &mut factory)?,
                _ => unreachable!("structure-learning kinds"),
            }
        } else {
            match kind {
                ModelKind::TwoNb => build_two_nb(&vars, &schema, &head_prior)?,
                ModelKind::LatNb => build_lat_nb(&vars, &schema, &head_prior)?,
                _ => unreachable!("factorized kinds"),
            }
        };
        let mut model = FairModel::new(kind, circuit, schema)?;
        // train with the latent column hidden even if a file supplied it
        let mut visible = model.schema.feature_set(vars.len());
        visible.insert(model.schema.sensitive);
        visible.insert(model.schema.label);
        let rows = table.rows_masked(&visible);
        let tie = model.head.clone();
        let trace = em_fit(
            &mut model.circuit,
            &rows,
            Some(table.weights()),
            &config.em,
            config.init,
            Some(&tie),
        )?;
        Ok(FairFit { model, trace })
    }
}

/// Learn one context's feature subcircuit from the given rows, falling
/// back to uniform naive Bayes when the context has too little data.
fn context_subcircuit(
    table: &DataTable,
    feature_cols: &[usize],
    vars: &[Variable],
    features: &[VarId],
    idx: &[usize],
    context_tag: u64,
    config: &StructureConfig,
) -> Result<Circuit> {
    let sub_table = table.select_rows(idx).project(feature_cols)?;
    let sub_vars = sub_table.schema().variables();
    let mut cfg = config.clone();
    cfg.seed = config.seed.wrapping_add(context_tag);
    let learned = match strudel_learn(
        &sub_vars,
        &sub_table.rows(),
        Some(sub_table.weights()),
        &cfg,
    ) {
        Ok(fit) => fit.circuit,
        Err(Error::InsufficientData(_)) => return factorized_uniform(vars, features),
        Err(e) => return Err(e),
    };
    let map: Vec<VarId> = feature_cols.iter().map(|&c| VarId(c)).collect();
    learned.remapped(vars.to_vec(), &map)
}

fn locate_head(c: &Circuit, schema: &FairSchema, kind: ModelKind) -> Result<HeadTie> {
    let root = c.root();
    let Node::Sum { children, .. } = c.node(root) else {
        return Err(Error::Structure("head root is not a sum".to_string()));
    };
    if children.len() != 4 {
        return Err(Error::Structure(format!(
            "head root has {} children, expected 4",
            children.len()
        )));
    }
    let context_var = if kind.has_latent() {
        schema.latent.ok_or_else(|| {
            Error::SchemaMismatch(format!("model kind {kind} needs a latent variable"))
        })?
    } else {
        schema.label
    };
    let children = children.clone();
    let mut d_leaves = kind.has_latent().then_some([NodeId(0); 4]);
    for (i, &(s, cv)) in CONTEXTS.iter().enumerate() {
        let Node::Product { children: parts } = c.node(children[i]) else {
            return Err(Error::Structure(format!(
                "head child {i} is not a product"
            )));
        };
        let mut seen_s = false;
        let mut seen_c = false;
        let mut label_leaf = None;
        for &p in parts {
            match c.node(p) {
                Node::Leaf {
                    var,
                    kind: LeafKind::Indicator(v),
                } => {
                    if *var == schema.sensitive && *v == s {
                        seen_s = true;
                    }
                    if *var == context_var && *v == cv {
                        seen_c = true;
                    }
                }
                Node::Leaf {
                    var,
                    kind: LeafKind::Categorical(_),
                } if *var == schema.label => {
                    label_leaf = Some(p);
                }
                _ => {}
            }
        }
        if !(seen_s && seen_c) {
            return Err(Error::Structure(format!(
                "head child {i} lacks the (S={s}, decision={cv}) indicators"
            )));
        }
        if let Some(leaves) = d_leaves.as_mut() {
            let leaf = label_leaf.ok_or_else(|| {
                Error::Structure(format!("head child {i} lacks a label leaf"))
            })?;
            leaves[d_mech_index(cv, s)] = leaf;
        }
    }
    Ok(HeadTie { root, d_leaves })
}

fn parse_sidecar(line: &str, n_vars: usize) -> Result<(ModelKind, FairSchema, FairHeadParams)> {
    let err = |msg: String| Error::Parse { line: 0, msg };
    let mut kind = None;
    let mut phi_s = None;
    let mut phi_df = None;
    let mut d_mech = None;
    let mut sensitive = None;
    let mut label = None;
    let mut latent = None;
    for token in line.split_whitespace().skip(1) {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| err(format!("malformed fair-head token {token:?}")))?;
        let bad = || err(format!("bad fair-head value in {token:?}"));
        match key {
            "kind" => kind = Some(value.parse::<ModelKind>()?),
            "phi_s" => phi_s = Some(value.parse::<f64>().map_err(|_| bad())?),
            "phi_df" => phi_df = Some(value.parse::<f64>().map_err(|_| bad())?),
            "dmech" => {
                let cells: Vec<f64> = value
                    .split(',')
                    .map(|v| v.parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                let cells: [f64; 4] = cells
                    .try_into()
                    .map_err(|_| err("dmech needs four cells".to_string()))?;
                d_mech = Some(cells);
            }
            "sensitive" => sensitive = Some(value.parse::<usize>().map_err(|_| bad())?),
            "label" => label = Some(value.parse::<usize>().map_err(|_| bad())?),
            "latent" => latent = Some(value.parse::<usize>().map_err(|_| bad())?),
            _ => return Err(err(format!("unknown fair-head key {key:?}"))),
        }
    }
    let kind = kind.ok_or_else(|| err("fair-head missing kind".to_string()))?;
    let sensitive = sensitive.ok_or_else(|| err("fair-head missing sensitive".to_string()))?;
    let label = label.ok_or_else(|| err("fair-head missing label".to_string()))?;
    if kind.has_latent() && latent.is_none() {
        return Err(err(format!("model kind {kind} needs a latent entry")));
    }
    let head = [Some(sensitive), Some(label), latent];
    for v in head.into_iter().flatten() {
        if v >= n_vars {
            return Err(err(format!("variable index {v} out of range")));
        }
    }
    let features: Vec<VarId> = (0..n_vars)
        .filter(|v| !head.iter().any(|h| *h == Some(*v)))
        .map(VarId)
        .collect();
    let schema = FairSchema {
        sensitive: VarId(sensitive),
        label: VarId(label),
        latent: latent.map(VarId),
        features,
    };
    let recorded = FairHeadParams {
        phi_s: phi_s.ok_or_else(|| err("fair-head missing phi_s".to_string()))?,
        phi_df: phi_df.ok_or_else(|| err("fair-head missing phi_df".to_string()))?,
        d_mech,
    };
    Ok((kind, schema, recorded))
}

//! Release gate. Each test prints one `ACCEPTANCE <n> PASS/FAIL` line;
//! run with `cargo test --test acceptance -- --nocapture` to see them all.
//!
//! Tolerances are pinned here so a regression cannot loosen them silently.

use std::sync::OnceLock;

use fairpc::circuit::{Circuit, Node, PartialAssignment, VarId, Variable};
use fairpc::data::{mcar_corrupt, Role};
use fairpc::fair::{build_fair_pc, build_nlat_pc, FairHeadParams, FairModel, FairSchema, FitConfig, ModelKind};
use fairpc::flows::{circuit_flow, expected_flow};
use fairpc::metrics::{log_likelihood, motivation_check};
use fairpc::params::{em_fit, em_step, mle_complete, EmInit};
use fairpc::structure::{
    chow_liu, compile_tree, mi_spanning_tree, pairwise_mi, split, strudel_learn, StructureConfig,
    TreeParams, TreeShape,
};
use fairpc::synth::{generate, random_tree_subcircuit, SynthConfig};
use fairpc::testkit::{brute_conditional, brute_expected_flows, brute_marginal, random_structured};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ORACLE_TOL: f64 = 1e-9;
const EXACT_TOL: f64 = 1e-12;
const EM_DIP_TOL: f64 = 1e-8;
const D_MECH_TOL: f64 = 0.05;
const DISC_TOL: f64 = 0.02;

fn report(n: usize, ok: bool, detail: &str) {
    println!("ACCEPTANCE {n} {}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "acceptance criterion {n} failed: {detail}");
}

/// Random circuit sizes cycling 2..=12 binary variables.
fn oracle_circuit(case: usize) -> Circuit {
    let n_vars = 2 + case % 11;
    random_structured(case as u64 * 7 + 1, &vec![2; n_vars])
}

fn random_partial(rng: &mut ChaCha8Rng, c: &Circuit, p_observe: f64, skip: Option<VarId>) -> PartialAssignment {
    let mut pairs = Vec::new();
    for v in c.vars() {
        if Some(v.id) == skip || rng.random::<f64>() >= p_observe {
            continue;
        }
        pairs.push((v.id, rng.random_range(0..v.arity)));
    }
    PartialAssignment::from_pairs(c.vars().len(), &pairs)
}

#[test]
fn acceptance_01_skewed_score_means() {
    let r = motivation_check();
    let ok = (r.data_means[1] - 0.65).abs() < ORACLE_TOL
        && (r.data_means[0] - 0.52).abs() < ORACLE_TOL
        && (r.balanced_means[1] - 0.55).abs() < ORACLE_TOL
        && (r.balanced_means[0] - 0.55).abs() < ORACLE_TOL;
    report(
        1,
        ok,
        &format!(
            "score means {:.2}/{:.2} under skewed features vs {:.2}/{:.2} balanced",
            r.data_means[1], r.data_means[0], r.balanced_means[1], r.balanced_means[0]
        ),
    );
}

#[test]
fn acceptance_02_inference_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let cases = 120;
    for case in 0..cases {
        let c = oracle_circuit(case);
        for p_observe in [0.0, 0.4, 0.8] {
            let e = random_partial(&mut rng, &c, p_observe, None);
            let got = c.evaluate_marginal(&e).unwrap();
            let want = brute_marginal(&c, &e);
            worst = worst.max((got - want).abs());
        }
        let qv = VarId(rng.random_range(0..c.vars().len()));
        let q = PartialAssignment::from_pairs(c.vars().len(), &[(qv, rng.random_range(0..2))]);
        let e = random_partial(&mut rng, &c, 0.5, Some(qv));
        match brute_conditional(&c, &q, &e) {
            Some(want) => {
                let got = c.conditional(&q, &e).unwrap();
                worst = worst.max((got - want).abs());
            }
            None => assert!(c.conditional(&q, &e).is_err(), "zero-mass evidence must error"),
        }
    }
    report(
        2,
        worst <= ORACLE_TOL,
        &format!("{cases} random circuits: worst marginal/conditional gap {worst:.2e} vs enumeration"),
    );
}

#[test]
fn acceptance_03_expected_flows_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let cases = 100;
    let mut complete_checked = 0usize;
    for case in 0..cases {
        let c = oracle_circuit(case);
        for p_observe in [0.3, 0.7] {
            let e = random_partial(&mut rng, &c, p_observe, None);
            match brute_expected_flows(&c, &e) {
                Some(want) => {
                    let got = expected_flow(&c, &e).unwrap();
                    for (a, b) in got.edges().iter().zip(&want.edges) {
                        worst = worst.max((a - b).abs());
                    }
                    for (a, b) in got.leaf_counts().iter().zip(&want.leaf_counts) {
                        worst = worst.max((a - b).abs());
                    }
                }
                None => assert!(expected_flow(&c, &e).is_err(), "zero-mass evidence must error"),
            }
        }
        // complete rows with support: expected flows equal circuit flows bitwise
        for _ in 0..20 {
            let x = random_partial(&mut rng, &c, 1.1, None);
            if c.evaluate_complete(&x).unwrap() > 0.0 {
                let ef = expected_flow(&c, &x).unwrap();
                let cf = circuit_flow(&c, &x).unwrap();
                assert_eq!(ef.edges(), cf.edges());
                assert_eq!(ef.leaf_counts(), cf.leaf_counts());
                complete_checked += 1;
                break;
            }
        }
    }
    report(
        3,
        worst <= ORACLE_TOL && complete_checked >= cases / 2,
        &format!(
            "{cases} random circuits: worst expected-flow gap {worst:.2e}, {complete_checked} exact complete-row matches"
        ),
    );
}

fn worst_dip(trace: &[f64]) -> f64 {
    trace
        .windows(2)
        .map(|p| p[1] - p[0])
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn acceptance_04_em_is_monotone_and_matches_counting() {
    let bundle = generate(&SynthConfig {
        n_features: 15,
        n_train: 10_000,
        n_test: 1_000,
        seed: 400,
        ..SynthConfig::default()
    })
    .unwrap();

    let mut dip = f64::INFINITY;
    for kind in [ModelKind::FairPc, ModelKind::LatNb] {
        let fit = FairModel::fit(kind, &bundle.train, &FitConfig::default()).unwrap();
        dip = dip.min(worst_dip(&fit.trace.log_likelihoods));
    }

    // fully observed rows: one EM step equals direct count estimation
    let fit = FairModel::fit(ModelKind::TwoNb, &bundle.test, &FitConfig::default()).unwrap();
    let rows = bundle.test.rows();
    let mut via_em = fit.model.circuit().clone();
    let mut via_counts = via_em.clone();
    em_step(&mut via_em, &rows, None, 1.0, None).unwrap();
    mle_complete(&mut via_counts, &rows, None, 1.0, None).unwrap();
    let mut param_gap: f64 = 0.0;
    for i in 0..via_em.n_nodes() {
        let id = fairpc::circuit::NodeId(i);
        match via_em.node(id) {
            Node::Sum { .. } => {
                for (a, b) in via_em.sum_weights(id).iter().zip(via_counts.sum_weights(id)) {
                    param_gap = param_gap.max((a - b).abs());
                }
            }
            Node::Leaf { .. } => {
                if let (Some(a), Some(b)) = (via_em.leaf_pmf(id), via_counts.leaf_pmf(id)) {
                    for (x, y) in a.iter().zip(b) {
                        param_gap = param_gap.max((x - y).abs());
                    }
                }
            }
            Node::Product { .. } => {}
        }
    }
    report(
        4,
        dip >= -EM_DIP_TOL && param_gap <= EXACT_TOL,
        &format!(
            "worst likelihood dip {dip:+.2e} across latent fits; one EM step vs counting gap {param_gap:.2e}"
        ),
    );
}

#[test]
fn acceptance_05_bias_mechanism_recovery() {
    let config = SynthConfig::default();
    let bundle = generate(&config).unwrap();
    let fit = FairModel::fit(ModelKind::FairPc, &bundle.train, &FitConfig::default()).unwrap();
    let got = fit.model.head_params().d_mech.unwrap();
    let want = config.head.d_mech.unwrap();
    let cell_err = got
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let latent = fit.model.schema().latent.unwrap();
    let s = fit.model.evaluate(&bundle.test, latent, 0.5).unwrap();
    report(
        5,
        cell_err <= D_MECH_TOL && s.discrimination.abs() <= DISC_TOL,
        &format!(
            "label-bias mechanism recovered to {cell_err:.3} per cell, test discrimination {:+.4}",
            s.discrimination
        ),
    );
}

struct Sweep {
    ll: Vec<[f64; 3]>,
    acc_df: Vec<[f64; 2]>,
    disc: Vec<[f64; 3]>,
}

/// Ten seeds at 15 features: per-seed test log-likelihood for
/// (FairPC, NLatPC, LatNB), fair-label accuracy for (FairPC, NLatPC), and
/// discrimination for (FairPC, NLatPC, TwoNB).
fn sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let mut out = Sweep {
            ll: Vec::new(),
            acc_df: Vec::new(),
            disc: Vec::new(),
        };
        for seed in 2000..2010u64 {
            let bundle = generate(&SynthConfig {
                n_features: 15,
                n_train: 6_000,
                n_test: 3_000,
                seed,
                ..SynthConfig::default()
            })
            .unwrap();
            let latent = bundle.model.schema().latent.unwrap();
            let mut ll = [0.0; 3];
            let mut acc = [0.0; 2];
            let mut disc = [0.0; 3];
            for (i, kind) in [ModelKind::FairPc, ModelKind::NLatPc, ModelKind::LatNb]
                .into_iter()
                .enumerate()
            {
                let fit = FairModel::fit(kind, &bundle.train, &FitConfig::default()).unwrap();
                ll[i] = log_likelihood(fit.model.circuit(), &bundle.test).unwrap();
                let s = fit.model.evaluate(&bundle.test, latent, 0.5).unwrap();
                if i < 2 {
                    acc[i] = s.accuracy;
                    disc[i] = s.discrimination;
                }
            }
            let fit = FairModel::fit(ModelKind::TwoNb, &bundle.train, &FitConfig::default()).unwrap();
            let s = fit.model.evaluate(&bundle.test, latent, 0.5).unwrap();
            disc[2] = s.discrimination;
            out.ll.push(ll);
            out.acc_df.push(acc);
            out.disc.push(disc);
        }
        out
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn acceptance_06_likelihood_ordering() {
    let s = sweep();
    let fair = mean(s.ll.iter().map(|r| r[0]));
    let nlat = mean(s.ll.iter().map(|r| r[1]));
    let latnb = mean(s.ll.iter().map(|r| r[2]));
    let gap_wins = s.ll.iter().filter(|r| r[0] >= r[1]).count();
    report(
        6,
        fair >= nlat && nlat >= latnb && gap_wins >= 8,
        &format!(
            "mean test log-likelihood {fair:.4} (fair) >= {nlat:.4} (observed-label) >= {latnb:.4} (naive), gap >= 0 on {gap_wins}/10 seeds"
        ),
    );
}

#[test]
fn acceptance_07_fair_label_accuracy_and_discrimination() {
    let s = sweep();
    let acc_wins = s.acc_df.iter().filter(|r| r[0] > r[1]).count();
    let fair_disc = mean(s.disc.iter().map(|r| r[0]));
    let nlat_disc = mean(s.disc.iter().map(|r| r[1]));
    let twonb_disc = mean(s.disc.iter().map(|r| r[2]));
    // majority-favoring bias shows up as a positive mean under the
    // group-0-minus-group-1 convention used throughout
    report(
        7,
        acc_wins >= 8 && nlat_disc > 0.0 && twonb_disc > 0.0 && fair_disc.abs() <= DISC_TOL,
        &format!(
            "fair-label accuracy wins {acc_wins}/10 seeds; mean discrimination fair {fair_disc:+.4}, observed-label {nlat_disc:+.4}, naive {twonb_disc:+.4}"
        ),
    );
}

/// Columns S, X1..Xk, D, D_f with a random tree over the features of each
/// head context.
fn random_fair_model(n_features: usize, rng: &mut ChaCha8Rng) -> (Circuit, FairSchema) {
    let schema = fairpc::synth::synth_schema(n_features).unwrap();
    let fs = FairSchema::from_schema(&schema, ModelKind::FairPc).unwrap();
    let vars = schema.variables();
    let head = FairHeadParams {
        phi_s: rng.random_range(0.05..0.95),
        phi_df: rng.random_range(0.05..0.95),
        d_mech: Some(std::array::from_fn(|_| rng.random_range(0.02..0.98))),
    };
    let features = fs.features.clone();
    let base: u64 = rng.random();
    let c = build_fair_pc(&vars, &fs, &head, &mut |s, v| {
        let local: Vec<Variable> = features
            .iter()
            .enumerate()
            .map(|(i, &f)| Variable::new(VarId(i), vars[f.0].arity, &vars[f.0].name).unwrap())
            .collect();
        random_tree_subcircuit(&local, base + s as u64 * 2 + v as u64)?
            .remapped(vars.to_vec(), &features)
    })
    .unwrap();
    (c, fs)
}

#[test]
fn acceptance_08_parity_by_construction() {
    let mut rng = ChaCha8Rng::seed_from_u64(800);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n_features = 2 + case % 4;
        let (c, fs) = random_fair_model(n_features, &mut rng);
        let n = c.vars().len();
        let q = PartialAssignment::from_pairs(n, &[(fs.latent.unwrap(), 1)]);
        let p0 = c
            .conditional(&q, &PartialAssignment::from_pairs(n, &[(fs.sensitive, 0)]))
            .unwrap();
        let p1 = c
            .conditional(&q, &PartialAssignment::from_pairs(n, &[(fs.sensitive, 1)]))
            .unwrap();
        worst = worst.max((p0 - p1).abs());
    }
    report(
        8,
        worst <= EXACT_TOL,
        &format!("100 random parameterizations: worst group gap in the fair-decision posterior {worst:.2e}"),
    );
}

#[test]
fn acceptance_09_copy_mechanism_matches_observable_model() {
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let schema = fairpc::synth::synth_schema(4).unwrap();
        let fs = FairSchema::from_schema(&schema, ModelKind::FairPc).unwrap();
        let vars = schema.variables();
        let head = FairHeadParams {
            phi_s: rng.random_range(0.1..0.9),
            phi_df: rng.random_range(0.1..0.9),
            d_mech: Some([1.0, 1.0, 0.0, 0.0]),
        };
        let features = fs.features.clone();
        let base: u64 = rng.random();
        let mut factory = |s: usize, v: usize| {
            let local: Vec<Variable> = features
                .iter()
                .enumerate()
                .map(|(i, &f)| Variable::new(VarId(i), vars[f.0].arity, &vars[f.0].name).unwrap())
                .collect();
            random_tree_subcircuit(&local, base + s as u64 * 2 + v as u64)?
                .remapped(vars.to_vec(), &features)
        };
        let latent = build_fair_pc(&vars, &fs, &head, &mut factory).unwrap();
        let observable = build_nlat_pc(&vars, &fs, &head, &mut factory).unwrap();

        // every assignment of the six observed variables
        let n = vars.len();
        let observed: Vec<VarId> = (0..n).map(VarId).filter(|&v| Some(v) != fs.latent).collect();
        let mut total = 0.0;
        for bits in 0..1usize << observed.len() {
            let pairs: Vec<(VarId, usize)> = observed
                .iter()
                .enumerate()
                .map(|(i, &v)| (v, (bits >> i) & 1))
                .collect();
            let x = PartialAssignment::from_pairs(n, &pairs);
            let a = latent.evaluate_marginal(&x).unwrap();
            let b = observable.evaluate_marginal(&x).unwrap();
            worst = worst.max((a - b).abs());
            total += a;
        }
        assert!((total - 1.0).abs() < ORACLE_TOL, "joint must normalize, got {total}");
    }
    report(
        9,
        worst <= ORACLE_TOL,
        &format!("copying label mechanism: worst joint gap {worst:.2e} over exhaustive six-variable assignments"),
    );
}

#[test]
fn acceptance_10_structure_learning() {
    // a known eight-variable tree with strong dependencies
    let vars: Vec<Variable> = (0..8)
        .map(|i| Variable::new(VarId(i), 2, format!("v{i}")).unwrap())
        .collect();
    let edges = [(0, 1), (0, 2), (1, 3), (1, 4), (2, 5), (4, 6), (4, 7)];
    let shape = TreeShape::from_edges(8, &edges, 0).unwrap();
    let mut cpt = vec![Vec::new(); 8];
    for &(_, c) in &edges {
        cpt[c] = vec![vec![0.85, 0.15], vec![0.2, 0.8]];
    }
    let truth = compile_tree(
        &vars,
        &shape,
        &TreeParams {
            root_pmf: vec![0.55, 0.45],
            cpt,
        },
    )
    .unwrap();
    let mut want: Vec<(usize, usize)> = edges.to_vec();
    want.sort_unstable();

    let mut recovered = true;
    for seed in [0u64, 7, 42] {
        let rows = truth.sample(50_000, seed).unwrap();
        let mi = pairwise_mi(&vars, &rows, None, 1.0).unwrap();
        let got = mi_spanning_tree(&mi).edges();
        recovered &= got == want;
        // the compiled result goes through the same tree
        let learned = chow_liu(&vars, &rows, None, 1.0).unwrap();
        assert!(learned.is_smooth() && learned.is_decomposable() && learned.is_deterministic());
    }

    // splitting preserves the represented distribution before re-estimation
    let mut split_gap: f64 = 0.0;
    let mut split_done = false;
    'outer: for node in (0..truth.n_nodes()).map(fairpc::circuit::NodeId) {
        if let Node::Sum { children, .. } = truth.node(node) {
            for ordinal in 0..children.len() {
                let child_scope = truth.scope(children[ordinal]);
                for v in (0..8).map(VarId) {
                    if !child_scope.contains(v) {
                        continue;
                    }
                    if let Ok(after) = split(&truth, (node, ordinal), v) {
                        for bits in 0..256usize {
                            let pairs: Vec<(VarId, usize)> =
                                (0..8).map(|i| (VarId(i), (bits >> i) & 1)).collect();
                            let x = PartialAssignment::from_pairs(8, &pairs);
                            let a = truth.evaluate_complete(&x).unwrap();
                            let b = after.evaluate_complete(&x).unwrap();
                            split_gap = split_gap.max((a - b).abs());
                        }
                        split_done = true;
                        break 'outer;
                    }
                }
            }
        }
    }

    // greedy structure search output always passes the structural checks
    let mut strudel_clean = true;
    for seed in 0..3u64 {
        let rows = truth.sample(2_000, seed + 100).unwrap();
        let fit = strudel_learn(
            &vars,
            &rows,
            None,
            &StructureConfig {
                max_splits: 25,
                seed,
                ..StructureConfig::default()
            },
        )
        .unwrap();
        strudel_clean &= fit.circuit.is_smooth()
            && fit.circuit.is_decomposable()
            && fit.circuit.is_deterministic()
            && fit.circuit.validate().is_empty();
    }

    report(
        10,
        recovered && split_done && split_gap <= ORACLE_TOL && strudel_clean,
        &format!(
            "tree edges recovered on 3 seeds; split distribution gap {split_gap:.2e}; greedy search output structurally clean"
        ),
    );
}

#[test]
fn acceptance_11_missing_data_robustness() {
    let levels = [0.0, 0.25, 0.5, 0.75, 0.9];
    let mut monotone = 0usize;
    let mut dip = f64::INFINITY;
    for seed in 3000..3010u64 {
        let bundle = generate(&SynthConfig {
            n_features: 15,
            n_train: 5_000,
            n_test: 2_500,
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        // structure and starting point fixed from the clean fit; each level
        // refits parameters on its own corrupted table
        let clean = FairModel::fit(ModelKind::FairPc, &bundle.train, &FitConfig::default()).unwrap();
        let protect: Vec<usize> = (0..bundle.train.n_cols())
            .filter(|&i| bundle.train.schema().columns[i].role != Role::Feature)
            .collect();
        let mut lls = Vec::new();
        for (li, &fraction) in levels.iter().enumerate() {
            let holed = if fraction == 0.0 {
                bundle.train.clone()
            } else {
                mcar_corrupt(&bundle.train, fraction, seed * 101 + li as u64, &protect).unwrap()
            };
            let mut c = clean.model.circuit().clone();
            let rows = holed.rows();
            let trace = em_fit(
                &mut c,
                &rows,
                Some(holed.weights()),
                &Default::default(),
                EmInit::Prior,
                None,
            )
            .unwrap();
            dip = dip.min(worst_dip(&trace.log_likelihoods));
            lls.push(log_likelihood(&c, &bundle.test).unwrap());
        }
        if lls.windows(2).all(|p| p[1] <= p[0] + EXACT_TOL) {
            monotone += 1;
        }
    }
    report(
        11,
        dip >= -EM_DIP_TOL && monotone >= 8,
        &format!(
            "worst likelihood dip {dip:+.2e} across 50 incomplete-data fits; test likelihood weakly degrades with missingness on {monotone}/10 seeds"
        ),
    );
}

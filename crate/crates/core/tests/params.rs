//! Closed-form estimation and EM: worked examples, equivalence on complete
//! data, monotone likelihood traces, and smoothing behavior.

use fairpc::circuit::{Circuit, CircuitBuilder, PartialAssignment, VarId, Variable};
use fairpc::params::{
    em_fit, em_step, mle_complete, randomize_parameters, EmConfig, EmInit,
};
use fairpc::testkit::{random_structured, two_var_mixture};
use fairpc::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pa2(pairs: &[(usize, usize)]) -> PartialAssignment {
    PartialAssignment::from_pairs(
        2,
        &pairs.iter().map(|&(v, x)| (VarId(v), x)).collect::<Vec<_>>(),
    )
}

fn complete_rows() -> Vec<PartialAssignment> {
    vec![
        pa2(&[(0, 1), (1, 1)]),
        pa2(&[(0, 1), (1, 0)]),
        pa2(&[(0, 1), (1, 1)]),
        pa2(&[(0, 0), (1, 0)]),
    ]
}

#[test]
fn mle_worked_example() {
    // three rows through the a=1 branch, one through a=0
    let mut c = two_var_mixture();
    let report = mle_complete(&mut c, &complete_rows(), None, 0.0, None).unwrap();
    let w = c.sum_weights(c.root());
    assert!((w[0] - 0.75).abs() < 1e-12);
    assert!((w[1] - 0.25).abs() < 1e-12);
    assert!(report.degenerate.is_empty());
    assert!((report.weight - 4.0).abs() < 1e-12);

    // the categorical behind a=1 saw values (1, 0, 1)
    let leaf = c
        .categorical_leaves()
        .find(|&l| {
            let pmf = c.leaf_pmf(l).unwrap();
            (pmf[1] - 2.0 / 3.0).abs() < 1e-12
        })
        .expect("a=1 branch leaf re-estimated to (1/3, 2/3)");
    assert!((c.leaf_pmf(leaf).unwrap()[0] - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn mle_laplace_smoothing() {
    let mut c = two_var_mixture();
    mle_complete(&mut c, &complete_rows(), None, 1.0, None).unwrap();
    let w = c.sum_weights(c.root());
    assert!((w[0] - 4.0 / 6.0).abs() < 1e-12);
    assert!((w[1] - 2.0 / 6.0).abs() < 1e-12);
}

#[test]
fn mle_requires_complete_rows() {
    let mut c = two_var_mixture();
    let rows = vec![pa2(&[(1, 1)])];
    assert!(matches!(
        mle_complete(&mut c, &rows, None, 0.0, None),
        Err(Error::IncompleteAssignment(_))
    ));
}

#[test]
fn em_step_posterior_worked_example() {
    // a single row observing only b=1: the root update is the posterior
    // over the two branches, (0.84, 0.16)
    let mut c = two_var_mixture();
    let rows = vec![pa2(&[(1, 1)])];
    let report = em_step(&mut c, &rows, None, 0.0, None).unwrap();
    let w = c.sum_weights(c.root());
    assert!((w[0] - 0.84).abs() < 1e-12);
    assert!((w[1] - 0.16).abs() < 1e-12);
    // the reported likelihood belongs to the starting parameters
    assert!((report.log_likelihood - 0.5f64.ln()).abs() < 1e-12);
}

#[test]
fn em_step_equals_mle_on_complete_data() {
    let rows = complete_rows();
    for alpha in [0.0, 1.0] {
        let mut via_em = two_var_mixture();
        let mut via_mle = two_var_mixture();
        em_step(&mut via_em, &rows, None, alpha, None).unwrap();
        mle_complete(&mut via_mle, &rows, None, alpha, None).unwrap();
        for n in via_em.sum_nodes().collect::<Vec<_>>() {
            for (a, b) in via_em
                .sum_weights(n)
                .iter()
                .zip(via_mle.sum_weights(n))
            {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for l in via_em.categorical_leaves().collect::<Vec<_>>() {
            for (a, b) in via_em
                .leaf_pmf(l)
                .unwrap()
                .iter()
                .zip(via_mle.leaf_pmf(l).unwrap())
            {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn em_reported_likelihood_is_weighted_and_pre_update() {
    let mut c = two_var_mixture();
    let rows = vec![pa2(&[(0, 1), (1, 1)]), pa2(&[(1, 0)])];
    let weights = [2.0, 3.0];
    let expect: f64 = 2.0 * c.log_marginal(&rows[0]).unwrap() + 3.0 * c.log_marginal(&rows[1]).unwrap();
    let report = em_step(&mut c, &rows, Some(&weights), 0.0, None).unwrap();
    assert!((report.log_likelihood - expect).abs() < 1e-10);
    assert!((report.weight - 5.0).abs() < 1e-12);
}

#[test]
fn em_fit_trace_is_monotone_and_converges() {
    let mut c = two_var_mixture();
    // partial rows so EM actually iterates
    let rows = vec![
        pa2(&[(1, 1)]),
        pa2(&[(1, 1)]),
        pa2(&[(0, 0), (1, 0)]),
        pa2(&[(1, 0)]),
        pa2(&[(0, 1), (1, 1)]),
    ];
    let config = EmConfig {
        max_iterations: 100,
        ll_tolerance: 1e-9,
        alpha: 0.0,
    };
    let trace = em_fit(&mut c, &rows, None, &config, EmInit::Keep, None).unwrap();
    assert!(trace.converged);
    assert_eq!(trace.iterations, trace.log_likelihoods.len());
    for pair in trace.log_likelihoods.windows(2) {
        assert!(
            pair[1] >= pair[0] - 1e-8,
            "trace decreased: {} -> {}",
            pair[0],
            pair[1]
        );
    }
}

#[test]
fn em_fit_on_complete_data_stops_after_two_iterations() {
    let mut c = two_var_mixture();
    let config = EmConfig::default();
    let trace = em_fit(&mut c, &complete_rows(), None, &config, EmInit::Keep, None).unwrap();
    assert!(trace.converged);
    assert_eq!(trace.iterations, 2);
    let diff = trace.log_likelihoods[1] - trace.log_likelihoods[0];
    assert!(diff.abs() < 1e-9, "second iteration should be a fixpoint");
}

#[test]
fn em_fit_zero_iteration_budget() {
    let mut c = two_var_mixture();
    let before = c.sum_weights(c.root());
    let config = EmConfig {
        max_iterations: 0,
        ..EmConfig::default()
    };
    let trace = em_fit(&mut c, &complete_rows(), None, &config, EmInit::Keep, None).unwrap();
    assert_eq!(trace.iterations, 0);
    assert!(!trace.converged);
    assert_eq!(c.sum_weights(c.root()), before);
}

#[test]
fn random_init_is_reproducible() {
    let rows = complete_rows();
    // zero iterations: em_fit applies the init and returns, exposing it
    let init_only = |seed: u64| {
        let mut c = two_var_mixture();
        let config = EmConfig {
            max_iterations: 0,
            ..EmConfig::default()
        };
        em_fit(&mut c, &rows, None, &config, EmInit::Random { seed }, None).unwrap();
        c.to_format_string()
    };
    assert_eq!(init_only(9), init_only(9));
    assert_ne!(init_only(9), init_only(10));
}

#[test]
fn randomize_preserves_support_and_normalization() {
    let mut b = CircuitBuilder::new(vec![Variable::new(VarId(0), 3, "x").unwrap()]).unwrap();
    let i0 = b.indicator(VarId(0), 0).unwrap();
    let i1 = b.indicator(VarId(0), 1).unwrap();
    let i2 = b.indicator(VarId(0), 2).unwrap();
    let s = b
        .sum_log(vec![(i0, 0.5f64.ln()), (i1, f64::NEG_INFINITY), (i2, 0.5f64.ln())])
        .unwrap();
    let mut c = b.finish(s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    randomize_parameters(&mut c, &mut rng);
    let w = c.sum_weights(c.root());
    assert_eq!(w[1], 0.0, "structural zero must stay zero");
    assert!(w[0] > 0.0 && w[2] > 0.0);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
}

#[test]
fn smoothing_does_not_resurrect_structural_zeros() {
    let mut b = CircuitBuilder::new(vec![Variable::new(VarId(0), 2, "x").unwrap()]).unwrap();
    let i0 = b.indicator(VarId(0), 0).unwrap();
    let i1 = b.indicator(VarId(0), 1).unwrap();
    let s = b.sum_log(vec![(i0, 0.0), (i1, f64::NEG_INFINITY)]).unwrap();
    let mut c = b.finish(s).unwrap();
    let rows = vec![
        PartialAssignment::from_pairs(1, &[(VarId(0), 0)]),
        PartialAssignment::from_pairs(1, &[(VarId(0), 0)]),
    ];
    em_step(&mut c, &rows, None, 1.0, None).unwrap();
    let w = c.sum_weights(c.root());
    assert_eq!(w, vec![1.0, 0.0]);
}

#[test]
fn unreached_regions_stay_untouched_without_smoothing() {
    let mut c = two_var_mixture();
    // every row goes down the a=1 branch, so the a=0 leaf gets no flow
    let rows = vec![pa2(&[(0, 1), (1, 1)]), pa2(&[(0, 1), (1, 0)])];
    let report = em_step(&mut c, &rows, None, 0.0, None).unwrap();
    assert!(!report.degenerate.is_empty());
    let untouched = c
        .categorical_leaves()
        .find(|&l| {
            let pmf = c.leaf_pmf(l).unwrap();
            (pmf[0] - 0.8).abs() < 1e-12 && (pmf[1] - 0.2).abs() < 1e-12
        })
        .is_some();
    assert!(untouched, "the a=0 branch leaf kept its prior parameters");
}

#[test]
fn em_improves_likelihood_on_random_circuits() {
    for seed in 0..5u64 {
        let mut c = random_structured(seed, &[2, 2, 2]);
        let data = c.sample(300, seed ^ 0x77).unwrap();
        // hide one variable per row to force genuine EM work
        let rows: Vec<PartialAssignment> = data
            .into_iter()
            .map(|mut r| {
                r.clear(VarId((seed % 3) as usize));
                r
            })
            .collect();
        // monotonicity is exact EM's guarantee, so run unsmoothed
        let config = EmConfig {
            max_iterations: 50,
            ll_tolerance: 1e-8,
            alpha: 0.0,
        };
        let trace = em_fit(
            &mut c,
            &rows,
            None,
            &config,
            EmInit::Random { seed: seed ^ 0xa },
            None,
        )
        .unwrap();
        for pair in trace.log_likelihoods.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-8);
        }
    }
}

#[test]
fn keep_init_continues_from_current_parameters() {
    let rows = complete_rows();
    let mut c = two_var_mixture();
    mle_complete(&mut c, &rows, None, 0.0, None).unwrap();
    let fitted = c.to_format_string();
    let config = EmConfig {
        max_iterations: 3,
        ll_tolerance: 1e-12,
        alpha: 0.0,
    };
    em_fit(&mut c, &rows, None, &config, EmInit::Keep, None).unwrap();
    assert_eq!(c.to_format_string(), fitted, "already at the optimum");
}

#[test]
fn loaded_circuit_refits_identically() {
    // estimation is a pure function of (circuit, rows): a round-trip
    // through the file format does not change the fit
    let rows = complete_rows();
    let mut a = two_var_mixture();
    let text = a.to_format_string();
    let mut b = Circuit::from_format_str(&text).unwrap();
    em_step(&mut a, &rows, None, 1.0, None).unwrap();
    em_step(&mut b, &rows, None, 1.0, None).unwrap();
    assert_eq!(a.to_format_string(), b.to_format_string());
}

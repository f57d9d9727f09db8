//! Scoring helpers: likelihood aggregation, classification metrics, group
//! parity, and the evaluation report log.

use fairpc::circuit::{PartialAssignment, VarId};
use fairpc::data::{ColumnDef, DataTable, Role, Schema};
use fairpc::metrics::{
    accuracy, append_report, discrimination_score, f1, log_likelihood, log_likelihood_rows,
    motivation_check, read_reports, threshold_labels, EvalReport,
};
use fairpc::testkit::two_var_mixture;
use fairpc::Error;
use tempfile::tempdir;

#[test]
fn motivation_example_matches_hand_arithmetic() {
    let r = motivation_check();
    assert!((r.data_means[1] - 0.65).abs() < 1e-12);
    assert!((r.data_means[0] - 0.52).abs() < 1e-12);
    assert!((r.balanced_means[0] - 0.55).abs() < 1e-12);
    assert!((r.balanced_means[1] - 0.55).abs() < 1e-12);
    // the same scoring function looks biased or fair depending only on
    // the groups' feature rates
    assert!((r.data_means[1] - r.data_means[0]).abs() > 0.1);
    assert!((r.balanced_means[1] - r.balanced_means[0]).abs() < 1e-12);
}

#[test]
fn accuracy_and_f1_worked_examples() {
    let pred = [1, 1, 0, 0, 1];
    let truth = [1, 0, 0, 1, 1];
    assert!((accuracy(&pred, &truth).unwrap() - 0.6).abs() < 1e-12);
    // tp=2 fp=1 fn=1: precision 2/3, recall 2/3
    assert!((f1(&pred, &truth).unwrap() - 2.0 / 3.0).abs() < 1e-12);

    assert!((f1(&[0, 0], &[0, 1]).unwrap() - 0.0).abs() < 1e-12, "no positive predictions");
    assert!((f1(&[1, 1], &[0, 0]).unwrap() - 0.0).abs() < 1e-12, "no positive truths");
    assert!(accuracy(&[1], &[1, 0]).is_err());
    assert!(accuracy(&[], &[]).is_err());
    assert!(f1(&[1], &[1, 0]).is_err());
}

#[test]
fn threshold_ties_go_positive() {
    assert_eq!(threshold_labels(&[0.49, 0.5, 0.51], 0.5), vec![0, 1, 1]);
    assert_eq!(threshold_labels(&[], 0.5), Vec::<usize>::new());
}

#[test]
fn discrimination_is_group_mean_difference() {
    let probs = [0.9, 0.1, 0.6, 0.4];
    let sens = [0, 1, 0, 1];
    // group 0 mean 0.75, group 1 mean 0.25
    assert!((discrimination_score(&probs, &sens).unwrap() - 0.5).abs() < 1e-12);

    match discrimination_score(&[0.5, 0.5], &[0, 0]) {
        Err(Error::EmptyGroup(g)) => assert_eq!(g, 1),
        other => panic!("expected EmptyGroup, got {other:?}"),
    }
    assert!(matches!(
        discrimination_score(&[0.5], &[2]),
        Err(Error::InvalidParameter(_))
    ));
    assert!(discrimination_score(&[0.5], &[0, 1]).is_err());
}

#[test]
fn row_likelihoods_sum_like_the_serial_loop() {
    let c = two_var_mixture();
    let rows: Vec<PartialAssignment> = vec![
        PartialAssignment::from_pairs(2, &[(VarId(0), 1), (VarId(1), 1)]),
        PartialAssignment::from_pairs(2, &[(VarId(1), 0)]),
        PartialAssignment::empty(2),
        PartialAssignment::from_pairs(2, &[(VarId(0), 0)]),
    ];
    let stats = log_likelihood_rows(&c, &rows, None).unwrap();
    let serial: f64 = rows.iter().map(|r| c.log_marginal(r).unwrap()).sum();
    assert!((stats.total - serial).abs() < 1e-12);
    assert!((stats.weight - 4.0).abs() < 1e-12);
    assert!((stats.mean() - serial / 4.0).abs() < 1e-12);

    let weighted = log_likelihood_rows(&c, &rows, Some(&[2.0, 0.0, 1.0, 1.0])).unwrap();
    let expect = 2.0 * c.log_marginal(&rows[0]).unwrap()
        + c.log_marginal(&rows[2]).unwrap()
        + c.log_marginal(&rows[3]).unwrap();
    assert!((weighted.total - expect).abs() < 1e-12);
    assert!((weighted.weight - 4.0).abs() < 1e-12);

    assert!(matches!(
        log_likelihood_rows(&c, &rows, Some(&[1.0])),
        Err(Error::LengthMismatch(4, 1))
    ));
}

#[test]
fn impossible_rows_report_the_smallest_index() {
    // a=0 forces b=0 in this circuit, so (a=0, b=1) has zero probability
    let vs = vec![
        fairpc::circuit::Variable::new(VarId(0), 2, "a").unwrap(),
        fairpc::circuit::Variable::new(VarId(1), 2, "b").unwrap(),
    ];
    let mut b = fairpc::circuit::CircuitBuilder::new(vs).unwrap();
    let a0 = b.indicator(VarId(0), 0).unwrap();
    let a1 = b.indicator(VarId(0), 1).unwrap();
    let b0 = b.indicator(VarId(1), 0).unwrap();
    let bc = b.categorical(VarId(1), vec![0.5, 0.5]).unwrap();
    let p0 = b.product(vec![a0, b0]).unwrap();
    let p1 = b.product(vec![a1, bc]).unwrap();
    let root = b.sum(vec![(p0, 0.5), (p1, 0.5)]).unwrap();
    let c = b.finish(root).unwrap();
    let dead = PartialAssignment::from_pairs(2, &[(VarId(0), 0), (VarId(1), 1)]);
    let fine = PartialAssignment::empty(2);
    let rows = vec![fine.clone(), dead.clone(), dead];
    match log_likelihood_rows(&c, &rows, None) {
        Err(Error::RowImpossible { row }) => assert_eq!(row, 1),
        other => panic!("expected RowImpossible, got {other:?}"),
    }
    // zero weight skips the impossible row entirely
    let ok = log_likelihood_rows(&c, &rows, Some(&[1.0, 0.0, 0.0])).unwrap();
    assert!((ok.weight - 1.0).abs() < 1e-12);
}

#[test]
fn table_likelihood_masks_latent_columns() {
    let c = two_var_mixture();
    let schema = Schema::new(vec![
        ColumnDef::binary("a", Role::Feature),
        ColumnDef::binary("h", Role::Latent),
    ])
    .unwrap();
    // latent column holds values that would zero the likelihood if read
    let t = DataTable::from_rows(
        schema,
        &[vec![Some(0), Some(1)], vec![Some(1), Some(0)]],
    )
    .unwrap();
    let ll = log_likelihood(&c, &t).unwrap();
    let expect = (c
        .log_marginal(&PartialAssignment::from_pairs(2, &[(VarId(0), 0)]))
        .unwrap()
        + c.log_marginal(&PartialAssignment::from_pairs(2, &[(VarId(0), 1)]))
            .unwrap())
        / 2.0;
    assert!((ll - expect).abs() < 1e-12);
}

#[test]
fn report_lines_round_trip_with_stable_keys() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("reports.jsonl");
    let mk = |model: &str, fold: usize| EvalReport {
        model: model.to_string(),
        fold,
        n_test: 1000,
        loglik: -7.25,
        accuracy: 0.81,
        f1: 0.7,
        discrimination: -0.013,
        em_iterations: 42,
        phi_s: Some(0.3),
        phi_df: Some(0.5),
        d_mech: Some([0.8, 0.9, 0.1, 0.4]),
        seed: 11,
        config: serde_json::json!({"alpha": 1.0}),
    };
    append_report(&path, &mk("fairpc", 0)).unwrap();
    append_report(&path, &mk("2nb", 1)).unwrap();

    let back = read_reports(&path).unwrap();
    assert_eq!(back.len(), 2);
    assert_eq!(back[0].model, "fairpc");
    assert_eq!(back[1].fold, 1);
    assert_eq!(back[0].d_mech, Some([0.8, 0.9, 0.1, 0.4]));
    assert_eq!(back[0].config["alpha"], 1.0);

    let raw = std::fs::read_to_string(&path).unwrap();
    let line = raw.lines().next().unwrap();
    let first: serde_json::Value = serde_json::from_str(line).unwrap();
    let mut keys: Vec<&str> = first.as_object().unwrap().keys().map(|k| k.as_str()).collect();
    keys.sort_unstable();
    let mut want = vec![
        "model",
        "fold",
        "n_test",
        "loglik",
        "accuracy",
        "f1",
        "discrimination",
        "em_iterations",
        "phi_s",
        "phi_df",
        "d_mech",
        "seed",
        "config",
    ];
    // emitted field order follows the struct; parsed Value sorts keys
    for pair in want.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        assert!(
            line.find(&format!("\"{a}\"")).unwrap() < line.find(&format!("\"{b}\"")).unwrap(),
            "{a} should precede {b}"
        );
    }
    want.sort_unstable();
    assert_eq!(keys, want);
}

#[test]
fn report_parse_errors_carry_line_numbers() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("reports.jsonl");
    std::fs::write(&path, "{not json}\n").unwrap();
    match read_reports(&path) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
        other => panic!("expected Parse, got {other:?}"),
    }
}

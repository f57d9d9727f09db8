//! End-to-end checks of the `fairpc` binary: every subcommand, the exit
//! code contract (0 ok, 1 runtime failure, 2 usage error), and output
//! reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fairpc::data::{ColumnDef, Role, Schema};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairpc"))
        .args(args)
        .output()
        .expect("spawning the binary")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

/// Synthesize a small bundle into `dir` and return (train, test, schema).
fn synth_small(dir: &TempDir) -> (String, String, String) {
    let out = run(&[
        "synth",
        "--features",
        "10",
        "--samples",
        "120",
        "--seed",
        "5",
        "--out",
        &s(dir.path()),
    ]);
    assert_exit(&out, 0);
    (
        s(&path(dir, "train.csv")),
        s(&path(dir, "test.csv")),
        s(&path(dir, "schema.json")),
    )
}

#[test]
fn synth_writes_identical_bundles_for_one_seed() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    synth_small(&a);
    synth_small(&b);
    for name in ["train.csv", "test.csv", "schema.json", "true_model.pc"] {
        let left = std::fs::read(path(&a, name)).unwrap();
        let right = std::fs::read(path(&b, name)).unwrap();
        assert_eq!(left, right, "{name} differs between identical runs");
        assert!(!left.is_empty(), "{name} is empty");
    }
}

#[test]
fn synth_guards_the_feature_range() {
    let dir = TempDir::new().unwrap();
    let out = run(&["synth", "--features", "9", "--samples", "20", "--out", &s(dir.path())]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("--allow-any"));

    let out = run(&[
        "synth",
        "--features",
        "9",
        "--samples",
        "20",
        "--out",
        &s(dir.path()),
        "--allow-any",
    ]);
    assert_exit(&out, 0);
}

#[test]
fn missing_required_flags_are_usage_errors() {
    let out = run(&["synth", "--features", "12"]);
    assert_exit(&out, 2);
    let out = run(&["learn", "--model", "2nb"]);
    assert_exit(&out, 2);
    let out = run(&["eval", "--truth-col", "nonsense"]);
    assert_exit(&out, 2);
}

#[test]
fn learning_is_deterministic_and_audits_clean() {
    let dir = TempDir::new().unwrap();
    let (train, _, schema) = synth_small(&dir);
    for (kind, extra) in [
        ("2nb", vec![]),
        ("latnb", vec![]),
        ("fairpc", vec!["--max-splits", "4", "--max-iters", "10"]),
    ] {
        let first = path(&dir, &format!("{kind}_a.pc"));
        let second = path(&dir, &format!("{kind}_b.pc"));
        for model_out in [&first, &second] {
            let mut args = vec![
                "learn",
                "--model",
                kind,
                "--train",
                &train,
                "--schema",
                &schema,
                "--out",
            ];
            let out_s = s(model_out);
            args.push(&out_s);
            args.extend(extra.iter().copied());
            let out = run(&args);
            assert_exit(&out, 0);
        }
        assert_eq!(
            std::fs::read(&first).unwrap(),
            std::fs::read(&second).unwrap(),
            "{kind} model files differ between identical runs"
        );

        let trace: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(path(&dir, &format!("{kind}_a.pc.trace.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(trace["model"], kind);
        let lls = trace["log_likelihoods"].as_array().unwrap();
        assert!(!lls.is_empty());
        assert!(trace["iterations"].as_u64().unwrap() >= 1);

        let out = run(&["check", "--model-file", &s(&first)]);
        assert_exit(&out, 0);
        let text = String::from_utf8_lossy(&out.stdout).to_string();
        assert!(text.contains("all checks passed"), "{text}");
    }
}

#[test]
fn eval_appends_full_report_lines() {
    let dir = TempDir::new().unwrap();
    let (train, test, schema) = synth_small(&dir);
    let model = path(&dir, "m.pc");
    let out = run(&[
        "learn", "--model", "2nb", "--train", &train, "--schema", &schema, "--out", &s(&model),
    ]);
    assert_exit(&out, 0);

    let report = path(&dir, "report.jsonl");
    let trace = path(&dir, "m.pc.trace.json");
    let out = run(&[
        "--threads",
        "1",
        "eval",
        "--model-file",
        &s(&model),
        "--test",
        &test,
        "--truth-col",
        "df",
        "--report",
        &s(&report),
        "--trace",
        &s(&trace),
        "--seed",
        "5",
    ]);
    assert_exit(&out, 0);
    let out = run(&[
        "eval",
        "--model-file",
        &s(&model),
        "--test",
        &test,
        "--truth-col",
        "d",
        "--report",
        &s(&report),
        "--schema",
        &schema,
    ]);
    assert_exit(&out, 0);

    let text = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    let expected = [
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
    for line in &lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|k| k.as_str()).collect();
        keys.sort_unstable();
        let mut want = expected.to_vec();
        want.sort_unstable();
        assert_eq!(keys, want);
        assert_eq!(v["model"], "2nb");
        assert_eq!(v["n_test"], 120);
    }
    let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    let trace_v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&trace).unwrap()).unwrap();
    assert_eq!(first["em_iterations"], trace_v["iterations"]);
    assert_eq!(first["seed"], 5);
    assert_eq!(first["config"]["truth_col"], "df");
    let second: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(second["em_iterations"], 0);
    assert_eq!(second["config"]["truth_col"], "d");
}

#[test]
fn truth_df_needs_a_latent_column() {
    let dir = TempDir::new().unwrap();
    let schema = Schema::new(vec![
        ColumnDef::binary("s", Role::Sensitive),
        ColumnDef::binary("x", Role::Feature),
        ColumnDef::binary("d", Role::Label),
    ])
    .unwrap();
    let schema_path = path(&dir, "schema.json");
    schema.save_json(&schema_path).unwrap();
    let csv_path = path(&dir, "rows.csv");
    let mut csv = String::from("s,x,d\n");
    for i in 0..12 {
        csv.push_str(&format!("{},{},{}\n", i % 2, (i / 2) % 2, (i / 3) % 2));
    }
    std::fs::write(&csv_path, csv).unwrap();

    let model = path(&dir, "m.pc");
    let out = run(&[
        "learn",
        "--model",
        "2nb",
        "--train",
        &s(&csv_path),
        "--schema",
        &s(&schema_path),
        "--out",
        &s(&model),
    ]);
    assert_exit(&out, 0);

    let report = path(&dir, "report.jsonl");
    let out = run(&[
        "eval",
        "--model-file",
        &s(&model),
        "--test",
        &s(&csv_path),
        "--truth-col",
        "df",
        "--report",
        &s(&report),
    ]);
    assert_exit(&out, 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("latent"));
    assert!(!report.exists());
}

#[test]
fn corrupted_weights_fail_the_audit_with_the_node_id() {
    let dir = TempDir::new().unwrap();
    synth_small(&dir);
    let clean = path(&dir, "true_model.pc");
    let text = std::fs::read_to_string(&clean).unwrap();
    let mut corrupted = String::new();
    let mut done = false;
    for line in text.lines() {
        if !done && line.starts_with("S ") {
            let colon = line.find(':').unwrap();
            let end = line[colon..]
                .find(' ')
                .map(|i| colon + i)
                .unwrap_or(line.len());
            corrupted.push_str(&line[..colon]);
            corrupted.push_str(":0.0");
            corrupted.push_str(&line[end..]);
            done = true;
        } else {
            corrupted.push_str(line);
        }
        corrupted.push('\n');
    }
    assert!(done, "no sum line found");
    let bad = path(&dir, "bad.pc");
    std::fs::write(&bad, corrupted).unwrap();

    let out = run(&["check", "--model-file", &s(&bad)]);
    assert_exit(&out, 1);
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(stdout.contains("sum node"), "{stdout}");
    assert!(stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn zero_threads_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = run(&[
        "--threads",
        "0",
        "synth",
        "--features",
        "10",
        "--samples",
        "10",
        "--out",
        &s(dir.path()),
    ]);
    assert_exit(&out, 2);
}

//! Batch command line for the fairness toolkit: synthesize datasets, fit
//! models, score them, and audit model files.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};

use fairpc::circuit::{Circuit, VarId};
use fairpc::data::{load_csv, save_csv, ColumnDef, Role, Schema};
use fairpc::fair::{FairModel, FitConfig, ModelKind};
use fairpc::metrics::{append_report, EvalReport};
use fairpc::params::{EmConfig, EmInit};
use fairpc::structure::StructureConfig;
use fairpc::synth::{generate, SynthConfig};

/// Largest head-weight deviation from the tied product form tolerated by
/// the audit.
const TYING_TOLERANCE: f64 = 1e-9;

#[derive(Parser)]
#[command(name = "fairpc", version, about = "Fair probabilistic circuits: synthesize, learn, evaluate, audit")]
struct Cli {
    /// Worker threads for row-parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a biased synthetic dataset together with its true model.
    Synth(SynthArgs),
    /// Fit a model to a training table.
    Learn(LearnArgs),
    /// Score a saved model on a test table and append a report line.
    Eval(EvalArgs),
    /// Audit a model file: structural properties, normalization, head tying.
    Check(CheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of binary features (the studied range is 10 to 30).
    #[arg(long, default_value_t = 15)]
    features: usize,

    /// Rows drawn for each of the training and test tables.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Output directory for train.csv, test.csv, schema.json, true_model.pc.
    #[arg(long)]
    out: PathBuf,

    /// Lift the 10..=30 feature-count guard.
    #[arg(long)]
    allow_any: bool,
}

#[derive(Copy, Clone, ValueEnum)]
enum KindArg {
    Fairpc,
    Nlatpc,
    #[value(name = "2nb")]
    TwoNb,
    Latnb,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> ModelKind {
        match k {
            KindArg::Fairpc => ModelKind::FairPc,
            KindArg::Nlatpc => ModelKind::NLatPc,
            KindArg::TwoNb => ModelKind::TwoNb,
            KindArg::Latnb => ModelKind::LatNb,
        }
    }
}

#[derive(Copy, Clone, ValueEnum)]
enum InitArg {
    Prior,
    Random,
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long, value_enum)]
    model: KindArg,

    /// Training table (CSV; `?` or empty cells are missing).
    #[arg(long)]
    train: PathBuf,

    /// Column schema with roles (JSON).
    #[arg(long)]
    schema: PathBuf,

    /// Output model file.
    #[arg(long)]
    out: PathBuf,

    /// Iteration trace (JSON; default: <out>.trace.json).
    #[arg(long)]
    trace: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = InitArg::Prior)]
    init: InitArg,

    /// Seed for random initialization and structure-search holdouts.
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// EM iteration cap.
    #[arg(long, default_value_t = 500)]
    max_iters: usize,

    /// Relative log-likelihood improvement that stops EM.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,

    /// Add-alpha smoothing for every count estimate.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,

    /// Split budget for structure learning.
    #[arg(long, default_value_t = 200)]
    max_splits: usize,

    /// Holdout share scored during structure learning.
    #[arg(long, default_value_t = 0.2)]
    validation_fraction: f64,

    /// Consecutive non-improving splits tolerated before stopping.
    #[arg(long, default_value_t = 3)]
    patience: usize,
}

#[derive(Copy, Clone, ValueEnum)]
enum TruthCol {
    /// The latent fair decision column.
    Df,
    /// The observed label column.
    D,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model_file: PathBuf,

    /// Test table (CSV).
    #[arg(long)]
    test: PathBuf,

    /// Column scored as ground truth.
    #[arg(long, value_enum)]
    truth_col: TruthCol,

    /// Report file to append to (JSON lines).
    #[arg(long)]
    report: PathBuf,

    /// Column schema (JSON); defaults to the layout stored in the model.
    #[arg(long)]
    schema: Option<PathBuf>,

    /// Trace JSON from `learn`, echoed as the iteration count.
    #[arg(long)]
    trace: Option<PathBuf>,

    #[arg(long, default_value_t = 0.5)]
    threshold: f64,

    /// Fold id recorded in the report.
    #[arg(long, default_value_t = 0)]
    fold: usize,

    /// Seed recorded in the report.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    model_file: PathBuf,
}

const USAGE: u8 = 2;
const RUNTIME: u8 = 1;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(USAGE);
        }
        // a second build_global in-process is harmless; keep the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(&args),
        Command::Learn(args) => cmd_learn(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Check(args) => cmd_check(&args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(RUNTIME)
        }
    }
}

fn cmd_synth(args: &SynthArgs) -> anyhow::Result<u8> {
    if !args.allow_any && !(10..=30).contains(&args.features) {
        eprintln!(
            "error: --features {} is outside the studied range 10..=30; pass --allow-any to override",
            args.features
        );
        return Ok(USAGE);
    }
    let config = SynthConfig {
        n_features: args.features,
        n_train: args.samples,
        n_test: args.samples,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let bundle = generate(&config).context("generating the synthetic bundle")?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;

    let train = args.out.join("train.csv");
    let test = args.out.join("test.csv");
    let schema = args.out.join("schema.json");
    let model = args.out.join("true_model.pc");
    save_csv(&bundle.train, &train, &[]).context("writing train.csv")?;
    save_csv(&bundle.test, &test, &[]).context("writing test.csv")?;
    bundle.train.schema().save_json(&schema).context("writing schema.json")?;
    bundle.model.save(&model).context("writing true_model.pc")?;
    for p in [&train, &test, &schema, &model] {
        println!("wrote {}", p.display());
    }
    Ok(0)
}

fn cmd_learn(args: &LearnArgs) -> anyhow::Result<u8> {
    let kind = ModelKind::from(args.model);
    let schema = Schema::load_json(&args.schema)
        .with_context(|| format!("reading {}", args.schema.display()))?;
    let table = load_csv(&args.train, Some(&schema))
        .with_context(|| format!("reading {}", args.train.display()))?;
    let config = FitConfig {
        em: EmConfig {
            max_iterations: args.max_iters,
            ll_tolerance: args.tolerance,
            alpha: args.alpha,
        },
        structure: StructureConfig {
            max_splits: args.max_splits,
            validation_fraction: args.validation_fraction,
            seed: args.seed,
            alpha: args.alpha,
            patience: args.patience,
        },
        init: match args.init {
            InitArg::Prior => EmInit::Prior,
            InitArg::Random => EmInit::Random { seed: args.seed },
        },
    };
    let fit = FairModel::fit(kind, &table, &config).context("fitting")?;
    fit.model
        .save(&args.out)
        .with_context(|| format!("writing {}", args.out.display()))?;

    let trace_path = args
        .trace
        .clone()
        .unwrap_or_else(|| trace_default(&args.out));
    let trace = serde_json::json!({
        "model": kind.token(),
        "log_likelihoods": fit.trace.log_likelihoods,
        "iterations": fit.trace.iterations,
        "converged": fit.trace.converged,
        "d_mech_trace": fit.trace.d_mech_trace,
    });
    std::fs::write(&trace_path, format!("{trace:#}\n"))
        .with_context(|| format!("writing {}", trace_path.display()))?;

    let final_ll = fit.trace.log_likelihoods.last().copied().unwrap_or(f64::NAN);
    println!(
        "fit {kind} in {} iterations (converged: {}), final weighted log-likelihood {final_ll}",
        fit.trace.iterations, fit.trace.converged
    );
    println!("wrote {}", args.out.display());
    println!("wrote {}", trace_path.display());
    Ok(0)
}

fn trace_default(model_out: &Path) -> PathBuf {
    let mut s = model_out.as_os_str().to_owned();
    s.push(".trace.json");
    PathBuf::from(s)
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<u8> {
    let model = FairModel::load(&args.model_file)
        .with_context(|| format!("reading {}", args.model_file.display()))?;
    let schema = match &args.schema {
        Some(p) => Schema::load_json(p).with_context(|| format!("reading {}", p.display()))?,
        None => schema_from_model(&model)?,
    };
    let table = load_csv(&args.test, Some(&schema))
        .with_context(|| format!("reading {}", args.test.display()))?;

    let truth = match args.truth_col {
        TruthCol::Df => match model.schema().latent {
            Some(v) => v,
            None => {
                eprintln!("error: --truth-col df needs a latent column, which this model does not declare");
                return Ok(USAGE);
            }
        },
        TruthCol::D => model.schema().label,
    };
    let has_truth = (0..table.n_rows()).any(|r| table.get(r, truth.0).is_some());
    if !has_truth {
        eprintln!(
            "error: truth column {} is empty in {}",
            schema.columns[truth.0].name,
            args.test.display()
        );
        return Ok(USAGE);
    }

    let summary = model
        .evaluate(&table, truth, args.threshold)
        .context("scoring the test table")?;
    let em_iterations = match &args.trace {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?;
            let v: serde_json::Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", p.display()))?;
            v["iterations"].as_u64().unwrap_or(0) as usize
        }
        None => 0,
    };
    let hp = model.head_params();
    let report = EvalReport {
        model: model.kind().token().to_string(),
        fold: args.fold,
        n_test: summary.n_test,
        loglik: summary.loglik,
        accuracy: summary.accuracy,
        f1: summary.f1,
        discrimination: summary.discrimination,
        em_iterations,
        phi_s: Some(hp.phi_s),
        phi_df: Some(hp.phi_df),
        d_mech: hp.d_mech,
        seed: args.seed,
        config: serde_json::json!({
            "model_file": args.model_file.display().to_string(),
            "test": args.test.display().to_string(),
            "truth_col": match args.truth_col { TruthCol::Df => "df", TruthCol::D => "d" },
            "threshold": args.threshold,
        }),
    };
    append_report(&args.report, &report).context("appending the report line")?;
    println!(
        "{} fold {}: loglik {:.6}, accuracy {:.4}, f1 {:.4}, discrimination {:+.4}",
        report.model, report.fold, report.loglik, report.accuracy, report.f1, report.discrimination
    );
    Ok(0)
}

/// Rebuild a data schema from the model when none is supplied: column
/// names and arities from the circuit variables, roles and numeric
/// vocabularies from the head layout.
fn schema_from_model(model: &FairModel) -> anyhow::Result<Schema> {
    let fs = model.schema();
    let cols = model
        .circuit()
        .vars()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let id = VarId(i);
            let role = if id == fs.sensitive {
                Role::Sensitive
            } else if id == fs.label {
                Role::Label
            } else if Some(id) == fs.latent {
                Role::Latent
            } else {
                Role::Feature
            };
            ColumnDef::new(
                v.name.clone(),
                (0..v.arity).map(|k| k.to_string()).collect(),
                role,
            )
        })
        .collect();
    Ok(Schema::new(cols)?)
}

fn cmd_check(args: &CheckArgs) -> anyhow::Result<u8> {
    let file = std::fs::File::open(&args.model_file)
        .with_context(|| format!("opening {}", args.model_file.display()))?;
    let (circuit, comments) = Circuit::read_format_lenient(std::io::BufReader::new(file))
        .with_context(|| format!("parsing {}", args.model_file.display()))?;

    let mut failures = 0usize;
    let mut report = |name: &str, ok: bool, detail: String| {
        println!("{name}: {}{detail}", if ok { "ok" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };
    report("smooth", circuit.is_smooth(), String::new());
    report("decomposable", circuit.is_decomposable(), String::new());
    report("deterministic", circuit.is_deterministic(), String::new());

    let violations = circuit.validate();
    let normalization: Vec<&String> = violations
        .iter()
        .filter(|v| v.contains("sum") || v.contains("PMF"))
        .collect();
    if normalization.is_empty() {
        report("normalization", true, String::new());
    } else {
        for v in &normalization {
            report("normalization", false, format!(" ({v})"));
        }
    }

    match head_tying_residual(&circuit, &comments) {
        Some(Ok(residual)) => {
            let ok = residual <= TYING_TOLERANCE;
            report("head tying", ok, format!(" (largest deviation {residual:.3e})"));
        }
        Some(Err(msg)) => report("head tying", false, format!(" ({msg})")),
        None => println!("head tying: skipped (no fair-head metadata)"),
    }

    if failures == 0 {
        println!("all checks passed");
        Ok(0)
    } else {
        println!("{failures} check(s) failed");
        Ok(RUNTIME)
    }
}

/// Deviation of the root weights from the product form implied by their
/// own marginals; `None` when the file carries no fair-head metadata.
fn head_tying_residual(circuit: &Circuit, comments: &[String]) -> Option<Result<f64, String>> {
    comments.iter().find(|c| c.starts_with("fair-head"))?;
    let root = circuit.root();
    let w = match circuit.node(root) {
        fairpc::circuit::Node::Sum { children, .. } if children.len() == 4 => {
            circuit.sum_weights(root)
        }
        _ => return Some(Err("fair-head metadata present but the root is not a four-way sum".to_string())),
    };
    let phi_s = w[0] + w[1];
    let phi_df = w[0] + w[2];
    let ideal = [
        phi_s * phi_df,
        phi_s * (1.0 - phi_df),
        (1.0 - phi_s) * phi_df,
        (1.0 - phi_s) * (1.0 - phi_df),
    ];
    let residual = w
        .iter()
        .zip(ideal)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Some(Ok(residual))
}

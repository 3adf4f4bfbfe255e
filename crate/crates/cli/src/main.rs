//! `perfed` command-line harness.
//!
//! Exit codes: 0 success, 2 invalid configuration or usage, 1 any other
//! failure. Failures print one JSON object on stderr:
//! `{"error": {"kind": ..., "field": ..., "message": ...}}`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use perfed::analysis::BoundInputs;
use perfed::harness::{self, DatasetSpec, ExperimentConfig, Recipe, Served, SweepAxis};
use perfed::io::{load_population, save_population};
use perfed::Error;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "perfed", version, about = "Personalized federated learning simulations")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Single seed, replacing the configured seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root under which a default output directory is created when `--out`
    /// is absent.
    #[arg(long, global = true, env = "PERFED_OUT_ROOT", default_value = "perfed-out", hide_env_values = true)]
    out_root: PathBuf,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    parallel: Option<usize>,
    /// Omit wall-clock timings so reruns write byte-identical files.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic population as train.txt and test.txt.
    GenerateData(GenerateArgs),
    /// Train and evaluate the configured algorithms.
    Train(TrainArgs),
    /// Evaluate a saved model file on a population file.
    Evaluate(EvaluateArgs),
    /// Rerun the experiment for every value of one parameter.
    Sweep(SweepArgs),
    /// Print the generalization-bound calculators.
    Bounds(BoundsArgs),
    /// Run the seeded invariant checks.
    Selftest,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Synthetic,
    Threshold,
    TwoSource,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "synthetic")]
    kind: Kind,
    #[arg(long, default_value_t = 100)]
    clients: usize,
    #[arg(long, default_value_t = 50)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    samples_per_client: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Algorithms to run (comma separated or repeated); overrides the config.
    #[arg(long = "algorithm", value_delimiter = ',')]
    algorithms: Vec<String>,
    /// Built-in configuration used when no `--config` is given.
    #[arg(long)]
    recipe: Option<String>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Model file written by `train`.
    #[arg(long)]
    model: PathBuf,
    /// Population to evaluate on.
    #[arg(long)]
    data: PathBuf,
    /// Data used to personalize or assign clients missing from the model;
    /// defaults to `--data`.
    #[arg(long)]
    assign_data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// m_k, q, r, lambda-grid or T.
    #[arg(long)]
    axis: Option<String>,
    #[arg(long, value_delimiter = ',')]
    values: Vec<usize>,
    #[arg(long = "algorithm", value_delimiter = ',')]
    algorithms: Vec<String>,
    /// Built-in configuration and axis (cluster-sweep or sample-sweep).
    #[arg(long)]
    recipe: Option<String>,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    /// Pseudo-dimension.
    #[arg(long)]
    d: f64,
    /// Total samples.
    #[arg(long)]
    m: usize,
    /// Samples of the client.
    #[arg(long)]
    m_k: usize,
    /// Central subsample size.
    #[arg(long)]
    m_c: usize,
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long, default_value_t = 1)]
    q: usize,
    #[arg(long, default_value_t = 0.05)]
    delta: f64,
    #[arg(long)]
    disc: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
}

fn error_json(kind: &str, field: Option<&str>, message: &str) -> String {
    json!({"error": {"kind": kind, "field": field, "message": message}}).to_string()
}

fn fail(e: &Error) -> ExitCode {
    let (kind, field, code) = match e {
        Error::Config { field, .. } => ("config", Some(field.as_str()), 2),
        Error::Io { .. } => ("io", None, 1),
        Error::Parse { .. } => ("parse", None, 1),
        Error::Validation { .. } => ("validation", None, 1),
        Error::TooLarge(_) => ("too-large", None, 1),
        _ => ("invalid-input", None, 1),
    };
    eprintln!("{}", error_json(kind, field, &e.to_string()));
    ExitCode::from(code)
}

fn recipe(name: Option<&str>) -> Result<Option<Recipe>, Error> {
    name.map(str::parse).transpose()
}

/// Defaults, then the config file (or recipe), then command-line flags.
fn experiment(global: &Global, recipe: Option<Recipe>, algorithms: &[String], command: &str) -> Result<ExperimentConfig, Error> {
    let mut cfg = match (&global.config, recipe) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(r)) => r.config(),
        (None, None) => ExperimentConfig::from_toml("algorithms = []")?,
    };
    if !algorithms.is_empty() {
        cfg.algorithms = algorithms.to_vec();
    }
    if let Some(s) = global.seed {
        cfg.seeds = vec![s];
    }
    cfg.deterministic |= global.deterministic;
    cfg.out = Some(global.out.clone().unwrap_or_else(|| {
        let name = cfg.hash();
        global.out_root.join(format!("{command}-{}", &name[..12]))
    }));
    Ok(cfg)
}

fn out_dir(global: &Global, command: &str) -> PathBuf {
    global.out.clone().unwrap_or_else(|| global.out_root.join(command))
}

fn print_summary(cfg: &ExperimentConfig, reports: &[harness::RunReport]) {
    print!("{}", harness::summary_tsv(&cfg.hash(), reports));
    if let Some(out) = &cfg.out {
        println!("# outputs in {}", out.display());
    }
}

fn generate(global: &Global, args: &GenerateArgs) -> Result<(), Error> {
    let spec = match args.kind {
        Kind::Synthetic => DatasetSpec::Synthetic {
            clients: args.clients,
            classes: args.classes,
            samples_per_client: args.samples_per_client,
        },
        Kind::Threshold => DatasetSpec::Threshold {
            samples_per_client: args.samples_per_client,
        },
        Kind::TwoSource => DatasetSpec::TwoSource {
            clients: args.clients,
            classes: args.classes,
            samples_per_client: args.samples_per_client,
        },
    };
    let data = spec.load(global.seed.unwrap_or(0))?;
    let dir = out_dir(global, "data");
    save_population(&data.train, &dir.join("train.txt"))?;
    save_population(&data.test, &dir.join("test.txt"))?;
    println!("{}\n{}", dir.join("train.txt").display(), dir.join("test.txt").display());
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<(), Error> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e });
    let served = Served::decode(&read(&args.model)?)?;
    let test = load_population(&args.data)?;
    let assign = match &args.assign_data {
        Some(p) => load_population(p)?,
        None => test.clone(),
    };
    let report = served.evaluate(&test, &assign)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn sweep(global: &Global, args: &SweepArgs) -> Result<(), Error> {
    let recipe = recipe(args.recipe.as_deref())?;
    let cfg = experiment(global, recipe, &args.algorithms, "sweep")?;
    let (axis, values) = match (&args.axis, recipe) {
        (Some(a), _) => (a.parse::<SweepAxis>()?, args.values.clone()),
        (None, Some(r)) => {
            let (axis, default) = r.sweep();
            (axis, if args.values.is_empty() { default } else { args.values.clone() })
        }
        (None, None) => return Err(Error::Config {
            field: "sweep.axis".into(),
            message: "give --axis or --recipe".into(),
        }),
    };
    let points = harness::sweep(&cfg, axis, &values)?;
    for p in &points {
        for r in &p.reports {
            println!("{}={}\t{}\t{}\tseed={}\tuniform_loss={:.4}", axis.name(), p.value, r.algorithm, r.split, r.seed, r.report.uniform_loss);
        }
    }
    if let Some(out) = &cfg.out {
        println!("# long-format table in {}", out.join("sweep.tsv").display());
    }
    Ok(())
}

fn bounds(args: &BoundsArgs) -> Result<(), Error> {
    let inputs = BoundInputs {
        d: args.d,
        m: args.m,
        m_k: args.m_k,
        m_c: args.m_c,
        p: args.p,
        q: args.q,
        delta: args.delta,
        disc: args.disc,
        lambda: args.lambda,
    };
    println!("# formal plug-in values, unit constants, natural logs");
    println!("bound\tvalue");
    for (name, v) in inputs.evaluate()? {
        println!("{name}\t{v}");
    }
    Ok(())
}

fn selftest(global: &Global) -> Result<bool, Error> {
    let checks = perfed::selftest::run(global.seed.unwrap_or(0));
    for c in &checks {
        println!("{}\t{}\t{}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    Ok(checks.iter().all(|c| c.passed))
}

fn run(cli: &Cli) -> Result<bool, Error> {
    let g = &cli.global;
    match &cli.command {
        Command::GenerateData(a) => generate(g, a)?,
        Command::Train(a) => {
            let cfg = experiment(g, recipe(a.recipe.as_deref())?, &a.algorithms, "train")?;
            let reports = harness::run_experiment(&cfg)?;
            print_summary(&cfg, &reports);
        }
        Command::Evaluate(a) => evaluate(a)?,
        Command::Sweep(a) => sweep(g, a)?,
        Command::Bounds(a) => bounds(a)?,
        Command::Selftest => return selftest(g),
    }
    Ok(true)
}

fn with_threads<T>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T, Error>
where
    T: Send,
{
    match threads {
        Some(0) => Err(Error::Config {
            field: "parallel".into(),
            message: "thread count must be positive".into(),
        }),
        #[cfg(feature = "parallel")]
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| Error::InvalidInput(e.to_string())),
        #[cfg(not(feature = "parallel"))]
        Some(_) => Ok(f()),
        None => Ok(f()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", error_json("usage", None, e.to_string().trim()));
            return ExitCode::from(2);
        }
    };
    match with_threads(cli.global.parallel, || run(&cli)).and_then(|r| r) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", error_json("selftest", None, "one or more invariant checks failed"));
            ExitCode::from(1)
        }
        Err(e) => fail(&e),
    }
}

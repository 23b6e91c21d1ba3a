//! Command-line benchmark harness for off-policy evaluation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ope::envs::{env_by_name, EnvironmentSpec, ENV_NAMES};
use ope::error::{OpeError, Result};
use ope::harness::{
    default_reg_grid, read_results, report_csv, report_summary, run_estimator, run_experiment,
    summarize, EstimationInputs, ExperimentConfig, ESTIMATOR_KEYS,
};
use ope::ltmle::{LtmleConfig, RegularizationTriple};
use ope::mdp::{
    exact_policy_value, simulate, Dataset, DiscountSpec, StochasticPolicy, TabularMdp,
};
use ope::model::{fit_empirical_model, inject_bias, q_from_model};
use ope::seeding::{derive_seed, streams};

#[derive(Parser)]
#[command(name = "ope", version, about = "Off-policy evaluation benchmark harness for tabular MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment sweep described by a JSON config file
    Run(RunArgs),
    /// Aggregate a results file into a CSV table and a JSON summary
    Report(ReportArgs),
    /// List the registered environments
    Envs(EnvsArgs),
    /// One-shot estimation on a dataset file
    Estimate(EstimateArgs),
    /// Simulate a dataset and export it as JSON lines
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON). Flags below override its fields.
    config: Option<PathBuf>,
    #[arg(long)]
    environment: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Comma-separated sample sizes, e.g. 100,500,1000
    #[arg(long, value_delimiter = ',')]
    sample_sizes: Option<Vec<usize>>,
    /// Comma-separated misspecification scales, e.g. 0.005,0.05
    #[arg(long, value_delimiter = ',')]
    scales: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated estimator keys
    #[arg(long, value_delimiter = ',')]
    estimators: Option<Vec<String>>,
    /// Regularization grid as inline JSON, e.g. [{"alpha":1.0,"tau":4,"lambda":0.0}]
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    bootstrap_samples: Option<usize>,
    #[arg(long)]
    ci_level: Option<f64>,
    #[arg(long)]
    split_fraction: Option<f64>,
    #[arg(long)]
    smoothing: Option<f64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    use_exact_q: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Skip wall-clock timing so result files are byte-reproducible
    #[arg(long)]
    no_timings: bool,
    /// Also print the aggregate CSV to stdout
    #[arg(long)]
    print_csv: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Results file written by `run`
    results: PathBuf,
    /// CSV output path (default: results path with .csv extension)
    #[arg(long)]
    csv: Option<PathBuf>,
    /// JSON summary output path (default: results path with .summary.json)
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Print the CSV to stdout as well
    #[arg(long)]
    stdout: bool,
}

#[derive(Args)]
struct EnvsArgs {
    /// Print the full JSON description of one environment
    #[arg(long)]
    describe: Option<String>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Dataset in JSON-lines format (see `simulate`)
    #[arg(long)]
    data: PathBuf,
    /// Registered environment providing the MDP and both policies
    #[arg(long)]
    env: Option<String>,
    /// MDP JSON file (alternative to --env; no oracle truth available
    /// unless given)
    #[arg(long)]
    mdp: Option<PathBuf>,
    /// Evaluation policy JSON file (defaults to the environment's)
    #[arg(long)]
    pi_e: Option<PathBuf>,
    /// Behavior policy JSON file (defaults to the dataset header's)
    #[arg(long)]
    pi_b: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "dm,wdr")]
    estimators: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.5)]
    split_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    smoothing: f64,
    /// Misspecification scale injected into the fitted model
    #[arg(long, default_value_t = 0.0)]
    scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    bootstrap_samples: usize,
    #[arg(long, default_value_t = 0.1)]
    ci_level: f64,
    #[arg(long, default_value_t = 2)]
    folds: usize,
    /// Regularization grid as inline JSON
    #[arg(long)]
    grid: Option<String>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Registered environment name
    #[arg(long)]
    env: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    horizon: Option<usize>,
    /// Which of the environment's policies logs the data
    #[arg(long, default_value = "behavior")]
    policy: String,
    /// Output path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Report(args) => cmd_report(args),
        Command::Envs(args) => cmd_envs(args),
        Command::Estimate(args) => cmd_estimate(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                OpeError::Config(_) | OpeError::Parse(_) | OpeError::Io(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn parse_grid(text: &str) -> Result<Vec<RegularizationTriple>> {
    serde_json::from_str(text).map_err(|e| OpeError::Parse(format!("--grid: {e}")))
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut config: ExperimentConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| OpeError::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| OpeError::Config(format!("cannot parse {}: {e}", path.display())))?
        }
        None => {
            let environment = args.environment.clone().ok_or_else(|| {
                OpeError::Config("either a config file or --environment is required".into())
            })?;
            serde_json::from_value(serde_json::json!({
                "environment": environment,
                "sample_sizes": [100],
            }))?
        }
    };
    if let Some(v) = args.environment {
        config.environment = v;
    }
    if args.horizon.is_some() {
        config.horizon = args.horizon;
    }
    if let Some(v) = args.gamma {
        config.gamma = v;
    }
    if let Some(v) = args.sample_sizes {
        config.sample_sizes = v;
    }
    if let Some(v) = args.scales {
        config.misspecification_scales = v;
    }
    if let Some(v) = args.trials {
        config.trials = v;
    }
    if let Some(v) = args.estimators {
        config.estimators = v;
    }
    if let Some(text) = args.grid {
        config.regularization_grid = Some(parse_grid(&text)?);
    }
    if let Some(v) = args.bootstrap_samples {
        config.bootstrap_samples = v;
    }
    if let Some(v) = args.ci_level {
        config.ci_level = v;
    }
    if let Some(v) = args.split_fraction {
        config.split_fraction = v;
    }
    if let Some(v) = args.smoothing {
        config.smoothing = v;
    }
    if let Some(v) = args.folds {
        config.folds = v;
    }
    if args.use_exact_q {
        config.use_exact_q = true;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.output {
        config.output = v;
    }
    if let Some(v) = args.workers {
        config.workers = v;
    }
    if args.no_timings {
        config.record_timings = false;
    }

    let results = run_experiment(&config)?;
    let path = PathBuf::from(&config.output);
    ope::harness::write_results(&results, &path)?;
    let failures: usize = results.trials.iter().map(|t| t.failures.len()).sum();
    eprintln!(
        "wrote {} trials to {} (truth {:.6}, {} estimator failures)",
        results.trials.len(),
        path.display(),
        results.truth,
        failures
    );
    if args.print_csv {
        print!("{}", report_csv(&summarize(&results)));
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let results = read_results(&args.results)?;
    let rows = summarize(&results);
    let csv = report_csv(&rows);
    let summary = report_summary(&results, &rows);
    let csv_path = args.csv.unwrap_or_else(|| args.results.with_extension("csv"));
    let summary_path =
        args.summary.unwrap_or_else(|| args.results.with_extension("summary.json"));
    std::fs::write(&csv_path, &csv)?;
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    eprintln!("wrote {} and {}", csv_path.display(), summary_path.display());
    if args.stdout {
        print!("{csv}");
    }
    Ok(())
}

fn cmd_envs(args: EnvsArgs) -> Result<()> {
    match args.describe {
        None => {
            for name in ENV_NAMES {
                println!("{name}");
            }
        }
        Some(name) => {
            let env = env_by_name(&name)?;
            let blob = serde_json::json!({
                "name": env.name,
                "default_horizon": env.default_horizon,
                "mdp": env.mdp,
                "behavior": env.behavior,
                "evaluation": env.evaluation,
            });
            println!("{}", serde_json::to_string_pretty(&blob)?);
        }
    }
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| OpeError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| OpeError::Parse(format!("{}: {e}", path.display())))
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    for key in &args.estimators {
        if !ESTIMATOR_KEYS.contains(&key.as_str()) {
            return Err(OpeError::Config(format!(
                "unknown estimator key '{key}'; known: {}",
                ESTIMATOR_KEYS.join(", ")
            )));
        }
    }
    let text = std::fs::read_to_string(&args.data)
        .map_err(|e| OpeError::Config(format!("cannot read {}: {e}", args.data.display())))?;
    let dataset = Dataset::from_jsonl(&text)?;
    let discount = DiscountSpec::new(args.gamma)?;
    let horizon = dataset.horizon;

    let env: Option<EnvironmentSpec> = args.env.as_deref().map(env_by_name).transpose()?;
    let mdp: Option<TabularMdp> = match (&env, &args.mdp) {
        (_, Some(path)) => Some(read_json(path)?),
        (Some(env), None) => Some(env.mdp.clone()),
        (None, None) => None,
    };
    let pi_e: StochasticPolicy = match (&args.pi_e, &env) {
        (Some(path), _) => read_json(path)?,
        (None, Some(env)) => env.evaluation.clone(),
        (None, None) => {
            return Err(OpeError::Config(
                "provide --pi-e or --env so the target policy is known".into(),
            ))
        }
    };
    let pi_b: StochasticPolicy = match &args.pi_b {
        Some(path) => read_json(path)?,
        None => dataset.behavior.clone(),
    };
    for (label, pi) in [("evaluation", &pi_e), ("behavior", &pi_b)] {
        if !pi.covers(horizon, dataset.num_observations, dataset.num_actions) {
            return Err(OpeError::Config(format!(
                "{label} policy does not cover the dataset's observation/action space"
            )));
        }
    }

    let (model_split, target) = dataset.split_targeting(args.split_fraction)?;
    let model = fit_empirical_model(&model_split, &model_split.observation_map, args.smoothing)?;
    let q = q_from_model(&model, &pi_e, horizon, discount)?;
    let bias_seed = derive_seed(args.seed, &[streams::INJECT]);
    let q = inject_bias(&q, args.scale, bias_seed)?;
    let grid = match args.grid {
        Some(text) => parse_grid(&text)?,
        None => default_reg_grid(horizon),
    };
    let inputs = EstimationInputs {
        full: &dataset,
        target: &target,
        q: &q,
        pi_e: &pi_e,
        pi_b: &pi_b,
        discount,
        horizon,
        bootstrap_samples: args.bootstrap_samples,
        ci_level: args.ci_level,
        smoothing: args.smoothing,
        folds: args.folds,
        scale: args.scale,
        bias_seed,
        seed: args.seed,
        grid: &grid,
        ltmle_config: LtmleConfig { folds: args.folds, ..LtmleConfig::default() },
    };
    let mut estimates = serde_json::Map::new();
    let mut failures = serde_json::Map::new();
    for key in &args.estimators {
        match run_estimator(key, &inputs) {
            Ok((value, _)) => {
                estimates.insert(key.clone(), serde_json::json!(value));
            }
            Err(e) => {
                failures.insert(key.clone(), serde_json::json!(e.to_string()));
            }
        }
    }
    let truth = mdp
        .map(|m| exact_policy_value(&m, &pi_e, horizon, discount))
        .transpose()?;
    let out = serde_json::json!({
        "n": dataset.len(),
        "horizon": horizon,
        "estimates": estimates,
        "failures": failures,
        "truth": truth,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let env = env_by_name(&args.env)?;
    let horizon = args.horizon.unwrap_or(env.default_horizon);
    let policy = match args.policy.as_str() {
        "behavior" => &env.behavior,
        "evaluation" => &env.evaluation,
        other => {
            return Err(OpeError::Config(format!(
                "--policy must be 'behavior' or 'evaluation', got '{other}'"
            )))
        }
    };
    let dataset = simulate(&env.mdp, policy, horizon, args.n, args.seed)?;
    let text = dataset.to_jsonl()?;
    match args.out {
        Some(path) => {
            std::fs::write(&path, text)?;
            eprintln!("wrote {} trajectories to {}", args.n, path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

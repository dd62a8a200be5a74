use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hybridfl::data::generate_synthetic;
use hybridfl::harness::{
    self, compare_runs, parse_config, ExperimentConfig, ObjectiveKindName, Target,
};
use hybridfl::model::ModelVector;
use hybridfl::protocol::initial_model;
use hybridfl::theory::{
    bound_clg_sgd, bound_fedclg_c, bound_fedclg_s, estimate_sigma, estimate_sigma_g,
    estimate_smoothness, minimize_centrally, TheoremConstants,
};
use hybridfl::{Error, Result};

#[derive(Parser)]
#[command(
    name = "hybridfl",
    version,
    about = "Hybrid federated learning simulator and convergence-bound toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file
    Run {
        config: PathBuf,
        /// Override the config's master seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare trace files: median rounds-to-target and speedup vs baseline
    Compare {
        traces: Vec<PathBuf>,
        /// Target spec, e.g. `loss<=0.5` or `accuracy>=0.9`
        #[arg(long)]
        target: Option<String>,
        #[arg(long, default_value = "clg-sgd")]
        baseline: String,
    },
    /// Evaluate the three convergence bounds for a config
    Bounds {
        config: PathBuf,
        /// Constants file (`smoothness = ...`, `sigma = ...`, ...)
        #[arg(long)]
        constants: PathBuf,
    },
    /// Finite-difference check of the configured objective
    CheckGrad {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate the bound constants for a config's data and objective
    EstimateConstants {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // clap prints its own usage text
            let _ = err.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 1 for configuration/validation problems, 2 for runtime failures.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. }
        | Error::BadMagic { .. }
        | Error::Truncated { .. }
        | Error::CountMismatch { .. }
        | Error::MalformedTrace { .. }
        | Error::NonFiniteClientGradient { .. }
        | Error::NonFiniteServerGradient { .. }
        | Error::NonFiniteModel(_)
        | Error::CheckFailed(_) => 2,
        _ => 1,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut config = parse_config(path)?;
    if let Some(seed) = seed {
        config.master_seed = seed;
    }
    if let Ok(dir) = std::env::var("HYBRIDFL_OUTPUT_DIR") {
        if !dir.is_empty() {
            config.output_dir = PathBuf::from(dir);
        }
    }
    Ok(config)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed } => {
            let config = load_config(&config, seed)?;
            let output = harness::run_experiment(&config)?;
            for path in &output.trace_paths {
                println!("trace: {}", path.display());
            }
            println!("summary: {}", output.summary_path.display());
            Ok(())
        }
        Command::Compare {
            traces,
            target,
            baseline,
        } => {
            let target = target.as_deref().map(Target::parse).transpose()?;
            let table = compare_runs(&traces, target, &baseline)?;
            print!("{table}");
            Ok(())
        }
        Command::Bounds { config, constants } => {
            let config = load_config(&config, None)?;
            let constants = parse_constants(&constants)?;
            let reports = serde_json::json!({
                "clg_sgd": bound_clg_sgd(&constants, &config.hp, config.hp.rounds)?,
                "fedclg_c": bound_fedclg_c(&constants, &config.hp, config.hp.rounds)?,
                "fedclg_s": bound_fedclg_s(&constants, &config.hp, config.hp.rounds)?,
            });
            println!("{}", serde_json::to_string_pretty(&reports).expect("serializable"));
            Ok(())
        }
        Command::CheckGrad { config, seed } => {
            let config = load_config(&config, seed)?;
            check_grad(&config)
        }
        Command::EstimateConstants { config, seed } => {
            let config = load_config(&config, seed)?;
            estimate_constants(&config)
        }
    }
}

/// Constants file: flat `key = value` lines with `#` comments.
fn parse_constants(path: &Path) -> Result<TheoremConstants> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut values: BTreeMap<String, f64> = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::invalid_value(line, "expected `key = value`"));
        };
        let key = key.trim().to_string();
        let parsed: f64 = value
            .trim()
            .parse()
            .map_err(|_| Error::invalid_value(&key, format!("`{}` is not a number", value.trim())))?;
        values.insert(key, parsed);
    }
    let mut get = |key: &str| values.remove(key).ok_or_else(|| Error::MissingKey(key.into()));
    let constants = TheoremConstants {
        smoothness: get("smoothness")?,
        sigma: get("sigma")?,
        sigma_g: get("sigma_g")?,
        f_init: get("f_init")?,
        f_star: get("f_star")?,
    };
    if let Some(extra) = values.keys().next() {
        return Err(Error::UnknownKey(extra.clone()));
    }
    constants.validate()?;
    Ok(constants)
}

/// Finite-difference verification on 20 random instances shaped like the
/// configured objective.
fn check_grad(config: &ExperimentConfig) -> Result<()> {
    use rand_distr::{Distribution, StandardNormal};

    let (input_dim, classes) = match &config.dataset {
        harness::DatasetConfig::Synthetic {
            input_dim, classes, ..
        } => (*input_dim, *classes),
        harness::DatasetConfig::Idx { train_images, train_labels, .. } => {
            let data = hybridfl::data::load_idx(train_images, train_labels)?;
            (data.input_dim(), data.num_classes())
        }
    };
    let objective = config.objective.build(input_dim, classes);
    let mut worst: f64 = 0.0;
    for instance in 0..20u64 {
        let seed = config.master_seed.wrapping_add(instance);
        let data = generate_synthetic(classes.max(2), input_dim, 20, 1.0, seed)?;
        let mut rng = hybridfl::rng::stream(seed, &[hybridfl::rng::STREAM_INIT]);
        let x = ModelVector::from_vec(
            (0..objective.param_dim())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    0.5 * z
                })
                .collect(),
        )?;
        let err = objective.finite_diff_check(&x, &data, 1e-5)?;
        worst = worst.max(err);
    }
    println!(
        "{}: max relative gradient error over 20 instances = {worst:e}",
        match config.objective.kind {
            ObjectiveKindName::LogisticRegression => "logistic-regression",
            ObjectiveKindName::MlpOneHidden => "mlp-1hidden",
            ObjectiveKindName::LeastSquares => "least-squares",
        }
    );
    if worst > 1e-5 {
        return Err(Error::CheckFailed(format!(
            "gradient relative error {worst:e} above 1e-5"
        )));
    }
    println!("gradient check passed");
    Ok(())
}

/// Prints estimated constants in the `bounds --constants` file format.
fn estimate_constants(config: &ExperimentConfig) -> Result<()> {
    let prepared = harness::prepare(config)?;
    let obj = &prepared.objective;
    let x0 = initial_model(obj, config.master_seed);
    let mut rng = hybridfl::rng::stream(config.master_seed, &[hybridfl::rng::STREAM_INIT, 99]);

    let datasets: Vec<&hybridfl::data::LabeledDataset> =
        prepared.shards.iter().map(|s| &s.data).collect();
    let smoothness = estimate_smoothness(obj, &datasets, 200, 1.0, &mut rng)?;
    let sigma = estimate_sigma(
        obj,
        &prepared.population,
        config.hp.server_dataset_size,
        &x0,
        200,
        &mut rng,
    )?;
    let probes = vec![x0.clone()];
    let sigma_g = estimate_sigma_g(obj, &prepared.shards, &probes)?;
    let f_init = obj.loss(&x0, &prepared.population)?;
    let (_, f_star) = minimize_centrally(obj, &prepared.population, &x0, 20_000, 1e-10)?;

    println!("# estimated constants ({} clients)", prepared.shards.len());
    println!("smoothness = {smoothness}");
    println!("sigma = {sigma}");
    println!("sigma_g = {sigma_g}");
    println!("f_init = {f_init}");
    println!("f_star = {f_star}");
    Ok(())
}

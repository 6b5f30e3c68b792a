//! Command-line front end: `run`, `compare`, `verify` and `export-data`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use rayon::prelude::*;
use thiserror::Error;

use crate::aggregation::{AggregatorKind, AggregatorSpec, FedAvgWeights};
use crate::config::{config_hash, load_config, ConfigError, RunManifest};
use crate::data::{write_partition_csv, DataError};
use crate::federation::{save_checkpoint, FederatedConfig, FederationError, Simulation};
use crate::metrics::FairnessReport;
use crate::output::{
    mean_std, write_compare_csv, write_json, CompareRow, LambdaWriter, RoundsWriter, RunSummary,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Seed used by `verify` unless overridden.
pub const VERIFY_SEED: u64 = 20_260_101;

#[derive(Debug, Parser)]
#[command(
    name = "adafed",
    version,
    about = "Deterministic federated-learning simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write rounds.csv, lambda.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `training.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run several aggregators over several seeds on the same task.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated, e.g. `adafed:1,adafed:5,fedavg,mgda`.
        #[arg(long)]
        aggregators: String,
        /// Comma-separated seeds or inclusive ranges, e.g. `1,2,7-9`.
        #[arg(long)]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant suites; exit 1 if any fails.
    Verify {
        #[arg(long, default_value_t = VERIFY_SEED)]
        seed: u64,
    },
    /// Write the pooled synthetic data with client assignments as CSV.
    ExportData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        source: FederationError,
    },
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Argument(_) => EXIT_CONFIG,
            CliError::Federation(FederationError::Config(_)) => EXIT_CONFIG,
            CliError::Federation(FederationError::Data(
                DataError::InvalidTask(_)
                | DataError::InvalidPartition(_)
                | DataError::IndivisibleShards { .. }
                | DataError::NeedsClassLabels,
            )) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv {
        path: path.display().to_string(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// `<out>/<config hash>/seed_<seed>`
pub fn run_dir(out: &Path, config: &FederatedConfig) -> PathBuf {
    out.join(config_hash(config))
        .join(format!("seed_{}", config.training.seed))
}

/// Outcome of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub summary: RunSummary,
}

/// Runs `config` and writes its outputs under [`run_dir`].
pub fn execute_run(config: &FederatedConfig, out: &Path) -> Result<RunOutput, CliError> {
    let dir = run_dir(out, config);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut manifest = RunManifest::start(config, vec![config.training.seed], &dir);
    info!("run {} -> {}", manifest.config_hash, dir.display());

    let rounds_path = dir.join("rounds.csv");
    let lambda_path = dir.join("lambda.csv");
    let mut rounds = RoundsWriter::new(create(&rounds_path)?).map_err(csv_err(&rounds_path))?;
    let mut lambdas = LambdaWriter::new(create(&lambda_path)?).map_err(csv_err(&lambda_path))?;

    let mut sim = Simulation::from_config(config)?;
    let every = config.training.checkpoint_every;
    let mut records = Vec::with_capacity(config.training.rounds);
    for _ in 0..config.training.rounds {
        let round = sim.round();
        let rec = sim
            .run_round()
            .map_err(|source| CliError::Round { round, source })?;
        rounds.write(&rec).map_err(csv_err(&rounds_path))?;
        lambdas.write(&rec).map_err(csv_err(&lambda_path))?;
        if every > 0 && (round + 1) % every == 0 {
            let path = dir.join(format!("checkpoint_{:06}.bin", round + 1));
            save_checkpoint(sim.params(), &path)
                .map_err(|source| CliError::Round { round, source })?;
        }
        records.push(rec);
    }
    rounds.finish().map_err(io_err(&rounds_path))?;
    lambdas.finish().map_err(io_err(&lambda_path))?;

    manifest.finish();
    let summary = RunSummary::new(manifest, config.clone(), &records);
    let summary_path = dir.join("summary.json");
    write_json(&summary, create(&summary_path)?).map_err(io_err(&summary_path))?;
    Ok(RunOutput { dir, summary })
}

pub fn cmd_run(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<RunOutput, CliError> {
    let mut config = load_config(config_path)?;
    if let Some(seed) = seed {
        config.training.seed = seed;
    }
    execute_run(&config, out)
}

/// Parses `adafed[:gamma]`, `fedavg[:uniform|samples]` and `mgda`. Fields
/// not named in the entry (tolerances, hull settings) come from `base`.
pub fn parse_aggregator(entry: &str, base: &AggregatorSpec) -> Result<AggregatorSpec, CliError> {
    let (name, arg) = match entry.trim().split_once(':') {
        Some((n, a)) => (n.trim(), Some(a.trim())),
        None => (entry.trim(), None),
    };
    let bad = |m: String| CliError::Argument(format!("aggregator {entry:?}: {m}"));
    let mut spec = base.clone();
    spec.gamma = None;
    spec.fedavg_weights = None;
    match name.to_ascii_lowercase().as_str() {
        "adafed" => {
            spec.kind = AggregatorKind::Adafed;
            let gamma = match arg {
                Some(a) => a.parse().map_err(|e| bad(format!("gamma: {e}")))?,
                None => base.gamma.unwrap_or(1.0),
            };
            spec.gamma = Some(gamma);
        }
        "fedavg" => {
            spec.kind = AggregatorKind::Fedavg;
            spec.fedavg_weights = Some(match arg {
                None | Some("samples") | Some("by_sample_count") => FedAvgWeights::BySampleCount,
                Some("uniform") => FedAvgWeights::Uniform,
                Some(other) => return Err(bad(format!("unknown weighting {other:?}"))),
            });
        }
        "mgda" | "mgda_min_norm" => {
            if arg.is_some() {
                return Err(bad("mgda takes no argument".into()));
            }
            spec.kind = AggregatorKind::MgdaMinNorm;
        }
        other => return Err(bad(format!("unknown aggregator {other:?}"))),
    }
    spec.validate().map_err(|e| bad(e.to_string()))?;
    Ok(spec)
}

/// Parses `1,2,7-9` into `[1, 2, 7, 8, 9]`.
pub fn parse_seeds(list: &str) -> Result<Vec<u64>, CliError> {
    let bad = |part: &str| CliError::Argument(format!("seed list entry {part:?}"));
    let mut seeds = Vec::new();
    for part in list.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| bad(part))?;
                let b: u64 = b.trim().parse().map_err(|_| bad(part))?;
                if a > b {
                    return Err(bad(part));
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| bad(part))?),
        }
    }
    if seeds.is_empty() {
        return Err(CliError::Argument("no seeds given".into()));
    }
    Ok(seeds)
}

/// Runs every `(aggregator, seed)` pair and summarizes each aggregator over
/// the seeds. Identical pairs are run once.
pub fn execute_compare(
    base: &FederatedConfig,
    aggregators: &[(String, AggregatorSpec)],
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<CompareRow>, CliError> {
    if aggregators.len() < 2 {
        return Err(CliError::Argument(
            "compare needs at least two aggregators".into(),
        ));
    }
    let mut jobs: BTreeMap<(String, u64), FederatedConfig> = BTreeMap::new();
    let mut keys = Vec::with_capacity(aggregators.len());
    for (_, spec) in aggregators {
        let mut row = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut c = base.clone();
            c.aggregator = spec.clone();
            c.training.seed = seed;
            c.validate()?;
            let key = (config_hash(&c), seed);
            jobs.entry(key.clone()).or_insert(c);
            row.push(key);
        }
        keys.push(row);
    }

    let results: BTreeMap<(String, u64), RunSummary> = jobs
        .par_iter()
        .map(|(key, c)| execute_run(c, out).map(|r| (key.clone(), r.summary)))
        .collect::<Result<_, _>>()?;

    let rows: Vec<CompareRow> = aggregators
        .iter()
        .zip(&keys)
        .map(|((label, _), row)| {
            let runs: Vec<&RunSummary> = row.iter().map(|k| &results[k]).collect();
            let field = |i: usize| {
                let v: Vec<f64> = runs
                    .iter()
                    .map(|r| {
                        r.final_fairness
                            .as_ref()
                            .map_or(f64::NAN, |f| f.csv_fields()[i])
                    })
                    .collect();
                mean_std(&v)
            };
            let losses: Vec<f64> = runs
                .iter()
                .map(|r| r.final_mean_loss.unwrap_or(f64::NAN))
                .collect();
            CompareRow {
                aggregator: label.clone(),
                seeds: runs.len(),
                fairness: (0..FairnessReport::CSV_HEADER.len()).map(field).collect(),
                final_mean_loss: mean_std(&losses),
            }
        })
        .collect();

    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join("compare.csv");
    write_compare_csv(&rows, create(&path)?).map_err(csv_err(&path))?;
    Ok(rows)
}

pub fn cmd_compare(
    config_path: &Path,
    aggregators: &str,
    seeds: &str,
    out: &Path,
) -> Result<Vec<CompareRow>, CliError> {
    let base = load_config(config_path)?;
    let specs = aggregators
        .split(',')
        .filter(|a| !a.trim().is_empty())
        .map(|a| parse_aggregator(a, &base.aggregator).map(|s| (a.trim().to_string(), s)))
        .collect::<Result<Vec<_>, _>>()?;
    let seeds = parse_seeds(seeds)?;
    execute_compare(&base, &specs, &seeds, out)
}

pub fn cmd_export_data(config_path: &Path, out: &Path, seed: Option<u64>) -> Result<(), CliError> {
    let mut config = load_config(config_path)?;
    if let Some(seed) = seed {
        config.training.seed = seed;
    }
    let (data, indices) = config.build_partition()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    write_partition_csv(&data, &indices, create(out)?).map_err(|e| CliError::Federation(e.into()))
}

/// Prints one block per suite; returns true if all passed.
pub fn cmd_verify(seed: u64) -> bool {
    let reports = crate::verify::run_all(seed);
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed == 0 {
        println!("all {} suites passed", reports.len());
    } else {
        println!("{failed} of {} suites failed", reports.len());
    }
    failed == 0
}

/// Entry point; returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Run { config, out, seed } => cmd_run(&config, &out, seed).map(|r| {
            println!("{}", r.dir.display());
        }),
        Command::Compare {
            config,
            aggregators,
            seeds,
            out,
        } => cmd_compare(&config, &aggregators, &seeds, &out).map(|_| {
            println!("{}", out.join("compare.csv").display());
        }),
        Command::Verify { seed } => {
            return if cmd_verify(seed) {
                EXIT_OK
            } else {
                EXIT_VERIFY_FAILED
            };
        }
        Command::ExportData { config, out, seed } => cmd_export_data(&config, &out, seed),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

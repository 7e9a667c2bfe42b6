//! `sim` — drive the federated-learning simulator from the shell.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use fedcat_core::config::{apply_overrides, ExperimentConfig, Method};
use fedcat_core::data::{dirichlet_partition, load_mnist_idx, synth_dataset, PartitionCache,
    PartitionSpec, SynthSpec};
use fedcat_core::metrics::write_atomic;
use fedcat_core::runner::{run_experiment, run_suite};
use fedcat_core::theory::{bound_report, TheoryConstants};

#[derive(Parser)]
#[command(name = "sim", about = "Deterministic federated-learning simulator", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run(RunArgs),
    /// Run a methods x seeds comparison suite from a config template.
    Suite(SuiteArgs),
    /// Evaluate the convergence bound for a constants file.
    Bound(BoundArgs),
    /// Partition a dataset and write the pinned partition JSON.
    Partition(PartitionArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Path to the experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override config fields, e.g. --set rounds=50 --set synth.spread=0.3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for metrics.csv, summary.json and the checkpoint.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated method list, e.g. fedcat,fedavg
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// Comma-separated seed list, e.g. 1,2,3
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value = "out/suite")]
    out: PathBuf,
}

#[derive(Args)]
struct BoundArgs {
    /// JSON file with the bound constants (optionally `init_dist_sq`).
    #[arg(long)]
    constants: PathBuf,
    /// Largest aggregation count on the curve.
    #[arg(long, default_value_t = 10_000)]
    t_max: u64,
    /// Squared distance of the first iterate from the optimum.
    #[arg(long)]
    init_dist_sq: Option<f64>,
    /// Where to write the JSON report (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PartitionArgs {
    /// Dataset to partition: mnist or synth.
    #[arg(long)]
    dataset: String,
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    devices: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory holding the four raw MNIST IDX files.
    #[arg(long, default_value = "data/mnist")]
    mnist_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn sim_threads() -> anyhow::Result<usize> {
    match std::env::var("SIM_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .with_context(|| format!("SIM_THREADS must be an integer, got '{v}'")),
        Err(_) => Ok(0),
    }
}

fn load_config(path: &PathBuf, overrides: &[String]) -> anyhow::Result<ExperimentConfig> {
    let json = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let config = apply_overrides(&json, overrides)?;
    Ok(config)
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let config = load_config(&args.config, &args.set)?;
    let threads = sim_threads()?;
    let artifacts = run_experiment(&config, &args.out, threads)?;
    println!(
        "{}: final accuracy {:.4}, best {:.4}, bytes up {}, rows {}",
        artifacts.summary.method,
        artifacts.summary.final_accuracy,
        artifacts.summary.best_accuracy,
        artifacts.summary.total_bytes_up,
        artifacts.output.log.rows.len()
    );
    println!("metrics: {}", artifacts.csv_path.display());
    println!("summary: {}", artifacts.summary_path.display());
    Ok(())
}

fn cmd_suite(args: SuiteArgs) -> anyhow::Result<()> {
    if args.methods.is_empty() {
        bail!("--methods requires at least one method");
    }
    if args.seeds.is_empty() {
        bail!("--seeds requires at least one seed");
    }
    let template = load_config(&args.config, &args.set)?;
    let methods = args
        .methods
        .iter()
        .map(|m| Method::parse(m))
        .collect::<Result<Vec<_>, _>>()?;
    let threads = sim_threads()?;
    let report = run_suite(&template, &methods, &args.seeds, &args.out, threads)?;
    for m in &report.methods {
        println!(
            "{}: mean final accuracy {:.4} +/- {:.4} over {} seeds",
            m.method,
            m.mean_final_accuracy,
            m.std_final_accuracy,
            report.seeds.len()
        );
    }
    println!("report: {}", args.out.join("suite_report.json").display());
    Ok(())
}

fn cmd_bound(args: BoundArgs) -> anyhow::Result<()> {
    let json = std::fs::read_to_string(&args.constants)
        .with_context(|| format!("reading constants {}", args.constants.display()))?;
    let mut value: serde_json::Value = serde_json::from_str(&json)?;
    let init_dist_sq = args.init_dist_sq.or_else(|| {
        value
            .as_object_mut()
            .and_then(|o| o.remove("init_dist_sq"))
            .and_then(|v| v.as_f64())
    });
    let constants: TheoryConstants = serde_json::from_value(value)?;
    let report = bound_report(&constants, init_dist_sq.unwrap_or(1.0), args.t_max)?;
    let rendered = serde_json::to_string_pretty(&report)?;
    match args.out {
        Some(path) => {
            write_atomic(&path, rendered.as_bytes())?;
            println!("bound report: {}", path.display());
        }
        None => println!("{rendered}"),
    }
    Ok(())
}

fn cmd_partition(args: PartitionArgs) -> anyhow::Result<()> {
    let data = match args.dataset.as_str() {
        "mnist" => load_mnist_idx(
            &args.mnist_dir.join("train-images-idx3-ubyte"),
            &args.mnist_dir.join("train-labels-idx1-ubyte"),
        )?,
        "synth" => synth_dataset(
            &SynthSpec {
                num_classes: 10,
                samples_per_class: 100,
                dim: 32,
                spread: 0.1,
            },
            args.seed,
        ),
        other => bail!("unknown dataset '{other}' (expected mnist or synth)"),
    };
    let spec = PartitionSpec {
        num_devices: args.devices,
        alpha: args.alpha,
        seed: args.seed,
    };
    let parts = dirichlet_partition(&data, &spec)?;
    let cache = PartitionCache::from_parts(&spec, &parts);
    cache.save(&args.out)?;
    println!(
        "partitioned {} samples across {} devices (hash {})",
        data.len(),
        args.devices,
        cache.hash()
    );
    println!("partition: {}", args.out.display());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Suite(args) => cmd_suite(args),
        Command::Bound(args) => cmd_bound(args),
        Command::Partition(args) => cmd_partition(args),
    }
}

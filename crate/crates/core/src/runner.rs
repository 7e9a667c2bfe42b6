//! Experiment orchestration: dataset resolution, seeding discipline,
//! method dispatch, and file emission.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DatasetKind, ExperimentConfig, Method};
use crate::data::{
    dirichlet_partition, load_mnist_idx, synth_train_test, Dataset, DeviceDataset,
    PartitionCache, PartitionSpec, SynthSpec,
};
use crate::error::{Result, SimError};
use crate::metrics::{trace_to_csv, write_atomic, MetricsLog};
use crate::nn::{init_params, ModelSpec, TrainOptions};
use crate::params::ParamVector;
use crate::rng::{stream, StreamKind};
use crate::selection::TraceRow;

/// Everything a protocol run produces in memory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: MetricsLog,
    pub final_model: ParamVector,
    pub trace: Vec<TraceRow>,
}

/// A validated config with its data, partition and initial model resolved.
/// All methods run from the same resolved state for a given seed, so
/// protocol differences are the only differences.
#[derive(Debug, Clone)]
pub struct ResolvedExperiment {
    pub config: ExperimentConfig,
    pub spec: ModelSpec,
    pub train: Dataset,
    pub eval: Dataset,
    pub parts: Vec<DeviceDataset>,
    pub init_model: ParamVector,
    pub partition_hash: String,
    pub init_hash: String,
}

fn hash_model(model: &ParamVector) -> String {
    let mut hasher = Sha256::new();
    for v in model.values() {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

impl ResolvedExperiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.model_spec();

        let (train, eval) = match config.dataset {
            DatasetKind::Synth => {
                let s = &config.synth;
                let synth_spec = SynthSpec {
                    num_classes: s.num_classes,
                    samples_per_class: s.train_per_class,
                    dim: s.dim,
                    spread: s.spread,
                };
                synth_train_test(&synth_spec, s.test_per_class, config.seed)
            }
            DatasetKind::Mnist => {
                let dir = Path::new(&config.mnist_dir);
                let train = load_mnist_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                )?;
                let eval = load_mnist_idx(
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                )?;
                (train, eval)
            }
        };

        if spec.input_dim != train.dim() {
            return Err(SimError::config(
                "model.input_dim",
                format!("{} does not match dataset dim {}", spec.input_dim, train.dim()),
            ));
        }
        if spec.num_classes != train.num_classes() {
            return Err(SimError::config(
                "model.num_classes",
                format!(
                    "{} does not match dataset classes {}",
                    spec.num_classes,
                    train.num_classes()
                ),
            ));
        }

        let partition_spec = PartitionSpec {
            num_devices: config.num_devices,
            alpha: config.alpha,
            seed: config.seed,
        };
        let parts = dirichlet_partition(&train, &partition_spec)?;
        let partition_hash = PartitionCache::from_parts(&partition_spec, &parts).hash();

        let init_model = init_params(&spec, &mut stream(config.seed, StreamKind::Init, 0, 0));
        let init_hash = hash_model(&init_model);

        Ok(ResolvedExperiment {
            config,
            spec,
            train,
            eval,
            parts,
            init_model,
            partition_hash,
            init_hash,
        })
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.config.local_epochs,
            batch_size: self.config.batch_size,
            learning_rate: self.config.learning_rate,
            momentum: self.config.momentum,
        }
    }

    /// The `# ...` line prefixed to the metrics CSV: resolved config plus
    /// input hashes, for auditing which inputs produced the rows.
    pub fn header_json(&self) -> String {
        let header = serde_json::json!({
            "config": self.config,
            "devices_per_round": self.config.devices_per_round(),
            "param_count": self.spec.param_count(),
            "partition_hash": self.partition_hash,
            "init_hash": self.init_hash,
        });
        header.to_string()
    }

    pub fn run(&self) -> Result<RunOutput> {
        match self.config.method {
            Method::Fedcat | Method::FedcatGc | Method::FedcatDc => {
                crate::engine::run_fedcat(self)
            }
            Method::Fedavg => crate::baselines::run_fedavg(self),
            Method::Fedprox => {
                let mu = self.config.prox_mu.ok_or_else(|| {
                    SimError::config("prox_mu", "fedprox requires prox_mu to be set")
                })?;
                crate::baselines::run_fedprox(self, mu)
            }
            Method::Scaffold => crate::baselines::run_scaffold(self),
        }
    }
}

/// JSON summary written next to the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub rounds: usize,
    pub param_count: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub accuracy_threshold: Option<f64>,
    pub rounds_to_threshold: Option<usize>,
    pub total_bytes_up: u64,
    pub total_bytes_down: u64,
    pub partition_hash: String,
    pub init_hash: String,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub csv_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: RunSummary,
    pub output: RunOutput,
}

fn make_summary(exp: &ResolvedExperiment, output: &RunOutput) -> RunSummary {
    let threshold = exp.config.accuracy_threshold;
    RunSummary {
        method: exp.config.method.name().to_string(),
        seed: exp.config.seed,
        rounds: exp.config.rounds,
        param_count: exp.spec.param_count(),
        final_accuracy: output.log.final_accuracy(),
        best_accuracy: output.log.best_accuracy(),
        accuracy_threshold: threshold,
        rounds_to_threshold: threshold.and_then(|t| output.log.rounds_to_threshold(t)),
        total_bytes_up: output.log.total_bytes().0,
        total_bytes_down: output.log.total_bytes().1,
        partition_hash: exp.partition_hash.clone(),
        init_hash: exp.init_hash.clone(),
    }
}

/// Final model checkpoint: raw little-endian f64 values plus a JSON header
/// describing the packing.
pub fn save_checkpoint(dir: &Path, model: &ParamVector, spec: &ModelSpec) -> Result<()> {
    let mut bytes = Vec::with_capacity(model.len() * 8);
    for v in model.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(&dir.join("model.bin"), &bytes)?;
    let header = serde_json::json!({
        "param_count": model.len(),
        "layout": model.layout(),
        "model": spec,
        "encoding": "f64-le",
    });
    write_atomic(
        &dir.join("model.json"),
        serde_json::to_string_pretty(&header)?.as_bytes(),
    )
}

fn run_prepared(exp: &ResolvedExperiment, out_dir: &Path) -> Result<RunArtifacts> {
    let output = exp.run()?;
    std::fs::create_dir_all(out_dir)?;

    let csv_path = out_dir.join("metrics.csv");
    write_atomic(&csv_path, output.log.to_csv().as_bytes())?;

    let summary = make_summary(exp, &output);
    let summary_path = out_dir.join("summary.json");
    write_atomic(
        &summary_path,
        serde_json::to_string_pretty(&summary)?.as_bytes(),
    )?;

    save_checkpoint(out_dir, &output.final_model, &exp.spec)?;

    if exp.config.selection_trace {
        write_atomic(
            &out_dir.join("selection_trace.csv"),
            trace_to_csv(&output.trace).as_bytes(),
        )?;
    }

    Ok(RunArtifacts {
        csv_path,
        summary_path,
        summary,
        output,
    })
}

fn with_thread_pool<T>(threads: usize, body: impl FnOnce() -> Result<T> + Send) -> Result<T>
where
    T: Send,
{
    if threads == 0 {
        body()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| SimError::config("threads", e.to_string()))?;
        pool.install(body)
    }
}

/// Run one experiment and write `metrics.csv`, `summary.json` and the model
/// checkpoint under `out_dir`. `threads` caps the worker pool (0 = auto).
pub fn run_experiment(
    config: &ExperimentConfig,
    out_dir: &Path,
    threads: usize,
) -> Result<RunArtifacts> {
    with_thread_pool(threads, || {
        let exp = ResolvedExperiment::prepare(config.clone())?;
        run_prepared(&exp, out_dir)
    })
}

/// Per-method aggregate over the suite's seeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_final_accuracy: f64,
    pub std_final_accuracy: f64,
    pub mean_best_accuracy: f64,
    pub runs: Vec<RunSummary>,
}

/// Cross-product comparison report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub seeds: Vec<u64>,
    /// Partition hash per seed; identical for every method by construction.
    pub partition_hashes: Vec<String>,
    pub methods: Vec<MethodSummary>,
}

/// Run `methods x seeds`, sharing one partition per seed, and emit per-run
/// artifacts plus `merged.csv` and `suite_report.json` under `out_dir`.
pub fn run_suite(
    template: &ExperimentConfig,
    methods: &[Method],
    seeds: &[u64],
    out_dir: &Path,
    threads: usize,
) -> Result<SuiteReport> {
    if methods.is_empty() || seeds.is_empty() {
        return Err(SimError::config("suite", "needs at least one method and seed"));
    }

    let mut merged = String::from("seed,round,method,test_accuracy,train_loss,bytes_up,bytes_down,wall_ms\n");
    let mut partition_hashes: Vec<String> = Vec::new();
    let mut per_method: Vec<(Method, Vec<RunSummary>)> =
        methods.iter().map(|&m| (m, Vec::new())).collect();

    for &seed in seeds {
        let mut seed_hash: Option<String> = None;
        for (method, summaries) in per_method.iter_mut() {
            let mut config = template.clone();
            config.method = *method;
            config.seed = seed;
            let run_dir = out_dir.join(format!("{}_seed{}", method.name(), seed));
            let artifacts = run_experiment(&config, &run_dir, threads)?;
            match &seed_hash {
                None => seed_hash = Some(artifacts.summary.partition_hash.clone()),
                Some(h) => {
                    assert_eq!(
                        h, &artifacts.summary.partition_hash,
                        "methods diverged on the shared partition"
                    );
                }
            }
            for row in &artifacts.output.log.rows {
                merged.push_str(&format!(
                    "{},{},{},{},{},{},{},{}\n",
                    seed,
                    row.round,
                    row.method,
                    row.test_accuracy,
                    row.train_loss,
                    row.bytes_up,
                    row.bytes_down,
                    row.wall_ms
                ));
            }
            summaries.push(artifacts.summary);
        }
        partition_hashes.push(seed_hash.expect("at least one method ran"));
    }

    let methods_report: Vec<MethodSummary> = per_method
        .into_iter()
        .map(|(method, runs)| {
            let finals: Vec<f64> = runs.iter().map(|r| r.final_accuracy).collect();
            let mean = finals.iter().sum::<f64>() / finals.len() as f64;
            let var = finals.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>()
                / finals.len() as f64;
            let mean_best = runs.iter().map(|r| r.best_accuracy).sum::<f64>() / runs.len() as f64;
            MethodSummary {
                method: method.name().to_string(),
                mean_final_accuracy: mean,
                std_final_accuracy: var.sqrt(),
                mean_best_accuracy: mean_best,
                runs,
            }
        })
        .collect();

    let report = SuiteReport {
        seeds: seeds.to_vec(),
        partition_hashes,
        methods: methods_report,
    };

    std::fs::create_dir_all(out_dir)?;
    write_atomic(&out_dir.join("merged.csv"), merged.as_bytes())?;
    write_atomic(
        &out_dir.join("suite_report.json"),
        serde_json::to_string_pretty(&report)?.as_bytes(),
    )?;
    Ok(report)
}

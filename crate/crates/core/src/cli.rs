//! `regionu` command-line interface.
//!
//! Every subcommand resolves a [`RunConfig`], does its work, writes its
//! outputs into the output directory and finishes with `manifest.json`, which
//! records the artifact version, the resolved config, its hash and the SHA-256
//! of every input and output file. Manifests carry no timestamps or absolute
//! paths, so repeating a run reproduces them byte for byte.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    accuracy_vs_iou, stage_iterations, u_histograms, write_histograms_csv, UncertaintyHistogram,
};
use crate::config::{Overrides, RunConfig};
use crate::error::{Error, Result};
use crate::noise_sim::{simulate, Dataset};
use crate::records::{read_dataset, write_dataset, DATASET_FILES};
use crate::toy_trainer::{
    compare, evaluate, prepare, regression_error, train, write_trace_csv, CompareReport, Evaluation,
};

pub const ARTIFACT: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

/// Region-uncertainty simulator, analysis and toy trainer.
///
/// Config values resolve as: defaults < --config file < --override pairs <
/// --seed / --out.
#[derive(Debug, Parser)]
#[command(name = "regionu", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scenes, pseudo labels, proposals and assignments.
    Simulate(CommonArgs),
    /// Accuracy-vs-overlap curve and uncertainty histograms of a dataset.
    Analyze(DatasetArgs),
    /// Train the toy classifier once and evaluate it on held-out scenes.
    Train(DatasetArgs),
    /// Paired-seed grid of {hard, soft} targets x {softmax-KL, sigmoid-focal}.
    Compare(DatasetArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory (overrides the config file).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dotted config key set to a TOML value, e.g. train.learning_rate=0.05.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Directory written by `regionu simulate`.
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// Failure split by exit code: 1 for usage or configuration, 2 at runtime.
#[derive(Debug)]
pub enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }

    pub fn error(&self) -> &Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    /// Input file name to SHA-256 (dataset files for analyze/train/compare).
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn hash_files(dir: &Path, names: &[&str]) -> Result<BTreeMap<String, String>> {
    names
        .iter()
        .map(|n| Ok((n.to_string(), sha256_file(&dir.join(n))?)))
        .collect()
}

fn resolve(args: &CommonArgs) -> std::result::Result<RunConfig, Failure> {
    let overrides = Overrides {
        pairs: args.overrides.clone(),
        seed: args.seed,
        output_dir: args.out.clone(),
    };
    RunConfig::load(args.config.as_deref(), &overrides).map_err(Failure::Usage)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn finish(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    inputs: BTreeMap<String, String>,
    outputs: &[&str],
) -> Result<Manifest> {
    let manifest = Manifest {
        artifact: ARTIFACT.into(),
        version: VERSION.into(),
        command: command.into(),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        config: RunConfig {
            output_dir: None,
            ..cfg.clone()
        },
        inputs,
        outputs: hash_files(dir, outputs)?,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Loads a dataset and checks it was built with the configured threshold.
fn load_dataset(
    dir: &Path,
    cfg: &RunConfig,
) -> std::result::Result<(Dataset, BTreeMap<String, String>), Failure> {
    let dataset = read_dataset(dir).map_err(Failure::Runtime)?;
    if dataset.delta_b != cfg.uncertainty.delta_b {
        return Err(Failure::Usage(Error::InvalidConfig(format!(
            "uncertainty.delta_b = {} but the dataset was assigned with delta_b = {}",
            cfg.uncertainty.delta_b, dataset.delta_b
        ))));
    }
    let inputs = hash_files(dir, &DATASET_FILES).map_err(Failure::Runtime)?;
    Ok((dataset, inputs))
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Manifest> {
    let dataset = simulate(&cfg.simulation, cfg.uncertainty.delta_b, cfg.seed)?;
    let dir = prepare_out(cfg)?;
    write_dataset(&dataset, &dir)?;
    finish(&dir, "simulate", cfg, BTreeMap::new(), &DATASET_FILES)
}

/// Per-stage summary of the uncertainty histograms.
fn write_u_summary(path: &Path, hists: &[UncertaintyHistogram]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record([
        "stage",
        "iteration",
        "clean_n",
        "clean_mean",
        "clean_se",
        "noisy_n",
        "noisy_mean",
        "noisy_se",
        "population_mean",
        "separation_se",
    ])?;
    for h in hists {
        w.write_record([
            h.stage.name().to_string(),
            h.iteration.to_string(),
            h.clean.count.to_string(),
            h.clean.mean.to_string(),
            h.clean.std_error.to_string(),
            h.noisy.count.to_string(),
            h.noisy.mean.to_string(),
            h.noisy.std_error.to_string(),
            h.population_mean().to_string(),
            h.separation().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_analyze(
    dataset: &Dataset,
    cfg: &RunConfig,
    inputs: BTreeMap<String, String>,
) -> Result<Manifest> {
    let pairs = || dataset.proposals().map(|p| (&p.assignment, p.true_label()));
    let curve = accuracy_vs_iou(pairs(), cfg.analysis.iou_bins)?;
    let ucfg = cfg.uncertainty_config();
    let stages = stage_iterations(ucfg.total_iterations, cfg.analysis.stages);
    let hists = u_histograms(pairs(), &ucfg, &stages, cfg.analysis.u_bins)?;

    let dir = prepare_out(cfg)?;
    let curve_path = dir.join("accuracy_curve.csv");
    curve.write_csv(create(&curve_path)?)?;
    write_histograms_csv(&hists, create(&dir.join("u_histograms.csv"))?)?;
    write_u_summary(&dir.join("u_summary.csv"), &hists)?;
    finish(
        &dir,
        "analyze",
        cfg,
        inputs,
        &["accuracy_curve.csv", "u_histograms.csv", "u_summary.csv"],
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_samples: usize,
    pub evaluation: Evaluation,
    /// Mean L1 of predicted box deltas to the deltas of the true object.
    pub regression_l1: Option<f64>,
}

pub fn cmd_train(
    dataset: &Dataset,
    cfg: &RunConfig,
    inputs: BTreeMap<String, String>,
) -> Result<Manifest> {
    let tcfg = cfg.train_config();
    let data = prepare(dataset, &tcfg)?;
    let outcome = train(&data.train, data.num_classes, &tcfg)?;
    let report = TrainReport {
        train_samples: data.train.len(),
        evaluation: evaluate(&outcome.model, &data.heldout)?,
        regression_l1: regression_error(&outcome.model, &data.heldout),
    };
    let dir = prepare_out(cfg)?;
    write_trace_csv(&outcome.trace, create(&dir.join("metrics.csv"))?)?;
    write_json(&dir.join("model.json"), &outcome.model)?;
    write_json(&dir.join("report.json"), &report)?;
    finish(
        &dir,
        "train",
        cfg,
        inputs,
        &["metrics.csv", "model.json", "report.json"],
    )
}

fn write_compare_csv(path: &Path, report: &CompareReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["targets", "head", "seeds", "mean", "std"])?;
    for c in &report.cells {
        w.write_record([
            c.targets.name().to_string(),
            c.head.name().to_string(),
            c.accuracies.len().to_string(),
            c.mean.to_string(),
            c.std.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn cmd_compare(
    dataset: &Dataset,
    cfg: &RunConfig,
    inputs: BTreeMap<String, String>,
) -> Result<Manifest> {
    let report = compare(dataset, &cfg.train_config(), cfg.compare.seeds)?;
    let dir = prepare_out(cfg)?;
    write_json(&dir.join("compare.json"), &report)?;
    write_compare_csv(&dir.join("compare.csv"), &report)?;
    finish(
        &dir,
        "compare",
        cfg,
        inputs,
        &["compare.json", "compare.csv"],
    )
}

/// Runs a parsed command line.
pub fn execute(cli: Cli) -> std::result::Result<Manifest, Failure> {
    match cli.command {
        Command::Simulate(args) => {
            let cfg = resolve(&args)?;
            cmd_simulate(&cfg).map_err(Failure::Runtime)
        }
        Command::Analyze(args) => with_dataset(&args, cmd_analyze),
        Command::Train(args) => with_dataset(&args, cmd_train),
        Command::Compare(args) => with_dataset(&args, cmd_compare),
    }
}

type DatasetCommand = fn(&Dataset, &RunConfig, BTreeMap<String, String>) -> Result<Manifest>;

fn with_dataset(args: &DatasetArgs, run: DatasetCommand) -> std::result::Result<Manifest, Failure> {
    let cfg = resolve(&args.common)?;
    let (dataset, inputs) = load_dataset(&args.dataset, &cfg)?;
    run(&dataset, &cfg, inputs).map_err(Failure::Runtime)
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(manifest) => {
            eprintln!(
                "{} done (config {})",
                manifest.command,
                &manifest.config_hash[..12]
            );
            0
        }
        Err(f) => {
            eprintln!("error: {}", f.error());
            f.exit_code()
        }
    }
}

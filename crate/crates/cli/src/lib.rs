//! The `gaf` subcommands. Each one writes its outputs atomically and leaves
//! a [`RunManifest`] beside them.
//!
//! Exit codes: 0 on success, 2 for usage or input errors, 3 when training
//! hits a non-finite value.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gaf_core::ablation::{ablate, AblationTable};
use gaf_core::checkpoint::write_atomic;
use gaf_core::detector::{EvalReport, DEFAULT_IOU_THRESHOLDS, DEFAULT_NMS_IOU, DEFAULT_SCORE_THRESH};
use gaf_core::exec::Exec;
use gaf_core::model::GafModels;
use gaf_core::synth::{generate_with, sha256_hex, to_jsonl, DatasetSpec};
use gaf_core::train::{load_data, parse_history, run, EpochRecord, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "GAF_SEED";

#[derive(Debug, Parser)]
#[command(name = "gaf", version, about = "Generative attention features for temporal action detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset split into train.jsonl and eval.jsonl.
    Generate {
        /// Dataset spec JSON; the default spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model with the alternating schedule.
    Train(ConfigArgs),
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated IoU thresholds.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_IOU_THRESHOLDS)]
        thresholds: Vec<f64>,
        /// Report path; next to the checkpoint when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the three loss variants and tabulate their mAP.
    Ablate(ConfigArgs),
    /// Turn a metrics history into CSV series.
    ExportPlots {
        #[arg(long)]
        history: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ConfigArgs {
    /// Training config JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named preset: "desk" or "finetune".
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Input(e.to_string())
        }
    }
}

fn input<E: std::fmt::Display>(context: impl std::fmt::Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Input(format!("{context}: {e}"))
}

/// Provenance of one command invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// SHA-256 of every dataset file read or written, keyed by path.
    pub datasets: BTreeMap<String, String>,
    pub tool_version: String,
    pub duration_secs: f64,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    fn new(command: &str, config: &impl Serialize, seed: Option<u64>, started: Instant) -> Self {
        Self {
            command: command.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            seed,
            datasets: BTreeMap::new(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            duration_secs: started.elapsed().as_secs_f64(),
            outputs: Vec::new(),
        }
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes()).map_err(input(path.display()))
    }
}

/// What a command produced: its manifest, where that was written, and a
/// summary for stdout.
#[derive(Debug)]
pub struct Outcome {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
    pub stdout: String,
}

/// `GAF_SEED`, if set.
pub fn seed_override() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|e| CliError::Input(format!("{SEED_ENV}={v:?}: {e}"))),
        Err(_) => Ok(None),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(input(path.display()))?;
    serde_json::from_str(&text).map_err(input(path.display()))
}

/// Loads a config file or preset and applies `GAF_SEED`.
pub fn load_config(args: &ConfigArgs) -> Result<TrainConfig, CliError> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => read_json::<TrainConfig>(path)?,
        (None, Some(name)) => {
            TrainConfig::preset(name).ok_or_else(|| CliError::Input(format!("unknown preset {name:?}")))?
        }
        (None, None) => return Err(CliError::Input("either --config or --preset is required".into())),
    };
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<Outcome, CliError> {
    match cli.command {
        Command::Generate { spec, out } => {
            let mut spec = match spec {
                Some(p) => read_json::<DatasetSpec>(&p)?,
                None => DatasetSpec::default(),
            };
            if let Some(seed) = seed_override()? {
                spec.seed = seed;
            }
            cmd_generate(&spec, &out)
        }
        Command::Train(args) => cmd_train(&load_config(&args)?),
        Command::Eval {
            ckpt,
            data,
            thresholds,
            out,
        } => {
            let out = out.unwrap_or_else(|| ckpt.with_extension("eval.json"));
            cmd_eval(&ckpt, &data, &thresholds, &out).map(|(o, _)| o)
        }
        Command::Ablate(args) => cmd_ablate(&load_config(&args)?).map(|(o, _)| o),
        Command::ExportPlots { history, out_dir } => cmd_export_plots(&history, &out_dir),
    }
}

/// Writes `train.jsonl` and `eval.jsonl` (the trailing `eval_fraction` of
/// the sequences) into `out`.
pub fn cmd_generate(spec: &DatasetSpec, out: &Path) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let seqs = generate_with(spec, Exec::default()).map_err(input("dataset spec"))?;
    let (train, eval) = seqs.split_at(spec.num_train());
    let mut datasets = BTreeMap::new();
    let mut outputs = Vec::new();
    for (name, part) in [("train.jsonl", train), ("eval.jsonl", eval)] {
        let path = out.join(name);
        let bytes = to_jsonl(part);
        write_atomic(&path, bytes.as_bytes()).map_err(input(path.display()))?;
        datasets.insert(path.display().to_string(), sha256_hex(bytes.as_bytes()));
        outputs.push(path);
    }
    let manifest_path = out.join("manifest.json");
    let manifest = RunManifest {
        datasets,
        outputs,
        ..RunManifest::new("generate", spec, Some(spec.seed), started)
    };
    manifest.write(&manifest_path)?;
    Ok(Outcome {
        stdout: format!("wrote {} train and {} eval sequences to {}", train.len(), eval.len(), out.display()),
        manifest,
        manifest_path,
    })
}

pub fn cmd_train(cfg: &TrainConfig) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let out = run(cfg, Exec::default())?;
    let mut datasets = BTreeMap::from([(cfg.train_data.display().to_string(), out.train_checksum.clone())]);
    if let (Some(path), Some(sum)) = (&cfg.eval_data, &out.eval_checksum) {
        datasets.insert(path.display().to_string(), sum.clone());
    }
    let last = out.history.last().expect("at least one epoch");
    let manifest_path = cfg.checkpoint.with_extension("manifest.json");
    let manifest = RunManifest {
        datasets,
        outputs: vec![out.checkpoint.clone(), out.metrics.clone()],
        ..RunManifest::new("train", cfg, Some(cfg.seed), started)
    };
    manifest.write(&manifest_path)?;
    Ok(Outcome {
        stdout: format!(
            "trained {} epochs; attention fg {:.3} bg {:.3}; checkpoint {}",
            out.history.len(),
            last.lambda_fg_mean,
            last.lambda_bg_mean,
            out.checkpoint.display()
        ),
        manifest,
        manifest_path,
    })
}

#[derive(Serialize)]
struct EvalConfig<'a> {
    ckpt: &'a Path,
    data: &'a Path,
    thresholds: &'a [f64],
    score_thresh: f64,
    nms_iou: f64,
}

pub fn cmd_eval(ckpt: &Path, data: &Path, thresholds: &[f64], out: &Path) -> Result<(Outcome, EvalReport), CliError> {
    let started = Instant::now();
    let models = GafModels::load(ckpt).map_err(input(ckpt.display()))?;
    let loaded = load_data(data)?;
    let report = models
        .evaluate(&loaded.seqs, thresholds, DEFAULT_SCORE_THRESH, DEFAULT_NMS_IOU, Exec::default())
        .map_err(input("evaluation"))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_atomic(out, json.as_bytes()).map_err(input(out.display()))?;

    let config = EvalConfig {
        ckpt,
        data,
        thresholds,
        score_thresh: DEFAULT_SCORE_THRESH,
        nms_iou: DEFAULT_NMS_IOU,
    };
    let manifest_path = out.with_extension("manifest.json");
    let manifest = RunManifest {
        datasets: BTreeMap::from([(data.display().to_string(), loaded.checksum)]),
        outputs: vec![out.to_path_buf()],
        ..RunManifest::new("eval", &config, None, started)
    };
    manifest.write(&manifest_path)?;
    Ok((
        Outcome {
            stdout: json,
            manifest,
            manifest_path,
        },
        report,
    ))
}

/// Trains every variant on the config's data and writes the table as JSON
/// and CSV next to the configured checkpoint.
pub fn cmd_ablate(cfg: &TrainConfig) -> Result<(Outcome, AblationTable), CliError> {
    let started = Instant::now();
    let train = load_data(&cfg.train_data)?;
    let eval = match &cfg.eval_data {
        Some(p) => Some(load_data(p)?),
        None => None,
    };
    let eval_seqs = eval.as_ref().map_or(&train.seqs, |e| &e.seqs);
    let num_classes = train
        .seqs
        .iter()
        .chain(eval_seqs)
        .flat_map(|s| &s.intervals)
        .map(|iv| iv.class_id)
        .max()
        .unwrap_or(1);
    let table = ablate(cfg, &train.seqs, eval_seqs, num_classes, Exec::default())?;

    let json_path = cfg.checkpoint.with_extension("ablation.json");
    let csv_path = cfg.checkpoint.with_extension("ablation.csv");
    let json = serde_json::to_string_pretty(&table).expect("table serializes");
    write_atomic(&json_path, json.as_bytes()).map_err(input(json_path.display()))?;
    write_atomic(&csv_path, table.to_csv().as_bytes()).map_err(input(csv_path.display()))?;

    let mut datasets = BTreeMap::from([(cfg.train_data.display().to_string(), train.checksum)]);
    if let (Some(p), Some(e)) = (&cfg.eval_data, eval) {
        datasets.insert(p.display().to_string(), e.checksum);
    }
    let manifest_path = cfg.checkpoint.with_extension("ablation.manifest.json");
    let manifest = RunManifest {
        datasets,
        outputs: vec![json_path, csv_path],
        ..RunManifest::new("ablate", cfg, Some(cfg.seed), started)
    };
    manifest.write(&manifest_path)?;
    Ok((
        Outcome {
            stdout: table.to_csv(),
            manifest,
            manifest_path,
        },
        table,
    ))
}

pub const LOSS_HEADER: [&str; 3] = ["epoch", "stage", "loss"];
pub const LAMBDA_HEADER: [&str; 4] = ["epoch", "lambda_fg_mean", "lambda_bg_mean", "separation"];
pub const MAP_HEADER: [&str; 2] = ["epoch", "avg_map"];

/// Renders one CSV per series. Every epoch gets a row in every file; epochs
/// without an mAP evaluation leave that cell empty. Floats use the
/// shortest representation that parses back to the same value.
pub fn history_csvs(history: &[EpochRecord]) -> Vec<(&'static str, String)> {
    fn render<const N: usize>(header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).expect("in-memory write");
        for r in rows {
            w.write_record(&r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
    }
    let stage = |r: &EpochRecord| serde_json::to_value(r.stage).expect("stage serializes").as_str().unwrap().to_string();
    vec![
        (
            "loss.csv",
            render(LOSS_HEADER, history.iter().map(|r| [r.epoch.to_string(), stage(r), r.loss.to_string()])),
        ),
        (
            "lambda.csv",
            render(
                LAMBDA_HEADER,
                history.iter().map(|r| {
                    [
                        r.epoch.to_string(),
                        r.lambda_fg_mean.to_string(),
                        r.lambda_bg_mean.to_string(),
                        (r.lambda_fg_mean - r.lambda_bg_mean).to_string(),
                    ]
                }),
            ),
        ),
        (
            "map.csv",
            render(
                MAP_HEADER,
                history
                    .iter()
                    .map(|r| [r.epoch.to_string(), r.map.map(|m| m.to_string()).unwrap_or_default()]),
            ),
        ),
    ]
}

pub fn cmd_export_plots(history: &Path, out_dir: &Path) -> Result<Outcome, CliError> {
    let started = Instant::now();
    let text = fs::read_to_string(history).map_err(input(history.display()))?;
    let records = parse_history(&text)
        .map_err(|(line, msg)| CliError::Input(format!("{} line {line}: {msg}", history.display())))?;
    let mut outputs = Vec::new();
    for (name, body) in history_csvs(&records) {
        let path = out_dir.join(name);
        write_atomic(&path, body.as_bytes()).map_err(input(path.display()))?;
        outputs.push(path);
    }
    let manifest_path = out_dir.join("manifest.json");
    let config = BTreeMap::from([("history", history), ("out_dir", out_dir)]);
    let manifest = RunManifest {
        outputs,
        ..RunManifest::new("export-plots", &config, None, started)
    };
    manifest.write(&manifest_path)?;
    Ok(Outcome {
        stdout: format!("wrote {} series for {} epochs to {}", 3, records.len(), out_dir.display()),
        manifest,
        manifest_path,
    })
}

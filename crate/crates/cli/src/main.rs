use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use msunet::data::{generate_synthetic, Dataset, Split, SynthConfig};
use msunet::edgelabel::{batch_generate, DEFAULT_THRESHOLD};
use msunet::figures::{overlay, save_png};
use msunet::metrics::write_report;
use msunet::network::Structure;
use msunet::train::{
    evaluate_checkpoint, finetune_denoise, resume, sweep, train_base, EvalOptions, FinetuneConfig, Precision, RunControl,
    SweepKind, TrainConfig, DETERMINISTIC_ENV,
};

mod provenance;

/// Multi-scale nested windowed-attention segmentation: data generation,
/// training, denoising fine-tune, evaluation and ablation sweeps.
///
/// Set MSUNET_DETERMINISTIC=1 to force 64-bit arithmetic.
#[derive(Parser, Debug)]
#[command(name = "msunet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic dataset
    GenerateData(GenerateArgs),
    /// Derive edge ground truth from label maps
    MakeEdgeLabels(EdgeArgs),
    /// Train the segmentation network
    Train(TrainArgs),
    /// Attach and train the denoising front-end on a trained checkpoint
    FinetuneDenoise(FinetuneArgs),
    /// Score a checkpoint on one split
    Evaluate(EvalArgs),
    /// Train and evaluate once per grid value
    Sweep(SweepArgs),
    /// Input | ground truth | prediction PNGs per case
    RenderOverlays(OverlayArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Dataset root to create
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training cases; validation and test get a fifth each unless set
    #[arg(long, default_value_t = 200)]
    cases: usize,
    #[arg(long)]
    val_cases: Option<usize>,
    #[arg(long)]
    test_cases: Option<usize>,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Including background
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Standard deviation of the additive noise
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

#[derive(Args, Debug)]
struct EdgeArgs {
    /// Dataset root or a flat directory of label files
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Foreground class count; read from the manifest when omitted
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args, Debug)]
struct TrainOverrides {
    /// JSON file with any subset of the training configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// NONE, STRUCTURE2, STRUCTURE1 or STANDARD
    #[arg(long)]
    structure: Option<String>,
    #[arg(long)]
    edge_weight: Option<f64>,
    #[arg(long)]
    edge_start: Option<usize>,
    #[arg(long)]
    data_fraction: Option<f64>,
    #[arg(long, value_parser = ["f32", "f64"])]
    precision: Option<String>,
    /// Start from the full-scale recipe (224px, 9 classes) instead of the toy one
    #[arg(long)]
    full: bool,
}

impl TrainOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = if self.full { TrainConfig::full() } else { TrainConfig::toy() };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let mut base = serde_json::to_value(&cfg)?;
            merge(&mut base, serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?);
            cfg = serde_json::from_value(base).with_context(|| format!("invalid configuration in {}", path.display()))?;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = &self.structure {
            cfg.model.structure = Structure::parse(v)?;
        }
        if let Some(v) = self.edge_weight {
            cfg.loss.w_edge = v;
        }
        if let Some(v) = self.edge_start {
            cfg.loss.edge_start_epoch = v;
        }
        if let Some(v) = self.data_fraction {
            cfg.data_fraction = v;
        }
        if let Some(v) = &self.precision {
            cfg.precision = if v == "f64" { Precision::F64 } else { Precision::F32 };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Recursive object merge; `patch` wins.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Continue from a last.ckpt instead of starting fresh
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Save and stop after this many optimizer steps
    #[arg(long)]
    stop_after_step: Option<usize>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// Base-phase checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with any subset of the fine-tune configuration
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report this percentile of boundary distances instead of the exact Hausdorff distance
    #[arg(long)]
    percentile: Option<f64>,
    /// Bypass the denoising front-end of a fine-tuned checkpoint
    #[arg(long)]
    no_denoise: bool,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// edge_weight, edge_epoch, structure or data_fraction
    #[arg(long)]
    kind: String,
    /// Comma-separated grid values, e.g. 1,1/2,1/4
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args, Debug)]
struct OverlayArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Render at most this many cases
    #[arg(long)]
    limit: Option<usize>,
}

fn finish(out: &Path, command: &str, config: Value, inputs: &[&Path], result: Value) -> Result<Value> {
    provenance::write_run_record(out, command, config, inputs)?;
    Ok(result)
}

fn run(cli: Cli) -> Result<Value> {
    match cli.command {
        Command::GenerateData(a) => {
            let mut cfg = SynthConfig::new(a.seed, a.cases, a.size, a.classes, a.noise);
            cfg.val_cases = a.val_cases.unwrap_or(cfg.val_cases);
            cfg.test_cases = a.test_cases.unwrap_or(cfg.test_cases);
            let manifest = generate_synthetic(&cfg, &a.out)?;
            finish(&a.out, "generate-data", serde_json::to_value(&cfg)?, &[], serde_json::to_value(manifest)?)
        }
        Command::MakeEdgeLabels(a) => {
            let classes = match a.classes {
                Some(c) => c,
                None => {
                    let ds = Dataset::open(&a.input).context("--classes is required when the input has no manifest.json")?;
                    ds.manifest.num_classes - 1
                }
            };
            let files = batch_generate(&a.input, &a.out, classes, a.threshold)?;
            let cfg = json!({ "classes": classes, "threshold": a.threshold });
            finish(&a.out, "make-edge-labels", cfg, &[&a.input], json!({ "files": files }))
        }
        Command::Train(a) => {
            let ctl = RunControl { stop_after_step: a.stop_after_step };
            let (summary, cfg) = match &a.resume {
                Some(ck) => (resume(ck, &a.data, &a.out, ctl)?, json!({ "resume": ck })),
                None => {
                    let cfg = a.overrides.resolve()?;
                    (train_base(&cfg, &a.data, &a.out, ctl)?, serde_json::to_value(&cfg)?)
                }
            };
            let mut inputs = vec![a.data.as_path()];
            inputs.extend(a.resume.as_deref());
            inputs.extend(a.overrides.config.as_deref());
            finish(&a.out, "train", cfg, &inputs, summary_json(&summary)?)
        }
        Command::FinetuneDenoise(a) => {
            let mut cfg = FinetuneConfig::default();
            if let Some(path) = &a.config {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                cfg = serde_json::from_str(&text).with_context(|| format!("invalid configuration in {}", path.display()))?;
            }
            cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
            cfg.optimizer.lr = a.lr.unwrap_or(cfg.optimizer.lr);
            cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            let summary = finetune_denoise(&cfg, &a.checkpoint, &a.data, &a.out, RunControl::default())?;
            let mut inputs = vec![a.checkpoint.as_path(), a.data.as_path()];
            inputs.extend(a.config.as_deref());
            finish(&a.out, "finetune-denoise", serde_json::to_value(&cfg)?, &inputs, summary_json(&summary)?)
        }
        Command::Evaluate(a) => {
            let opts = EvalOptions {
                split: Split::parse(&a.split)?,
                percentile: a.percentile,
                use_denoise: !a.no_denoise,
                batch_size: a.batch_size,
            };
            if let Some(p) = a.percentile {
                if !(0.0..=100.0).contains(&p) {
                    bail!("--percentile must be within [0, 100], got {p}");
                }
            }
            let (report, _, _) = evaluate_checkpoint(&a.checkpoint, &a.data, &opts)?;
            write_report(&report, &a.out)?;
            let cfg = json!({ "split": a.split, "percentile": a.percentile, "use_denoise": !a.no_denoise });
            let hd_label = match a.percentile {
                Some(p) => format!("hd{p}"),
                None => "hd".to_string(),
            };
            let result = json!({
                "mean_dsc": report.mean_dsc,
                "mean_hd": report.mean_hd.is_finite().then_some(report.mean_hd),
                "hd_metric": hd_label,
                "per_class_dsc": report.per_class_dsc,
                "cases": report.case_ids.len(),
            });
            finish(&a.out, "evaluate", cfg, &[&a.checkpoint, &a.data], result)
        }
        Command::Sweep(a) => {
            let kind = SweepKind::parse(&a.kind)?;
            let cfg = a.overrides.resolve()?;
            let rows = sweep(kind, &a.grid, &cfg, &a.data, &a.out)?;
            let record = json!({ "kind": kind, "grid": a.grid, "base": cfg });
            let mut inputs = vec![a.data.as_path()];
            inputs.extend(a.overrides.config.as_deref());
            finish(&a.out, "sweep", record, &inputs, serde_json::to_value(rows)?)
        }
        Command::RenderOverlays(a) => {
            let opts = EvalOptions { split: Split::parse(&a.split)?, ..Default::default() };
            let (_, cases, preds) = evaluate_checkpoint(&a.checkpoint, &a.data, &opts)?;
            let size = Dataset::open(&a.data)?.manifest.image_size;
            let limit = a.limit.unwrap_or(cases.len());
            let mut files = Vec::new();
            for (case, pred) in cases.iter().zip(&preds).take(limit) {
                let path = a.out.join(format!("{}.png", case.id));
                save_png(&overlay(&case.image, &case.label, pred, size)?, &path)?;
                files.push(path);
            }
            let cfg = json!({ "split": a.split, "limit": a.limit });
            finish(&a.out, "render-overlays", cfg, &[&a.checkpoint, &a.data], json!({ "files": files }))
        }
    }
}

fn summary_json(s: &msunet::train::TrainSummary) -> Result<Value> {
    Ok(json!({
        "phase": s.phase,
        "precision": s.precision,
        "finished": s.finished,
        "epochs_completed": s.epochs_completed,
        "steps": s.steps,
        "best": s.best,
        "parameters": s.parameters,
        "trainable": s.trainable,
        "best_checkpoint": s.best_checkpoint,
        "last_checkpoint": s.last_checkpoint,
    }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if std::env::var_os(DETERMINISTIC_ENV).is_some() {
        eprintln!("{DETERMINISTIC_ENV} set: 64-bit mode is {}", msunet::train::deterministic_env());
    }
    match run(cli) {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "error": e.to_string(), "causes": &chain[1..] }));
            ExitCode::from(1)
        }
    }
}

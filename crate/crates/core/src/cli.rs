//! Command-line front end: `gen-data`, `train`, `eval` and `sinkhorn`.
//!
//! Exit codes are 0 on success, 1 on runtime failure and 2 on usage errors.
//! Every artifact `X` is accompanied by a run manifest `X.run.json`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::Error;
use crate::model::{ModelConfig, ModelKind};
use crate::ot::{self, PointCloud, SinkhornConfig};
use crate::synthdata::{self, Mode, MaskTransform, TaskSpec};
use crate::trainer::{self, write_atomic, Checkpoint, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.spun";
pub const RUNLOG_FILE: &str = "runlog.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const EVAL_JSON: &str = "eval.json";
pub const EVAL_CSV: &str = "eval.csv";

#[derive(Parser, Debug)]
#[command(name = "spunet", version, about = "Latent-density segmentation with a Sinkhorn latent constraint")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-annotator dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Sinkhorn divergence between two point clouds given as CSV files.
    Sinkhorn(SinkhornArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Mode transforms: base, dilateN or erodeN.
    #[arg(long, num_args = 1.., default_values_t = vec!["base".to_string(), "dilate2".to_string()])]
    pub modes: Vec<String>,
    #[arg(long, num_args = 1.., default_values_t = vec![0.7, 0.3])]
    pub probs: Vec<f64>,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 1600)]
    pub count: usize,
    #[arg(long, default_value_t = 2)]
    pub annotators: usize,
    /// Contour jitter std in pixels.
    #[arg(long, default_value_t = 0.5)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = ["punet", "spunet"])]
    pub model: String,
    #[arg(long)]
    pub latent_dim: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1e-2)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 16)]
    pub latent_samples: usize,
    #[arg(long, default_value_t = 8)]
    pub base_channels: usize,
    /// Per-pixel reconstruction reduction: sum or mean.
    #[arg(long, default_value = "sum", value_parser = ["sum", "mean"])]
    pub reconstruction: String,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.05)]
    pub warmup_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub num_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the JSON and CSV reports; the aggregate is always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SinkhornArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long)]
    pub epsilon: f64,
    /// Also report the exact assignment value (equal sizes only).
    #[arg(long)]
    pub exact: bool,
    #[arg(long, default_value_t = 5000)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u32).range(1..=2))]
    pub p: u32,
    #[arg(long)]
    pub no_annealing: bool,
    /// Write the result as JSON to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config: Value,
    seed: Option<u64>,
    tool_version: &'static str,
    inputs: Vec<String>,
    outputs: Vec<String>,
    wall_clock_seconds: f64,
}

fn manifest_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn write_manifest(
    artifact: &Path,
    command: &str,
    config: Value,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[PathBuf],
    started: Instant,
) -> CmdResult {
    let m = RunManifest {
        command,
        config,
        seed,
        tool_version: env!("CARGO_PKG_VERSION"),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    let mut text = serde_json::to_string_pretty(&m).map_err(Error::from)?;
    text.push('\n');
    write_atomic(&manifest_path(artifact), text.as_bytes())?;
    Ok(())
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(Error::io(dir, e)))
}

fn json_text<T: Serialize>(v: &T) -> CmdResult<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(Error::from)?;
    s.push('\n');
    Ok(s)
}

fn cmd_gen_data(a: &GenDataArgs) -> CmdResult {
    let started = Instant::now();
    if a.modes.len() != a.probs.len() {
        return Err(usage(format!(
            "--modes has {} entries but --probs has {}",
            a.modes.len(),
            a.probs.len()
        )));
    }
    let modes = a
        .modes
        .iter()
        .zip(&a.probs)
        .map(|(name, &prob)| {
            Ok(Mode {
                transform: name.parse::<MaskTransform>().map_err(|e| usage(e.to_string()))?,
                prob,
            })
        })
        .collect::<CmdResult<Vec<_>>>()?;
    let spec = TaskSpec {
        image_size: a.size,
        modes,
        jitter_std: a.jitter,
        annotators: a.annotators,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let dataset = synthdata::generate(&spec, a.count, a.seed)?;
    create_dir(&a.out)?;
    let manifest = synthdata::save(&dataset, &a.out)?;
    println!("{}", manifest.display());
    let config = json!({
        "modes": a.modes,
        "probs": a.probs,
        "size": a.size,
        "count": a.count,
        "annotators": a.annotators,
        "jitter": a.jitter,
    });
    write_manifest(&a.out, "gen-data", config, Some(a.seed), &[], &[manifest], started)
}

fn cmd_train(a: &TrainArgs) -> CmdResult {
    let started = Instant::now();
    let mode = match a.model.as_str() {
        "punet" => ModelKind::Punet,
        _ => ModelKind::Spunet,
    };
    let dataset = synthdata::load(&a.data)?;
    let model_cfg = ModelConfig {
        latent_dim: a.latent_dim,
        base_channels: a.base_channels,
        image_size: dataset.spec.image_size,
        alpha: a.alpha,
        beta: a.beta,
        sinkhorn_epsilon: a.epsilon,
        latent_samples: a.latent_samples,
        reconstruction: a.reconstruction.parse()?,
        mode,
        sinkhorn: SinkhornConfig::default(),
    }
    .normalized();
    model_cfg.validate().map_err(|e| usage(e.to_string()))?;
    let train_cfg = TrainConfig {
        max_lr: a.lr,
        weight_decay: a.weight_decay,
        batch_size: a.batch_size,
        epochs: a.epochs,
        warmup_fraction: a.warmup_fraction,
        clip_norm: a.clip_norm,
        seed: a.seed,
        augment: !a.no_augment,
    };
    train_cfg.validate().map_err(|e| usage(e.to_string()))?;

    create_dir(&a.out)?;
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let log_path = a.out.join(RUNLOG_FILE);
    let config_path = a.out.join(CONFIG_FILE);
    let config = json!({ "model": model_cfg, "train": train_cfg });
    write_atomic(&config_path, json_text(&config)?.as_bytes())?;
    let out = trainer::train(&model_cfg, &train_cfg, &dataset, Some(&ckpt_path))?;
    write_atomic(&log_path, out.log.to_csv()?.as_bytes())?;
    println!(
        "best epoch {} val loss {:.6} -> {}",
        out.best.epoch,
        out.best.val_loss,
        ckpt_path.display()
    );
    write_manifest(
        &a.out,
        "train",
        config,
        Some(a.seed),
        &[&a.data],
        &[ckpt_path, log_path, config_path],
        started,
    )
}

fn cmd_eval(a: &EvalArgs) -> CmdResult {
    let started = Instant::now();
    let dataset = synthdata::load(&a.data)?;
    let k = dataset.spec.annotators;
    if a.num_samples == 0 || a.num_samples % k != 0 {
        return Err(usage(format!(
            "--num-samples {} must be a positive multiple of the annotator count {k}",
            a.num_samples
        )));
    }
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let diagnosis = trainer::diagnose(&ckpt, &dataset, a.num_samples, a.seed)?;
    println!("{}", json_text(&json!({ "aggregate": diagnosis.aggregate }))?.trim_end());
    let Some(dir) = &a.out else {
        return Ok(());
    };
    create_dir(dir)?;
    let json_path = dir.join(EVAL_JSON);
    write_atomic(&json_path, json_text(&diagnosis)?.as_bytes())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Failure::Runtime(Error::invalid(e.to_string()));
    w.write_record(["id", "ewd", "ged", "gini", "eff_rank", "zeta_spread"])
        .map_err(csv_err)?;
    for r in &diagnosis.per_image {
        let spread = r.zeta_spread.map(|s| s.to_string()).unwrap_or_default();
        w.write_record([
            r.id.clone(),
            r.ewd.to_string(),
            r.ged.to_string(),
            r.gini.to_string(),
            r.eff_rank.to_string(),
            spread,
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::Runtime(Error::invalid(e.to_string())))?;
    let csv_path = dir.join(EVAL_CSV);
    write_atomic(&csv_path, &bytes)?;
    let config = json!({ "num_samples": a.num_samples, "checkpoint": a.checkpoint });
    write_manifest(
        dir,
        "eval",
        config,
        Some(a.seed),
        &[&a.checkpoint, &a.data],
        &[json_path, csv_path],
        started,
    )
}

/// Reads one point per row; every row must have the same number of columns.
pub fn read_cloud(path: &Path) -> Result<PointCloud, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let mut points = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| format!("{}: {e}", path.display()))?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| format!("{}: row {} is not numeric", path.display(), i + 1))?;
        points.push(row);
    }
    PointCloud::uniform(points).map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_sinkhorn(a: &SinkhornArgs) -> CmdResult {
    let started = Instant::now();
    let x = read_cloud(&a.a).map_err(usage)?;
    let y = read_cloud(&a.b).map_err(usage)?;
    if x.dim() != y.dim() {
        return Err(usage(format!(
            "clouds have dimensions {} and {}",
            x.dim(),
            y.dim()
        )));
    }
    if !(a.epsilon > 0.0) {
        return Err(usage("--epsilon must be positive"));
    }
    let cfg = SinkhornConfig {
        max_iters: a.max_iters,
        annealing: !a.no_annealing,
        cost_exponent: a.p,
        ..SinkhornConfig::default()
    };
    let r = ot::sinkhorn_divergence_full(&x, &y, a.epsilon, &cfg)?;
    let divergence = r.divergence.expect("divergence is set");
    println!("divergence {divergence:.12}");
    println!("regularized_cost {:.12}", r.cost);
    println!("iterations {}", r.iterations);
    println!("converged {}", r.converged);
    println!("marginal_error {:.3e}", r.marginal_error);
    let mut result = json!({
        "divergence": divergence,
        "regularized_cost": r.cost,
        "iterations": r.iterations,
        "converged": r.converged,
        "marginal_error": r.marginal_error,
    });
    if a.exact {
        let exact = ot::exact_ot(&x, &y, a.p).map_err(|e| usage(e.to_string()))?;
        let gap = (divergence - exact).abs();
        println!("exact {exact:.12}");
        println!("abs_gap {gap:.3e}");
        result["exact"] = json!(exact);
        result["abs_gap"] = json!(gap);
    }
    if let Some(out) = &a.out {
        write_atomic(out, json_text(&result)?.as_bytes())?;
        let config = json!({ "epsilon": a.epsilon, "max_iters": a.max_iters, "p": a.p, "annealing": !a.no_annealing });
        write_manifest(out, "sinkhorn", config, None, &[&a.a, &a.b], &[out.clone()], started)?;
    }
    Ok(())
}

fn configure_threads() {
    if let Some(n) = std::env::var("SPUNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
    {
        // Fails only if a pool already exists, which is harmless here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    configure_threads();
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sinkhorn(a) => cmd_sinkhorn(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

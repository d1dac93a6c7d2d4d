//! `sfr`: generate synthetic data, train, infer, evaluate, gradient-check.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sfr_core::dataset::{Manifest, Split};
use sfr_core::geometry::FrustumConfig;
use sfr_core::infer::{default_stride, infer_logits, plan_prps};
use sfr_core::loss::DiceReduction;
use sfr_core::metrics::{evaluate, overlap_delta, ConfusionMatrix};
use sfr_core::model::gradcheck::{gradient_check, GradCheckOptions};
use sfr_core::model::{load_checkpoint, ModelConfig, ModelParams};
use sfr_core::raster::{load_labels, load_raster, save_labels, save_raster};
use sfr_core::synth::{colorize, generate_dataset, SceneSpec, CLASS_NAMES};
use sfr_core::train::train_loop;

use config::RunConfig;

/// Marks errors that should exit with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "sfr", version, about = "Scale-frustum segmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic scenes and a manifest.
    Generate(GenerateArgs),
    /// Train a model with random projection reference points.
    Train(TrainArgs),
    /// Segment one image by sliding-window inference.
    Infer(InferArgs),
    /// Score predictions or a checkpoint against a manifest split.
    Eval(EvalArgs),
    /// Compare the analytic backward pass with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, default_value_t = 4)]
    scenes: usize,
    /// Scenes marked `val` (the last ones); defaults to a fifth, at least one.
    #[arg(long)]
    val: Option<usize>,
    /// Square scene size in pixels.
    #[arg(long, default_value_t = 512)]
    size: usize,
    #[arg(long, env = config::SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

/// Flags shared by commands that build a frustum and a model.
#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// Flat JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Plane distances, local first, e.g. `1,3,14`.
    #[arg(long, value_delimiter = ',')]
    distances: Option<Vec<f64>>,
    /// Distance whose window is the full image (default: the last distance).
    #[arg(long)]
    reference_distance: Option<f64>,
    /// Side of the square size every window is resized to.
    #[arg(long)]
    unified_size: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    main_depth: Option<usize>,
    #[arg(long)]
    sub_depth: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

impl ModelFlags {
    fn layer(&self) -> RunConfig {
        RunConfig {
            seed: self.seed,
            workers: self.workers,
            distances: self.distances.clone(),
            reference_distance: self.reference_distance,
            unified_size: self.unified_size,
            width: self.width,
            main_depth: self.main_depth,
            sub_depth: self.sub_depth,
            dim: self.dim,
            classes: self.classes,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory for model.bin, loss.csv and config.json.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Loss weights `dice,ce_main,ce_aux`.
    #[arg(long, value_delimiter = ',')]
    lambda: Option<Vec<f64>>,
    #[arg(long)]
    dice_eps: Option<f64>,
    #[arg(long, value_parser = parse_reduction)]
    dice_reduction: Option<DiceReduction>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Keep every fusion weight at zero.
    #[arg(long)]
    freeze_alpha: bool,
    /// Print a progress line every this many iterations (0 silences).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

fn parse_reduction(s: &str) -> Result<DiceReduction, String> {
    match s {
        "class" => Ok(DiceReduction::Class),
        "micro" => Ok(DiceReduction::Micro),
        _ => Err(format!("expected `class` or `micro`, got `{s}`")),
    }
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    image: PathBuf,
    /// Predicted label map (PGM); default `<image stem>_pred.pgm` beside the image.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Sliding-window stride in pixels (default: a quarter of the local window).
    #[arg(long)]
    stride: Option<usize>,
    /// Also write a palette-coloured PPM here.
    #[arg(long)]
    viz: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory of predicted label maps named `<image stem><suffix>.pgm`.
    #[arg(long, conflicts_with = "checkpoint")]
    pred_dir: Option<PathBuf>,
    #[arg(long, default_value = "_pred")]
    pred_suffix: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long)]
    stride: Option<usize>,
    /// Strides `a,b` (a > b): report mIoU without and with overlap and their gap.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    overlap_delta: Option<Vec<usize>>,
    #[arg(long)]
    per_class: bool,
    /// Also write the report as CSV (`metric,value`).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 200)]
    n_params: usize,
    #[arg(long, env = config::SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Negative control: perturb the analytic gradient; the check must fail.
    #[arg(long)]
    corrupt: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// The error chain joined by `: `, skipping causes already spelled out by
/// the message above them.
fn render(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    let mut last = out.clone();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let usage = e.chain().any(|c| {
        c.is::<UsageError>()
            || matches!(c.downcast_ref::<sfr_core::Error>(), Some(sfr_core::Error::InvalidConfig { .. }))
    });
    if usage {
        1
    } else {
        2
    }
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<ExitCode> {
    let val = a.val.unwrap_or_else(|| (a.scenes / 5).max(1).min(a.scenes));
    let template = SceneSpec::with_default_counts(a.size, a.size, a.seed);
    let (path, manifest) = generate_dataset(&template, a.scenes, val, &a.out)?;
    let n_val = manifest.split(Split::Val).count();
    eprintln!(
        "wrote {} scenes ({} train, {} val) of {}x{} to {}",
        manifest.entries.len(),
        manifest.entries.len() - n_val,
        n_val,
        a.size,
        a.size,
        a.out.display()
    );
    println!("{}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<ExitCode> {
    let flags = RunConfig {
        manifest: a.manifest,
        out_dir: a.out_dir,
        iterations: a.iterations,
        batch_size: a.batch_size,
        lr: a.lr,
        warmup: a.warmup,
        weight_decay: a.weight_decay,
        lambda: a.lambda,
        dice_eps: a.dice_eps,
        dice_reduction: a.dice_reduction,
        checkpoint_every: a.checkpoint_every,
        freeze_alpha: a.freeze_alpha.then_some(true),
        ..a.model.layer()
    };
    let run = RunConfig::resolve(a.model.config.as_deref(), flags)?;
    let cfg = run.train()?;
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let resolved = cfg.out_dir.join("config.json");
    std::fs::write(&resolved, serde_json::to_string_pretty(&run)? + "\n")
        .with_context(|| format!("writing {}", resolved.display()))?;
    eprintln!(
        "training {} iterations, distances {:?}, unified {}x{}, {} parameters",
        cfg.iterations,
        cfg.frustum.distances(),
        cfg.model.input_size.0,
        cfg.model.input_size.1,
        ModelParams::zeros(cfg.model)?.parameter_count()
    );
    let log_every = a.log_every;
    let (outcome, artifacts) = train_loop(&cfg, |r| {
        if log_every > 0 && (r.iter % log_every == 0 || r.iter == 1) {
            eprintln!(
                "iter {:>6}  total {:.4}  dice {:.4}  ce_main {:.4}  ce_aux {:.4}  lr {:.2e}",
                r.iter, r.total, r.dice, r.ce_main, r.ce_aux, r.lr
            );
        }
    })?;
    let last = outcome.log.last().expect("at least one iteration");
    eprintln!("final total loss {:.4}; alpha {:?}", last.total, outcome.params.alpha.value);
    println!("{}", artifacts.checkpoint.display());
    println!("{}", artifacts.log.display());
    Ok(ExitCode::SUCCESS)
}

/// Run config for commands that load a checkpoint: a `config.json` beside
/// the checkpoint serves as the file layer when `--config` is absent.
fn checkpoint_run(flags: &ModelFlags, checkpoint: Option<&Path>, extra: RunConfig) -> anyhow::Result<RunConfig> {
    let sidecar = checkpoint
        .and_then(Path::parent)
        .map(|d| d.join("config.json"))
        .filter(|p| p.is_file());
    let file = flags.config.clone().or(sidecar);
    let layer = RunConfig {
        checkpoint: checkpoint.map(Path::to_path_buf),
        ..extra.overlay(flags.layer())
    };
    RunConfig::resolve(file.as_deref(), layer)
}

/// Loads the checkpoint and checks it against the configured frustum.
fn load_model(run: &RunConfig, explicit_size: bool) -> anyhow::Result<(ModelParams, FrustumConfig)> {
    let path = run
        .checkpoint
        .clone()
        .ok_or_else(|| UsageError("missing required setting `checkpoint`".into()))?;
    let params = load_checkpoint(&path)?;
    let mc: ModelConfig = params.config;
    let mut run = run.clone();
    if !explicit_size {
        run.unified_size = Some(mc.input_size.0);
    }
    let frustum = run.frustum()?;
    if frustum.n_scales() != mc.n_scales {
        bail!(UsageError(format!(
            "distances: {} given but the checkpoint has {} scales",
            frustum.n_scales(),
            mc.n_scales
        )));
    }
    if frustum.unified_size() != mc.input_size {
        bail!(UsageError(format!(
            "unified_size: {:?} given but the checkpoint expects {:?}",
            frustum.unified_size(),
            mc.input_size
        )));
    }
    Ok((params, frustum))
}

fn cmd_infer(a: InferArgs) -> anyhow::Result<ExitCode> {
    let extra = RunConfig {
        stride: a.stride,
        ..Default::default()
    };
    let run = checkpoint_run(&a.model, a.checkpoint.as_deref(), extra)?;
    let (params, frustum) = load_model(&run, a.model.unified_size.is_some())?;
    let image = load_raster(&a.image)?;
    if image.channels != params.config.in_channels {
        bail!(UsageError(format!(
            "image has {} channels, the checkpoint expects {}",
            image.channels, params.config.in_channels
        )));
    }
    let stride = run.stride.unwrap_or_else(|| default_stride(image.dims(), &frustum));
    let plan = plan_prps(image.dims(), frustum.local_ratio(), stride)?;
    eprintln!("plan: {plan}");
    let workers = run.workers.unwrap_or(1);
    let labels = infer_logits(&params, &image, &frustum, &plan, workers)?.finalize()?;
    let output = a.output.unwrap_or_else(|| sibling(&a.image, "_pred.pgm"));
    save_labels(&labels, &output)?;
    println!("{}", output.display());
    if let Some(viz) = a.viz {
        save_raster(&colorize(&labels), &viz)?;
        println!("{}", viz.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        _ => bail!(UsageError(format!("split must be `train` or `val`, got `{s}`"))),
    }
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<ExitCode> {
    let split = parse_split(&a.split)?;
    let extra = RunConfig {
        manifest: a.manifest.clone(),
        stride: a.stride,
        ..Default::default()
    };
    let run = if a.pred_dir.is_some() {
        RunConfig::resolve(a.model.config.as_deref(), extra.overlay(a.model.layer()))?
    } else {
        checkpoint_run(&a.model, a.checkpoint.as_deref(), extra)?
    };
    let manifest_path = run
        .manifest
        .clone()
        .ok_or_else(|| UsageError("missing required setting `manifest`".into()))?;
    let manifest = Manifest::load(&manifest_path)?;
    let names: Vec<&str> = CLASS_NAMES.to_vec();
    let mut out = std::io::stdout().lock();

    if let Some(dir) = &a.pred_dir {
        if a.overlap_delta.is_some() {
            bail!(UsageError("--overlap-delta needs --checkpoint".into()));
        }
        let classes = run.classes.unwrap_or(sfr_core::synth::CLASS_COUNT);
        let scenes = manifest.load_split(split, classes)?;
        let mut cm = ConfusionMatrix::new(classes);
        for s in &scenes {
            let stem = s.entry.image_path.file_stem().unwrap_or_default().to_string_lossy();
            let pred_path = dir.join(format!("{stem}{}.pgm", a.pred_suffix));
            let pred = load_labels(&pred_path, classes)?;
            cm.update(&pred, &s.labels)?;
        }
        let summary = cm.summary()?;
        write!(out, "{}", summary.to_text(&names, a.per_class))?;
        if let Some(csv) = &a.csv {
            std::fs::write(csv, summary.to_csv(&names, a.per_class))?;
        }
        return Ok(ExitCode::SUCCESS);
    }

    let (params, frustum) = load_model(&run, a.model.unified_size.is_some())?;
    let scenes = manifest.load_split(split, params.config.classes)?;
    let workers = run.workers.unwrap_or(1);
    let dims = scenes[0].image.dims();
    if let Some(strides) = &a.overlap_delta {
        let [sa, sb] = strides[..] else {
            bail!(UsageError(format!("--overlap-delta needs two strides, got {}", strides.len())));
        };
        let report = overlap_delta(&params, &scenes, &frustum, sa, sb, workers)?;
        write!(out, "{}", report.to_text())?;
        if let Some(csv) = &a.csv {
            std::fs::write(csv, report.to_csv())?;
        }
        return Ok(ExitCode::SUCCESS);
    }
    let stride = run.stride.unwrap_or_else(|| default_stride(dims, &frustum));
    let summary = evaluate(&params, &scenes, &frustum, stride, workers)?.summary()?;
    write!(out, "{}", summary.to_text(&names, a.per_class))?;
    if let Some(csv) = &a.csv {
        std::fs::write(csv, summary.to_csv(&names, a.per_class))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<ExitCode> {
    if a.n_params == 0 {
        eprintln!("warning: --n-params 0 samples nothing; the check passes vacuously");
    }
    let config = ModelConfig::tiny();
    let report = gradient_check(
        config,
        GradCheckOptions {
            n_params: a.n_params,
            step: a.step,
            tolerance: a.tolerance,
            seed: a.seed,
            corrupt: a.corrupt,
        },
    )?;
    let worst = report
        .worst
        .as_ref()
        .map_or_else(|| "-".to_string(), |(n, i)| format!("{n}[{i}]"));
    println!(
        "checked {} parameters (n={}, unified {}, dim {}, C={}), step {:e}: max relative error {:.3e} at {worst} -> {}",
        report.checked,
        config.n_scales,
        config.input_size.0,
        config.dim,
        config.classes,
        a.step,
        report.max_rel_err,
        if report.passed { "PASS" } else { "FAIL" }
    );
    Ok(if report.passed { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

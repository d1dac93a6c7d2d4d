//! Random-PRP training: per-iteration window sampling, synchronized flips,
//! AdamW with linear warmup, CSV loss logging and checkpointing.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc;

use crate::dataset::{Manifest, Scene, Split};
use crate::error::{Error, Result};
use crate::geometry::{frustum_windows, FrustumConfig, ProjectionReferencePoint};
use crate::loss::{total_loss, DiceOptions, LossWeights};
use crate::model::{save_checkpoint, ModelConfig, ModelParams, SfrNet};
use crate::raster::{extract_labels, extract_resample, LabelMap, RasterImage};
use crate::rng::SeededRng;
use crate::tensor::{FeatureMap, Param};

pub const LOG_HEADER: &str = "iter,dice,ce_main,ce_aux,total,lr";

// RNG streams derived from the run seed.
const STREAM_SAMPLING: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Samples per optimizer step, realized as gradient accumulation.
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub weight_decay: f64,
    pub loss_weights: LossWeights,
    pub dice: DiceOptions,
    pub seed: u64,
    pub frustum: FrustumConfig,
    pub model: ModelConfig,
    pub manifest: PathBuf,
    pub out_dir: PathBuf,
    /// Save `ckpt_<iter>.bin` every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Values above 1 build the next samples on a background thread.
    pub workers: usize,
    /// Keep every `alpha` at its initial value.
    pub freeze_alpha: bool,
}

impl TrainConfig {
    /// Desk defaults around the given frustum and model shapes.
    pub fn new(frustum: FrustumConfig, model: ModelConfig, manifest: impl Into<PathBuf>) -> Self {
        Self {
            iterations: 500,
            batch_size: 1,
            lr: 3e-3,
            warmup: 100,
            weight_decay: 0.01,
            loss_weights: LossWeights::default(),
            dice: DiceOptions::default(),
            seed: 0,
            frustum,
            model,
            manifest: manifest.into(),
            out_dir: PathBuf::from("run"),
            checkpoint_every: 0,
            workers: 1,
            freeze_alpha: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be finite and > 0"));
        }
        if self.warmup > self.iterations {
            return Err(Error::config(
                "warmup",
                format!("{} exceeds iterations ({})", self.warmup, self.iterations),
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be finite and >= 0"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be >= 1"));
        }
        self.loss_weights.validate()?;
        self.model.validate()?;
        if self.model.n_scales != self.frustum.n_scales() {
            return Err(Error::config(
                "distances",
                format!(
                    "{} distances but the model has {} scales",
                    self.frustum.n_scales(),
                    self.model.n_scales
                ),
            ));
        }
        if self.model.input_size != self.frustum.unified_size() {
            return Err(Error::config(
                "unified_size",
                format!(
                    "frustum {:?} differs from model input {:?}",
                    self.frustum.unified_size(),
                    self.model.input_size
                ),
            ));
        }
        Ok(())
    }
}

/// Uniform over `[0, W] × [0, H]`.
pub fn sample_prp(rng: &mut SeededRng, image_dims: (usize, usize)) -> ProjectionReferencePoint {
    let w = rng.range(0.0, image_dims.0 as f64);
    let h = rng.range(0.0, image_dims.1 as f64);
    ProjectionReferencePoint::new(w, h)
}

/// Resized frustum patches plus the local window's label patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patches: Vec<FeatureMap>,
    pub labels: LabelMap,
}

pub fn build_sample(
    image: &RasterImage,
    labels: &LabelMap,
    prp: ProjectionReferencePoint,
    frustum: &FrustumConfig,
) -> Result<Sample> {
    if labels.dims() != image.dims() {
        return Err(Error::shape("build_sample: labels", image.dims(), labels.dims()));
    }
    let size = frustum.unified_size();
    let windows = frustum_windows(prp, frustum, image.dims())?;
    let patches = windows
        .iter()
        .map(|w| Ok(extract_resample(image, w, size)?.data))
        .collect::<Result<Vec<_>>>()?;
    let labels = extract_labels(labels, &windows[0], size)?;
    Ok(Sample { patches, labels })
}

/// Applies the given flips to every patch and the label patch alike.
pub fn flip_sample(sample: &mut Sample, horizontal: bool, vertical: bool) {
    if horizontal {
        sample.patches.iter_mut().for_each(FeatureMap::flip_horizontal);
        sample.labels.flip_horizontal();
    }
    if vertical {
        sample.patches.iter_mut().for_each(FeatureMap::flip_vertical);
        sample.labels.flip_vertical();
    }
}

/// One Bernoulli(0.5) draw per axis, shared by all scales. Returns the
/// draws `(horizontal, vertical)`.
pub fn augment(sample: &mut Sample, rng: &mut SeededRng) -> (bool, bool) {
    let h = rng.bernoulli(0.5);
    let v = rng.bernoulli(0.5);
    flip_sample(sample, h, v);
    (h, v)
}

/// Linear ramp from 0 to `base` over `warmup` steps, then constant.
/// Steps count from 1.
pub fn lr_schedule(step: usize, base: f64, warmup: usize) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * step as f64 / warmup as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &[&Param]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            step: 0,
        }
    }

    pub fn for_model(params: &ModelParams) -> Self {
        Self::new(&params.params())
    }
}

/// One AdamW update over `params` using their gradient buffers:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`. Tensors whose index is in `frozen`
/// are left untouched (their moments are not advanced either).
pub fn optimizer_step(
    params: &mut [&mut Param],
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
    adam: AdamW,
    frozen: &[usize],
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape("optimizer_step: tensors", state.m.len(), params.len()));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.len() || p.grad.len() != p.len() {
            return Err(Error::shape("optimizer_step", state.m[i].len(), p.len()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if frozen.contains(&i) {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = &mut **p;
        for k in 0..p.value.len() {
            let g = p.grad[k];
            m[k] = adam.beta1 * m[k] + (1.0 - adam.beta1) * g;
            v[k] = adam.beta2 * v[k] + (1.0 - adam.beta2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p.value[k] -= lr * (m_hat / (v_hat.sqrt() + adam.eps) + weight_decay * p.value[k]);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub dice: f64,
    pub ce_main: f64,
    pub ce_aux: f64,
    pub total: f64,
    pub lr: f64,
}

impl LossRecord {
    /// CSV row matching [`LOG_HEADER`]; reals use the shortest round-trip form.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iter, self.dice, self.ce_main, self.ce_aux, self.total, self.lr
        )
    }
}

pub fn write_log(records: &[LossRecord], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for r in records {
        writeln!(out, "{}", r.csv_row())?;
    }
    out.flush()
}

/// Trailing moving averages of `total` over windows of `window` records.
pub fn moving_average(records: &[LossRecord], window: usize) -> Vec<f64> {
    if window == 0 || records.len() < window {
        return Vec::new();
    }
    records
        .windows(window)
        .map(|w| w.iter().map(|r| r.total).sum::<f64>() / window as f64)
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LossRecord>,
}

/// Samples for one iteration, drawn from `rng` in a fixed order so the
/// sequence is the same whether built inline or on a prefetch thread.
fn draw_batch(
    scenes: &[Scene],
    frustum: &FrustumConfig,
    batch: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Sample>> {
    (0..batch)
        .map(|_| {
            let scene = &scenes[rng.below(scenes.len())];
            let prp = sample_prp(rng, scene.image.dims());
            let mut sample = build_sample(&scene.image, &scene.labels, prp, frustum)?;
            augment(&mut sample, rng);
            Ok(sample)
        })
        .collect()
}

fn check_scenes(scenes: &[Scene], config: &TrainConfig) -> Result<()> {
    if scenes.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    for s in scenes {
        if s.image.channels != config.model.in_channels {
            return Err(Error::shape(
                "training image channels",
                config.model.in_channels,
                s.image.channels,
            ));
        }
        if s.labels.classes != config.model.classes {
            return Err(Error::shape("training label classes", config.model.classes, s.labels.classes));
        }
    }
    Ok(())
}

/// Training over in-memory scenes. `on_iteration` sees every record and the
/// current parameters after the step (used for checkpoint cadence).
pub fn train_scenes(
    config: &TrainConfig,
    scenes: &[Scene],
    mut on_iteration: impl FnMut(&LossRecord, &ModelParams) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_scenes(scenes, config)?;
    let params = ModelParams::init(config.model, config.seed)?;
    let alpha_index = params
        .params()
        .iter()
        .position(|p| p.name == "alpha")
        .expect("alpha is always present");
    let frozen: Vec<usize> = if config.freeze_alpha { vec![alpha_index] } else { Vec::new() };
    let mut state = OptimizerState::for_model(&params);
    let mut net = SfrNet::new(params);
    let mut log = Vec::with_capacity(config.iterations);
    let mut rng = SeededRng::with_stream(config.seed, STREAM_SAMPLING);

    let mut step = |iter: usize, batch: Vec<Sample>, net: &mut SfrNet| -> Result<LossRecord> {
        let lr = lr_schedule(iter, config.lr, config.warmup);
        let scale = 1.0 / batch.len() as f64;
        net.zero_grad();
        let mut rec = LossRecord {
            iter,
            dice: 0.0,
            ce_main: 0.0,
            ce_aux: 0.0,
            total: 0.0,
            lr,
        };
        for sample in &batch {
            let out = net.forward_train(&sample.patches)?;
            let mut loss = total_loss(&out.main, &out.aux, &sample.labels, &config.loss_weights, config.dice)?;
            loss.grad_main.data.iter_mut().for_each(|g| *g *= scale);
            loss.grad_aux.data.iter_mut().for_each(|g| *g *= scale);
            net.backward(&loss.grad_main, &loss.grad_aux)?;
            rec.dice += loss.dice * scale;
            rec.ce_main += loss.ce_main * scale;
            rec.ce_aux += loss.ce_aux * scale;
            rec.total += loss.total * scale;
        }
        if !rec.total.is_finite() {
            return Err(Error::Dataset(format!("non-finite loss {}", rec.total)));
        }
        optimizer_step(
            &mut net.params.params_mut(),
            &mut state,
            lr,
            config.weight_decay,
            AdamW::default(),
            &frozen,
        )?;
        Ok(rec)
    };
    let wrap = |iter: usize| move |e: Error| Error::Iteration {
        iteration: iter,
        source: Box::new(e),
    };

    if config.workers <= 1 {
        for iter in 1..=config.iterations {
            let batch = draw_batch(scenes, &config.frustum, config.batch_size, &mut rng).map_err(wrap(iter))?;
            let rec = step(iter, batch, &mut net).map_err(wrap(iter))?;
            on_iteration(&rec, &net.params).map_err(wrap(iter))?;
            log.push(rec);
        }
    } else {
        // The producer owns the sampling RNG and reads only the rasters, so the
        // sample sequence is identical to the inline path.
        std::thread::scope(|s| -> Result<()> {
            let (tx, rx) = mpsc::sync_channel::<Result<Vec<Sample>>>(config.workers);
            let frustum = &config.frustum;
            let batch_size = config.batch_size;
            let iterations = config.iterations;
            let mut producer_rng = rng.clone();
            s.spawn(move || {
                for _ in 0..iterations {
                    let b = draw_batch(scenes, frustum, batch_size, &mut producer_rng);
                    let failed = b.is_err();
                    if tx.send(b).is_err() || failed {
                        break;
                    }
                }
            });
            for iter in 1..=config.iterations {
                let batch = rx
                    .recv()
                    .map_err(|_| Error::Dataset("sample producer stopped".into()))
                    .and_then(|b| b)
                    .map_err(wrap(iter))?;
                let rec = step(iter, batch, &mut net).map_err(wrap(iter))?;
                on_iteration(&rec, &net.params).map_err(wrap(iter))?;
                log.push(rec);
            }
            Ok(())
        })?;
    }
    net.zero_grad();
    Ok(TrainOutcome {
        params: net.params,
        log,
    })
}

/// Paths written by [`train_loop`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Loads the training split of the manifest, trains, and writes
/// `loss.csv`, periodic checkpoints and the final `model.bin` to `out_dir`.
/// `progress` sees every record as it is produced.
pub fn train_loop(
    config: &TrainConfig,
    mut progress: impl FnMut(&LossRecord),
) -> Result<(TrainOutcome, TrainArtifacts)> {
    config.validate()?;
    let manifest = Manifest::load(&config.manifest)?;
    let scenes = manifest.load_split(Split::Train, config.model.classes)?;
    let out = &config.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut checkpoints = Vec::new();
    let outcome = train_scenes(config, &scenes, |rec, params| {
        progress(rec);
        if config.checkpoint_every > 0 && rec.iter % config.checkpoint_every == 0 {
            let path = out.join(format!("ckpt_{:06}.bin", rec.iter));
            save_checkpoint(params, &path)?;
            checkpoints.push(path);
        }
        Ok(())
    })?;
    let log_path = out.join("loss.csv");
    let file = std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    write_log(&outcome.log, std::io::BufWriter::new(file)).map_err(|e| Error::io(&log_path, e))?;
    let checkpoint = out.join("model.bin");
    save_checkpoint(&outcome.params, &checkpoint)?;
    Ok((
        outcome,
        TrainArtifacts {
            checkpoint,
            log: log_path,
            checkpoints,
        },
    ))
}

/// Reads a loss log written by [`write_log`].
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Dataset(format!("{}: missing loss-log header", path.display())));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || Error::Dataset(format!("{}: malformed row {}", path.display(), n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(LossRecord {
                iter: f[0].parse().map_err(|_| bad())?,
                dice: num(f[1])?,
                ce_main: num(f[2])?,
                ce_aux: num(f[3])?,
                total: num(f[4])?,
                lr: num(f[5])?,
            })
        })
        .collect()
}

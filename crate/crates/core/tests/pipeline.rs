use std::path::Path;

use sfr_core::dataset::{Manifest, Scene, Split};
use sfr_core::geometry::FrustumConfig;
use sfr_core::infer::{infer_image, infer_logits, plan_prps, predict_window, ConstantModel, LogitCanvas, WindowModel};
use sfr_core::metrics::{evaluate, ConfusionMatrix};
use sfr_core::model::{load_checkpoint, save_checkpoint, ModelConfig, ModelParams};
use sfr_core::raster::{load_labels, load_raster, RasterImage};
use sfr_core::rng::SeededRng;
use sfr_core::synth::{generate_dataset, SceneSpec};
use sfr_core::tensor::FeatureMap;
use sfr_core::train::{moving_average, read_log, train_loop, train_scenes, TrainConfig, LOG_HEADER};
use sfr_core::Error;

fn small_model(n: usize) -> ModelConfig {
    let mut m = ModelConfig::new(n, 3, (16, 16), 5);
    m.width = 6;
    m.main_depth = 2;
    m.sub_depth = 1;
    m.dim = 4;
    m
}

fn small_config(dir: &Path, iterations: usize) -> TrainConfig {
    let frustum = FrustumConfig::new(vec![1.0, 3.0, 8.0], (16, 16)).unwrap();
    let mut cfg = TrainConfig::new(frustum, small_model(3), dir.join("data/manifest.json"));
    cfg.iterations = iterations;
    cfg.warmup = 2;
    cfg.out_dir = dir.join("run");
    cfg.seed = 3;
    cfg
}

fn dataset(dir: &Path, n: usize) -> Manifest {
    generate_dataset(&SceneSpec::with_default_counts(128, 128, 40), n, 1, dir.join("data")).unwrap().1
}

fn scenes(m: &Manifest, split: Split) -> Vec<Scene> {
    m.load_split(split, 5).unwrap()
}

#[test]
fn manifest_paths_resolve_against_its_directory() {
    let d = tempfile::tempdir().unwrap();
    let m = dataset(d.path(), 3);
    let loaded = Manifest::load(d.path().join("data/manifest.json")).unwrap();
    assert_eq!(loaded.entries, m.entries);
    assert_eq!(m.split(Split::Val).count(), 1);
    let e = &loaded.entries[0];
    let img = load_raster(loaded.resolve(&e.image_path)).unwrap();
    let labels = load_labels(loaded.resolve(&e.label_path), 5).unwrap();
    assert_eq!(img.dims(), labels.dims());
}

#[test]
fn train_loop_writes_log_and_checkpoints() {
    let d = tempfile::tempdir().unwrap();
    dataset(d.path(), 3);
    let mut cfg = small_config(d.path(), 6);
    cfg.checkpoint_every = 3;
    let mut seen = Vec::new();
    let (outcome, artifacts) = train_loop(&cfg, |r| seen.push(r.iter)).unwrap();
    assert_eq!(seen, (1..=6).collect::<Vec<_>>());
    assert_eq!(artifacts.checkpoints.len(), 2);
    let text = std::fs::read_to_string(&artifacts.log).unwrap();
    assert_eq!(text.lines().next(), Some(LOG_HEADER));
    let log = read_log(&artifacts.log).unwrap();
    assert_eq!(log, outcome.log);
    assert!(log.iter().all(|r| r.total.is_finite()));
    let back = load_checkpoint(&artifacts.checkpoint).unwrap();
    assert_eq!(back, outcome.params);
}

#[test]
fn same_seed_logs_are_bitwise_identical_and_prefetch_matches() {
    let d = tempfile::tempdir().unwrap();
    let m = dataset(d.path(), 3);
    let train = scenes(&m, Split::Train);
    let cfg = small_config(d.path(), 8);
    let a = train_scenes(&cfg, &train, |_, _| Ok(())).unwrap();
    let b = train_scenes(&cfg, &train, |_, _| Ok(())).unwrap();
    let csv = |log: &[sfr_core::train::LossRecord]| log.iter().map(|r| r.csv_row()).collect::<Vec<_>>();
    assert_eq!(csv(&a.log), csv(&b.log));
    assert_eq!(a.params, b.params);

    let mut prefetch = cfg.clone();
    prefetch.workers = 2;
    let c = train_scenes(&prefetch, &train, |_, _| Ok(())).unwrap();
    assert_eq!(csv(&a.log), csv(&c.log));

    let mut other = cfg.clone();
    other.seed = 4;
    let e = train_scenes(&other, &train, |_, _| Ok(())).unwrap();
    assert_ne!(csv(&a.log), csv(&e.log));
}

#[test]
fn frozen_alpha_stays_zero() {
    let d = tempfile::tempdir().unwrap();
    let m = dataset(d.path(), 2);
    let mut cfg = small_config(d.path(), 5);
    cfg.freeze_alpha = true;
    let out = train_scenes(&cfg, &scenes(&m, Split::Train), |_, _| Ok(())).unwrap();
    assert!(out.params.alpha.value.iter().all(|&a| a == 0.0));
}

#[test]
fn callback_errors_carry_the_iteration() {
    let d = tempfile::tempdir().unwrap();
    let m = dataset(d.path(), 2);
    let cfg = small_config(d.path(), 5);
    let err = train_scenes(&cfg, &scenes(&m, Split::Train), |r, _| {
        if r.iter == 3 {
            Err(Error::Dataset("stop".into()))
        } else {
            Ok(())
        }
    })
    .unwrap_err();
    assert!(matches!(err, Error::Iteration { iteration: 3, .. }), "{err}");
}

#[test]
fn loss_moving_average_drops_on_a_single_scene() {
    let d = tempfile::tempdir().unwrap();
    let m = dataset(d.path(), 2);
    let mut cfg = small_config(d.path(), 300);
    cfg.warmup = 20;
    let out = train_scenes(&cfg, &scenes(&m, Split::Train), |_, _| Ok(())).unwrap();
    let ma = moving_average(&out.log, 100);
    assert!(ma[ma.len() - 1] < ma[0], "{} -> {}", ma[0], ma[ma.len() - 1]);
}

/// Deterministic per-window logits that vary with content and position.
struct ProbeModel;

impl WindowModel for ProbeModel {
    fn classes(&self) -> usize {
        4
    }

    fn predict(&self, patches: &[FeatureMap]) -> sfr_core::Result<FeatureMap> {
        let p = &patches[0];
        let mut out = FeatureMap::zeros(4, p.height, p.width);
        for c in 0..4 {
            for y in 0..p.height {
                for x in 0..p.width {
                    out.set(c, y, x, (p.get(c % 3, y, x) * 255.0).round() * (c as f64 + 1.0) - (x * c) as f64);
                }
            }
        }
        Ok(out)
    }
}

fn noise_image(w: usize, h: usize, seed: u64) -> RasterImage {
    let mut rng = SeededRng::new(seed);
    let bytes: Vec<u8> = (0..w * h * 3).map(|_| rng.below(256) as u8).collect();
    RasterImage::from_bytes(w, h, 3, &bytes).unwrap()
}

#[test]
fn window_order_does_not_change_the_canvas() {
    let image = noise_image(90, 70, 1);
    let frustum = FrustumConfig::new(vec![1.0, 4.0], (8, 8)).unwrap();
    let plan = plan_prps(image.dims(), frustum.local_ratio(), 6).unwrap();
    let forward = infer_logits(&ProbeModel, &image, &frustum, &plan, 1).unwrap();

    let mut order: Vec<usize> = (0..plan.len()).collect();
    let mut rng = SeededRng::new(2);
    for i in (1..order.len()).rev() {
        order.swap(i, rng.below(i + 1));
    }
    let mut shuffled = LogitCanvas::new(4, 90, 70);
    for &i in &order {
        let (logits, rect) = predict_window(&ProbeModel, &image, plan.prps[i], &frustum).unwrap();
        shuffled.accumulate(rect, &logits).unwrap();
    }
    // float addition is not associative: equal up to rounding, same argmax
    assert_eq!(shuffled.coverage, forward.coverage);
    for (a, b) in shuffled.sums.iter().zip(&forward.sums) {
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
    }
    assert_eq!(shuffled.finalize().unwrap(), forward.finalize().unwrap());
}

#[test]
fn worker_count_does_not_change_predictions() {
    let image = noise_image(64, 48, 3);
    let frustum = FrustumConfig::new(vec![1.0, 2.0, 6.0], (16, 16)).unwrap();
    let params = ModelParams::init(small_model(3), 5).unwrap();
    let a = infer_image(&params, &image, &frustum, 3, 1).unwrap();
    let b = infer_image(&params, &image, &frustum, 3, 4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn constant_model_is_constant_everywhere() {
    let image = noise_image(40, 30, 4);
    let frustum = FrustumConfig::new(vec![1.0, 5.0], (8, 8)).unwrap();
    let stub = ConstantModel {
        logits: vec![0.0, 2.0, 2.0, 1.0],
    };
    let labels = infer_image(&stub, &image, &frustum, 2, 1).unwrap();
    // tie between classes 1 and 2 goes to the lower index
    assert!(labels.data.iter().all(|&l| l == 1));
}

#[test]
fn evaluation_matches_summed_per_scene_matrices() {
    let d = tempfile::tempdir().unwrap();
    let m = generate_dataset(&SceneSpec::with_default_counts(128, 128, 7), 3, 3, d.path()).unwrap().1;
    let val = scenes(&m, Split::Val);
    let frustum = FrustumConfig::new(vec![1.0, 3.0, 8.0], (16, 16)).unwrap();
    let params = ModelParams::init(small_model(3), 8).unwrap();
    let joint = evaluate(&params, &val, &frustum, 8, 1).unwrap();
    let mut summed = ConfusionMatrix::new(5);
    for s in &val {
        let pred = infer_image(&params, &s.image, &frustum, 8, 1).unwrap();
        let mut one = ConfusionMatrix::new(5);
        one.update(&pred, &s.labels).unwrap();
        summed.merge(&one).unwrap();
    }
    assert_eq!(joint, summed);
    assert_eq!(joint.total(), 3 * 128 * 128);
    assert!(evaluate(&params, &[], &frustum, 8, 1).is_err());
}

#[test]
fn checkpoint_files_round_trip_byte_for_byte() {
    let d = tempfile::tempdir().unwrap();
    let params = ModelParams::init(small_model(2), 11).unwrap();
    let a = d.path().join("a.bin");
    let b = d.path().join("b.bin");
    save_checkpoint(&params, &a).unwrap();
    save_checkpoint(&load_checkpoint(&a).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

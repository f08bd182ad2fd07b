mod common;

use std::path::Path;

use candle::{DType, Device};
use sparsedc::depthio::{self, DepthMap, Sample};
use sparsedc::metrics;
use sparsedc::patterns::PatternSpec;
use sparsedc::pipeline::{
    self, Checkpoint, DataConfig, ModelConfig, SparseDc, TrainConfig, TrainPattern, TrainState, Trainer,
};
use sparsedc::refine::RefineConfig;
use sparsedc::sffm::SffmConfig;
use sparsedc::synthetic;
use sparsedc::twobranch::BranchConfig;
use sparsedc::uffm::{FusionMode, UffmConfig};
use sparsedc::Error;

fn small_model() -> ModelConfig {
    ModelConfig {
        sffm: SffmConfig {
            channels: 4,
            ..Default::default()
        },
        branches: BranchConfig {
            pyramid_widths: vec![4, 4, 4, 4],
            local_widths: vec![4, 4, 4, 4, 4],
            global_widths: vec![4, 4, 4, 4],
            global_heads: vec![1, 1, 1, 1],
            ..BranchConfig::default()
        },
        uffm: UffmConfig {
            head_width: 4,
            ..Default::default()
        },
        refine: RefineConfig {
            hidden: 4,
            iterations: 2,
            ..Default::default()
        },
        ..ModelConfig::default()
    }
}

fn small_train(out_dir: &Path) -> TrainConfig {
    TrainConfig {
        data: DataConfig::Synthetic { count: 2, seed: 3 },
        model: small_model(),
        lr: 1e-3,
        max_steps: Some(2),
        seed: 5,
        out_dir: out_dir.to_path_buf(),
        ..TrainConfig::default()
    }
}

fn save_untrained(path: &Path, cfg: &ModelConfig) -> SparseDc {
    let model = SparseDc::new(cfg, 2, DType::F32, &Device::Cpu).unwrap();
    Checkpoint::capture(&model, None, &TrainState::new(1e-4), None).unwrap().save(path).unwrap();
    model
}

fn write_scenes(dir: &Path, count: usize) -> (std::path::PathBuf, Vec<Sample>) {
    let mut manifest = depthio::Manifest::default();
    let mut samples = Vec::new();
    for s in synthetic::scenes(count, 11).unwrap() {
        let image = dir.join(format!("{}_rgb.png", s.id));
        let depth = dir.join(format!("{}.png", s.id));
        depthio::write_image_file(&image, &s.image).unwrap();
        depthio::write_depth_file(&depth, &s.gt).unwrap();
        let entry = depthio::ManifestEntry {
            image,
            depth,
            split: depthio::Split::Train,
        };
        samples.push(entry.load().unwrap());
        manifest.entries.push(entry);
    }
    let path = dir.join("manifest.tsv");
    manifest.write(&path).unwrap();
    (path, samples)
}

#[test]
fn evaluate_is_deterministic_and_reports_every_pattern() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.safetensors");
    save_untrained(&ckpt, &small_model());
    let (manifest, samples) = write_scenes(dir.path(), 2);
    for spec in ["random_n:n=500,seed=7", "random_n:n=5,seed=7"] {
        let pattern: PatternSpec = spec.parse().unwrap();
        let a = pipeline::evaluate(&ckpt, &manifest, &pattern).unwrap();
        let b = pipeline::evaluate(&ckpt, &manifest, &pattern).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.rmse.is_finite() && a.mae.is_finite());
    }
    let holes: PatternSpec = "big_holes:n=500,hole_side=16,seed=1".parse().unwrap();
    let report = pipeline::evaluate(&ckpt, &manifest, &holes).unwrap();
    let gt_valid: usize = samples.iter().map(|s| s.gt.valid_count()).sum();
    assert_eq!(report.n_valid, gt_valid);
}

#[test]
fn incompatible_widths_are_a_config_error() {
    let model = SparseDc::new(&small_model(), 0, DType::F32, &Device::Cpu).unwrap();
    let mut ckpt = Checkpoint::capture(&model, None, &TrainState::new(1e-4), None).unwrap();
    ckpt.model.sffm.channels = 6;
    assert!(matches!(ckpt.build_model(&Device::Cpu), Err(Error::Config(_))));
}

#[test]
fn complete_round_trip_matches_in_memory_inference() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.safetensors");
    let model = save_untrained(&ckpt, &small_model());
    let scene = &synthetic::scenes(1, 4).unwrap()[0];
    let (image_path, gt_path, sparse_path, out_path) = (
        dir.path().join("rgb.png"),
        dir.path().join("gt.png"),
        dir.path().join("sparse.png"),
        dir.path().join("out.png"),
    );
    depthio::write_image_file(&image_path, &scene.image).unwrap();
    depthio::write_depth_file(&gt_path, &scene.gt).unwrap();
    let gt = depthio::read_depth_file(&gt_path).unwrap();
    let image = depthio::read_image_file(&image_path).unwrap();
    let sparse = PatternSpec::random(200, 9).apply_for(&gt, &image, "rgb").unwrap();
    depthio::write_depth_file(&sparse_path, &sparse).unwrap();

    let done = pipeline::complete_files(&ckpt, &image_path, &sparse_path, &out_path, false).unwrap();
    assert_eq!(done.written, vec![out_path.clone()]);
    let from_file = depthio::read_depth_file(&out_path).unwrap();
    let in_memory = model.complete(&image, &depthio::read_depth_file(&sparse_path).unwrap()).unwrap();
    let a = metrics::compute_metrics(&from_file, &gt).unwrap();
    let b = metrics::compute_metrics(&in_memory, &gt).unwrap();
    assert!((a.rmse - b.rmse).abs() <= 5e-4, "{} vs {}", a.rmse, b.rmse);
    assert!((a.mae - b.mae).abs() <= 5e-4, "{} vs {}", a.mae, b.mae);
    let cap = small_model().depth_cap as f32;
    assert!(from_file.values().iter().all(|v| (0.0..=cap + 1e-3).contains(v)));
}

#[test]
fn complete_with_no_points_and_weight_dump() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.safetensors");
    save_untrained(&ckpt, &small_model());
    let scene = &synthetic::scenes(1, 6).unwrap()[0];
    let image_path = dir.path().join("rgb.png");
    let sparse_path = dir.path().join("empty.png");
    depthio::write_image_file(&image_path, &scene.image).unwrap();
    depthio::write_depth_file(&sparse_path, &DepthMap::zeros(scene.gt.width(), scene.gt.height())).unwrap();
    let out = dir.path().join("pred.png");
    let done = pipeline::complete_files(&ckpt, &image_path, &sparse_path, &out, true).unwrap();
    assert_eq!(done.depth.dims(), scene.gt.dims());
    assert!(done.depth.values().iter().all(|v| v.is_finite() && *v >= 0.0));
    assert_eq!(done.written.len(), 1 + 2 * 4);
    for p in &done.written[1..] {
        let img = image::open(p).unwrap();
        assert!(p.file_name().unwrap().to_string_lossy().starts_with("pred_"));
        assert!(img.width() >= 1);
    }
}

#[test]
fn missing_files_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.safetensors");
    save_untrained(&ckpt, &small_model());
    let missing = dir.path().join("nope.png");
    let err = pipeline::complete_files(&ckpt, &missing, &missing, &dir.path().join("o.png"), false).unwrap_err();
    assert!(err.to_string().contains("nope.png"), "{err}");
}

#[test]
fn nonfinite_loss_aborts_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_train(dir.path());
    let mut trainer = Trainer::new(&cfg).unwrap();
    for (_, var) in trainer.model().params().vars() {
        let t = var.as_tensor();
        var.set(&candle::Tensor::full(f32::NAN, t.dims(), t.device()).unwrap()).unwrap();
    }
    match trainer.step(&[0, 1]) {
        Err(Error::NonFiniteLoss { step, sample_ids }) => {
            assert_eq!(step, 0);
            assert_eq!(sample_ids, vec!["synthetic-000".to_string(), "synthetic-001".to_string()]);
        }
        other => panic!("expected a non-finite loss, got {other:?}"),
    }
    let dump = std::fs::read_to_string(dir.path().join(pipeline::train::NONFINITE_DUMP)).unwrap();
    assert!(dump.contains("synthetic-001"));
}

#[test]
fn checkpoint_round_trip_reproduces_validation() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = Trainer::new(&small_train(dir.path())).unwrap().run().unwrap();
    assert_eq!(outcome.state.step, 2);
    let ckpt = Checkpoint::load(&outcome.best_checkpoint, &Device::Cpu).unwrap();
    let cfg = ckpt.train.clone().unwrap();
    let model = ckpt.build_model(&Device::Cpu).unwrap();
    let (_, val) = pipeline::train::load_data(&cfg).unwrap();
    let rmse = pipeline::evaluate_samples(&model, &val, &cfg.val_pattern).unwrap().rmse;
    assert!((rmse - ckpt.state.best_val_rmse.unwrap()).abs() <= 1e-6);
    let adam = ckpt.adam.as_ref().unwrap();
    assert_eq!(adam.step, outcome.state.step as u64);
}

#[test]
fn plain_fusion_and_row_masking_train() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_train(dir.path());
    cfg.model.uffm.mode = FusionMode::Plain;
    cfg.row_mask = Some(0.5);
    cfg.pattern = TrainPattern::RandomRange { min: 5, max: 50 };
    let outcome = pipeline::train(&cfg).unwrap();
    assert_eq!(outcome.state.step, 2);
    assert!(outcome.state.best_val_rmse.unwrap().is_finite());
    let log = std::fs::read_to_string(dir.path().join(pipeline::train::STEP_LOG)).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["loss"]["total"].as_f64().unwrap().is_finite());
        assert!(v["points"].as_array().unwrap().iter().all(|p| p.as_u64().unwrap() <= 50));
    }
}

#[test]
fn config_file_paths_resolve_against_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.toml");
    std::fs::write(&path, "out_dir = \"run\"\n[data]\nkind = \"manifest\"\npath = \"m.tsv\"\n").unwrap();
    let cfg = TrainConfig::load(&path).unwrap();
    assert_eq!(cfg.out_dir, dir.path().join("run"));
    assert_eq!(cfg.data, DataConfig::Manifest { path: dir.path().join("m.tsv") });
}

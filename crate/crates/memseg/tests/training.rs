//! Trainer behavior: overfit smoke runs, guidance warm-up, memory cadence,
//! checkpoint state round-trips.

use memseg::data::{generate_synthetic, DatasetManifest, GenConfig};
use memseg::encoder::EncoderConfig;
use memseg::model::{Model, ModelConfig, Variant};
use memseg::train::{AugmentationConfig, TrainConfig, Trainer};

fn tiny_dataset(dir: &std::path::Path, videos: usize, k: usize) -> DatasetManifest {
    let cfg = GenConfig {
        n_videos: videos,
        frames_per_video: 4,
        height: 32,
        width: 32,
        k,
        train_fraction: 1.0,
        ..GenConfig::default()
    };
    generate_synthetic(dir, 0, &cfg).unwrap()
}

fn tiny_model(variant: Variant, k: usize, seed: u64) -> Model {
    let config = ModelConfig {
        k,
        embed_dim: 8,
        variant,
        encoder: EncoderConfig {
            channels: [4, 8, 8, 8],
            trainable: true,
        },
        pool_grids: vec![1, 2],
        ..ModelConfig::default()
    };
    Model::init(config, seed).unwrap()
}

fn tiny_train_config(steps: usize) -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        max_steps: Some(steps),
        crop_h: 32,
        crop_w: 32,
        batch_size: 2,
        seed: 0,
        ..TrainConfig::default()
    }
}

#[test]
fn overfit_single_video_decreases_loss() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 1, 3);
    let model = tiny_model(Variant::DecoderA, 3, 1);
    let mut trainer = Trainer::new(
        model,
        &manifest,
        tiny_train_config(50),
        AugmentationConfig::identity(),
    )
    .unwrap();
    let mut losses = Vec::new();
    for _ in 0..50 {
        losses.push(trainer.step().unwrap().loss);
    }
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(
        tail < head * 0.5,
        "loss did not drop: first5 {head:.4} vs last5 {tail:.4}"
    );
}

#[test]
fn memory_counter_advances_once_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 1, 3);
    let model = tiny_model(Variant::DecoderA, 3, 2);
    let mut trainer = Trainer::new(
        model,
        &manifest,
        tiny_train_config(10),
        AugmentationConfig::identity(),
    )
    .unwrap();
    assert_eq!(trainer.model.memory().unwrap().t(), 0);
    for expected in 1..=5u64 {
        let record = trainer.step().unwrap();
        assert_eq!(record.memory_t, expected);
        assert_eq!(trainer.model.memory().unwrap().t(), expected);
    }
}

#[test]
fn baseline_and_decoder_b_train() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 1, 3);
    for variant in [Variant::Baseline, Variant::DecoderB] {
        let model = tiny_model(variant, 3, 3);
        let mut trainer = Trainer::new(
            model,
            &manifest,
            tiny_train_config(6),
            AugmentationConfig::identity(),
        )
        .unwrap();
        for _ in 0..6 {
            let record = trainer.step().unwrap();
            assert!(record.loss.is_finite());
        }
        if variant == Variant::DecoderB {
            assert_eq!(trainer.model.memory().unwrap().t(), 6);
        }
    }
}

#[test]
fn warmup_fraction_one_always_uses_gt() {
    // with warmup_fraction = 1 every step is a warm-up step; this must run
    // without needing any previous-frame data
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig {
        n_videos: 1,
        frames_per_video: 1, // no frame has a predecessor
        height: 32,
        width: 32,
        k: 3,
        train_fraction: 1.0,
        ..GenConfig::default()
    };
    let manifest = generate_synthetic(dir.path(), 0, &cfg).unwrap();
    let model = tiny_model(Variant::DecoderA, 3, 4);
    let mut trainer = Trainer::new(
        model,
        &manifest,
        TrainConfig {
            warmup_fraction: 1.0,
            ..tiny_train_config(4)
        },
        AugmentationConfig::identity(),
    )
    .unwrap();
    for _ in 0..4 {
        trainer.step().unwrap();
    }
}

#[test]
fn training_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 2, 3);
    let run = || {
        let model = tiny_model(Variant::DecoderA, 3, 5);
        let mut trainer = Trainer::new(
            model,
            &manifest,
            tiny_train_config(8),
            AugmentationConfig::default(),
        )
        .unwrap();
        let mut losses = Vec::new();
        for _ in 0..8 {
            losses.push(trainer.step().unwrap().loss);
        }
        (losses, trainer.model)
    };
    let (la, ma) = run();
    let (lb, mb) = run();
    assert_eq!(la, lb);
    assert_eq!(ma, mb);
}

#[test]
fn checkpoint_round_trip_reproduces_state_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 2, 3);
    let model = tiny_model(Variant::DecoderA, 3, 6);
    let mut trainer = Trainer::new(
        model,
        &manifest,
        tiny_train_config(20),
        AugmentationConfig::default(),
    )
    .unwrap();
    for _ in 0..3 {
        trainer.step().unwrap();
    }
    let path = dir.path().join("ck.msck");
    trainer.save_checkpoint(&path).unwrap();

    let mut resumed = Trainer::load_checkpoint(&path, &manifest).unwrap();
    assert_eq!(resumed.model, trainer.model);
    assert_eq!(resumed.step_index, trainer.step_index);
    assert_eq!(resumed.total_steps, trainer.total_steps);
    assert_eq!(resumed.opt.step_count, trainer.opt.step_count);
    assert_eq!(resumed.opt.moments(), trainer.opt.moments());

    // the resumed trainer continues exactly like the original
    let a = trainer.step().unwrap();
    let b = resumed.step().unwrap();
    assert_eq!(a.loss, b.loss);
    assert_eq!(resumed.model, trainer.model);
}

#[test]
fn prediction_guidance_mode_runs() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = tiny_dataset(dir.path(), 1, 3);
    let model = tiny_model(Variant::DecoderA, 3, 7);
    let mut trainer = Trainer::new(
        model,
        &manifest,
        TrainConfig {
            guidance_mode: memseg::train::GuidanceMode::PrevFramePrediction,
            warmup_fraction: 0.0,
            ..tiny_train_config(4)
        },
        AugmentationConfig::identity(),
    )
    .unwrap();
    for _ in 0..4 {
        assert!(trainer.step().unwrap().loss.is_finite());
    }
}

mod common;

use axvec_core::data::{generate_corpus, CorpusSpec};
use axvec_core::model::{ArchConfig, Head, Model, Variant};
use axvec_core::numerics::Matrix;
use axvec_core::training::{make_batches, train, TrainConfig};
use axvec_core::Error;

fn corpus() -> (Vec<Matrix>, Vec<usize>) {
    let c = generate_corpus(&CorpusSpec {
        num_speakers: 8,
        utts_per_speaker: 8,
        feature_dim: 6,
        frames_min: 30,
        frames_max: 60,
        ..CorpusSpec::default()
    })
    .unwrap();
    let labels = c.labels();
    (c.utterances.into_iter().map(|u| u.features).collect(), labels)
}

fn arch(variant: Variant) -> ArchConfig {
    ArchConfig {
        input_dim: 6,
        frame_layer_dims: vec![16, 16, 16, 16, 32],
        utterance_layer_dims: vec![16, 16],
        num_speakers: 8,
        variant,
        attention_hidden: 8,
        pool_size: 3,
        ..ArchConfig::default()
    }
}

fn cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        crop_frames_min: 20,
        crop_frames_max: 40,
        total_steps: 60,
        lr_start: 1e-2,
        lr_end: 1e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn first_loss_is_near_uniform_and_training_makes_progress() {
    let (utts, labels) = corpus();
    for v in Variant::ALL {
        let mut model = Model::build(&arch(v), 3).unwrap();
        let mut saved = 0;
        let log = train(&mut model, &utts, &labels, &cfg(), |_| {}, |_, _| {
            saved += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(saved, 1);
        assert_eq!(log.steps.len(), 60);
        let ln_s = (8f64).ln();
        assert!((log.steps[0].loss / ln_s - 1.0).abs() < 0.2, "{v}: first loss {}", log.steps[0].loss);
        let epochs = log.epoch_means();
        assert!(epochs.last().unwrap().0 < epochs[0].0, "{v}: {epochs:?}");
        assert!(log.steps.iter().all(|s| s.loss.is_finite()));
        assert!(model.infer(&utts[..2], Head::Embedding).is_ok());
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_are_periodic() {
    let (utts, labels) = corpus();
    let cfg = TrainConfig {
        total_steps: 12,
        checkpoint_every: 5,
        ..cfg()
    };
    let run = || {
        let mut model = Model::build(&arch(Variant::AcnnAbn), 9).unwrap();
        let mut at = Vec::new();
        train(&mut model, &utts, &labels, &cfg, |_| {}, |s, _| {
            at.push(s);
            Ok(())
        })
        .unwrap();
        (model.to_records().to_bytes(), at)
    };
    let (a, at) = run();
    let (b, _) = run();
    assert_eq!(a, b);
    assert_eq!(at, vec![5, 10, 12]);
}

#[test]
fn save_load_preserves_logits_after_training() {
    let (utts, labels) = corpus();
    let mut model = Model::build(&arch(Variant::Abn), 4).unwrap();
    let cfg = TrainConfig { total_steps: 5, ..cfg() };
    train(&mut model, &utts, &labels, &cfg, |_| {}, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    let x = &utts[..3];
    assert_eq!(back.infer(x, Head::Logits).unwrap(), model.infer(x, Head::Logits).unwrap());
}

#[test]
fn labels_outside_the_output_layer_are_rejected() {
    let (utts, mut labels) = corpus();
    labels[0] = 8;
    let mut model = Model::build(&arch(Variant::Baseline), 4).unwrap();
    assert!(train(&mut model, &utts, &labels, &cfg(), |_| {}, |_, _| Ok(())).is_err());
}

#[test]
fn nan_inputs_abort_with_the_step() {
    let (mut utts, labels) = corpus();
    for u in &mut utts {
        u.fill(f64::NAN);
    }
    let mut model = Model::build(&arch(Variant::Baseline), 4).unwrap();
    let err = train(&mut model, &utts, &labels, &cfg(), |_| {}, |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss(0) | Error::NonFiniteGradient(_)), "{err}");
}

#[test]
fn batches_cover_the_corpus() {
    let (utts, labels) = corpus();
    let batches = make_batches(&utts, &labels, &cfg(), 1, 15).unwrap();
    assert_eq!(batches.iter().map(|b| b.labels.len()).sum::<usize>(), 64);
}

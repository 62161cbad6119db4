use proptest::prelude::*;

use pmad::cls::{ClsModel, ClsNetConfig};
use pmad::data::{synth_sample, DatasetSplit, Label};
use pmad::losses::{cross_entropy_term, focal_term};
use pmad::metrics::{cls_metrics, ConfusionMatrix};
use pmad::nn::{Mode, Session};
use pmad::seg::{SegModel, SegNetConfig};
use pmad::training::{cls_batch, no_hook, seg_batch, seg_train_step, train_segmentation, TrainConfig};
use pmad::Tape;

proptest! {
    #[test]
    fn focal_never_exceeds_cross_entropy(p in 0.0f64..=1.0, gamma in 0.0f64..5.0) {
        prop_assert!(focal_term(p, gamma) <= cross_entropy_term(p));
    }

    #[test]
    fn micro_metrics_ignore_class_order(
        pairs in prop::collection::vec((0usize..3, 0usize..3), 1..40),
        perm in Just([0usize, 1, 2]).prop_shuffle(),
    ) {
        let names = ["a", "b", "c"];
        let mut plain = ConfusionMatrix::new(&names);
        let mut permuted = ConfusionMatrix::new(&names);
        for &(a, p) in &pairs {
            plain.record(a, p).unwrap();
            permuted.record(perm[a], perm[p]).unwrap();
        }
        prop_assert_eq!(cls_metrics(&plain).unwrap(), cls_metrics(&permuted).unwrap());
    }
}

fn single(label: Label, side: usize) -> DatasetSplit {
    DatasetSplit {
        train: vec![synth_sample(label, 0, side, 3).unwrap().0],
        validation: Vec::new(),
        seed: 3,
        fractions: (1.0, 0.0),
    }
}

#[test]
fn repeated_sample_loss_decreases_every_epoch() {
    let split = single(Label::Benign, 32);
    let mut model = SegModel::new(SegNetConfig::tiny().with_input(32, 32), 3).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 20,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let reports = train_segmentation(&mut model, &split, &cfg, &mut no_hook()).unwrap();
    let losses: Vec<f64> = reports.iter().map(|r| r.train_loss.unwrap()).collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn small_step_decreases_the_sample_loss() {
    // Same dropout masks and batch statistics as the step itself.
    let cfg = TrainConfig::default();
    for seed in 0..10 {
        let (s, _) = synth_sample(Label::ALL[seed as usize % 3], seed as usize, 32, seed).unwrap();
        let mut model = SegModel::new(SegNetConfig::tiny().with_input(32, 32), seed).unwrap();
        let loss = |m: &SegModel| {
            let (x, target) = seg_batch(&[&s]).unwrap();
            let mut tape = Tape::new();
            let mut sess = Session::new(&m.params, Mode::Train).with_dropout_seed(seed).tracking_params(false);
            let xv = tape.constant(x);
            let probs = pmad::model::Network::forward(m, &mut sess, &mut tape, xv).unwrap();
            let l = pmad::losses::total_seg_loss(&mut tape, probs, &target, cfg.focal_gamma, false).unwrap();
            l.values(&tape).0
        };
        let before = loss(&model);
        seg_train_step(&mut model, &[&s], &cfg, 1e-4, seed).unwrap();
        let after = loss(&model);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

#[test]
fn fixed_seed_gives_identical_trajectories() {
    let split = single(Label::Malignant, 32);
    let cfg = TrainConfig {
        learning_rate: 0.01,
        epochs: 3,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let run = || {
        let mut m = SegModel::new(SegNetConfig::tiny().with_input(32, 32), 5).unwrap();
        train_segmentation(&mut m, &split, &cfg, &mut no_hook())
            .unwrap()
            .iter()
            .map(|r| r.train_loss.unwrap().to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn classifier_input_is_masked() {
    let (s, _) = synth_sample(Label::Benign, 2, 32, 1).unwrap();
    let (x, labels) = cls_batch(&[&s]).unwrap();
    assert_eq!(x.shape(), &[1, 3, 32, 32]);
    assert_eq!(labels, vec![Label::Benign.index()]);
    for (i, &m) in s.mask.values.iter().enumerate() {
        if m == 0 {
            assert_eq!(x.values()[i], 0.0);
        }
    }
    let model = ClsModel::new(ClsNetConfig::tiny().with_input(32, 32), 1).unwrap();
    let probs = model.classify(&x).unwrap();
    assert!((probs.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

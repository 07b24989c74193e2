mod common;

use ata_core::augment::AugmentConfig;
use ata_core::models::EncoderConfig;
use ata_core::tasks::{ClassImages, DatasetHandle, ShiftParams, Split, Task};
use ata_core::train::{
    adapt_meta_finetune, evaluate, finetune_baseline, meta_train_with, plain_episodic_train, pretrain_encoder, EvalReport, FinetuneConfig,
    IterationRecord, PseudoConfig, TrainConfig, UniformPredictor,
};
use ata_core::{ModelParams, Tensor};
use common::*;
use proptest::prelude::*;

fn small_config(head_name: &str) -> TrainConfig {
    TrainConfig {
        encoder: EncoderConfig {
            channels: vec![4, 4],
            image_size: 8,
            ..Default::default()
        },
        head: head(head_name),
        iterations: 20,
        train_queries_per_class: 2,
        eval_queries_per_class: 2,
        eval_episodes: 50,
        pretrain_epochs: 3,
        pretrain_batch_size: 8,
        ..Default::default()
    }
}

fn trajectory(run: impl FnOnce(&mut dyn FnMut(&IterationRecord, &ModelParams) -> ata_core::Result<()>)) -> Vec<ModelParams> {
    let mut out = Vec::new();
    run(&mut |_, p| {
        out.push(p.clone());
        Ok(())
    });
    out
}

#[test]
fn no_augmentation_reduces_to_plain_training() {
    let data = domain("src", 8, 0, 8, 5, ShiftParams::default());
    for h in HEADS {
        let mut cfg = small_config(h);
        cfg.augment = AugmentConfig::disabled();
        let init = cfg.network().unwrap().init_params(5);
        let a = trajectory(|obs| {
            meta_train_with(&data, None, &init, &cfg, obs).unwrap();
        });
        let b = trajectory(|obs| {
            plain_episodic_train(&data, &init, &cfg, obs).unwrap();
        });
        assert_eq!(a.len(), 20);
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_identical(y)), "{h}");
    }
}

#[test]
fn augmented_training_logs_every_ascent() {
    let data = domain("src", 8, 0, 8, 5, ShiftParams::default());
    let mut cfg = small_config("prototypical");
    cfg.iterations = 6;
    cfg.augment = AugmentConfig {
        beta: 0.01,
        t_max: 3,
        p: 0.5,
        filter_pool: vec![1, 3],
        ..Default::default()
    };
    let init = cfg.network().unwrap().init_params(0);
    let mut records = Vec::new();
    meta_train_with(&data, None, &init, &cfg, &mut |r, _| {
        records.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(records.len(), 6);
    assert!(records.iter().all(|r| r.ascent_losses.len() == 4 && r.loss_before == r.ascent_losses[0]));
}

#[test]
fn validation_keeps_the_best_iterate() {
    let data = domain("src", 8, 0, 8, 5, ShiftParams::default());
    let val = domain("val", 6, 8, 8, 4, ShiftParams::default());
    let mut cfg = small_config("prototypical");
    cfg.iterations = 6;
    cfg.validate_every = 2;
    cfg.validation_episodes = 10;
    let init = cfg.network().unwrap().init_params(0);
    let out = ata_core::train::meta_train(&data, Some(&val), &init, &cfg).unwrap();
    let scored: Vec<f64> = out.records.iter().filter_map(|r| r.validation_accuracy).collect();
    assert_eq!(scored.len(), 3);
    let best = scored.iter().copied().fold(f64::MIN, f64::max);
    assert_eq!(out.best_validation_accuracy, Some(best));
}

#[test]
fn uniform_guessing_is_at_chance() {
    let data = domain("d", 10, 0, 4, 17, ShiftParams::default());
    let r = evaluate(&UniformPredictor, &data, 2000, 5, 1, 16, 7).unwrap();
    assert!((0.17..=0.23).contains(&r.mean_accuracy), "{}", r.mean_accuracy);
    let n = r.per_episode_accuracies.len() as f64;
    let mean = r.per_episode_accuracies.iter().sum::<f64>() / n;
    let sd = (r.per_episode_accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!((r.ci95_halfwidth - 1.96 * sd / n.sqrt()).abs() < 1e-12);
    let again = evaluate(&UniformPredictor, &data, 2000, 5, 1, 16, 7).unwrap();
    assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn confidence_interval_shrinks_with_repetition(acc in prop::collection::vec(0.0f64..=1.0, 2..40)) {
        let one = EvalReport::from_accuracies(acc.clone()).unwrap();
        let four = EvalReport::from_accuracies(acc.iter().cycle().take(acc.len() * 4).copied().collect()).unwrap();
        prop_assert!((four.mean_accuracy - one.mean_accuracy).abs() < 1e-12);
        prop_assert!((four.ci95_halfwidth - one.ci95_halfwidth / 2.0).abs() < 1e-12);
        prop_assert!(one.ci95_halfwidth >= 0.0);
    }
}

/// Two classes that differ only in which half of the image is lit.
fn halves() -> DatasetHandle {
    let classes = (0..2)
        .map(|c| {
            let images = (0..24)
                .map(|i| {
                    let noise = uniform_tensor(&[3 * 64], -0.1, 0.1, (c * 100 + i) as u64);
                    (0..3 * 64)
                        .map(|p| {
                            let col = p % 8;
                            let lit = (col < 4) == (c == 0);
                            (if lit { 0.8 } else { 0.2 }) + noise.data()[p]
                        })
                        .collect()
                })
                .collect();
            ClassImages {
                name: format!("half{c}"),
                images,
            }
        })
        .collect();
    DatasetHandle::new("halves", Split::Train, [3, 8, 8], classes).unwrap()
}

/// Logistic regression on raw pixels by gradient descent.
fn logistic_oracle(data: &DatasetHandle) -> f64 {
    let samples: Vec<(usize, &[f64])> = data.labeled_images().collect();
    let dim = samples[0].1.len();
    let (mut w, mut b) = (vec![0.0; dim], 0.0);
    for _ in 0..200 {
        let (mut gw, mut gb) = (vec![0.0; dim], 0.0);
        for (y, x) in &samples {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let err = 1.0 / (1.0 + (-z).exp()) - *y as f64;
            gw.iter_mut().zip(x.iter()).for_each(|(g, xi)| *g += err * xi);
            gb += err;
        }
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= 0.1 * g / samples.len() as f64);
        b -= 0.1 * gb / samples.len() as f64;
    }
    let hits = samples
        .iter()
        .filter(|(y, x)| {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            (z > 0.0) == (*y == 1)
        })
        .count();
    hits as f64 / samples.len() as f64
}

#[test]
fn pretraining_separates_a_separable_set() {
    let data = halves();
    assert_eq!(logistic_oracle(&data), 1.0);
    let mut cfg = small_config("prototypical");
    cfg.pretrain_epochs = 15;
    cfg.pretrain_lr = 1e-2;
    let out = pretrain_encoder(&data, &cfg).unwrap();
    assert!(out.train_accuracy > 0.95, "{out:?}", out = out.train_accuracy);
    assert!(out.epoch_losses.last() < out.epoch_losses.first());
    assert!(out.encoder.names().all(|n| n.starts_with("encoder.")));
    let again = pretrain_encoder(&data, &cfg).unwrap();
    assert!(again.encoder.bit_identical(&out.encoder));
}

#[test]
fn pretraining_needs_two_classes() {
    let data = domain("one", 1, 0, 8, 4, ShiftParams::default());
    assert!(pretrain_encoder(&data, &small_config("prototypical")).is_err());
}

#[test]
fn finetuning_uses_the_stated_protocol() {
    let net = small_net("prototypical", 8);
    let encoder = net.init_params(0).subset("encoder.");
    for (shot, epochs) in [(1, 30), (5, 50)] {
        let data = domain("t", 6, 0, 8, 8, ShiftParams::default());
        let task = ata_core::tasks::sample_episode(&data, 5, shot, 2, 3).unwrap();
        let out = finetune_baseline(&net, &encoder, &task, &FinetuneConfig::default()).unwrap();
        assert_eq!((out.lr, out.momentum, out.epochs), (0.01, 0.9, epochs));
        assert_eq!(out.optimizer_steps, epochs as u64);
        assert_eq!(out.pseudo_per_epoch, vec![5 * 15; epochs]);
        assert_eq!(out.samples_per_epoch, vec![5 * 15 + 5 * shot; epochs]);
    }
}

#[test]
fn finetuning_memorises_its_support_set() {
    // queries are the support images themselves, so fitting the support must score well
    let net = small_net("prototypical", 8);
    let encoder = net.init_params(1).subset("encoder.");
    let data = domain("t", 5, 0, 8, 4, ShiftParams::default());
    let t = ata_core::tasks::sample_episode(&data, 5, 2, 1, 9).unwrap();
    let task = Task::new(t.support_x.clone(), t.support_y.clone(), t.support_x.clone(), t.support_y.clone(), 5, 2).unwrap();
    let cfg = FinetuneConfig {
        lr: 0.05,
        pseudo: PseudoConfig {
            per_class: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = finetune_baseline(&net, &encoder, &task, &cfg).unwrap();
    assert!(out.accuracy >= 0.9, "{}", out.accuracy);
    assert!(out.epoch_losses.last() < out.epoch_losses.first());
}

#[test]
fn adaptation_lowers_the_pseudo_loss() {
    let net = small_net("prototypical", 8);
    let params = net.init_params(2);
    let task = small_task(8, 4);
    let cfg = FinetuneConfig {
        meta_lr: 1e-2,
        ..Default::default()
    };
    let out = adapt_meta_finetune(&net, &params, &task, &cfg).unwrap();
    assert_eq!(out.epochs, 30);
    assert_eq!(out.pseudo_per_epoch, vec![75; 30]);
    let head: f64 = out.epoch_losses[..5].iter().sum();
    let tail: f64 = out.epoch_losses[25..].iter().sum();
    assert!(tail < head, "{:?}", out.epoch_losses);
}

#[test]
fn closed_form_label_propagation_matches_iteration() {
    for alpha in [0.5, 0.9] {
        let net = ata_core::models::Network::new(
            EncoderConfig {
                channels: vec![4, 4],
                image_size: 8,
                ..Default::default()
            },
            ata_core::models::HeadKind::LabelPropagation {
                alpha,
                sigma: 1.0,
                k_neighbors: None,
            },
        )
        .unwrap();
        for s in 0..5 {
            let params = net.init_params(s);
            let task = small_task(8, 100 + s);
            let feats = net.encode_tensor(&params, &task.images()).unwrap();
            let rows: Vec<Vec<f64>> = feats.data().chunks(feats.shape()[1]).map(<[f64]>::to_vec).collect();
            let f = iterative_label_propagation(&rows, &task.support_y, task.way, alpha, 1.0, 200);
            let logits: Tensor = net.query_logits(&params, &task).unwrap();
            let ns = task.support_y.len();
            for (q, row) in logits.data().chunks(task.way).enumerate() {
                for c in 0..task.way {
                    assert!((row[c] - f[ns + q][c]).abs() < 1e-6, "alpha {alpha} seed {s}");
                }
            }
        }
    }
}

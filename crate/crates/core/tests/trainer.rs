mod common;

use common::*;
use dca_core::fusion::{FusionMode, FusionParams, ParamNodes};
use dca_core::numcore::Tape;
use dca_core::synthdata::{generate, Dataset, GeneratorConfig, LabeledSequence};
use dca_core::trainer::{
    ablate, batch_loss_on_tape, loss, train, HyperParams, LossKind, TrainError,
};

fn small_data(rate: f64, seed: u64) -> Dataset {
    generate(&GeneratorConfig {
        d_a: 5,
        d_v: 4,
        clips: 8,
        n_train: 16,
        n_val: 6,
        corruption_rate: rate,
        emission_seed: seed,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn batch_loss(
    params: &FusionParams,
    batch: &[&LabeledSequence],
    mode: FusionMode,
    hyper: &HyperParams,
) -> f64 {
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, params);
    let l = batch_loss_on_tape(&mut tape, nodes, batch, mode, hyper).unwrap();
    tape.value(l).get(0, 0)
}

#[test]
fn identical_seeds_give_identical_runs() {
    let data = small_data(0.4, 3);
    let hyper = HyperParams {
        epochs: 5,
        seed: 9,
        ..HyperParams::default()
    };
    for mode in [FusionMode::Ca, FusionMode::Dca] {
        let a = train(mode, &data, &hyper).unwrap();
        let b = train(mode, &data, &hyper).unwrap();
        assert_eq!(a.ccc_valence.to_bits(), b.ccc_valence.to_bits());
        assert_eq!(a.ccc_arousal.to_bits(), b.ccc_arousal.to_bits());
        assert_eq!(a, b);
        let c = train(
            mode,
            &data,
            &HyperParams {
                seed: 10,
                ..hyper.clone()
            },
        )
        .unwrap();
        assert_ne!(a.final_params, c.final_params);
    }
}

#[test]
fn small_gradient_step_lowers_the_loss() {
    for seed in 0..10 {
        let data = small_data(0.4, seed);
        let batch: Vec<&LabeledSequence> = data.train.iter().take(4).collect();
        for (mode, kind) in [
            (FusionMode::Dca, LossKind::Ccc),
            (FusionMode::Ca, LossKind::Ccc),
            (FusionMode::Dca, LossKind::Mse),
        ] {
            let hyper = HyperParams {
                loss: kind,
                ..HyperParams::default()
            };
            let params = random_params(&mut rng(seed), 5, 4, 0.5, hyper.temperature);
            let mut tape = Tape::new();
            let nodes = ParamNodes::register(&mut tape, &params);
            let l = batch_loss_on_tape(&mut tape, nodes, &batch, mode, &hyper).unwrap();
            let before = tape.value(l).get(0, 0);
            let grads = tape.backward(l).unwrap();
            let stepped: Vec<_> = params
                .matrices()
                .iter()
                .zip(nodes.all())
                .map(|(p, id)| p.add(&grads.wrt(id).scale(-1e-4)).unwrap())
                .collect();
            let next = FusionParams::from_matrices(stepped, hyper.temperature);
            let after = batch_loss(&next, &batch, mode, &hyper);
            assert!(
                after < before,
                "seed {seed} {mode:?} {kind:?}: {before} -> {after}"
            );
        }
    }
}

#[test]
fn training_reduces_loss_and_keeps_it_in_range() {
    let data = small_data(0.4, 1);
    let hyper = HyperParams {
        epochs: 30,
        ..HyperParams::default()
    };
    for mode in [FusionMode::Ca, FusionMode::Dca] {
        let r = train(mode, &data, &hyper).unwrap();
        assert_eq!(r.loss_history.len(), 30);
        assert_eq!(r.val_history.len(), 30);
        assert!(r.loss_history.iter().all(|&l| (0.0..=2.0).contains(&l)));
        assert!(r.loss_history[29] < r.loss_history[0]);
        let best = r
            .val_history
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.val_history[r.epochs_to_best - 1], best);
        assert!(((r.ccc_valence + r.ccc_arousal) / 2.0 - best).abs() <= 1e-12);
    }
}

#[test]
fn loss_examples() {
    let t =
        dca_core::metrics::EmotionTrack::new(vec![0.1, 0.5, -0.6], vec![0.0, 0.2, -0.2]).unwrap();
    assert!(loss(&t, &t).unwrap().abs() <= 1e-12);
    let neg =
        dca_core::metrics::EmotionTrack::new(vec![-0.1, -0.5, 0.6], vec![0.0, -0.2, 0.2]).unwrap();
    assert!((loss(&neg, &t).unwrap() - 2.0).abs() <= 1e-12);
}

#[test]
fn gate_weights_stay_strictly_inside_unit_interval() {
    let data = small_data(0.4, 2);
    let r = train(
        FusionMode::Dca,
        &data,
        &HyperParams {
            epochs: 10,
            ..HyperParams::default()
        },
    )
    .unwrap();
    let stats = r.gate_stats.unwrap();
    for g in [stats.audio, stats.visual] {
        assert!(g.mean_attended > 0.0 && g.mean_attended < 1.0);
        assert!(g.std_attended >= 0.0);
    }
    assert!(stats.visual.mean_attended_corrupted.is_some());
    assert!(stats.audio.mean_attended_corrupted.is_none());
    assert!(train(
        FusionMode::Ca,
        &data,
        &HyperParams {
            epochs: 1,
            ..HyperParams::default()
        }
    )
    .unwrap()
    .gate_stats
    .is_none());
}

#[test]
fn clean_data_reaches_regression_bound() {
    let data = generate(&GeneratorConfig {
        corruption_rate: 0.0,
        ..GeneratorConfig::default()
    })
    .unwrap();
    let hyper = HyperParams::default();
    let ca = train(FusionMode::Ca, &data, &hyper).unwrap();
    let dca = train(FusionMode::Dca, &data, &hyper).unwrap();
    for r in [&ca, &dca] {
        assert!(
            r.ccc_valence >= 0.7 && r.ccc_arousal >= 0.7,
            "{:?}: {} {}",
            r.mode,
            r.ccc_valence,
            r.ccc_arousal
        );
    }
    assert!((dca.ccc_valence - ca.ccc_valence).abs() < 0.1);
    assert!((dca.ccc_arousal - ca.ccc_arousal).abs() < 0.1);
}

#[test]
fn parallel_ablation_matches_serial_runs() {
    let data = small_data(0.4, 5);
    let hyper = HyperParams {
        epochs: 4,
        ..HyperParams::default()
    };
    let seeds = [3, 1, 4];
    let modes = [FusionMode::Dca, FusionMode::Ca];
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(4)
        .build()
        .unwrap();
    let table = pool
        .install(|| ablate(&data, &seeds, &modes, &hyper))
        .unwrap();
    assert_eq!(table.runs.len(), 6);
    let mut i = 0;
    for mode in modes {
        for seed in seeds {
            let serial = train(
                mode,
                &data,
                &HyperParams {
                    seed,
                    ..hyper.clone()
                },
            )
            .unwrap();
            assert_eq!(table.runs[i], serial);
            i += 1;
        }
        let s = table.summary_for(mode).unwrap();
        let v: Vec<f64> = table
            .runs
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.ccc_valence)
            .collect();
        let mean = v.iter().sum::<f64>() / 3.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0;
        assert!((s.mean_valence - mean).abs() <= 1e-15);
        assert!((s.std_valence - var.sqrt()).abs() <= 1e-12);
    }
}

#[test]
fn bad_inputs_are_rejected() {
    let data = small_data(0.4, 0);
    let bad = [
        HyperParams {
            learning_rate: 0.0,
            ..HyperParams::default()
        },
        HyperParams {
            momentum: 1.0,
            ..HyperParams::default()
        },
        HyperParams {
            epochs: 0,
            ..HyperParams::default()
        },
        HyperParams {
            batch: 0,
            ..HyperParams::default()
        },
        HyperParams {
            temperature: -0.1,
            ..HyperParams::default()
        },
        HyperParams {
            smoothing_window: Some(4),
            ..HyperParams::default()
        },
    ];
    for h in bad {
        assert!(
            matches!(train(FusionMode::Dca, &data, &h), Err(TrainError::Hyper(_))),
            "{h:?}"
        );
    }
    let empty = Dataset {
        train: vec![],
        val: data.val.clone(),
    };
    assert!(train(FusionMode::Dca, &empty, &HyperParams::default()).is_err());
    assert!(ablate(&data, &[], &[FusionMode::Ca], &HyperParams::default()).is_err());
}

mod common;

use advex::adv_train::{AdvMode, AdvTrainConfig};
use advex::data::gen_blobs;
use advex::nn::LrSchedule;
use advex::regularizers::{LipschitzConfig, OutputZeroConfig};
use advex::train::{evaluate, train, TrainConfig};
use common::{plain_training, same_bits};

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 5,
        batch_size: 16,
        lr: LrSchedule {
            base: 0.05,
            warmup_epochs: 1,
            step_epochs: vec![4],
            step_factor: 0.1,
        },
        seed: 9,
        ..Default::default()
    }
}

#[test]
fn inactive_regularizers_reproduce_plain_training_bit_for_bit() {
    let data = gen_blobs(3, 40, 0.1, 4).unwrap();
    let cfg = TrainConfig {
        lipschitz: LipschitzConfig { psi: 0.0, ..Default::default() },
        output_zero: OutputZeroConfig { k_out: 0.0 },
        adv_train: AdvTrainConfig { mode: AdvMode::None, ..Default::default() },
        ..config()
    };
    let trained = train(&cfg, &data, None).unwrap().network;
    assert!(same_bits(&trained, &plain_training(&cfg, &data)));
}

#[test]
fn gradient_penalty_flattens_the_network() {
    let data = gen_blobs(3, 40, 0.1, 4).unwrap();
    let plain = train(&config(), &data, None).unwrap().network;
    let cfg = TrainConfig {
        lipschitz: LipschitzConfig { psi: 1.0, k: 3, ..Default::default() },
        ..config()
    };
    let smooth = train(&cfg, &data, None).unwrap().network;
    let g0 = evaluate(&plain, &data, None).unwrap().mean_abs_grad;
    let g1 = evaluate(&smooth, &data, None).unwrap().mean_abs_grad;
    assert!(g1 < g0, "{g1} vs {g0}");
}

#[test]
fn every_adversarial_mode_trains() {
    let data = gen_blobs(2, 20, 0.1, 4).unwrap();
    for mode in [AdvMode::L2, AdvMode::L2min, AdvMode::Gaussian] {
        for half_half in [false, true] {
            let cfg = TrainConfig {
                adv_train: AdvTrainConfig {
                    mode,
                    epsilon: 0.1,
                    half_half,
                    ..Default::default()
                },
                ..config()
            };
            let out = train(&cfg, &data, None).unwrap();
            assert!(out.report.last().accuracy > 0.8, "{mode:?} {half_half}");
        }
    }
}

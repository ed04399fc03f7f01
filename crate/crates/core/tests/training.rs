mod common;

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use common::{toy_batch, toy_trainer, values};
use polarfuse::data::{generate_synthetic_dataset, load_samples, training_pairs, SyntheticConfig};
use polarfuse::losses::{adversarial_loss_d, LossWeights};
use polarfuse::nn::{Adam, Mode, ParamStore, Precision};
use polarfuse::training::{train, TrainConfig, TrainingPair, Trainer, CHECKPOINT_FILE, LOG_FILE};
use proptest::prelude::*;

fn snapshot(store: &ParamStore) -> BTreeMap<String, Vec<f64>> {
    store.params().iter().map(|(k, v)| (k.clone(), values(v.as_tensor()))).collect()
}

fn toy_pairs(seed: u64) -> (tempfile::TempDir, Vec<TrainingPair>) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SyntheticConfig { num_subjects: 3, samples_per_subject: 2, resolution: 16, seed };
    let records = generate_synthetic_dataset(&dir.path().join("data"), &cfg).unwrap();
    let pairs = training_pairs(&load_samples(&records).unwrap(), DType::F32).unwrap();
    (dir, pairs)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn weights_are_a_function_of_seed_config_and_data(seed in 0u64..1000, iterations in 1u64..4) {
        let (dir, pairs) = toy_pairs(seed);
        let config = TrainConfig { seed, iterations, ..TrainConfig::toy() };
        let a = train(&config, &pairs, &dir.path().join("a"), false).unwrap();
        let b = train(&config, &pairs, &dir.path().join("b"), false).unwrap();
        prop_assert_eq!(std::fs::read(&a.checkpoint).unwrap(), std::fs::read(&b.checkpoint).unwrap());
        prop_assert_eq!(std::fs::read(&a.log).unwrap(), std::fs::read(&b.log).unwrap());
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let mut t = toy_trainer(LossWeights::default(), Precision::F32);
    let (x, y) = toy_batch(DType::F32, 1, 0);
    t.train_step(&x, &y).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p, q) = (dir.path().join("a.safetensors"), dir.path().join("b.safetensors"));
    t.save(&p).unwrap();
    let back = Trainer::load(&p).unwrap();
    back.save(&q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    assert_eq!(back.iteration(), 1);
    assert_eq!(snapshot(back.generator().store()), snapshot(t.generator().store()));
}

#[test]
fn resume_continues_the_same_trajectory() {
    let (dir, pairs) = toy_pairs(2);
    let full = TrainConfig { iterations: 6, ..TrainConfig::toy() };
    let a = train(&full, &pairs, &dir.path().join("a"), false).unwrap();
    let half = TrainConfig { iterations: 3, ..full.clone() };
    let out = dir.path().join("b");
    train(&half, &pairs, &out, false).unwrap();
    let b = train(&full, &pairs, &out, true).unwrap();
    assert_eq!(b.steps.len(), 3);
    assert_eq!(b.steps, a.steps[3..]);
    assert_eq!(std::fs::read(&a.checkpoint).unwrap(), std::fs::read(out.join(CHECKPOINT_FILE)).unwrap());
    assert_eq!(std::fs::read(&a.log).unwrap(), std::fs::read(out.join(LOG_FILE)).unwrap());
}

#[test]
fn resume_rejects_a_different_configuration() {
    let (dir, pairs) = toy_pairs(3);
    let config = TrainConfig { iterations: 1, ..TrainConfig::toy() };
    train(&config, &pairs, dir.path(), false).unwrap();
    let other = TrainConfig { seed: 99, iterations: 2, ..config };
    assert!(train(&other, &pairs, dir.path(), true).is_err());
}

/// Replays a step by hand: the discriminator update must leave the generator
/// untouched and the generator update must leave the discriminator untouched.
#[test]
fn updates_touch_only_their_own_network() {
    let mut stepped = toy_trainer(LossWeights::default(), Precision::F64);
    let replay = toy_trainer(LossWeights::default(), Precision::F64);
    let (x, y) = toy_batch(DType::F64, 2, 8);
    stepped.train_step(&x, &y).unwrap();

    let (g, d) = (replay.generator(), replay.discriminator());
    let g_before = snapshot(g.store());
    let adam = replay.config().adam();
    let out = g.forward(&x, Mode::Train).unwrap();
    let real = d.score(&y, None, Mode::Train).unwrap();
    let fake = d.score(&out.synthesized.detach(), None, Mode::Train).unwrap();
    let grads = adversarial_loss_d(&real, &fake).unwrap().backward().unwrap();
    for var in g.store().params().values() {
        assert!(grads.get(var.as_tensor()).is_none(), "discriminator loss reaches the generator");
    }
    Adam::new(adam).update(d.store().params(), &grads, None).unwrap();
    assert_eq!(snapshot(g.store()), g_before);
    let d_after_d_step = snapshot(d.store());

    let terms = replay.generator_terms(&out, &x, &y).unwrap();
    let (total, _) = terms.combine(&replay.config().weights).unwrap();
    Adam::new(adam).update(g.store().params(), &total.backward().unwrap(), None).unwrap();

    assert_eq!(snapshot(stepped.discriminator().store()), d_after_d_step);
    assert_eq!(snapshot(stepped.generator().store()), snapshot(g.store()));
    assert_ne!(snapshot(g.store()), g_before);
}

#[test]
fn wrong_resolution_batches_are_rejected() {
    let mut t = toy_trainer(LossWeights::default(), Precision::F32);
    let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &candle_core::Device::Cpu).unwrap();
    assert!(t.train_step(&x, &x).is_err());
    assert_eq!(t.iteration(), 0);
}

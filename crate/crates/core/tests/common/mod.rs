#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use polarfuse::embeddings::{ExtractorConfig, FeatureExtractor, IdentityExtractor};
use polarfuse::losses::LossWeights;
use polarfuse::nn::{Mode, Precision};
use polarfuse::training::{TrainConfig, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Toy trainer with random (not fine-tuned) extractors.
pub fn toy_trainer(weights: LossWeights, precision: Precision) -> Trainer {
    let mut config = TrainConfig::toy();
    config.precision = precision;
    config.weights = weights;
    let dtype = config.dtype();
    let perceptual = FeatureExtractor::new(ExtractorConfig::tiny(), dtype, 3).unwrap();
    let identity = IdentityExtractor::new(FeatureExtractor::new(ExtractorConfig::tiny(), dtype, 4).unwrap()).unwrap();
    Trainer::new(config, perceptual, identity).unwrap()
}

/// Uniform values in `[-scale, scale]`.
pub fn random(shape: &[usize], scale: f64, dtype: DType, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn toy_batch(dtype: DType, n: usize, seed: u64) -> (Tensor, Tensor) {
    (random(&[n, 3, 16, 16], 1.0, dtype, seed), random(&[n, 3, 16, 16], 1.0, dtype, seed + 1000))
}

pub fn total_of(trainer: &Trainer, x: &Tensor, y: &Tensor) -> Tensor {
    let out = trainer.generator().forward(x, Mode::Train).unwrap();
    let terms = trainer.generator_terms(&out, x, y).unwrap();
    terms.combine(&trainer.config().weights).unwrap().0
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    values(a).iter().zip(values(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

mod common;

use candle_core::{DType, Device, Tensor};
use common::{random, toy_batch, toy_trainer, total_of, values};
use polarfuse::embeddings::{perceptual_taps, ExtractorConfig, FeatureExtractor};
use polarfuse::losses::{
    adversarial_loss_g, feature_loss, guidance_loss, guidance_target, pixel_loss, total_loss, LossReport, LossSubset,
    LossWeights,
};
use polarfuse::nn::{scalar, Mode, Precision};
use proptest::prelude::*;

fn tensor(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

fn image_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (prop::collection::vec(-1.0f64..1.0, 2 * 3 * 4 * 4), prop::collection::vec(-1.0f64..1.0, 2 * 3 * 4 * 4), any::<bool>())
        .prop_map(|(a, b, same)| if same { (a.clone(), a) } else { (a, b) })
}

fn component() -> impl Strategy<Value = f64> {
    0.0f64..10.0
}

proptest! {
    #[test]
    fn pixel_loss_is_zero_only_on_equal_images((a, b) in image_pair()) {
        let shape = [2, 3, 4, 4];
        let l = scalar(&pixel_loss(&tensor(&a, &shape), &tensor(&b, &shape)).unwrap()).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, a == b);
    }

    #[test]
    fn guidance_loss_is_zero_only_at_the_pooled_target(v in prop::collection::vec(-1.0f64..1.0, 3 * 16 * 16), nudge in prop::option::of(-0.5f64..0.5)) {
        let target = tensor(&v, &[1, 3, 16, 16]);
        let pooled = guidance_target(&tensor(&[0.0; 3], &[1, 3, 1, 1]), &target).unwrap();
        let g = match nudge {
            Some(d) if d != 0.0 => (pooled.clone() + d).unwrap(),
            _ => pooled.clone(),
        };
        let l = scalar(&guidance_loss(&g, &target).unwrap()).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, values(&g) == values(&pooled));
    }

    #[test]
    fn generator_adversarial_loss_vanishes_only_at_one(score in prop::collection::vec(1e-6f64..=1.0, 1..5)) {
        let l = scalar(&adversarial_loss_g(&tensor(&score, &[score.len()])).unwrap()).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, score.iter().all(|s| *s == 1.0));
    }

    #[test]
    fn total_is_the_declared_weighted_sum(
        l2 in component(), lg in component(), a in component(), p in component(), i in component(),
        la in 0.0f64..1.0, lp in 0.0f64..1.0, li in 0.0f64..1.0, bump in 0.0f64..5.0,
    ) {
        let w = LossWeights { lambda_a: la, lambda_p: lp, lambda_i: li };
        let base = total_loss(&LossReport::components(l2, lg, a, p, i), &w).unwrap().total;
        prop_assert_eq!(base, l2 + lg + la * a + lp * p + li * i);
        for (k, lambda) in [(2, la), (3, lp), (4, li)] {
            let mut c = [l2, lg, a, p, i];
            c[k] += bump;
            let bumped = total_loss(&LossReport::components(c[0], c[1], c[2], c[3], c[4]), &w).unwrap().total;
            prop_assert!((bumped - base - lambda * bump).abs() <= 1e-12 * (1.0 + bumped.abs()));
        }
    }
}

#[test]
fn feature_loss_vanishes_on_identical_images() {
    let ex = FeatureExtractor::new(ExtractorConfig::tiny(), DType::F64, 1).unwrap();
    let taps: Vec<String> = perceptual_taps().iter().map(|t| ex.resolve(t).unwrap()).collect();
    let a = random(&[2, 3, 16, 16], 1.0, DType::F64, 1);
    let b = random(&[2, 3, 16, 16], 1.0, DType::F64, 2);
    assert_eq!(scalar(&feature_loss(&ex, &taps, &a, &a).unwrap()).unwrap(), 0.0);
    assert!(scalar(&feature_loss(&ex, &taps, &a, &b).unwrap()).unwrap() > 0.0);
}

/// Zeroing a weight gives the same generator gradients as leaving the term
/// out of the sum by hand.
#[test]
fn zero_weight_equals_omitted_term() {
    for subset in LossSubset::ALL {
        let weights = subset.apply(LossWeights::default());
        let trainer = toy_trainer(weights, Precision::F64);
        let (x, y) = toy_batch(DType::F64, 2, 3);
        let from_combine = total_of(&trainer, &x, &y).backward().unwrap();

        let out = trainer.generator().forward(&x, Mode::Train).unwrap();
        let terms = trainer.generator_terms(&out, &x, &y).unwrap();
        let mut manual = (&terms.l2 + &terms.l2_guidance).unwrap();
        for (lambda, term) in
            [(weights.lambda_a, &terms.adversarial), (weights.lambda_p, &terms.perceptual), (weights.lambda_i, &terms.identity)]
        {
            if lambda != 0.0 {
                manual = (manual + (term * lambda).unwrap()).unwrap();
            }
        }
        let by_hand = manual.backward().unwrap();
        for (name, var) in trainer.generator().store().params() {
            let (a, b) = (from_combine.get(var.as_tensor()), by_hand.get(var.as_tensor()));
            assert_eq!(a.map(values), b.map(values), "{}: {name}", subset.label());
        }
    }
}

#[test]
fn l2_subset_ignores_auxiliary_terms() {
    let trainer = toy_trainer(LossSubset::L2.apply(LossWeights::default()), Precision::F64);
    let (x, y) = toy_batch(DType::F64, 2, 4);
    let out = trainer.generator().forward(&x, Mode::Train).unwrap();
    let terms = trainer.generator_terms(&out, &x, &y).unwrap();
    let (total, report) = terms.combine(&trainer.config().weights).unwrap();
    assert_eq!(scalar(&total).unwrap(), report.l2 + report.l2_guidance);
    assert!(report.perceptual > 0.0 && report.identity > 0.0);
}

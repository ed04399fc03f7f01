mod common;

use candle_core::{DType, Tensor};
use common::{max_abs_diff, random, values};
use polarfuse::embeddings::{
    finetune_identity, identity_tap, perceptual_taps, ExtractorConfig, FeatureExtractor, FinetuneConfig,
    IdentityExtractor,
};

fn extractor(seed: u64) -> FeatureExtractor {
    FeatureExtractor::new(ExtractorConfig::tiny(), DType::F64, seed).unwrap()
}

#[test]
fn features_are_a_pure_function_of_the_image() {
    let e = extractor(0);
    let taps = e.tap_names();
    let x = random(&[2, 3, 16, 16], 1.0, DType::F64, 1);
    let (a, b) = (e.extract_features(&x, &taps).unwrap(), e.extract_features(&x, &taps).unwrap());
    for t in &taps {
        assert_eq!(values(&a[t]), values(&b[t]), "{t}");
    }
    let first = e.extract_features(&x.narrow(0, 0, 1).unwrap(), &taps).unwrap();
    for t in &taps {
        assert!(max_abs_diff(&first[t], &a[t].narrow(0, 0, 1).unwrap()) < 1e-12, "{t} depends on the batch");
    }
}

#[test]
fn default_taps_exist_on_the_tiny_extractor() {
    let e = extractor(0);
    let names = e.tap_names();
    for tap in perceptual_taps().into_iter().chain([identity_tap()]) {
        assert!(names.contains(&e.resolve(&tap).unwrap()), "{}", tap.name());
    }
}

#[test]
fn extractor_round_trips_through_disk() {
    let e = IdentityExtractor::new(extractor(3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("id.safetensors");
    e.save(&path).unwrap();
    let back = IdentityExtractor::load(&path).unwrap();
    let x = random(&[1, 3, 16, 16], 1.0, DType::F64, 4);
    assert_eq!(e.verification_feature(&x).unwrap(), back.verification_feature(&x).unwrap());
}

#[test]
fn finetuning_leaves_the_source_extractor_untouched() {
    let e = extractor(5);
    let before: Vec<(String, Vec<f64>)> = e.weights().iter().map(|(k, v)| (k.clone(), values(v))).collect();
    let samples: Vec<(Tensor, String)> = (0..8)
        .map(|i| (random(&[1, 3, 16, 16], 1.0, DType::F64, 10 + i), format!("s{}", i % 2)))
        .collect();
    let config = FinetuneConfig { epochs: 2, batch_size: 4, ..FinetuneConfig::default() };
    let (tuned, report) = finetune_identity(&e, &samples, &config).unwrap();
    assert_eq!(report.classes, vec!["s0", "s1"]);
    let after: Vec<(String, Vec<f64>)> = e.weights().iter().map(|(k, v)| (k.clone(), values(v))).collect();
    assert_eq!(before, after);
    let x = &samples[0].0;
    assert_ne!(
        tuned.verification_feature(x).unwrap(),
        IdentityExtractor::new(e.clone()).unwrap().verification_feature(x).unwrap()
    );
}

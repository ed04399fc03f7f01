//! Fixed convolutional feature extractors for the perceptual and
//! identity-preserving losses and for verification embeddings.
//!
//! The backbone is a small VGG-style network: stages of 3×3 conv + ReLU
//! layers separated by 2×2 max-pooling, then global average pooling and two
//! fully connected layers. Activations are addressed by stage and position
//! (`relu{stage}_{position}`, both 1-based) so loss taps can be declared
//! independently of the stage widths. `fc6` is the second-to-last fully
//! connected layer (the verification embedding) and `logits` the classifier.
//!
//! Extractor weights are plain (untracked) tensors: gradients flow through
//! an extractor to its input but never into the extractor itself.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, Adam, AdamConfig, ParamStore};

pub const FC6: &str = "fc6";
pub const LOGITS: &str = "logits";
pub const ARCHIVE_KIND: &str = "polarfuse-extractor";

/// Input preprocessing that travels with an extractor. Images arrive in
/// `[-1, 1]`; they are mapped to `[0, 1]`, normalized per channel as
/// `(x - mean) / std`, and resized bilinearly when `input_size` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub input_size: Option<[usize; 2]>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self { input_size: None, mean: vec![0.5; 3], std: vec![0.25; 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub in_channels: usize,
    /// Convolution widths per stage.
    pub stages: Vec<Vec<usize>>,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub preprocess: Preprocess,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stages: vec![vec![16, 16], vec![32, 32], vec![64]],
            embed_dim: 64,
            num_classes: 2,
            preprocess: Preprocess::default(),
        }
    }
}

impl ExtractorConfig {
    pub fn tiny() -> Self {
        Self {
            stages: vec![vec![4, 4], vec![6, 6], vec![8]],
            embed_dim: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.iter().any(|s| s.is_empty() || s.contains(&0)) {
            return Err(Error::Config("extractor stages must be non-empty with positive widths".into()));
        }
        if self.embed_dim == 0 || self.num_classes == 0 || self.in_channels == 0 {
            return Err(Error::Config("extractor dimensions must be positive".into()));
        }
        let p = &self.preprocess;
        if p.mean.len() != self.in_channels || p.std.len() != self.in_channels || p.std.iter().any(|s| *s <= 0.0) {
            return Err(Error::Config("preprocess mean/std must have one positive entry per channel".into()));
        }
        Ok(())
    }
}

/// A named activation an extractor exposes.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TapId {
    /// Post-ReLU activation of convolution `position` in `stage` (1-based).
    Relu { stage: usize, position: usize },
    /// Second-to-last fully connected layer (pre-activation).
    Fc6,
    Logits,
}

impl TapId {
    pub fn relu(stage: usize, position: usize) -> Self {
        TapId::Relu { stage, position }
    }

    pub fn name(&self) -> String {
        match self {
            TapId::Relu { stage, position } => format!("relu{stage}_{position}"),
            TapId::Fc6 => FC6.into(),
            TapId::Logits => LOGITS.into(),
        }
    }
}

/// Default perceptual taps: first layer of the first and second stages.
pub fn perceptual_taps() -> Vec<TapId> {
    vec![TapId::relu(1, 1), TapId::relu(2, 1)]
}

/// Default identity tap: second layer of the second stage.
pub fn identity_tap() -> TapId {
    TapId::relu(2, 2)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapGeometry {
    pub name: String,
    /// `[C, H, W]` for convolution taps, `[D, 1, 1]` for fully connected ones.
    pub shape: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    config: ExtractorConfig,
    weights: BTreeMap<String, Tensor>,
}

enum Step {
    Conv { name: String, tap: String },
    Pool,
    Fc6,
    Logits,
}

impl FeatureExtractor {
    pub fn new(config: ExtractorConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let mut c = config.in_channels;
        for (s, widths) in config.stages.iter().enumerate() {
            for (p, &w) in widths.iter().enumerate() {
                nn::Conv2d::new(&mut store, &format!("conv{}_{}", s + 1, p + 1), c, w, 3, 1, 1, true)?;
                c = w;
            }
        }
        nn::Linear::new(&mut store, FC6, c, config.embed_dim)?;
        nn::Linear::new(&mut store, "fc7", config.embed_dim, config.num_classes)?;
        let weights = store.snapshot()?;
        Ok(Self { config, weights })
    }

    pub fn from_weights(config: ExtractorConfig, weights: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), DType::F32, 0)?;
        for (name, t) in &reference.weights {
            let w = weights.get(name).ok_or_else(|| Error::Archive(format!("missing extractor weight `{name}`")))?;
            if w.dims() != t.dims() {
                return Err(shape_err!("extractor weight `{name}`: {:?} vs {:?}", w.dims(), t.dims()));
            }
        }
        let weights = weights.into_iter().filter(|(k, _)| reference.weights.contains_key(k)).collect();
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn dtype(&self) -> DType {
        self.weights.values().next().map_or(DType::F32, |t| t.dtype())
    }

    fn steps(&self) -> Vec<Step> {
        let mut steps = Vec::new();
        for (s, widths) in self.config.stages.iter().enumerate() {
            for p in 0..widths.len() {
                steps.push(Step::Conv {
                    name: format!("conv{}_{}", s + 1, p + 1),
                    tap: TapId::relu(s + 1, p + 1).name(),
                });
            }
            steps.push(Step::Pool);
        }
        steps.push(Step::Fc6);
        steps.push(Step::Logits);
        steps
    }

    /// Every tap this extractor exposes, in network order.
    pub fn tap_names(&self) -> Vec<String> {
        self.steps()
            .iter()
            .filter_map(|s| match s {
                Step::Conv { tap, .. } => Some(tap.clone()),
                Step::Fc6 => Some(FC6.to_string()),
                Step::Logits => Some(LOGITS.to_string()),
                Step::Pool => None,
            })
            .collect()
    }

    pub fn resolve(&self, tap: &TapId) -> Result<String> {
        self.resolve_name(&tap.name())
    }

    pub fn resolve_name(&self, name: &str) -> Result<String> {
        let available = self.tap_names();
        if available.iter().any(|t| t == name) {
            Ok(name.to_string())
        } else {
            Err(Error::UnknownTap { name: name.to_string(), available })
        }
    }

    fn input_size(&self, h: usize, w: usize) -> (usize, usize) {
        self.config.preprocess.input_size.map_or((h, w), |[ih, iw]| (ih, iw))
    }

    /// Declared tap shapes for an `h × w` input image.
    pub fn tap_geometry(&self, h: usize, w: usize) -> Vec<TapGeometry> {
        let (mut h, mut w) = self.input_size(h, w);
        let mut c = self.config.in_channels;
        let mut out = Vec::new();
        let widths: Vec<usize> = self.config.stages.iter().flatten().copied().collect();
        let mut conv = 0;
        for step in self.steps() {
            match step {
                Step::Conv { tap, .. } => {
                    c = widths[conv];
                    conv += 1;
                    out.push(TapGeometry { name: tap, shape: [c, h, w] });
                }
                Step::Pool => {
                    if h >= 2 && w >= 2 {
                        h /= 2;
                        w /= 2;
                    }
                }
                Step::Fc6 => out.push(TapGeometry { name: FC6.into(), shape: [self.config.embed_dim, 1, 1] }),
                Step::Logits => out.push(TapGeometry { name: LOGITS.into(), shape: [self.config.num_classes, 1, 1] }),
            }
        }
        let _ = c;
        out
    }

    fn preprocess(&self, image: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = image.dims4()?;
        if c != self.config.in_channels {
            return Err(shape_err!("extractor expects {} channels, got {c}", self.config.in_channels));
        }
        let p = &self.config.preprocess;
        let dev = image.device();
        let scale: Vec<f64> = p.std.iter().map(|s| 0.5 / s).collect();
        let shift: Vec<f64> = p.mean.iter().zip(&p.std).map(|(m, s)| (0.5 - m) / s).collect();
        let scale = Tensor::from_vec(scale, (1, c, 1, 1), dev)?.to_dtype(image.dtype())?;
        let shift = Tensor::from_vec(shift, (1, c, 1, 1), dev)?.to_dtype(image.dtype())?;
        let x = image.broadcast_mul(&scale)?.broadcast_add(&shift)?;
        let (ih, iw) = self.input_size(h, w);
        if (ih, iw) != (h, w) {
            return nn::upsample_bilinear(&x, ih, iw);
        }
        Ok(x)
    }

    fn run(
        &self,
        weights: &BTreeMap<String, Tensor>,
        image: &Tensor,
        wanted: &BTreeSet<String>,
    ) -> Result<BTreeMap<String, Tensor>> {
        let w = |k: &str| -> Result<&Tensor> {
            weights.get(k).ok_or_else(|| Error::Archive(format!("missing extractor weight `{k}`")))
        };
        let mut x = self.preprocess(image)?;
        let mut out = BTreeMap::new();
        for step in self.steps() {
            if out.len() == wanted.len() {
                break;
            }
            match step {
                Step::Conv { name, tap } => {
                    let y = x.conv2d(w(&format!("{name}.weight"))?, 1, 1, 1, 1)?;
                    let b = w(&format!("{name}.bias"))?.reshape((1, (), 1, 1))?;
                    x = y.broadcast_add(&b)?.relu()?;
                    if wanted.contains(&tap) {
                        out.insert(tap, x.clone());
                    }
                }
                Step::Pool => {
                    let (_, _, h, wd) = x.dims4()?;
                    if h >= 2 && wd >= 2 {
                        x = nn::max_pool2x2(&x)?;
                    }
                }
                Step::Fc6 => {
                    let pooled = x.mean(3)?.mean(2)?;
                    x = pooled.matmul(&w("fc6.weight")?.t()?)?.broadcast_add(w("fc6.bias")?)?;
                    if wanted.contains(FC6) {
                        out.insert(FC6.to_string(), x.clone());
                    }
                }
                Step::Logits => {
                    x = x.relu()?.matmul(&w("fc7.weight")?.t()?)?.broadcast_add(w("fc7.bias")?)?;
                    if wanted.contains(LOGITS) {
                        out.insert(LOGITS.to_string(), x.clone());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Activations at `taps` for an `(N, C, H, W)` image batch in `[-1, 1]`.
    pub fn extract_features(&self, image: &Tensor, taps: &[String]) -> Result<BTreeMap<String, Tensor>> {
        let available = self.tap_names();
        if let Some(bad) = taps.iter().find(|t| !available.contains(t)) {
            return Err(Error::UnknownTap { name: bad.clone(), available });
        }
        let image = image.to_dtype(self.dtype())?;
        let wanted: BTreeSet<String> = taps.iter().cloned().collect();
        self.run(&self.weights, &image, &wanted)
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.extract_features(image, &[LOGITS.to_string()])?.remove(LOGITS).expect("requested tap"))
    }

    pub fn write_into(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        archive.put_json(&format!("{prefix}.config"), &self.config)?;
        archive.put_json(&format!("{prefix}.taps"), &self.tap_names())?;
        archive.put_group(prefix, &self.weights)
    }

    pub fn read_from(archive: &Archive, prefix: &str) -> Result<Self> {
        Self::from_weights(archive.get_json(&format!("{prefix}.config"))?, archive.group(prefix))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new(ARCHIVE_KIND);
        self.write_into(&mut a, "extractor")?;
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        a.expect_kind(ARCHIVE_KIND)?;
        Self::read_from(&a, "extractor")
    }
}

/// An extractor fine-tuned for subject classification, with its identity
/// loss tap and verification layer.
#[derive(Clone, Debug)]
pub struct IdentityExtractor {
    pub extractor: FeatureExtractor,
    pub identity_tap: String,
    pub verification_layer: String,
}

impl IdentityExtractor {
    pub fn new(extractor: FeatureExtractor) -> Result<Self> {
        let identity_tap = extractor.resolve(&identity_tap())?;
        Ok(Self { extractor, identity_tap, verification_layer: FC6.to_string() })
    }

    /// Verification embedding of every image in an `(N, C, H, W)` batch.
    pub fn verification_features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let f = self
            .extractor
            .extract_features(images, std::slice::from_ref(&self.verification_layer))?
            .remove(&self.verification_layer)
            .expect("requested tap");
        let f = f.flatten_from(1)?.to_dtype(DType::F64)?;
        Ok(f.to_vec2::<f64>()?)
    }

    pub fn verification_feature(&self, image: &Tensor) -> Result<Vec<f64>> {
        let mut v = self.verification_features(image)?;
        if v.len() != 1 {
            return Err(shape_err!("expected a single image, got a batch of {}", v.len()));
        }
        Ok(v.remove(0))
    }

    pub fn write_into(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        self.extractor.write_into(archive, prefix)?;
        archive.metadata.insert(format!("{prefix}.identity_tap"), self.identity_tap.clone());
        archive.metadata.insert(format!("{prefix}.verification_layer"), self.verification_layer.clone());
        Ok(())
    }

    pub fn read_from(archive: &Archive, prefix: &str) -> Result<Self> {
        let extractor = FeatureExtractor::read_from(archive, prefix)?;
        let mut id = Self::new(extractor)?;
        if let Some(t) = archive.metadata.get(&format!("{prefix}.identity_tap")) {
            id.identity_tap = id.extractor.resolve_name(t)?;
        }
        if let Some(v) = archive.metadata.get(&format!("{prefix}.verification_layer")) {
            id.verification_layer = id.extractor.resolve_name(v)?;
        }
        Ok(id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new(ARCHIVE_KIND);
        self.write_into(&mut a, "extractor")?;
        a.save(path)
    }

    /// Load from an extractor archive or from the identity extractor stored
    /// in a training checkpoint.
    pub fn load(path: &Path) -> Result<Self> {
        let a = Archive::load(path)?;
        let prefix = if a.kind() == Some(ARCHIVE_KIND) { "extractor" } else { "identity" };
        Self::read_from(&a, prefix)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub classes: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 8, optimizer: AdamConfig::default(), seed: 0 }
    }
}

fn accuracy(extractor: &FeatureExtractor, images: &Tensor, labels: &[u32]) -> Result<f64> {
    let pred = extractor.logits(images)?.argmax(1)?.to_vec1::<u32>()?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fine-tune every extractor weight for subject classification on labeled
/// visible images (each `(1, C, H, W)`), then freeze. The classifier head is
/// re-initialized when its width differs from the number of subjects.
pub fn finetune_identity(
    extractor: &FeatureExtractor,
    samples: &[(Tensor, String)],
    config: &FinetuneConfig,
) -> Result<(IdentityExtractor, FinetuneReport)> {
    let classes: Vec<String> = samples.iter().map(|(_, l)| l.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "identity fine-tuning needs at least 2 subjects, got {}",
            classes.len()
        )));
    }
    let dtype = extractor.dtype();
    let labels: Vec<u32> = samples
        .iter()
        .map(|(_, l)| classes.binary_search(l).expect("label in class list") as u32)
        .collect();
    let images = Tensor::cat(&samples.iter().map(|(t, _)| t.to_dtype(dtype)).collect::<candle_core::Result<Vec<_>>>()?, 0)?;

    let mut config_out = extractor.config.clone();
    let mut weights = extractor.weights.clone();
    if config_out.num_classes != classes.len() {
        config_out.num_classes = classes.len();
        let mut store = ParamStore::new(dtype, config.seed ^ 0x5eed_c1a5);
        nn::Linear::new(&mut store, "fc7", config_out.embed_dim, classes.len())?;
        for (k, v) in store.snapshot()? {
            weights.insert(k, v);
        }
    }
    let mut current = FeatureExtractor { config: config_out, weights };
    let accuracy_before = accuracy(&current, &images, &labels)?;

    if config.epochs > 0 {
        let vars: BTreeMap<String, Var> = current
            .weights
            .iter()
            .map(|(k, t)| Ok((k.clone(), Var::from_tensor(&t.copy()?)?)))
            .collect::<Result<_>>()?;
        let tracked: BTreeMap<String, Tensor> = vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
        let mut adam = Adam::new(config.optimizer);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let logits_tap: BTreeSet<String> = [LOGITS.to_string()].into();
        let batch = config.batch_size.max(1);
        for epoch in 0..config.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(epoch as u64));
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let idx = Tensor::from_vec(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
                let x = images.index_select(&idx, 0)?;
                let y = Tensor::from_vec(chunk.iter().map(|&i| labels[i]).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
                let logits = current.run(&tracked, &x, &logits_tap)?.remove(LOGITS).expect("requested tap");
                let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
                let grads = loss.backward()?;
                adam.update(&vars, &grads, None)?;
            }
        }
        current.weights = vars.iter().map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?))).collect::<Result<_>>()?;
    }
    let accuracy_after = accuracy(&current, &images, &labels)?;
    let identity = IdentityExtractor::new(current)?;
    Ok((identity, FinetuneReport { accuracy_before, accuracy_after, classes }))
}

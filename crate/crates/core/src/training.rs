//! Alternating discriminator/generator optimization with exact resume.
//!
//! Each step runs one generator forward pass, one discriminator update on
//! the real target against the detached synthesized image, then one
//! generator update on the weighted objective, scored by the freshly updated
//! discriminator. Data order is a pure function of `(seed, epoch)`, so a
//! checkpoint only has to store weights, batch-norm statistics, optimizer
//! moments and the iteration counter to resume bit for bit.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::discriminator::{Discriminator, DiscriminatorConfig};
use crate::embeddings::{
    finetune_identity, perceptual_taps, ExtractorConfig, FeatureExtractor, FinetuneConfig, FinetuneReport,
    IdentityExtractor,
};
use crate::error::{shape_err, Error, Result};
use crate::generator::{Generator, GeneratorConfig, GeneratorOutput};
use crate::losses::{self, LossReport, LossTerms, LossWeights, Reduction};
use crate::nn::{self, Adam, AdamConfig, Mode, Precision};

pub const ARCHIVE_KIND: &str = "polarfuse-train";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "iter,l2,l2g,adv,perc,id,total,d_loss";

const DISCRIMINATOR_SALT: u64 = 0xd15c;
const PERCEPTUAL_SALT: u64 = 0x9e2c;
const IDENTITY_SALT: u64 = 0x1de0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub iterations: u64,
    pub seed: u64,
    pub weights: LossWeights,
    pub loss_reduction: Reduction,
    /// Save a checkpoint every this many iterations; 0 saves only at the end.
    pub checkpoint_interval: u64,
    pub resolution: usize,
    /// Global gradient-norm clip applied to both optimizers.
    pub grad_clip: Option<f64>,
    pub precision: Precision,
    /// Which Stokes channels (0 = S0, 1 = S1, 2 = S2) feed the generator.
    pub stokes_channels: Vec<usize>,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub perceptual_extractor: ExtractorConfig,
    /// Backbone for the identity extractor; the perceptual one when unset.
    pub identity_extractor: Option<ExtractorConfig>,
    pub finetune: FinetuneConfig,
    /// Pretrained perceptual extractor archive, used instead of a random one.
    pub perceptual_weights: Option<PathBuf>,
    /// Already fine-tuned identity extractor archive; skips fine-tuning.
    pub identity_weights: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 8e-4,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            iterations: 1000,
            seed: 0,
            weights: LossWeights::default(),
            loss_reduction: Reduction::Mean,
            checkpoint_interval: 0,
            resolution: 256,
            grad_clip: None,
            precision: Precision::F32,
            stokes_channels: vec![0, 1, 2],
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            perceptual_extractor: ExtractorConfig::default(),
            identity_extractor: None,
            finetune: FinetuneConfig::default(),
            perceptual_weights: None,
            identity_weights: None,
        }
    }
}

impl TrainConfig {
    /// Reduced widths that train at 64×64 on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            resolution: 64,
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
            perceptual_extractor: ExtractorConfig::tiny(),
            finetune: FinetuneConfig { epochs: 20, ..FinetuneConfig::default() },
            ..Self::default()
        }
    }

    /// Smallest configuration, used for gradient checks and ablation smoke runs.
    pub fn toy() -> Self {
        Self {
            resolution: 16,
            iterations: 4,
            generator: GeneratorConfig::toy(),
            discriminator: DiscriminatorConfig::toy(),
            perceptual_extractor: ExtractorConfig::tiny(),
            finetune: FinetuneConfig { epochs: 2, ..FinetuneConfig::default() },
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn dtype(&self) -> DType {
        self.precision.dtype()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.resolution == 0 || self.resolution % 16 != 0 {
            return Err(Error::Config(format!("resolution {} is not a positive multiple of 16", self.resolution)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        self.weights.validate()?;
        let ch = &self.stokes_channels;
        let mut sorted = ch.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if ch.is_empty() || sorted.len() != ch.len() || ch.iter().any(|c| *c > 2) {
            return Err(Error::Config(format!("stokes_channels {ch:?} must be distinct indices in 0..3")));
        }
        self.generator.validate()?;
        if self.generator.total_input_channels() != ch.len() {
            return Err(Error::Config(format!(
                "generator takes {} input channels but {} stokes channels are selected",
                self.generator.total_input_channels(),
                ch.len()
            )));
        }
        if self.generator.output_channels != self.discriminator.input_channels {
            return Err(Error::Config("generator output and discriminator input channels differ".into()));
        }
        self.discriminator.validate()?;
        if self.discriminator.conditional && self.discriminator.condition_channels != ch.len() {
            return Err(Error::Config("discriminator condition_channels must match stokes_channels".into()));
        }
        self.perceptual_extractor.validate()?;
        if let Some(c) = &self.identity_extractor {
            c.validate()?;
        }
        Ok(())
    }

    /// Configs are resume-compatible when they differ at most in the
    /// iteration budget and the checkpoint interval.
    fn same_run(&self, other: &TrainConfig) -> bool {
        let strip = |c: &TrainConfig| TrainConfig { iterations: 0, checkpoint_interval: 0, ..c.clone() };
        strip(self) == strip(other)
    }
}

/// One registered Stokes/visible pair, both `(1, C, H, W)` in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub id: String,
    pub subject: String,
    pub stokes: Tensor,
    pub visible: Tensor,
}

/// Dataset positions for `iteration`: consecutive slots of the stream of
/// per-epoch permutations.
pub fn batch_indices(seed: u64, dataset_len: usize, batch_size: usize, iteration: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch_size);
    let mut cached: Option<(u64, Vec<usize>)> = None;
    for k in 0..batch_size as u64 {
        let slot = iteration * batch_size as u64 + k;
        let epoch = slot / dataset_len as u64;
        let pos = (slot % dataset_len as u64) as usize;
        if cached.as_ref().map(|c| c.0) != Some(epoch) {
            cached = Some((epoch, epoch_permutation(seed, epoch, dataset_len)));
        }
        out.push(cached.as_ref().expect("cached permutation").1[pos]);
    }
    out
}

pub fn epoch_permutation(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutput {
    pub iteration: u64,
    pub report: LossReport,
    pub d_loss: f64,
}

impl StepOutput {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration, r.l2, r.l2_guidance, r.adversarial, r.perceptual, r.identity, r.total, self.d_loss
        )
    }
}

/// Everything the generator objective needs besides the data.
pub struct Models {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub perceptual: FeatureExtractor,
    pub identity: IdentityExtractor,
}

pub struct Trainer {
    config: TrainConfig,
    models: Models,
    perceptual_taps: Vec<String>,
    g_opt: Adam,
    d_opt: Adam,
    iteration: u64,
}

/// Random perceptual extractor (or the configured pretrained one) and an
/// identity extractor fine-tuned on the visible images of `pairs`.
pub fn build_extractors(
    config: &TrainConfig,
    pairs: &[TrainingPair],
) -> Result<(FeatureExtractor, IdentityExtractor, Option<FinetuneReport>)> {
    let dtype = config.dtype();
    let perceptual = match &config.perceptual_weights {
        Some(p) => FeatureExtractor::load(p)?,
        None => FeatureExtractor::new(config.perceptual_extractor.clone(), dtype, config.seed ^ PERCEPTUAL_SALT)?,
    };
    if let Some(p) = &config.identity_weights {
        return Ok((perceptual, IdentityExtractor::load(p)?, None));
    }
    let base_config = config.identity_extractor.clone().unwrap_or_else(|| config.perceptual_extractor.clone());
    let base = FeatureExtractor::new(base_config, dtype, config.seed ^ IDENTITY_SALT)?;
    let samples: Vec<(Tensor, String)> = pairs.iter().map(|p| (p.visible.clone(), p.subject.clone())).collect();
    let subjects = samples.iter().map(|s| &s.1).collect::<std::collections::BTreeSet<_>>().len();
    if subjects < 2 && config.weights.lambda_i == 0.0 {
        log::warn!("fewer than 2 subjects: identity extractor left at its initialization");
        return Ok((perceptual, IdentityExtractor::new(base)?, None));
    }
    let ft = FinetuneConfig { seed: config.finetune.seed ^ config.seed, ..config.finetune };
    let (identity, report) = finetune_identity(&base, &samples, &ft)?;
    log::info!(
        "identity fine-tuning: accuracy {:.3} -> {:.3} over {} subjects",
        report.accuracy_before,
        report.accuracy_after,
        report.classes.len()
    );
    Ok((perceptual, identity, Some(report)))
}

impl Trainer {
    /// Fresh generator and discriminator initialized from the run seed.
    pub fn new(config: TrainConfig, perceptual: FeatureExtractor, identity: IdentityExtractor) -> Result<Self> {
        config.validate()?;
        let dtype = config.dtype();
        let generator = Generator::new(config.generator.clone(), dtype, config.seed)?;
        let discriminator = Discriminator::new(config.discriminator.clone(), dtype, config.seed ^ DISCRIMINATOR_SALT)?;
        let perceptual_taps = perceptual_taps().iter().map(|t| perceptual.resolve(t)).collect::<Result<Vec<_>>>()?;
        let adam = config.adam();
        Ok(Self {
            config,
            models: Models { generator, discriminator, perceptual, identity },
            perceptual_taps,
            g_opt: Adam::new(adam),
            d_opt: Adam::new(adam),
            iteration: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    pub fn generator(&self) -> &Generator {
        &self.models.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.models.discriminator
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn perceptual_taps(&self) -> &[String] {
        &self.perceptual_taps
    }

    /// Keep the configured Stokes channels of a `(N, 3, H, W)` batch.
    pub fn select_channels(&self, stokes: &Tensor) -> Result<Tensor> {
        select_channels(stokes, &self.config.stokes_channels)
    }

    fn check_batch(&self, stokes: &Tensor, visible: &Tensor) -> Result<()> {
        let r = self.config.resolution;
        let (n, _, h, w) = stokes.dims4()?;
        let (nv, _, hv, wv) = visible.dims4()?;
        if (h, w) != (r, r) || (hv, wv) != (r, r) || n != nv {
            return Err(shape_err!(
                "batch {:?}/{:?} does not match resolution {r}",
                stokes.dims(),
                visible.dims()
            ));
        }
        Ok(())
    }

    fn condition<'a>(&self, stokes: &'a Tensor) -> Option<&'a Tensor> {
        self.config.discriminator.conditional.then_some(stokes)
    }

    /// Loss terms of a generator output. Terms whose weight is zero are
    /// evaluated on detached inputs so they are logged but carry no gradient.
    pub fn generator_terms(&self, out: &GeneratorOutput, stokes: &Tensor, visible: &Tensor) -> Result<LossTerms> {
        let w = &self.config.weights;
        let red = self.config.loss_reduction;
        let synth = &out.synthesized;
        let detached = synth.detach();
        let pick = |lambda: f64| if lambda != 0.0 { synth } else { &detached };
        let l2 = losses::pixel_loss_with(synth, visible, red)?;
        let l2_guidance = losses::guidance_loss_with(&out.guidance, visible, red)?;
        let score = self.models.discriminator.score(pick(w.lambda_a), self.condition(stokes), Mode::Train)?;
        let adversarial = losses::adversarial_loss_g(&score)?;
        let perceptual =
            losses::feature_loss_with(&self.models.perceptual, &self.perceptual_taps, pick(w.lambda_p), visible, red)?;
        let id = &self.models.identity;
        let identity = losses::feature_loss_with(
            &id.extractor,
            std::slice::from_ref(&id.identity_tap),
            pick(w.lambda_i),
            visible,
            red,
        )?;
        Ok(LossTerms { l2, l2_guidance, adversarial, perceptual, identity })
    }

    /// One discriminator update followed by one generator update. `stokes`
    /// carries all three Stokes channels; the configured subset is selected
    /// here. The reported losses are the ones the updates were computed from.
    pub fn train_step(&mut self, stokes: &Tensor, visible: &Tensor) -> Result<StepOutput> {
        self.check_batch(stokes, visible)?;
        let dtype = self.config.dtype();
        let x = self.select_channels(&stokes.to_dtype(dtype)?)?;
        let y = visible.to_dtype(dtype)?;
        let next = self.iteration + 1;

        let out = self.models.generator.forward(&x, Mode::Train)?;

        let d = &self.models.discriminator;
        let real = d.score(&y, self.condition(&x), Mode::Train)?;
        let fake = d.score(&out.synthesized.detach(), self.condition(&x), Mode::Train)?;
        let d_loss = losses::adversarial_loss_d(&real, &fake)?;
        let d_value = nn::scalar(&d_loss)?;
        if !d_value.is_finite() {
            return Err(Error::Diverged { iteration: next, detail: format!("d_loss = {d_value}") });
        }
        let grads = d_loss.backward()?;
        self.d_opt.update(d.store().params(), &grads, self.config.grad_clip)?;

        let terms = self.generator_terms(&out, &x, &y)?;
        let (total, report) = terms.combine(&self.config.weights).map_err(|e| {
            let dump = format!(
                "{e}; l2={:?} l2g={:?} adv={:?} perc={:?} id={:?}",
                nn::scalar(&terms.l2).ok(),
                nn::scalar(&terms.l2_guidance).ok(),
                nn::scalar(&terms.adversarial).ok(),
                nn::scalar(&terms.perceptual).ok(),
                nn::scalar(&terms.identity).ok()
            );
            log::error!("training diverged at iteration {next}: {dump}");
            Error::Diverged { iteration: next, detail: dump }
        })?;
        let grads = total.backward()?;
        self.g_opt.update(self.models.generator.store().params(), &grads, self.config.grad_clip)?;

        self.iteration = next;
        Ok(StepOutput { iteration: next, report, d_loss: d_value })
    }

    /// Stack the pairs selected for the current iteration.
    pub fn next_batch(&self, pairs: &[TrainingPair]) -> Result<(Tensor, Tensor)> {
        if pairs.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        let idx = batch_indices(self.config.seed, pairs.len(), self.config.batch_size, self.iteration);
        let stokes = Tensor::cat(&idx.iter().map(|&i| &pairs[i].stokes).collect::<Vec<_>>(), 0)?;
        let visible = Tensor::cat(&idx.iter().map(|&i| &pairs[i].visible).collect::<Vec<_>>(), 0)?;
        Ok((stokes, visible))
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(ARCHIVE_KIND);
        a.put_json("train_config", &self.config)?;
        a.put_json("iteration", &self.iteration)?;
        self.models.generator.write_into(&mut a, "generator")?;
        self.models.discriminator.write_into(&mut a, "discriminator")?;
        self.models.perceptual.write_into(&mut a, "perceptual")?;
        self.models.identity.write_into(&mut a, "identity")?;
        for (prefix, opt) in [("g_opt", &self.g_opt), ("d_opt", &self.d_opt)] {
            let (step, state) = opt.state();
            a.put_json(&format!("{prefix}.step"), &step)?;
            a.put_group(prefix, &state)?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind(ARCHIVE_KIND)?;
        let config: TrainConfig = a.get_json("train_config")?;
        let generator = Generator::read_from(a, "generator")?;
        let discriminator = Discriminator::read_from(a, "discriminator")?;
        let perceptual = FeatureExtractor::read_from(a, "perceptual")?;
        let identity = IdentityExtractor::read_from(a, "identity")?;
        let perceptual_taps = perceptual_taps().iter().map(|t| perceptual.resolve(t)).collect::<Result<Vec<_>>>()?;
        let adam = config.adam();
        let g_opt = Adam::restore(adam, a.get_json("g_opt.step")?, &a.group("g_opt"))?;
        let d_opt = Adam::restore(adam, a.get_json("d_opt.step")?, &a.group("d_opt"))?;
        Ok(Self {
            iteration: a.get_json("iteration")?,
            config,
            models: Models { generator, discriminator, perceptual, identity },
            perceptual_taps,
            g_opt,
            d_opt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

pub fn select_channels(stokes: &Tensor, channels: &[usize]) -> Result<Tensor> {
    if channels == [0, 1, 2] && stokes.dim(1)? == 3 {
        return Ok(stokes.clone());
    }
    let idx = Tensor::from_vec(channels.iter().map(|&c| c as u32).collect::<Vec<_>>(), channels.len(), &Device::Cpu)?;
    Ok(stokes.index_select(&idx, 1)?.contiguous()?)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub trainer: Trainer,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    /// Steps run by this call (excludes steps restored from a checkpoint).
    pub steps: Vec<StepOutput>,
    pub finetune: Option<FinetuneReport>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer").field("iteration", &self.iteration).finish_non_exhaustive()
    }
}

fn truncate_log(path: &Path, keep_through: u64) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let keep = match line.split(',').next().and_then(|v| v.parse::<u64>().ok()) {
            Some(iter) => iter <= keep_through,
            None => line == LOG_HEADER,
        };
        if keep {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Train for `config.iterations` steps, writing `checkpoint.safetensors` and
/// `train_log.csv` under `out_dir`. With `resume`, an existing checkpoint in
/// `out_dir` is continued and log rows past it are dropped.
pub fn train(config: &TrainConfig, pairs: &[TrainingPair], out_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let log_path = out_dir.join(LOG_FILE);

    let (mut trainer, finetune) = if resume && checkpoint.exists() {
        let mut t = Trainer::load(&checkpoint)?;
        if !t.config.same_run(config) {
            return Err(Error::Config(format!("{} was written by a different configuration", checkpoint.display())));
        }
        t.config.iterations = config.iterations;
        t.config.checkpoint_interval = config.checkpoint_interval;
        if log_path.exists() {
            truncate_log(&log_path, t.iteration)?;
        }
        log::info!("resuming from iteration {}", t.iteration);
        (t, None)
    } else {
        let (perceptual, identity, report) = build_extractors(config, pairs)?;
        (Trainer::new(config.clone(), perceptual, identity)?, report)
    };
    if !log_path.exists() || trainer.iteration == 0 {
        std::fs::write(&log_path, format!("{LOG_HEADER}\n")).map_err(|e| Error::io(&log_path, e))?;
    }
    let mut log_file = OpenOptions::new().append(true).open(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let mut steps = Vec::new();
    while trainer.iteration < config.iterations {
        let (stokes, visible) = trainer.next_batch(pairs)?;
        let step = trainer.train_step(&stokes, &visible)?;
        writeln!(log_file, "{}", step.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        if step.iteration % 50 == 0 || step.iteration == config.iterations {
            log::info!(
                "iter {} total {:.5} l2 {:.5} d_loss {:.5}",
                step.iteration,
                step.report.total,
                step.report.l2,
                step.d_loss
            );
        }
        steps.push(step);
        if config.checkpoint_interval > 0 && step.iteration % config.checkpoint_interval == 0 {
            trainer.save(&checkpoint)?;
        }
    }
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    trainer.save(&checkpoint)?;
    Ok(TrainOutcome { trainer, checkpoint, log: log_path, steps, finetune })
}

/// Synthesize visible images for a `(N, 3, H, W)` Stokes batch with a
/// trained generator in inference mode.
pub fn synthesize(generator: &Generator, stokes: &Tensor, channels: &[usize]) -> Result<Tensor> {
    let dtype = generator.store().dtype();
    let x = select_channels(&stokes.to_dtype(dtype)?, channels)?;
    Ok(generator.forward(&x, Mode::Eval)?.synthesized)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_are_pure_functions_of_seed_and_epoch() {
        assert_eq!(epoch_permutation(3, 1, 10), epoch_permutation(3, 1, 10));
        assert_ne!(epoch_permutation(3, 1, 10), epoch_permutation(3, 2, 10));
        let mut p = epoch_permutation(9, 0, 7);
        p.sort_unstable();
        assert_eq!(p, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn batches_walk_through_epochs() {
        let seen: Vec<usize> = (0..3).flat_map(|i| batch_indices(5, 6, 2, i)).collect();
        assert_eq!(seen, epoch_permutation(5, 0, 6));
        assert_eq!(batch_indices(5, 6, 2, 3), epoch_permutation(5, 1, 6)[..2].to_vec());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::toy().validate().is_ok());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::toy() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::toy() }.validate().is_err());
        assert!(TrainConfig { stokes_channels: vec![0], ..TrainConfig::toy() }.validate().is_err());
        let mut single = TrainConfig::toy();
        single.stokes_channels = vec![2];
        single.generator.num_streams = 1;
        assert!(single.validate().is_ok());
    }

    #[test]
    fn config_json_round_trip() {
        let c = TrainConfig::desk();
        let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: TrainConfig = serde_json::from_str(r#"{"iterations": 7}"#).unwrap();
        assert_eq!(partial.iterations, 7);
        assert_eq!(partial.learning_rate, 8e-4);
    }
}

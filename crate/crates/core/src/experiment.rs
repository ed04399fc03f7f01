//! Train, synthesize and evaluate in one call: the protocol experiment and
//! the ablation table built on it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{training_pairs, LoadedSample};
use crate::embeddings::IdentityExtractor;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_pairs, tensor_image, EvalImage, EvaluationReport, PairingPolicy};
use crate::generator::{FusionMode, Generator};
use crate::losses::LossSubset;
use crate::nn;
use crate::training::{build_extractors, synthesize, train, TrainConfig, TrainOutcome};

/// Columns of the comparative table, after the variant name.
pub const TABLE_COLUMNS: [&str; 4] = ["psnr", "ssim", "eer", "auc"];

const SYNTH_BATCH: usize = 8;

/// One configuration change relative to a base training config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    #[serde(default)]
    pub fusion_mode: Option<FusionMode>,
    #[serde(default)]
    pub stokes_channels: Option<Vec<usize>>,
    #[serde(default)]
    pub loss_subset: Option<LossSubset>,
}

pub fn fusion_label(mode: FusionMode) -> &'static str {
    match mode {
        FusionMode::Input => "input",
        FusionMode::Feature => "feature",
        FusionMode::Output => "output",
    }
}

impl Variant {
    pub fn base() -> Self {
        Self { name: "base".into(), fusion_mode: None, stokes_channels: None, loss_subset: None }
    }

    pub fn fusion(mode: FusionMode) -> Self {
        Self { name: format!("fusion-{}", fusion_label(mode)), fusion_mode: Some(mode), ..Self::base() }
    }

    pub fn single_stokes(channel: usize) -> Self {
        Self { name: format!("S{channel}"), stokes_channels: Some(vec![channel]), ..Self::base() }
    }

    pub fn loss(subset: LossSubset) -> Self {
        Self { name: subset.label().to_string(), loss_subset: Some(subset), ..Self::base() }
    }

    /// `base` with this variant's overrides. Stream layout follows the
    /// fusion mode: one stream of all channels for input fusion, one
    /// single-channel stream per Stokes image otherwise.
    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut c = base.clone();
        if self.fusion_mode.is_some() || self.stokes_channels.is_some() {
            if let Some(ch) = &self.stokes_channels {
                c.stokes_channels = ch.clone();
            }
            let n = c.stokes_channels.len();
            let mode = self.fusion_mode.unwrap_or(c.generator.fusion_mode);
            c.generator.fusion_mode = mode;
            if mode == FusionMode::Input {
                c.generator.num_streams = 1;
                c.generator.input_channels_per_stream = n;
            } else {
                c.generator.num_streams = n;
                c.generator.input_channels_per_stream = 1;
            }
            if c.discriminator.conditional {
                c.discriminator.condition_channels = n;
            }
        }
        if let Some(subset) = self.loss_subset {
            c.weights = subset.apply(c.weights);
        }
        c.validate().map_err(|e| Error::Config(format!("variant {}: {e}", self.name)))?;
        Ok(c)
    }
}

/// Fusion modes, single-Stokes inputs and the loss ladder.
pub fn standard_variants() -> Vec<Variant> {
    let mut v: Vec<Variant> = [FusionMode::Input, FusionMode::Feature, FusionMode::Output]
        .into_iter()
        .map(Variant::fusion)
        .collect();
    v.extend((0..3).map(Variant::single_stokes));
    v.extend(LossSubset::ALL.into_iter().map(Variant::loss));
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub psnr: f64,
    pub ssim: f64,
    pub eer: f64,
    pub auc: f64,
}

impl AblationRow {
    pub fn from_report(variant: &str, report: &EvaluationReport) -> Self {
        Self {
            variant: variant.to_string(),
            psnr: report.mean.psnr_db,
            ssim: report.mean.ssim,
            eer: report.roc.eer,
            auc: report.roc.auc,
        }
    }
}

pub fn visible_targets(samples: &[LoadedSample]) -> Vec<EvalImage> {
    samples
        .iter()
        .map(|s| EvalImage { id: s.record.id(), subject: s.record.subject_id.clone(), image: s.visible.clone() })
        .collect()
}

/// The S0 plane of each sample as a one-channel probe.
pub fn s0_probes(samples: &[LoadedSample]) -> Vec<EvalImage> {
    samples
        .iter()
        .map(|s| EvalImage {
            id: s.record.id(),
            subject: s.record.subject_id.clone(),
            image: s.stokes.slice(ndarray::s![0..1, .., ..]).to_owned(),
        })
        .collect()
}

pub fn synthesize_samples(generator: &Generator, channels: &[usize], samples: &[LoadedSample]) -> Result<Vec<EvalImage>> {
    let dtype = generator.store().dtype();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(SYNTH_BATCH) {
        let refs: Vec<_> = chunk.iter().map(|s| &s.stokes).collect();
        let y = synthesize(generator, &nn::stack_arrays(&refs, dtype)?, channels)?;
        for (i, s) in chunk.iter().enumerate() {
            out.push(EvalImage { id: s.record.id(), subject: s.record.subject_id.clone(), image: tensor_image(&y, i)? });
        }
    }
    Ok(out)
}

pub struct VariantOutcome {
    pub row: AblationRow,
    pub report: EvaluationReport,
    pub training: TrainOutcome,
}

/// Train `config` on `train`, synthesize `test` and score it against the
/// test visible images with `identity`.
pub fn run_experiment(
    name: &str,
    config: &TrainConfig,
    train_samples: &[LoadedSample],
    test_samples: &[LoadedSample],
    identity: &IdentityExtractor,
    policy: PairingPolicy,
    out_dir: &Path,
) -> Result<VariantOutcome> {
    let pairs = training_pairs(train_samples, config.dtype())?;
    let training = train(config, &pairs, out_dir, false)?;
    let probes = synthesize_samples(training.trainer.generator(), &config.stokes_channels, test_samples)?;
    let report = evaluate_pairs(&probes, &visible_targets(test_samples), identity, policy)?;
    Ok(VariantOutcome { row: AblationRow::from_report(name, &report), report, training })
}

/// Every variant trained from `base` in its own subdirectory of `out_dir`
/// and evaluated with one identity extractor fine-tuned on the training
/// visible images, so rows are comparable.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    train_samples: &[LoadedSample],
    test_samples: &[LoadedSample],
    policy: PairingPolicy,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::InvalidInput("ablation needs at least one variant".into()));
    }
    base.validate()?;
    let (_, identity, _) = build_extractors(base, &training_pairs(train_samples, base.dtype())?)?;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let config = v.apply(base)?;
        log::info!("ablation variant {}", v.name);
        let dir = out_dir.join(&v.name);
        let outcome = run_experiment(&v.name, &config, train_samples, test_samples, &identity, policy, &dir)?;
        rows.push(outcome.row);
    }
    Ok(rows)
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = format!("| variant | {} |\n|---|---|---|---|---|\n", TABLE_COLUMNS.join(" | "));
    for r in rows {
        s += &format!("| {} | {:.2} | {:.4} | {:.4} | {:.4} |\n", r.variant, r.psnr, r.ssim, r.eer, r.auc);
    }
    s
}

pub fn write_table_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(f, "variant,{}", TABLE_COLUMNS.join(",")).map_err(io)?;
    for r in rows {
        writeln!(f, "{},{},{},{},{}", r.variant, r.psnr, r.ssim, r.eer, r.auc).map_err(io)?;
    }
    f.flush().map_err(io)
}

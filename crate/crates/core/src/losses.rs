//! Generator objective (pixel, guidance, adversarial, perceptual and
//! identity terms) and the discriminator objective.
//!
//! Every loss returns a 0-dim tensor that stays on the autodiff graph.
//! Squared-error terms are normalized by element count by default;
//! [`Reduction::Sum`] keeps the literal sum over positions.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::embeddings::FeatureExtractor;
use crate::error::{shape_err, Error, Result};
use crate::nn;

pub const SCORE_EPS: f64 = 1e-7;

static CLAMP_WARNINGS: AtomicUsize = AtomicUsize::new(0);

/// Number of discriminator scores clamped away from 0 or 1 so far.
pub fn clamp_warnings() -> usize {
    CLAMP_WARNINGS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

fn reduce(sq: &Tensor, reduction: Reduction) -> Result<Tensor> {
    Ok(match reduction {
        Reduction::Mean => sq.mean_all()?,
        Reduction::Sum => sq.sum_all()?,
    })
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

pub fn pixel_loss_with(pred: &Tensor, target: &Tensor, reduction: Reduction) -> Result<Tensor> {
    same_shape(pred, target, "pixel loss")?;
    let target = target.to_dtype(pred.dtype())?;
    reduce(&(pred - target)?.sqr()?, reduction)
}

/// Mean squared difference over all positions and channels.
pub fn pixel_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    pixel_loss_with(pred, target, Reduction::Mean)
}

/// Area-average `target` down to the guidance resolution.
pub fn guidance_target(guidance: &Tensor, target: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = guidance.dims4()?;
    let (_, _, th, tw) = target.dims4()?;
    if th % h != 0 || tw % w != 0 {
        return Err(shape_err!("target {th}x{tw} does not reduce evenly to guidance {h}x{w}"));
    }
    nn::adaptive_avg_pool(target, h, w)
}

pub fn guidance_loss_with(guidance: &Tensor, target: &Tensor, reduction: Reduction) -> Result<Tensor> {
    let small = guidance_target(guidance, target)?;
    pixel_loss_with(guidance, &small, reduction)
}

pub fn guidance_loss(guidance: &Tensor, target: &Tensor) -> Result<Tensor> {
    guidance_loss_with(guidance, target, Reduction::Mean)
}

/// Clamp into `[lo, hi]`, counting every score that had to move.
fn clamp_scores(score: &Tensor, lo: f64, hi: f64) -> Result<Tensor> {
    let values = score.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    let outside = values.iter().filter(|v| !(**v >= lo && **v <= hi)).count();
    if outside > 0 {
        CLAMP_WARNINGS.fetch_add(outside, Ordering::Relaxed);
        log::warn!("{outside} discriminator score(s) clamped to [{lo}, {hi}]");
    }
    Ok(score.clamp(lo, hi)?)
}

/// `-log(score)`, averaged over the batch. `score` holds one mean
/// discriminator output per synthesized sample. Only the side of the range
/// that reaches `log(0)` is clamped, so a score of exactly 1 costs 0.
pub fn adversarial_loss_g(score: &Tensor) -> Result<Tensor> {
    Ok(clamp_scores(score, SCORE_EPS, 1.0)?.log()?.neg()?.mean_all()?)
}

/// `-log(real) - log(1 - fake)`, averaged over the batch.
pub fn adversarial_loss_d(real_score: &Tensor, fake_score: &Tensor) -> Result<Tensor> {
    same_shape(real_score, fake_score, "discriminator scores")?;
    let real = clamp_scores(real_score, SCORE_EPS, 1.0)?.log()?;
    let fake = clamp_scores(fake_score, 0.0, 1.0 - SCORE_EPS)?.affine(-1.0, 1.0)?.log()?;
    Ok((real + fake)?.neg()?.mean_all()?)
}

pub fn feature_loss_with(
    extractor: &FeatureExtractor,
    taps: &[String],
    pred: &Tensor,
    target: &Tensor,
    reduction: Reduction,
) -> Result<Tensor> {
    same_shape(pred, target, "feature loss")?;
    if taps.is_empty() {
        return Err(Error::InvalidInput("feature loss needs at least one tap".into()));
    }
    let fp = extractor.extract_features(pred, taps)?;
    let ft = extractor.extract_features(&target.detach(), taps)?;
    let mut total: Option<Tensor> = None;
    for tap in taps {
        let term = reduce(&(&fp[tap] - ft[tap].detach())?.sqr()?, reduction)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one tap"))
}

/// Sum over `taps` of the mean squared difference of extractor features.
pub fn feature_loss(extractor: &FeatureExtractor, taps: &[String], pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    feature_loss_with(extractor, taps, pred, target, Reduction::Mean)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_a: f64,
    pub lambda_p: f64,
    pub lambda_i: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_a: 0.005, lambda_p: 0.8, lambda_i: 0.1 }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self { lambda_a: 0.0, lambda_p: 0.0, lambda_i: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_a", self.lambda_a), ("lambda_p", self.lambda_p), ("lambda_i", self.lambda_i)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss ladder used by the ablation study: each subset disables the terms
/// it omits by zeroing their weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossSubset {
    #[serde(rename = "L2")]
    L2,
    #[serde(rename = "L2-GAN")]
    L2Gan,
    #[serde(rename = "L2-GAN-P")]
    L2GanP,
    #[serde(rename = "full")]
    Full,
}

impl LossSubset {
    pub const ALL: [LossSubset; 4] = [LossSubset::L2, LossSubset::L2Gan, LossSubset::L2GanP, LossSubset::Full];

    pub fn label(self) -> &'static str {
        match self {
            LossSubset::L2 => "L2",
            LossSubset::L2Gan => "L2-GAN",
            LossSubset::L2GanP => "L2-GAN-P",
            LossSubset::Full => "full",
        }
    }

    pub fn apply(self, w: LossWeights) -> LossWeights {
        match self {
            LossSubset::L2 => LossWeights::zero(),
            LossSubset::L2Gan => LossWeights { lambda_p: 0.0, lambda_i: 0.0, ..w },
            LossSubset::L2GanP => LossWeights { lambda_i: 0.0, ..w },
            LossSubset::Full => w,
        }
    }
}

impl std::str::FromStr for LossSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossSubset::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown loss subset `{s}` (expected L2, L2-GAN, L2-GAN-P or full)")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l2: f64,
    pub l2_guidance: f64,
    pub adversarial: f64,
    pub perceptual: f64,
    pub identity: f64,
    pub total: f64,
}

impl LossReport {
    /// Components without a total, ready for [`total_loss`].
    pub fn components(l2: f64, l2_guidance: f64, adversarial: f64, perceptual: f64, identity: f64) -> Self {
        Self { l2, l2_guidance, adversarial, perceptual, identity, total: 0.0 }
    }
}

/// Weighted sum of the generator loss components.
pub fn total_loss(components: &LossReport, weights: &LossWeights) -> Result<LossReport> {
    let c = components;
    for (term, value) in [
        ("l2", c.l2),
        ("l2_guidance", c.l2_guidance),
        ("adversarial", c.adversarial),
        ("perceptual", c.perceptual),
        ("identity", c.identity),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFinite { term, value });
        }
    }
    let total = c.l2
        + c.l2_guidance
        + weights.lambda_a * c.adversarial
        + weights.lambda_p * c.perceptual
        + weights.lambda_i * c.identity;
    Ok(LossReport { total, ..*c })
}

/// Loss terms still attached to the autodiff graph.
#[derive(Clone, Debug)]
pub struct LossTerms {
    pub l2: Tensor,
    pub l2_guidance: Tensor,
    pub adversarial: Tensor,
    pub perceptual: Tensor,
    pub identity: Tensor,
}

impl LossTerms {
    /// Differentiable total plus the numeric report. Terms whose weight is
    /// zero are left out of the graph entirely.
    pub fn combine(&self, weights: &LossWeights) -> Result<(Tensor, LossReport)> {
        let report = total_loss(
            &LossReport::components(
                nn::scalar(&self.l2)?,
                nn::scalar(&self.l2_guidance)?,
                nn::scalar(&self.adversarial)?,
                nn::scalar(&self.perceptual)?,
                nn::scalar(&self.identity)?,
            ),
            weights,
        )?;
        let mut total = (&self.l2 + &self.l2_guidance)?;
        for (lambda, term) in [
            (weights.lambda_a, &self.adversarial),
            (weights.lambda_p, &self.perceptual),
            (weights.lambda_i, &self.identity),
        ] {
            if lambda != 0.0 {
                total = (total + (term * lambda)?)?;
            }
        }
        Ok((total, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn val(x: Tensor) -> f64 {
        nn::scalar(&x).unwrap()
    }

    #[test]
    fn pixel_loss_examples() {
        let a = t(&[0.1, -0.2, 0.3, 0.4], &[1, 1, 2, 2]);
        assert_eq!(val(pixel_loss(&a, &a).unwrap()), 0.0);
        let b = (&a + 0.1).unwrap();
        assert!((val(pixel_loss(&b, &a).unwrap()) - 0.01).abs() < 1e-12);
        assert!((val(pixel_loss_with(&b, &a, Reduction::Sum).unwrap()) - 0.04).abs() < 1e-12);
        assert!(pixel_loss(&a, &t(&[0.0; 2], &[1, 1, 1, 2])).is_err());
    }

    #[test]
    fn guidance_loss_examples() {
        let target = Tensor::full(0.5f64, (1, 3, 64, 64), &Device::Cpu).unwrap();
        let g = Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert!((val(guidance_loss(&g, &target).unwrap()) - 0.25).abs() < 1e-12);
        let small = Tensor::full(0.5f64, (1, 3, 4, 4), &Device::Cpu).unwrap();
        assert_eq!(val(guidance_loss(&small, &target).unwrap()), 0.0);
    }

    #[test]
    fn adversarial_examples() {
        assert_eq!(val(adversarial_loss_g(&t(&[1.0], &[1])).unwrap()), 0.0);
        assert!((val(adversarial_loss_g(&t(&[(-1.0f64).exp()], &[1])).unwrap()) - 1.0).abs() < 1e-12);
        assert!((val(adversarial_loss_g(&t(&[0.5], &[1])).unwrap()) - 2f64.ln()).abs() < 1e-12);
        let d = val(adversarial_loss_d(&t(&[0.5], &[1]), &t(&[0.5], &[1])).unwrap());
        assert!((d - 2.0 * 2f64.ln()).abs() < 1e-12);
        let d = val(adversarial_loss_d(&t(&[1.0], &[1]), &t(&[0.0], &[1])).unwrap());
        assert_eq!(d, 0.0);
    }

    #[test]
    fn out_of_range_scores_are_clamped_and_counted() {
        let before = clamp_warnings();
        let l = val(adversarial_loss_g(&t(&[0.0], &[1])).unwrap());
        assert!(l.is_finite());
        assert!((l + SCORE_EPS.ln()).abs() < 1e-9);
        assert!(clamp_warnings() > before);
    }

    #[test]
    fn total_loss_rejects_non_finite() {
        let c = LossReport::components(1.0, f64::NAN, 0.0, 0.0, 0.0);
        match total_loss(&c, &LossWeights::default()) {
            Err(Error::NonFinite { term, .. }) => assert_eq!(term, "l2_guidance"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn subsets_zero_weights() {
        let w = LossWeights::default();
        assert_eq!(LossSubset::L2.apply(w), LossWeights::zero());
        assert_eq!(LossSubset::L2Gan.apply(w).lambda_a, w.lambda_a);
        assert_eq!(LossSubset::L2GanP.apply(w).lambda_i, 0.0);
        assert_eq!(LossSubset::Full.apply(w), w);
        assert_eq!("l2-gan-p".parse::<LossSubset>().unwrap(), LossSubset::L2GanP);
    }
}

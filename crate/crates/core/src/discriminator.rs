//! Multi-scale patch discriminator: four conv/batch-norm/leaky-ReLU stages
//! (each halving the resolution) followed by a pooling module whose levels
//! are upsampled, concatenated and reduced by a 1×1 convolution and sigmoid
//! into a per-patch probability map.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, BatchNorm2d, Conv2d, Mode, ParamStore};

pub const LEAKY_SLOPE: f64 = 0.2;
const STAGES: usize = 4;
pub const REDUCTION: usize = 1 << STAGES;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub pyramid_fractions: Vec<f64>,
    pub input_channels: usize,
    /// Also feed the Stokes input (concatenated along channels).
    pub conditional: bool,
    /// Stokes channels appended when `conditional` is set.
    pub condition_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            pyramid_fractions: vec![1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0],
            input_channels: 3,
            conditional: false,
            condition_channels: 3,
        }
    }
}

impl DiscriminatorConfig {
    pub fn desk() -> Self {
        Self { base_channels: 8, ..Self::default() }
    }

    pub fn toy() -> Self {
        Self { base_channels: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.input_channels == 0 {
            return Err(Error::Config("discriminator widths must be >= 1".into()));
        }
        let f = &self.pyramid_fractions;
        if f.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) || f.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "discriminator pyramid fractions {f:?} must be strictly increasing in (0, 1]"
            )));
        }
        Ok(())
    }

    fn total_input_channels(&self) -> usize {
        self.input_channels + if self.conditional { self.condition_channels } else { 0 }
    }
}

#[derive(Clone, Debug)]
struct Cbl {
    conv: Conv2d,
    bn: BatchNorm2d,
}

pub struct Discriminator {
    config: DiscriminatorConfig,
    store: ParamStore,
    stages: Vec<Cbl>,
    output: Conv2d,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let mut c = config.total_input_channels();
        let mut stages = Vec::new();
        for s in 0..STAGES {
            let out = config.base_channels << s;
            stages.push(Cbl {
                conv: Conv2d::new(&mut store, &format!("cbl{s}.conv"), c, out, 4, 2, 1, false)?,
                bn: BatchNorm2d::new(&mut store, &format!("cbl{s}.bn"), out)?,
            });
            c = out;
        }
        let concat = c * (1 + config.pyramid_fractions.len());
        let output = Conv2d::new(&mut store, "out", concat, 1, 1, 1, 0, true)?;
        Ok(Self { config, store, stages, output })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Output of the four CBL stages, before multi-scale pooling.
    pub fn features(&self, image: &Tensor, condition: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
        let (_, c, h, w) = image.dims4()?;
        if c != self.config.input_channels {
            return Err(shape_err!("discriminator expects {} channels, got {c}", self.config.input_channels));
        }
        if h % REDUCTION != 0 || w % REDUCTION != 0 || h == 0 || w == 0 {
            return Err(shape_err!("discriminator input {h}x{w} is not a positive multiple of {REDUCTION}"));
        }
        let mut x = match (self.config.conditional, condition) {
            (true, Some(cond)) => {
                if cond.dims4()?.2 != h || cond.dims4()?.3 != w || cond.dim(1)? != self.config.condition_channels {
                    return Err(shape_err!("condition {:?} does not match image {:?}", cond.dims(), image.dims()));
                }
                Tensor::cat(&[image, cond], 1)?
            }
            (true, None) => return Err(Error::InvalidInput("conditional discriminator needs the stokes input".into())),
            (false, _) => image.clone(),
        };
        for stage in &self.stages {
            let y = stage.bn.forward(&stage.conv.forward(&x)?, mode)?;
            x = candle_nn::ops::leaky_relu(&y, LEAKY_SLOPE)?;
        }
        Ok(x)
    }

    /// Per-patch probabilities `(N, 1, H/16, W/16)`, each in `(0, 1)`.
    pub fn forward(&self, image: &Tensor, condition: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
        let x = self.features(image, condition, mode)?;
        let (_, _, h, w) = x.dims4()?;
        let mut parts = vec![x.clone()];
        for f in &self.config.pyramid_fractions {
            let pooled = nn::adaptive_avg_pool(&x, nn::pooled_size(h, *f), nn::pooled_size(w, *f))?;
            parts.push(nn::upsample_bilinear(&pooled, h, w)?);
        }
        let logits = self.output.forward(&Tensor::cat(&parts, 1)?)?;
        Ok(candle_nn::ops::sigmoid(&logits)?)
    }

    pub fn write_into(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        archive.put_json(&format!("{prefix}.config"), &self.config)?;
        archive.put_group(prefix, &self.store.snapshot()?)
    }

    pub fn read_from(archive: &Archive, prefix: &str) -> Result<Self> {
        let config: DiscriminatorConfig = archive.get_json(&format!("{prefix}.config"))?;
        let tensors = archive.group(prefix);
        let dtype = tensors.values().next().map_or(DType::F32, |t| t.dtype());
        let d = Self::new(config, dtype, 0)?;
        d.store.load(&tensors, true)?;
        Ok(d)
    }

    /// Mean of the patch map per sample, `(N,)`.
    pub fn score(&self, image: &Tensor, condition: Option<&Tensor>, mode: Mode) -> Result<Tensor> {
        nn::mean_per_sample(&self.forward(image, condition, mode)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64, h: usize) -> Tensor {
        let mut s = ParamStore::new(DType::F32, seed);
        s.gaussian("x", &[1, 3, h, h], 0.6).unwrap().as_detached_tensor()
    }

    #[test]
    fn cbl_stack_reduces_by_sixteen() {
        let d = Discriminator::new(DiscriminatorConfig::toy(), DType::F32, 0).unwrap();
        let f = d.features(&image(1, 64), None, Mode::Train).unwrap();
        assert_eq!(f.dims(), &[1, 32, 4, 4]);
        let m = d.forward(&image(1, 64), None, Mode::Train).unwrap();
        assert_eq!(m.dims(), &[1, 1, 4, 4]);
    }

    #[test]
    fn scores_are_probabilities() {
        let d = Discriminator::new(DiscriminatorConfig::toy(), DType::F32, 3).unwrap();
        for seed in 0..4 {
            let m = d.forward(&image(seed, 32), None, Mode::Train).unwrap();
            for v in m.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
                assert!(v > 0.0 && v < 1.0);
            }
        }
    }

    #[test]
    fn conditional_requires_condition() {
        let cfg = DiscriminatorConfig { conditional: true, ..DiscriminatorConfig::toy() };
        let d = Discriminator::new(cfg, DType::F32, 0).unwrap();
        assert!(d.forward(&image(0, 16), None, Mode::Eval).is_err());
        let cond = image(1, 16);
        assert_eq!(d.forward(&image(0, 16), Some(&cond), Mode::Eval).unwrap().dims(), &[1, 1, 1, 1]);
    }

    #[test]
    fn rejects_indivisible_input() {
        let d = Discriminator::new(DiscriminatorConfig::toy(), DType::F32, 0).unwrap();
        assert!(d.forward(&image(0, 24), None, Mode::Eval).is_err());
    }
}

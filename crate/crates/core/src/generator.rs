//! Multi-stream densely connected encoder, residual fusion, deep-guidance
//! head and dense-residual decoder with multi-level pyramid pooling.
//!
//! Tensors are `(N, C, H, W)`. Every encoder stream downsamples by exactly
//! 16: a stride-2 stem convolution and a 2×2 max-pool, then two
//! transition-down layers between the three dense levels. The decoder
//! upsamples back to the input resolution, concatenates the input Stokes
//! channels and finishes with the pyramid pooling head.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, BatchNorm2d, Conv2d, Mode, ParamStore};

pub const ARCHIVE_KIND: &str = "polarfuse-generator";

/// Total spatial reduction of an encoder stream.
pub const ENCODER_FACTOR: usize = 16;
const ENCODER_FACTOR_LOG2: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// One encoder per input group, features concatenated at the bottleneck.
    Feature,
    /// All input channels concatenated and fed to a single encoder-decoder.
    Input,
    /// One full encoder-decoder per input group, merged before the output head.
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub num_streams: usize,
    pub input_channels_per_stream: usize,
    pub stem_channels: usize,
    pub dense_block_counts: Vec<usize>,
    pub growth_rate: usize,
    /// Output/input channel ratio of the transition-down 1×1 convolution.
    pub transition_compression: f64,
    pub fusion_mode: FusionMode,
    /// Optional 1×1 projection width after the residual-fusion block.
    pub fused_channels: Option<usize>,
    pub decoder_block_count: usize,
    /// Layers in each decoder dense block.
    pub decoder_dense_layers: usize,
    /// Transition-up output width of each decoder block.
    pub decoder_channels: Vec<usize>,
    /// Per-block log2 upsampling factors; must sum to 4. Derived when absent.
    pub decoder_upsample_log2: Option<Vec<u32>>,
    pub pyramid_fractions: Vec<f64>,
    pub output_channels: usize,
    pub guidance_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_streams: 3,
            input_channels_per_stream: 1,
            stem_channels: 64,
            dense_block_counts: vec![12, 16, 24],
            growth_rate: 32,
            transition_compression: 0.5,
            fusion_mode: FusionMode::Feature,
            fused_channels: None,
            decoder_block_count: 5,
            decoder_dense_layers: 4,
            decoder_channels: vec![256, 128, 64, 32, 16],
            decoder_upsample_log2: None,
            pyramid_fractions: vec![1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 1.0 / 4.0],
            output_channels: 3,
            guidance_channels: 3,
        }
    }
}

impl GeneratorConfig {
    /// Small configuration for CPU training at 64×64.
    pub fn desk() -> Self {
        Self {
            stem_channels: 16,
            dense_block_counts: vec![2, 2, 2],
            growth_rate: 8,
            decoder_dense_layers: 2,
            decoder_channels: vec![64, 48, 32, 16, 16],
            ..Self::default()
        }
    }

    /// Minimal configuration for 16×16 inputs (gradient checks, ablation smoke runs).
    pub fn toy() -> Self {
        Self {
            stem_channels: 8,
            dense_block_counts: vec![2, 2, 2],
            growth_rate: 4,
            decoder_block_count: 2,
            decoder_dense_layers: 1,
            decoder_channels: vec![8, 8],
            ..Self::default()
        }
    }

    pub fn total_input_channels(&self) -> usize {
        self.num_streams * self.input_channels_per_stream
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_streams == 0 || self.input_channels_per_stream == 0 {
            return fail("num_streams and input_channels_per_stream must be >= 1".into());
        }
        if self.dense_block_counts.len() != 3 {
            return fail(format!(
                "dense_block_counts needs 3 levels, got {}",
                self.dense_block_counts.len()
            ));
        }
        if self.stem_channels == 0 || self.growth_rate == 0 {
            return fail("stem_channels and growth_rate must be >= 1".into());
        }
        if !(self.transition_compression > 0.0 && self.transition_compression <= 1.0) {
            return fail("transition_compression must lie in (0, 1]".into());
        }
        if self.decoder_block_count == 0 || self.decoder_channels.len() != self.decoder_block_count {
            return fail(format!(
                "decoder_channels has {} entries for {} decoder blocks",
                self.decoder_channels.len(),
                self.decoder_block_count
            ));
        }
        if self.decoder_channels.contains(&0) {
            return fail("decoder_channels must be positive".into());
        }
        let schedule = self.upsample_schedule();
        if schedule.len() != self.decoder_block_count
            || schedule.iter().sum::<u32>() != ENCODER_FACTOR_LOG2
        {
            return fail(format!(
                "decoder upsampling {schedule:?} must have one entry per block and total x{ENCODER_FACTOR}"
            ));
        }
        let f = &self.pyramid_fractions;
        if f.is_empty()
            || f.iter().any(|v| !(*v > 0.0 && *v <= 1.0))
            || f.windows(2).any(|w| w[0] >= w[1])
        {
            return fail(format!("pyramid fractions {f:?} must be strictly increasing in (0, 1]"));
        }
        if self.output_channels == 0 || self.guidance_channels == 0 {
            return fail("output and guidance channels must be >= 1".into());
        }
        if self.fused_channels == Some(0) {
            return fail("fused_channels must be positive".into());
        }
        Ok(())
    }

    /// log2 upsampling factor of each decoder block. With more than four
    /// blocks the leading blocks keep their resolution; with fewer, the
    /// factor is spread with the larger steps first.
    pub fn upsample_schedule(&self) -> Vec<u32> {
        if let Some(s) = &self.decoder_upsample_log2 {
            return s.clone();
        }
        let n = self.decoder_block_count as u32;
        if n == 0 {
            return Vec::new();
        }
        if n >= ENCODER_FACTOR_LOG2 {
            (0..n).map(|i| u32::from(i >= n - ENCODER_FACTOR_LOG2)).collect()
        } else {
            let base = ENCODER_FACTOR_LOG2 / n;
            let extra = ENCODER_FACTOR_LOG2 % n;
            (0..n).map(|i| base + u32::from(i < extra)).collect()
        }
    }

    fn encoder_input_channels(&self) -> usize {
        match self.fusion_mode {
            FusionMode::Input => self.total_input_channels(),
            FusionMode::Feature | FusionMode::Output => self.input_channels_per_stream,
        }
    }

    fn encoder_count(&self) -> usize {
        match self.fusion_mode {
            FusionMode::Input => 1,
            FusionMode::Feature | FusionMode::Output => self.num_streams,
        }
    }

    fn transition_width(&self, channels: usize) -> usize {
        ((channels as f64 * self.transition_compression).floor() as usize).max(1)
    }

    /// Channel count of one encoder stream's output.
    pub fn encoder_output_channels(&self) -> usize {
        let mut c = self.stem_channels;
        for (level, n) in self.dense_block_counts.iter().enumerate() {
            c += n * self.growth_rate;
            if level + 1 < self.dense_block_counts.len() {
                c = self.transition_width(c);
            }
        }
        c
    }
}

/// Dense layer: normalization, ReLU, 3×3 convolution to `growth` channels.
#[derive(Clone, Debug)]
struct DenseLayer {
    bn: BatchNorm2d,
    conv: Conv2d,
}

impl DenseLayer {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.conv.forward(&self.bn.forward(x, mode)?.relu()?)
    }
}

/// Densely connected block: layer `j` sees the concatenation of the block
/// input and every earlier layer output; the block output is that full
/// concatenation, `c_in + layers · growth` channels at unchanged resolution.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    layers: Vec<DenseLayer>,
    c_in: usize,
    growth: usize,
}

impl DenseBlock {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, layers: usize, growth: usize) -> Result<Self> {
        let layers = (0..layers)
            .map(|j| {
                let width = c_in + j * growth;
                Ok(DenseLayer {
                    bn: BatchNorm2d::new(store, &format!("{name}.layer{j}.bn"), width)?,
                    conv: Conv2d::new(store, &format!("{name}.layer{j}.conv"), width, growth, 3, 1, 1, false)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, c_in, growth })
    }

    pub fn out_channels(&self) -> usize {
        self.c_in + self.layers.len() * self.growth
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.c_in {
            return Err(shape_err!("dense block expects {} channels, got {c}", self.c_in));
        }
        let mut features = vec![x.clone()];
        for layer in &self.layers {
            let input = if features.len() == 1 { x.clone() } else { Tensor::cat(&features, 1)? };
            features.push(layer.forward(&input, mode)?);
        }
        if features.len() == 1 {
            return Ok(x.clone());
        }
        Ok(Tensor::cat(&features, 1)?)
    }
}

#[derive(Clone, Debug)]
struct TransitionDown {
    conv: Conv2d,
}

impl TransitionDown {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(x)?.avg_pool2d(2)?)
    }
}

/// One encoder stream: stem then three dense levels separated by transitions.
#[derive(Clone, Debug)]
pub struct EncoderStream {
    stem: Conv2d,
    levels: Vec<DenseBlock>,
    transitions: Vec<TransitionDown>,
}

impl EncoderStream {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, config: &GeneratorConfig) -> Result<Self> {
        let stem = Conv2d::new(store, &format!("{name}.stem"), c_in, config.stem_channels, 4, 2, 1, true)?;
        let mut c = config.stem_channels;
        let mut levels = Vec::new();
        let mut transitions = Vec::new();
        for (level, &n) in config.dense_block_counts.iter().enumerate() {
            let block = DenseBlock::new(store, &format!("{name}.level{level}"), c, n, config.growth_rate)?;
            c = block.out_channels();
            levels.push(block);
            if level + 1 < config.dense_block_counts.len() {
                let out = config.transition_width(c);
                let conv = Conv2d::new(store, &format!("{name}.down{level}"), c, out, 1, 1, 0, false)?;
                transitions.push(TransitionDown { conv });
                c = out;
            }
        }
        Ok(Self { stem, levels, transitions })
    }

    pub fn out_channels(&self) -> usize {
        self.levels.last().map_or(self.stem.out_channels(), |b| b.out_channels())
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h % ENCODER_FACTOR != 0 || w % ENCODER_FACTOR != 0 {
            return Err(shape_err!("input {h}x{w} is not divisible by {ENCODER_FACTOR}"));
        }
        let mut y = nn::max_pool2x2(&self.stem.forward(x)?.relu()?)?;
        for (i, level) in self.levels.iter().enumerate() {
            y = level.forward(&y, mode)?;
            if let Some(t) = self.transitions.get(i) {
                y = t.forward(&y)?;
            }
        }
        Ok(y)
    }
}

/// Residual block on 1×1 convolutions over the concatenated stream features,
/// optionally followed by a 1×1 projection.
#[derive(Clone, Debug)]
pub struct ResidualFusion {
    conv1: Conv2d,
    conv2: Conv2d,
    project: Option<Conv2d>,
    width: usize,
}

impl ResidualFusion {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, fused: Option<usize>) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), width, width, 1, 1, 0, true)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), width, width, 1, 1, 0, true)?,
            project: match fused {
                Some(out) if out != width => {
                    Some(Conv2d::new(store, &format!("{name}.project"), width, out, 1, 1, 0, true)?)
                }
                _ => None,
            },
            width,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.project.as_ref().map_or(self.width, |p| p.out_channels())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let r = self.conv2.forward(&self.conv1.forward(x)?.relu()?)?;
        let y = (x + r)?;
        match &self.project {
            Some(p) => p.forward(&y),
            None => Ok(y),
        }
    }
}

/// Concatenate equally shaped stream features along channels and fuse them.
pub fn fuse_features(fusion: &ResidualFusion, streams: &[Tensor]) -> Result<Tensor> {
    let first = streams.first().ok_or_else(|| shape_err!("no streams to fuse"))?;
    if let Some(bad) = streams.iter().find(|s| s.dims() != first.dims()) {
        return Err(shape_err!("stream shapes differ: {:?} vs {:?}", bad.dims(), first.dims()));
    }
    let concat = if streams.len() == 1 { first.clone() } else { Tensor::cat(streams, 1)? };
    fusion.forward(&concat)
}

/// 1×1 convolution and Tanh on the fused bottleneck.
#[derive(Clone, Debug)]
pub struct GuidanceHead {
    conv: Conv2d,
}

impl GuidanceHead {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self { conv: Conv2d::new(store, name, c_in, c_out, 1, 1, 0, true)? })
    }

    pub fn forward(&self, fused: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(fused)?.tanh()?)
    }
}

/// Two 3×3 convolutions joined by normalization and ReLU, with identity skip.
#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

impl ResidualBlock {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c, c, 3, 1, 1, false)?,
            bn1: BatchNorm2d::new(store, &format!("{name}.bn1"), c)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c, c, 3, 1, 1, false)?,
            bn2: BatchNorm2d::new(store, &format!("{name}.bn2"), c)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let r = self.bn1.forward(&self.conv1.forward(x)?, mode)?.relu()?;
        let r = self.bn2.forward(&self.conv2.forward(&r)?, mode)?;
        Ok((x + r)?)
    }
}

/// Dense block, transition-up (1×1 conv then bilinear upsampling) and two
/// residual blocks.
#[derive(Clone, Debug)]
struct DenseResidualBlock {
    dense: DenseBlock,
    transition: Conv2d,
    upsample_log2: u32,
    residual: [ResidualBlock; 2],
}

impl DenseResidualBlock {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = self.transition.forward(&self.dense.forward(x, mode)?)?;
        let y = if self.upsample_log2 > 0 {
            let (_, _, h, w) = y.dims4()?;
            let f = 1usize << self.upsample_log2;
            nn::upsample_bilinear(&y, h * f, w * f)?
        } else {
            y
        };
        let y = self.residual[0].forward(&y, mode)?;
        self.residual[1].forward(&y, mode)
    }
}

/// Stack of dense-residual blocks from the bottleneck to input resolution.
#[derive(Clone, Debug)]
pub struct DecoderTrunk {
    blocks: Vec<DenseResidualBlock>,
}

impl DecoderTrunk {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, config: &GeneratorConfig) -> Result<Self> {
        let mut c = c_in;
        let mut blocks = Vec::new();
        for (b, (&width, &up)) in config.decoder_channels.iter().zip(config.upsample_schedule().iter()).enumerate() {
            let dense = DenseBlock::new(
                store,
                &format!("{name}.block{b}.dense"),
                c,
                config.decoder_dense_layers,
                config.growth_rate,
            )?;
            let transition = Conv2d::new(
                store,
                &format!("{name}.block{b}.up"),
                dense.out_channels(),
                width,
                1,
                1,
                0,
                false,
            )?;
            let residual = [
                ResidualBlock::new(store, &format!("{name}.block{b}.res0"), width)?,
                ResidualBlock::new(store, &format!("{name}.block{b}.res1"), width)?,
            ];
            blocks.push(DenseResidualBlock { dense, transition, upsample_log2: up, residual });
            c = width;
        }
        Ok(Self { blocks })
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map(|b| b.transition.out_channels()).unwrap_or(0)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut y = x.clone();
        for block in &self.blocks {
            y = block.forward(&y, mode)?;
        }
        Ok(y)
    }
}

/// Weight std of the final image convolution; small so the Tanh starts unsaturated.
pub const OUTPUT_INIT_STD: f64 = 0.02;

/// Multi-level pyramid pooling: each level average-pools to a fraction of
/// the feature resolution, reduces to one channel with a 1×1 convolution
/// and is upsampled back; the levels are concatenated with the features
/// and a 3×3 convolution plus Tanh produces the image.
#[derive(Clone, Debug)]
pub struct PyramidHead {
    fractions: Vec<f64>,
    reducers: Vec<Conv2d>,
    output: Conv2d,
}

impl PyramidHead {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, fractions: &[f64], c_out: usize) -> Result<Self> {
        let reducers = (0..fractions.len())
            .map(|i| Conv2d::new(store, &format!("{name}.level{i}"), c_in, 1, 1, 1, 0, true))
            .collect::<Result<Vec<_>>>()?;
        let output = Conv2d::with_std(
            store,
            &format!("{name}.out"),
            c_in + fractions.len(),
            c_out,
            3,
            1,
            1,
            true,
            OUTPUT_INIT_STD,
        )?;
        Ok(Self { fractions: fractions.to_vec(), reducers, output })
    }

    pub fn levels(&self) -> usize {
        self.reducers.len()
    }

    /// Features and the one-channel pyramid maps, concatenated, before the
    /// output convolution.
    pub fn pooled_features(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let mut parts = vec![x.clone()];
        for (f, reducer) in self.fractions.iter().zip(&self.reducers) {
            let pooled = nn::adaptive_avg_pool(x, nn::pooled_size(h, *f), nn::pooled_size(w, *f))?;
            parts.push(nn::upsample_bilinear(&reducer.forward(&pooled)?, h, w)?);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.output.forward(&self.pooled_features(x)?)?.tanh()?)
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    /// `(N, output_channels, H, W)` in `[-1, 1]`.
    pub synthesized: Tensor,
    /// `(N, guidance_channels, H/16, W/16)` in `[-1, 1]`.
    pub guidance: Tensor,
}

pub struct Generator {
    config: GeneratorConfig,
    store: ParamStore,
    encoders: Vec<EncoderStream>,
    fusions: Vec<ResidualFusion>,
    guidance: GuidanceHead,
    trunks: Vec<DecoderTrunk>,
    head: PyramidHead,
}

impl Generator {
    pub fn new(config: GeneratorConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let enc_in = config.encoder_input_channels();
        let encoders = (0..config.encoder_count())
            .map(|i| EncoderStream::new(&mut store, &format!("stream{i}"), enc_in, &config))
            .collect::<Result<Vec<_>>>()?;
        let enc_out = config.encoder_output_channels();
        let (fusions, trunk_count) = match config.fusion_mode {
            FusionMode::Feature | FusionMode::Input => {
                let width = enc_out * encoders.len();
                (vec![ResidualFusion::new(&mut store, "fusion", width, config.fused_channels)?], 1)
            }
            FusionMode::Output => {
                let f = (0..encoders.len())
                    .map(|i| ResidualFusion::new(&mut store, &format!("fusion{i}"), enc_out, config.fused_channels))
                    .collect::<Result<Vec<_>>>()?;
                (f, encoders.len())
            }
        };
        let bottleneck: usize = fusions.iter().map(|f| f.out_channels()).sum();
        let guidance = GuidanceHead::new(&mut store, "guidance", bottleneck, config.guidance_channels)?;
        let trunks = (0..trunk_count)
            .map(|i| {
                let name = if trunk_count == 1 { "decoder".to_string() } else { format!("decoder{i}") };
                DecoderTrunk::new(&mut store, &name, fusions[i].out_channels(), &config)
            })
            .collect::<Result<Vec<_>>>()?;
        let head_in = trunks.iter().map(|t| t.out_channels()).sum::<usize>() + config.total_input_channels();
        let head = PyramidHead::new(&mut store, "head", head_in, &config.pyramid_fractions, config.output_channels)?;
        Ok(Self { config, store, encoders, fusions, guidance, trunks, head })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn encoders(&self) -> &[EncoderStream] {
        &self.encoders
    }

    pub fn pyramid(&self) -> &PyramidHead {
        &self.head
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.total_input_channels() {
            return Err(shape_err!(
                "generator expects {} input channels, got {c}",
                self.config.total_input_channels()
            ));
        }
        if h % ENCODER_FACTOR != 0 || w % ENCODER_FACTOR != 0 || h == 0 || w == 0 {
            return Err(shape_err!("input {h}x{w} is not a positive multiple of {ENCODER_FACTOR}"));
        }
        Ok(())
    }

    fn stream_inputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        match self.config.fusion_mode {
            FusionMode::Input => Ok(vec![x.clone()]),
            FusionMode::Feature | FusionMode::Output => {
                let k = self.config.input_channels_per_stream;
                (0..self.config.num_streams).map(|i| Ok(x.narrow(1, i * k, k)?)).collect()
            }
        }
    }

    /// Encoder streams plus fusion: the bottleneck shared by the guidance
    /// head and the decoder (one tensor per decoder trunk).
    pub fn encode(&self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let inputs = self.stream_inputs(x)?;
        let features = self
            .encoders
            .iter()
            .zip(&inputs)
            .map(|(e, inp)| e.forward(inp, mode))
            .collect::<Result<Vec<_>>>()?;
        match self.config.fusion_mode {
            FusionMode::Feature | FusionMode::Input => Ok(vec![fuse_features(&self.fusions[0], &features)?]),
            FusionMode::Output => features
                .iter()
                .zip(&self.fusions)
                .map(|(f, fusion)| fuse_features(fusion, std::slice::from_ref(f)))
                .collect(),
        }
    }

    pub fn guidance_head(&self) -> &GuidanceHead {
        &self.guidance
    }

    /// Decoder trunks, concatenation with the input Stokes channels, and the
    /// pyramid head.
    pub fn decode(&self, fused: &[Tensor], stokes: &Tensor, mode: Mode) -> Result<Tensor> {
        if fused.len() != self.trunks.len() {
            return Err(shape_err!("expected {} bottleneck tensors, got {}", self.trunks.len(), fused.len()));
        }
        let (_, _, h, w) = stokes.dims4()?;
        let mut parts = Vec::new();
        let inputs = match self.config.fusion_mode {
            FusionMode::Output => self.stream_inputs(stokes)?,
            _ => vec![stokes.clone()],
        };
        for ((trunk, f), inp) in self.trunks.iter().zip(fused).zip(inputs) {
            let (_, _, fh, fw) = f.dims4()?;
            if fh * ENCODER_FACTOR != h || fw * ENCODER_FACTOR != w {
                return Err(shape_err!("bottleneck {fh}x{fw} does not match target {h}x{w}"));
            }
            let y = trunk.forward(f, mode)?;
            parts.push(y);
            parts.push(inp);
        }
        self.head.forward(&Tensor::cat(&parts, 1)?)
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<GeneratorOutput> {
        let fused = self.encode(x, mode)?;
        let bottleneck = if fused.len() == 1 { fused[0].clone() } else { Tensor::cat(&fused, 1)? };
        let guidance = self.guidance.forward(&bottleneck)?;
        let synthesized = self.decode(&fused, x, mode)?;
        Ok(GeneratorOutput { synthesized, guidance })
    }

    /// Config plus every parameter and batch-norm buffer.
    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new(ARCHIVE_KIND);
        self.write_into(&mut a, "generator")?;
        Ok(a)
    }

    pub fn write_into(&self, archive: &mut Archive, prefix: &str) -> Result<()> {
        archive.put_json(&format!("{prefix}.config"), &self.config)?;
        archive.put_group(prefix, &self.store.snapshot()?)
    }

    pub fn read_from(archive: &Archive, prefix: &str) -> Result<Self> {
        let config: GeneratorConfig = archive.get_json(&format!("{prefix}.config"))?;
        let tensors = archive.group(prefix);
        let dtype = tensors.values().next().map_or(DType::F32, |t| t.dtype());
        let g = Self::new(config, dtype, 0)?;
        g.store.load(&tensors, true)?;
        Ok(g)
    }

    /// Load a generator from a generator or training checkpoint.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_from(&Archive::load(path)?, "generator")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_archive()?.save(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn input(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut s = ParamStore::new(DType::F32, seed);
        s.gaussian("x", &[1, c, h, w], 0.5).unwrap().as_detached_tensor()
    }

    #[test]
    fn dense_block_channel_arithmetic() {
        let mut store = ParamStore::new(DType::F32, 0);
        let b = DenseBlock::new(&mut store, "b", 8, 4, 8).unwrap();
        let y = b.forward(&input(8, 6, 6, 1), Mode::Train).unwrap();
        assert_eq!(y.dims(), &[1, 40, 6, 6]);
        let b = DenseBlock::new(&mut store, "c", 64, 12, 16).unwrap();
        assert_eq!(b.out_channels(), 256);
    }

    #[test]
    fn empty_dense_block_is_identity() {
        let mut store = ParamStore::new(DType::F32, 0);
        let b = DenseBlock::new(&mut store, "b", 5, 0, 8).unwrap();
        let x = input(5, 4, 4, 2);
        let y = b.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.dims(), x.dims());
        let d = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn encoder_divides_by_sixteen() {
        let cfg = GeneratorConfig::toy();
        let mut store = ParamStore::new(DType::F32, 0);
        let e = EncoderStream::new(&mut store, "s", 1, &cfg).unwrap();
        let y = e.forward(&input(1, 64, 64, 3), Mode::Train).unwrap();
        assert_eq!(y.dims(), &[1, cfg.encoder_output_channels(), 4, 4]);
        assert!(e.forward(&input(1, 40, 40, 3), Mode::Train).is_err());
        assert_eq!(e.out_channels(), cfg.encoder_output_channels());
    }

    #[test]
    fn fusion_rejects_mismatched_streams() {
        let mut store = ParamStore::new(DType::F32, 0);
        let f = ResidualFusion::new(&mut store, "f", 8, None).unwrap();
        let a = input(4, 2, 2, 0);
        let b = input(4, 3, 2, 1);
        assert!(fuse_features(&f, &[a.clone(), b]).is_err());
        assert_eq!(fuse_features(&f, &[a.clone(), a]).unwrap().dims(), &[1, 8, 2, 2]);
    }

    #[test]
    fn guidance_with_zero_weights_is_zero() {
        let mut store = ParamStore::new(DType::F32, 0);
        let g = GuidanceHead::new(&mut store, "g", 6, 3).unwrap();
        let w = g.conv.weight();
        w.set(&w.zeros_like().unwrap()).unwrap();
        let y = g.forward(&input(6, 4, 4, 5)).unwrap();
        assert_eq!(y.dims(), &[1, 3, 4, 4]);
        assert_eq!(y.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn upsample_schedules() {
        let mut c = GeneratorConfig::default();
        assert_eq!(c.upsample_schedule(), vec![0, 1, 1, 1, 1]);
        c.decoder_block_count = 2;
        assert_eq!(c.upsample_schedule(), vec![2, 2]);
        c.decoder_block_count = 3;
        assert_eq!(c.upsample_schedule(), vec![2, 1, 1]);
        c.decoder_block_count = 4;
        assert_eq!(c.upsample_schedule(), vec![1, 1, 1, 1]);
    }

    #[test]
    fn config_validation() {
        let mut c = GeneratorConfig::toy();
        assert!(c.validate().is_ok());
        c.pyramid_fractions = vec![0.25, 0.125];
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::toy();
        c.dense_block_counts = vec![1, 1];
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::toy();
        c.decoder_upsample_log2 = Some(vec![1, 1]);
        assert!(c.validate().is_err());
        let mut c = GeneratorConfig::toy();
        c.num_streams = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn generator_rejects_wrong_channels() {
        let g = Generator::new(GeneratorConfig::toy(), DType::F32, 0).unwrap();
        assert!(g.forward(&input(2, 16, 16, 0), Mode::Eval).is_err());
        let x = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(g.forward(&x, Mode::Eval).is_ok());
    }
}

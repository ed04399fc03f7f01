//! Small neural-network toolkit on top of `candle-core`: a named parameter
//! store with seeded initialization, the handful of layers the models need,
//! matrix-based resampling (bilinear and adaptive average pooling) and Adam.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Whether normalization layers use batch statistics (and update their
/// running estimates) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Floating point precision of a model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Named trainable parameters and non-trainable buffers of one model.
///
/// Names are dotted paths (`stream0.level1.layer3.conv.weight`). Iteration
/// order is lexicographic, which keeps optimizer updates and serialization
/// deterministic.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert_param(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Zero-mean Gaussian parameter with the given standard deviation.
    pub fn gaussian(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.insert_param(name, values, shape)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        self.insert_param(name, vec![value; n], shape)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        if self.params.contains_key(name) || self.buffers.contains_key(name) {
            return Err(Error::Config(format!("duplicate buffer name `{name}`")));
        }
        let n: usize = shape.iter().product();
        let t = Tensor::from_vec(vec![value; n], shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Snapshot of every parameter and buffer as independent tensors.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrite parameters and buffers from named tensors.
    ///
    /// With `strict`, every entry of the store must be present in `tensors`
    /// and every tensor must name an entry of the store. Non-strict loading
    /// (partial initialization from pretrained weights) only requires
    /// matching shapes for the names that are present in both.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>, strict: bool) -> Result<usize> {
        let mut loaded = 0;
        for (name, var) in self.params.iter().chain(self.buffers.iter()) {
            match tensors.get(name) {
                Some(t) => {
                    if t.dims() != var.dims() {
                        return Err(shape_err!(
                            "`{name}`: stored {:?}, model expects {:?}",
                            t.dims(),
                            var.dims()
                        ));
                    }
                    var.set(&t.to_dtype(self.dtype)?)?;
                    loaded += 1;
                }
                None if strict => {
                    return Err(Error::Archive(format!("missing tensor `{name}`")));
                }
                None => {}
            }
        }
        if strict {
            if let Some(extra) = tensors
                .keys()
                .find(|k| !self.params.contains_key(*k) && !self.buffers.contains_key(*k))
            {
                return Err(Error::Archive(format!("unexpected tensor `{extra}`")));
            }
        }
        Ok(loaded)
    }
}

fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in.max(1) as f64).sqrt()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::with_std(store, name, c_in, c_out, kernel, stride, padding, bias, he_std(c_in * kernel * kernel))
    }

    /// Same as [`Conv2d::new`] with weights drawn from `N(0, std²)`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        std: f64,
    ) -> Result<Self> {
        let weight = store.gaussian(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], std)?;
        let bias = if bias {
            Some(store.constant(&format!("{name}.bias"), &[c_out], 0.0)?)
        } else {
            None
        };
        Ok(Self { weight, bias, stride, padding })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(self.weight.as_tensor(), self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(&format!("{name}.weight"), &[channels], 1.0)?,
            beta: store.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let count = n * h * w;
                let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
                let m = self.momentum;
                let rm = self.running_mean.as_detached_tensor();
                let rv = self.running_var.as_detached_tensor();
                let new_mean = ((rm * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
                let new_var = ((rv * (1.0 - m))? + (var.detach().flatten_all()? * (m * unbias))?)?;
                self.running_mean.set(&new_mean)?;
                self.running_var.set(&new_var)?;
                (mean, var)
            }
            Mode::Eval => (
                self.running_mean.as_detached_tensor().reshape((1, c, 1, 1))?,
                self.running_var.as_detached_tensor().reshape((1, c, 1, 1))?,
            ),
        };
        let normalized = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let gamma = self.gamma.as_tensor().reshape((1, c, 1, 1))?;
        let beta = self.beta.as_tensor().reshape((1, c, 1, 1))?;
        Ok(normalized.broadcast_mul(&gamma)?.broadcast_add(&beta)?)
    }
}

/// Fully connected layer over `(batch, features)` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Var,
    bias: Var,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: store.gaussian(&format!("{name}.weight"), &[d_out, d_in], he_std(d_in))?,
            bias: store.constant(&format!("{name}.bias"), &[d_out], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }
}

/// Row-stochastic `out × in` matrix for bilinear resampling with half-pixel
/// centers (`align_corners = false`), edge samples clamped.
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for i in 0..out_len {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        let w1 = src - i0 as f64;
        m[i * in_len + i0] += 1.0 - w1;
        m[i * in_len + i1] += w1;
    }
    m
}

/// `out × in` matrix of adaptive average pooling: output cell `i` averages
/// inputs `floor(i·in/out) .. ceil((i+1)·in/out)`.
pub fn adaptive_avg_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    for i in 0..out_len {
        let start = i * in_len / out_len;
        let end = ((i + 1) * in_len).div_ceil(out_len);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            m[i * in_len + j] = w;
        }
    }
    m
}

/// Apply separable linear resampling: `rows` is `out_h × h`, `cols` is
/// `out_w × w`. Differentiable with respect to `x`.
pub fn resample(x: &Tensor, rows: &[f64], cols: &[f64], out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if rows.len() != out_h * h || cols.len() != out_w * w {
        return Err(shape_err!("resampling matrices do not match {h}x{w} -> {out_h}x{out_w}"));
    }
    let dtype = x.dtype();
    let dev = x.device();
    let x = if out_w == w && is_identity(cols, w) {
        x.clone()
    } else {
        let ct = Tensor::from_slice(cols, (out_w, w), dev)?.to_dtype(dtype)?.t()?;
        x.reshape((n * c * h, w))?.matmul(&ct)?.reshape((n, c, h, out_w))?
    };
    if out_h == h && is_identity(rows, h) {
        return Ok(x);
    }
    let rt = Tensor::from_slice(rows, (out_h, h), dev)?.to_dtype(dtype)?.t()?;
    let y = x
        .transpose(2, 3)?
        .contiguous()?
        .reshape((n * c * out_w, h))?
        .matmul(&rt)?
        .reshape((n, c, out_w, out_h))?
        .transpose(2, 3)?
        .contiguous()?;
    Ok(y)
}

fn is_identity(m: &[f64], n: usize) -> bool {
    (0..n).all(|i| (0..n).all(|j| m[i * n + j] == if i == j { 1.0 } else { 0.0 }))
}

pub fn upsample_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    resample(x, &bilinear_matrix(h, out_h), &bilinear_matrix(w, out_w), out_h, out_w)
}

pub fn adaptive_avg_pool(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(shape_err!("cannot pool {h}x{w} to {out_h}x{out_w}"));
    }
    resample(x, &adaptive_avg_matrix(h, out_h), &adaptive_avg_matrix(w, out_w), out_h, out_w)
}

/// 2×2 max pooling with stride 2, odd trailing rows/columns dropped.
/// Built from a reshape and max reductions because candle's `max_pool2d`
/// backward pass scales the gradient by 1/4.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h / 2, w / 2);
    if oh == 0 || ow == 0 {
        return Err(shape_err!("max_pool2x2 needs at least 2x2 input, got {h}x{w}"));
    }
    let x = if h % 2 == 1 || w % 2 == 1 { x.narrow(2, 0, oh * 2)?.narrow(3, 0, ow * 2)? } else { x.clone() };
    let y = x.contiguous()?.reshape((n * c * oh, 2, ow, 2))?.max_keepdim(3)?.max_keepdim(1)?;
    Ok(y.reshape((n, c, oh, ow))?)
}

/// Pooling grid for a resolution and a fraction, at least one cell.
pub fn pooled_size(len: usize, fraction: f64) -> usize {
    ((len as f64 * fraction).round() as usize).clamp(1, len)
}

/// Mean over all dims but the batch: `(N, ...) -> (N,)`.
pub fn mean_per_sample(x: &Tensor) -> Result<Tensor> {
    let n = x.dim(0)?;
    Ok(x.reshape((n, ()))?.mean(D::Minus1)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 8e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Parameters without a gradient are skipped.
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn update(
        &mut self,
        params: &BTreeMap<String, Var>,
        grads: &GradStore,
        clip_norm: Option<f64>,
    ) -> Result<()> {
        self.step += 1;
        let scale = match clip_norm {
            Some(max) => {
                let mut sq = 0.0;
                for var in params.values() {
                    if let Some(g) = grads.get(var.as_tensor()) {
                        sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                    }
                }
                let norm = sq.sqrt();
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, var) in params {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            // Gradients carry their backward graph; detach so the moments do not chain it across steps.
            let g = if scale != 1.0 { (g.detach() * scale)? } else { g.detach() };
            let m_prev = match self.first.get(name) {
                Some(m) => m.clone(),
                None => g.zeros_like()?,
            };
            let v_prev = match self.second.get(name) {
                Some(v) => v.clone(),
                None => g.zeros_like()?,
            };
            let m = ((m_prev * beta1)? + (&g * (1.0 - beta1))?)?;
            let v = ((v_prev * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let denom = ((v.sqrt()? / bc2.sqrt())? + eps)?;
            let delta = ((&m / &denom)? * (learning_rate / bc1))?;
            let updated = (var.as_tensor() - delta)?;
            var.set(&updated)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Optimizer state as named tensors plus the step counter.
    pub fn state(&self) -> (u64, BTreeMap<String, Tensor>) {
        let mut map = BTreeMap::new();
        for (k, v) in &self.first {
            map.insert(format!("m.{k}"), v.clone());
        }
        for (k, v) in &self.second {
            map.insert(format!("v.{k}"), v.clone());
        }
        (self.step, map)
    }

    pub fn restore(config: AdamConfig, step: u64, state: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut adam = Adam::new(config);
        adam.step = step;
        for (k, v) in state {
            if let Some(name) = k.strip_prefix("m.") {
                adam.first.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix("v.") {
                adam.second.insert(name.to_string(), v.clone());
            } else {
                return Err(Error::Archive(format!("unexpected optimizer tensor `{k}`")));
            }
        }
        Ok(adam)
    }
}

/// `(C, H, W)` array to a `(1, C, H, W)` tensor.
pub fn array_to_tensor(a: &Array3<f64>, dtype: DType) -> Result<Tensor> {
    let (c, h, w) = a.dim();
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Stack `(C, H, W)` arrays into an `(N, C, H, W)` tensor.
pub fn stack_arrays(items: &[&Array3<f64>], dtype: DType) -> Result<Tensor> {
    let ts = items.iter().map(|a| array_to_tensor(a, dtype)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// Element `index` of an `(N, C, H, W)` tensor as a `(C, H, W)` array.
pub fn tensor_to_array(t: &Tensor, index: usize) -> Result<Array3<f64>> {
    let (_, c, h, w) = t.dims4()?;
    let data = t.get(index)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Array3::from_shape_vec((c, h, w), data).map_err(|e| shape_err!("{e}"))
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

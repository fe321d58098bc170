//! Seeded parameter store and the small set of layers the model is built from.
//!
//! Parameters are created through a [`ParamStore`] so that initialization is
//! reproducible from a seed and every variable has a stable dotted name. The
//! first path component of a name is its parameter group (see
//! [`crate::training::ParamGroup`]).

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::{im2col, norm};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform { lo: f64, hi: f64 },
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    FanIn(usize),
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named, seeded collection of trainable variables.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    prefix: String,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("prefix", &self.prefix)
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            prefix: String::new(),
            dtype,
            device: device.clone(),
        }
    }

    /// Sub-store whose variables are named `<prefix>.<name>`.
    pub fn pp(&self, name: impl AsRef<str>) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Self {
            prefix,
            ..self.clone()
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Creates (or returns the existing) variable `name` with the given shape.
    pub fn get(&self, shape: &[usize], name: &str, init: Init) -> Result<Tensor> {
        let full = self.full_name(name);
        let mut inner = self.inner.lock().expect("param store poisoned");
        if let Some(var) = inner.vars.get(&full) {
            if var.dims() != shape {
                return Err(Error::Config(format!(
                    "parameter {full} requested with shape {shape:?}, exists as {:?}",
                    var.dims()
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Const(c) => vec![c; numel],
            Init::Uniform { lo, hi } => (0..numel).map(|_| inner.rng.random_range(lo..hi)).collect(),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..numel)
                    .map(|_| inner.rng.random_range(-bound..bound))
                    .collect()
            }
        };
        let tensor = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(full, var);
        Ok(out)
    }

    /// Creates a variable from explicit values.
    pub fn get_values(&self, shape: &[usize], name: &str, values: Vec<f64>) -> Result<Tensor> {
        let t = self.get(shape, name, Init::Zeros)?;
        let var = self
            .var(&self.full_name(name))
            .expect("variable was just created");
        var.set(&Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)?;
        Ok(t)
    }

    /// All variables, sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Variables whose name starts with `<group>.`.
    pub fn group_vars(&self, group: &str) -> Vec<(String, Var)> {
        let prefix = format!("{group}.");
        self.vars()
            .into_iter()
            .filter(|(k, _)| k.starts_with(&prefix))
            .collect()
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.inner
            .lock()
            .expect("param store poisoned")
            .vars
            .get(name)
            .cloned()
    }

    pub fn num_params(&self, group: Option<&str>) -> usize {
        let vars = match group {
            Some(g) => self.group_vars(g),
            None => self.vars(),
        };
        vars.iter().map(|(_, v)| v.elem_count()).sum()
    }
}

fn fan_in(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

/// Replicate ("edge") padding on the two spatial dims of a NCHW tensor.
pub fn pad_replicate(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    Ok(x.pad_with_same(2, pad, pad)?.pad_with_same(3, pad, pad)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zeros,
    Replicate,
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    pad_mode: Padding,
}

impl Conv2d {
    pub fn new(
        store: &ParamStore,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let shape = [out_c, in_c, kernel, kernel];
        let weight = store.get(&shape, "weight", Init::FanIn(fan_in(&shape)))?;
        let bias = if bias {
            Some(store.get(&[out_c], "bias", Init::FanIn(fan_in(&shape)))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
            pad_mode: Padding::Zeros,
        })
    }

    pub fn from_parts(weight: Tensor, bias: Option<Tensor>, stride: usize) -> Result<Self> {
        let kernel = weight.dims4()?.2;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
            pad_mode: Padding::Zeros,
        })
    }

    /// Overrides the padding amount and mode.
    pub fn with_padding(mut self, padding: usize, mode: Padding) -> Self {
        self.padding = padding;
        self.pad_mode = mode;
        self
    }

    /// Zero-initialized variant (weights and bias), used for residual heads.
    pub fn zeros(store: &ParamStore, in_c: usize, out_c: usize, kernel: usize) -> Result<Self> {
        let weight = store.get(&[out_c, in_c, kernel, kernel], "weight", Init::Zeros)?;
        let bias = Some(store.get(&[out_c], "bias", Init::Zeros)?);
        Ok(Self {
            weight,
            bias,
            stride: 1,
            padding: kernel / 2,
            pad_mode: Padding::Zeros,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let bias = self.bias.as_ref();
        match self.pad_mode {
            Padding::Zeros => im2col::conv2d(x, &self.weight, bias, self.stride, self.padding),
            Padding::Replicate => {
                let padded = if self.padding == 0 {
                    x.clone()
                } else {
                    x.pad_with_same(2, self.padding, self.padding)?
                        .pad_with_same(3, self.padding, self.padding)?
                };
                im2col::conv2d(&padded, &self.weight, bias, self.stride, 0)
            }
        }
    }
}

/// Stride-2 transposed convolution (kernel 4, padding 1): doubles H and W.
#[derive(Debug, Clone)]
pub struct Upsample2x {
    weight: Tensor,
    bias: Tensor,
}

impl Upsample2x {
    pub fn new(store: &ParamStore, in_c: usize, out_c: usize) -> Result<Self> {
        let shape = [in_c, out_c, 4, 4];
        let bound = in_c * 4;
        let weight = store.get(&shape, "weight", Init::FanIn(bound))?;
        let bias = store.get(&[out_c], "bias", Init::FanIn(bound))?;
        Ok(Self { weight, bias })
    }
}

impl Module for Upsample2x {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = im2col::conv_transpose2d(x, &self.weight, 2, 1)?;
        y.broadcast_add(&self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &ParamStore, in_d: usize, out_d: usize, bias: bool) -> Result<Self> {
        let weight = store.get(&[out_d, in_d], "weight", Init::FanIn(in_d))?;
        let bias = if bias {
            Some(store.get(&[out_d], "bias", Init::FanIn(in_d))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    /// Builds a linear map from explicit tensors (tests and analysis).
    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }
}

impl Module for Linear {
    /// Applies over the last dimension of any-rank input.
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        match &self.bias {
            Some(b) => y.broadcast_add(b),
            None => Ok(y),
        }
    }
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &ParamStore, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.get(&[dim], "gamma", Init::Const(1.0))?,
            beta: store.get(&[dim], "beta", Init::Zeros)?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        norm::layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

/// Group normalization over NCHW input.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(store: &ParamStore, channels: usize, groups: usize) -> Result<Self> {
        let groups = (1..=groups.min(channels))
            .rev()
            .find(|g| channels % g == 0)
            .unwrap_or(1);
        Ok(Self {
            gamma: store.get(&[channels], "gamma", Init::Const(1.0))?,
            beta: store.get(&[channels], "beta", Init::Zeros)?,
            groups,
            eps: 1e-5,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        norm::group_norm(x, self.groups, &self.gamma, &self.beta, self.eps)
    }
}

/// Pre-activation residual block: x + conv(act(norm(conv(act(norm(x)))))).
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
}

impl ResBlock {
    pub fn new(store: &ParamStore, channels: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&store.pp("norm1"), channels, 8)?,
            conv1: Conv2d::new(&store.pp("conv1"), channels, channels, 3, 1, true)?,
            norm2: GroupNorm::new(&store.pp("norm2"), channels, 8)?,
            conv2: Conv2d::new(&store.pp("conv2"), channels, channels, 3, 1, true)?,
        })
    }
}

impl Module for ResBlock {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        x + h
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    let neg = x.minimum(0.0)?;
    let pos = x.maximum(0.0)?;
    pos + (neg * slope)?
}

pub fn sigmoid(x: &Tensor) -> candle_core::Result<Tensor> {
    (x.neg()?.exp()? + 1.0)?.recip()
}

/// Numerically stable softmax along `dim`.
pub fn softmax(x: &Tensor, dim: usize) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(dim)?)
}

/// 2x2 average pooling.
pub fn avg_pool2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h / 2, 2, w / 2, 2))?
        .sum(5)?
        .sum(3)?
        .affine(0.25, 0.0)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, h * 2, w * 2))
}

pub fn mean_abs(x: &Tensor) -> candle_core::Result<Tensor> {
    x.abs()?.mean_all()
}

pub fn mean_sq(x: &Tensor) -> candle_core::Result<Tensor> {
    x.sqr()?.mean_all()
}

/// Scalar tensor to f64.
pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Flattens a tensor to a Vec<f64> on the host.
pub fn to_vec_f64(x: &Tensor) -> Result<Vec<f64>> {
    Ok(x.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn store_is_deterministic_per_seed() {
        let a = ParamStore::new(7, DType::F32, &Device::Cpu);
        let b = ParamStore::new(7, DType::F32, &Device::Cpu);
        let c = ParamStore::new(8, DType::F32, &Device::Cpu);
        let ta = a.pp("g").get(&[4, 3], "w", Init::FanIn(3)).unwrap();
        let tb = b.pp("g").get(&[4, 3], "w", Init::FanIn(3)).unwrap();
        let tc = c.pp("g").get(&[4, 3], "w", Init::FanIn(3)).unwrap();
        assert_eq!(to_vec_f64(&ta).unwrap(), to_vec_f64(&tb).unwrap());
        assert_ne!(to_vec_f64(&ta).unwrap(), to_vec_f64(&tc).unwrap());
        assert_eq!(a.vars()[0].0, "g.w");
        assert_eq!(a.group_vars("g").len(), 1);
    }

    #[test]
    fn shape_conflict_is_an_error() {
        let s = ParamStore::new(0, DType::F32, &Device::Cpu);
        s.get(&[2], "w", Init::Zeros).unwrap();
        assert!(s.get(&[3], "w", Init::Zeros).is_err());
    }

    #[test]
    fn replicate_conv_keeps_constant_input_constant() {
        let s = ParamStore::new(1, DType::F64, &Device::Cpu);
        let conv = Conv2d::new(&s, 2, 3, 3, 1, true)
            .unwrap()
            .with_padding(1, Padding::Replicate);
        let x = Tensor::full(0.7f64, (1, 2, 5, 5), &Device::Cpu).unwrap();
        let y = to_vec_f64(&conv.forward(&x).unwrap()).unwrap();
        for ch in y.chunks(25) {
            assert!(ch.iter().all(|v| (v - ch[0]).abs() < 1e-12));
        }
    }

    #[test]
    fn pooling_and_upsampling_shapes() {
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 1, 4, 4))
            .unwrap();
        let p = avg_pool2(&x).unwrap();
        assert_eq!(to_vec_f64(&p).unwrap(), vec![2.5, 4.5, 10.5, 12.5]);
        let u = upsample_nearest2(&p).unwrap();
        assert_eq!(u.dims(), &[1, 1, 4, 4]);
        assert_eq!(to_vec_f64(&u).unwrap()[..4], [2.5, 2.5, 4.5, 4.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1000f64, 1001.0, 999.0], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let s = softmax(&x, 1).unwrap().sum(1).unwrap();
        for v in to_vec_f64(&s).unwrap() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}

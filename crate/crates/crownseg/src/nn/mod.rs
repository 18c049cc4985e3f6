//! Small neural-network toolkit on top of candle: a named parameter store with seeded
//! initialization, the handful of layers the models need, losses and optimizers.

pub mod boxes;
pub mod losses;
pub mod ops;
pub mod optim;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named trainable parameters, initialized from a seeded generator so that model construction
/// is reproducible.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    prefix: Vec<String>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
            prefix: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn push(&mut self, name: &str) {
        self.prefix.push(name.to_string());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Run `f` with `name` appended to the parameter prefix.
    pub fn scoped<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.push(name);
        let out = f(self);
        self.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    /// Register a parameter with the given initial value.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<Tensor> {
        let full = self.full_name(name);
        if self.vars.contains_key(&full) {
            return Err(Error::Model(format!("duplicate parameter {full}")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(full, var);
        Ok(t)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| std * gaussian(&mut self.rng)).collect();
        let t = Tensor::from_vec(data, shape, &self.device)?;
        self.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, DType::F64, &self.device)? * value)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Vec<(&String, &Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .collect()
    }

    pub fn checksum(&self) -> Result<String> {
        checksum(self.vars.iter().map(|(k, v)| (k.as_str(), v.as_tensor())))
    }

    pub fn checksum_prefix(&self, prefix: &str) -> Result<String> {
        checksum(
            self.subset(prefix)
                .into_iter()
                .map(|(k, v)| (k.as_str(), v.as_tensor())),
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Overwrite parameter values from a safetensors file. Every stored parameter must be
    /// present with the same shape.
    pub fn load(&self, path: &Path) -> Result<()> {
        let map = candle_core::safetensors::load(path, &self.device)
            .map_err(|e| Error::format(path, e.to_string()))?;
        for (k, v) in &self.vars {
            let t = map
                .get(k)
                .ok_or_else(|| Error::format(path, format!("missing parameter {k}")))?;
            if t.dims() != v.dims() {
                return Err(Error::format(
                    path,
                    format!("parameter {k}: shape {:?} != {:?}", t.dims(), v.dims()),
                ));
            }
            v.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// Hex SHA-256 over parameter names, shapes and little-endian f32 values.
pub fn checksum<'a>(tensors: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        for x in v {
            h.update(x.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// Standard normal sample by Box-Muller.
pub fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Default-initialized convolution: uniform in +-1/sqrt(fan_in) for weights and bias.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        ps.scoped(name, |ps| {
            Ok(Self {
                weight: ps.uniform("weight", &[c_out, c_in, k, k], bound)?,
                bias: Some(ps.uniform("bias", &[c_out], bound)?),
                stride,
                padding,
            })
        })
    }

    pub fn zeros(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        ps.scoped(name, |ps| {
            Ok(Self {
                weight: ps.constant("weight", &[c_out, c_in, k, k], 0.0)?,
                bias: Some(ps.constant("bias", &[c_out], 0.0)?),
                stride,
                padding,
            })
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let k = self.weight.dim(2)?;
        let y = if self.padding == 0 && self.stride == k && self.weight.dim(3)? == k {
            ops::patch_conv(x, &self.weight)?
        } else {
            x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?
        };
        match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?),
            None => Ok(y),
        }
    }
}

/// Transposed convolution with kernel equal to stride (exact upsampling by `k`).
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        let bound = 1.0 / ((c_out * k * k) as f64).sqrt();
        ps.scoped(name, |ps| {
            Ok(Self {
                weight: ps.uniform("weight", &[c_in, c_out, k, k], bound)?,
                bias: ps.uniform("bias", &[c_out], bound)?,
                stride: k,
            })
        })
    }
}

impl Module for ConvTranspose2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.conv_transpose2d(&self.weight, 0, 0, self.stride, 1)?
            .broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = 1.0 / (d_in as f64).sqrt();
        ps.scoped(name, |ps| {
            Ok(Self {
                weight: ps.uniform("weight", &[d_out, d_in], bound)?,
                bias: ps.uniform("bias", &[d_out], bound)?,
            })
        })
    }

    /// Normal weights with the given standard deviation and zero bias.
    pub fn new_normal(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
    ) -> Result<Self> {
        ps.scoped(name, |ps| {
            Ok(Self {
                weight: ps.normal("weight", &[d_out, d_in], std)?,
                bias: ps.constant("bias", &[d_out], 0.0)?,
            })
        })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)
    }
}

/// Layer normalization over the channel dimension of an NCHW tensor.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub eps: f64,
}

impl LayerNorm2d {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        ps.scoped(name, |ps| {
            Ok(Self {
                weight: ps.constant("weight", &[channels], 1.0)?,
                bias: ps.constant("bias", &[channels], 0.0)?,
                eps: 1e-6,
            })
        })
    }
}

impl Module for LayerNorm2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(1)?;
        let y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        y.broadcast_mul(&self.weight.reshape((1, (), 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, (), 1, 1))?)
    }
}

/// Sequence of linear layers with ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dims: &[usize]) -> Result<Self> {
        ps.scoped(name, |ps| {
            let layers = dims
                .windows(2)
                .enumerate()
                .map(|(i, w)| Linear::new(ps, &i.to_string(), w[0], w[1]))
                .collect::<Result<_>>()?;
            Ok(Self { layers })
        })
    }
}

impl Module for Mlp {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Softmax over the last dimension, written with differentiable primitives.
pub fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub fn log_softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let xs = x.broadcast_sub(&m)?;
    let lse = xs.exp()?.sum_keepdim(D::Minus1)?.log()?;
    xs.broadcast_sub(&lse)
}

/// Scalar value of a rank-0 or single-element tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

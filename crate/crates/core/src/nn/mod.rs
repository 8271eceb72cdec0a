//! Minimal layer kit over candle tensors: parameter storage with seeded
//! initialization, convolutions, and normalization layers.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

mod channel;
mod conv;
pub use channel::{channel_broadcast, channel_sum};
pub use conv::{conv2d, conv_transpose2d};

pub const INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    /// Buffers (batch-norm running statistics) are checkpointed but never optimized.
    pub trainable: bool,
}

/// Ordered collection of the tensors owned by one network.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.trainable().map(|p| p.var.elem_count()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Deep copy of every tensor, for rollback.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        self.params
            .iter()
            .map(|p| Ok(p.var.as_tensor().copy()?))
            .collect()
    }

    pub fn restore(&self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::invalid("snapshot does not match parameter store"));
        }
        for (p, t) in self.params.iter().zip(snapshot) {
            p.var.set(t)?;
        }
        Ok(())
    }

    /// Sets every tensor, trainable or not, to zero.
    pub fn zero_all(&self) -> Result<()> {
        for p in &self.params {
            p.var.set(&p.var.zeros_like()?)?;
        }
        Ok(())
    }
}

/// Creates named, seeded parameters under a dotted prefix.
pub struct Builder<'a, R: Rng> {
    store: &'a mut ParamStore,
    rng: &'a mut R,
    prefix: String,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut R) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn push(&mut self, name: &str) -> Builder<'_, R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Builder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn add(&mut self, name: &str, t: Tensor, trainable: bool) -> Result<Var> {
        let var = Var::from_tensor(&t)?;
        self.store.params.push(Param {
            name: self.full_name(name),
            var: var.clone(),
            trainable,
        });
        Ok(var)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], mean: f64, std: f64) -> Result<Var> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(mean, std).map_err(|e| Error::invalid(e.to_string()))?;
        let data: Vec<f32> = (0..n).map(|_| dist.sample(self.rng) as f32).collect();
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        self.add(name, t, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> Result<Var> {
        let t = (Tensor::ones(shape, DType::F32, &Device::Cpu)? * value)?;
        self.add(name, t, trainable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Reflect,
}

/// Mirror padding without repeating the edge pixel, on both spatial dims.
pub fn reflect_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    for dim in [2usize, 3] {
        let n = out.dim(dim)?;
        if pad >= n {
            return Err(Error::invalid(format!(
                "reflection pad {pad} needs a dimension larger than {n}"
            )));
        }
        let idx: Vec<u32> = (1..=pad)
            .rev()
            .chain(0..n)
            .chain((n - 1 - pad..n - 1).rev())
            .map(|i| i as u32)
            .collect();
        let idx = Tensor::from_vec(idx, pad * 2 + n, out.device())?;
        out = out.index_select(&idx, dim)?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    mode: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        mode: Padding,
        bias: bool,
    ) -> Result<Self> {
        let mut b = b.push(name);
        let weight = b.normal("weight", &[c_out, c_in, kernel, kernel], 0.0, INIT_STD)?;
        let bias = if bias {
            Some(b.constant("bias", &[c_out], 0.0, true)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
            mode,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = match self.mode {
            Padding::Zero => conv2d(x, &self.weight, self.stride, self.padding, false)?,
            Padding::Reflect => conv2d(x, &self.weight, self.stride, self.padding, true)?,
        };
        add_bias(y, self.bias.as_ref())
    }
}

fn add_bias(y: Tensor, bias: Option<&Var>) -> Result<Tensor> {
    match bias {
        Some(b) => Ok((channel_broadcast(b.as_tensor(), &y)? + &y)?),
        None => Ok(y),
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    output_padding: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        output_padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let mut b = b.push(name);
        let weight = b.normal("weight", &[c_in, c_out, kernel, kernel], 0.0, INIT_STD)?;
        let bias = if bias {
            Some(b.constant("bias", &[c_out], 0.0, true)?)
        } else {
            None
        };
        Ok(ConvTranspose2d {
            weight,
            bias,
            stride,
            padding,
            output_padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv_transpose2d(x, &self.weight, self.stride, self.padding, self.output_padding)?;
        add_bias(y, self.bias.as_ref())
    }
}

/// Per-sample, per-channel normalization over the spatial dims, no affine.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered
        .sqr()?
        .mean_keepdim(D::Minus1)?
        .mean_keepdim(D::Minus2)?;
    Ok(centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?)
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm2d {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, channels: usize) -> Result<Self> {
        let mut b = b.push(name);
        Ok(BatchNorm2d {
            gamma: b.normal("weight", &[channels], 1.0, INIT_STD)?,
            beta: b.constant("bias", &[channels], 0.0, true)?,
            running_mean: b.constant("running_mean", &[channels], 0.0, false)?,
            running_var: b.constant("running_var", &[channels], 1.0, false)?,
        })
    }

    /// `train` normalizes with batch statistics and updates the running
    /// estimates; otherwise the running estimates are used.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, _, h, w) = x.dims4()?;
        let count = (n * h * w) as f64;
        let (centered, var) = if train {
            let mean = (channel_sum(x)? / count)?;
            let centered = (x - channel_broadcast(&mean, x)?)?;
            let var = (channel_sum(&centered.sqr()?)? / count)?;
            let unbiased = if count > 1.0 {
                (var.detach() * (count / (count - 1.0)))?
            } else {
                var.detach()
            };
            let rm = ((self.running_mean.as_tensor() * (1.0 - BN_MOMENTUM))? + (mean.detach() * BN_MOMENTUM)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - BN_MOMENTUM))? + (unbiased * BN_MOMENTUM)?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            (centered, var)
        } else {
            let centered = (x - channel_broadcast(self.running_mean.as_tensor(), x)?)?;
            (centered, self.running_var.as_tensor().clone())
        };
        let scale = ((var + NORM_EPS)?.sqrt()?.recip()? * self.gamma.as_tensor())?;
        Ok(((centered * channel_broadcast(&scale, x)?)? + channel_broadcast(self.beta.as_tensor(), x)?)?)
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Crops or zero-pads the trailing spatial dims to exactly `h x w`.
pub fn fit_spatial(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let mut out = x.clone();
    for (dim, target) in [(2usize, h), (3usize, w)] {
        let n = out.dim(dim)?;
        if n > target {
            let start = (n - target) / 2;
            out = out.narrow(dim, start, target)?;
        } else if n < target {
            let before = (target - n) / 2;
            out = out.pad_with_zeros(dim, before, target - n - before)?;
        }
    }
    Ok(out)
}

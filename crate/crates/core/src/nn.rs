//! Parameter store and the small set of differentiable layers the model is built from.
//!
//! All activations are composed from elementary tensor ops so every layer has a
//! backward pass, including in f64 for finite-difference checks.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;

/// Named, ordered collection of trainable variables.
#[derive(Clone, Default)]
pub struct ParamStore {
    vars: Arc<Mutex<BTreeMap<String, Var>>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Variables in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars.lock().unwrap().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Total number of scalar parameters, optionally restricted to a name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    fn insert(&self, name: String, var: Var) -> Result<()> {
        let mut vars = self.vars.lock().unwrap();
        if vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        vars.insert(name, var);
        Ok(())
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites every variable from `values`; names and shapes must match exactly.
    pub fn assign(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let vars = self.vars.lock().unwrap();
        for (name, var) in vars.iter() {
            let v = values
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
            if v.dims() != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter `{name}`: stored {:?}, model {:?}",
                    v.dims(),
                    var.dims()
                )));
            }
            var.set(&v.to_dtype(var.dtype())?.to_device(var.device())?)?;
        }
        if let Some(extra) = values.keys().find(|k| !vars.contains_key(*k)) {
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    pub fn save_safetensors(&self, path: &Path) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> = self.tensors().into_iter().collect();
        candle::safetensors::save(&map, path)?;
        Ok(())
    }
}

/// How a fresh parameter is filled.
#[derive(Debug, Clone, Copy)]
pub enum InitKind {
    Zeros,
    Ones,
    Constant(f64),
    Uniform(f64),
}

/// Hierarchical parameter builder: `init.pp("stage1").pp("conv")`.
///
/// Each parameter draws from its own ChaCha stream seeded by the global seed and
/// the full parameter name, so initialization does not depend on build order.
#[derive(Clone)]
pub struct Init {
    store: ParamStore,
    path: Vec<String>,
    seed: u64,
    dtype: DType,
    device: Device,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl Init {
    pub fn new(store: &ParamStore, seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            store: store.clone(),
            path: Vec::new(),
            seed,
            dtype,
            device: device.clone(),
        }
    }

    pub fn pp(&self, name: impl ToString) -> Self {
        let mut next = self.clone();
        next.path.push(name.to_string());
        next
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn tensor(&self, name: &str, shape: &[usize], kind: InitKind) -> Result<Tensor> {
        let full = if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path.join("."), name)
        };
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match kind {
            InitKind::Zeros => vec![0.0; n],
            InitKind::Ones => vec![1.0; n],
            InitKind::Constant(v) => vec![v; n],
            InitKind::Uniform(bound) => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(&full));
                (0..n).map(|_| rng.random_range(-bound..=bound)).collect()
            }
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.insert(full, var)?;
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    stride: usize,
    padding: usize,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub bias: bool,
    /// Multiplier on the `1/sqrt(fan_in)` uniform bound.
    pub gain: f64,
    pub bias_init: f64,
}

impl ConvSpec {
    pub fn k(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            padding: kernel / 2,
            groups: 1,
            bias: true,
            gain: 3f64.sqrt() * 2f64.sqrt(),
            bias_init: 0.0,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn gain(mut self, g: f64) -> Self {
        self.gain = g;
        self
    }

    pub fn bias_init(mut self, b: f64) -> Self {
        self.bias_init = b;
        self
    }
}

impl Conv2d {
    pub fn new(init: &Init, cin: usize, cout: usize, spec: ConvSpec) -> Result<Self> {
        let fan_in = (cin / spec.groups) * spec.kernel * spec.kernel;
        let bound = spec.gain / (fan_in as f64).sqrt();
        let weight = init.tensor(
            "weight",
            &[cout, cin / spec.groups, spec.kernel, spec.kernel],
            InitKind::Uniform(bound),
        )?;
        let bias = if spec.bias {
            Some(init.tensor("bias", &[cout], InitKind::Constant(spec.bias_init))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim(0).unwrap()
    }

    /// Strided convolutions whose windows do not tile the padded input exactly are
    /// computed on a right/bottom-extended input and trimmed, so the backward pass
    /// sees an exact fit.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let (k, s, p) = (self.weight.dim(2)?, self.stride, self.padding);
        let extra = |n: usize| match (n + 2 * p - k) % s {
            0 => 0,
            r => s - r,
        };
        let (eh, ew) = (extra(h), extra(w));
        let y = if eh == 0 && ew == 0 {
            x.conv2d(&self.weight, p, s, 1, self.groups)?
        } else {
            let padded = x.pad_with_zeros(2, p, p + eh)?.pad_with_zeros(3, p, p + ew)?;
            padded
                .conv2d(&self.weight, 0, s, 1, self.groups)?
                .narrow(2, 0, (h + 2 * p - k) / s + 1)?
                .narrow(3, 0, (w + 2 * p - k) / s + 1)?
        };
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, (), 1, 1))?)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(init: &Init, cin: usize, cout: usize) -> Result<Self> {
        let bound = 1.0 / (cin as f64).sqrt();
        Ok(Self {
            weight: init.tensor("weight", &[cout, cin], InitKind::Uniform(bound))?,
            bias: init.tensor("bias", &[cout], InitKind::Zeros)?,
        })
    }

    /// Applies to the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Group normalization over `(N, C, H, W)`; independent of batch size.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl GroupNorm {
    pub fn new(init: &Init, channels: usize, groups: usize) -> Result<Self> {
        let groups = largest_divisor_at_most(channels, groups);
        Ok(Self {
            groups,
            weight: init.tensor("weight", &[channels], InitKind::Ones)?,
            bias: init.tensor("bias", &[channels], InitKind::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let g = x.reshape((n, self.groups, (c / self.groups) * h * w))?;
        let mean = g.mean_keepdim(D::Minus1)?;
        let centered = g.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?.reshape((n, c, h, w))?;
        Ok(normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

fn largest_divisor_at_most(n: usize, k: usize) -> usize {
    (1..=k.min(n)).rev().find(|d| n % d == 0).unwrap_or(1)
}

/// Layer normalization over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(init: &Init, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: init.tensor("weight", &[dim], InitKind::Ones)?,
            bias: init.tensor("bias", &[dim], InitKind::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * LEAKY_SLOPE)?)?)
}

/// Logistic function via `tanh`, which stays finite (value and gradient) for any input.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

/// `log(1 + exp(x))` in the overflow-free form `relu(x) + log(1 + exp(-|x|))`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// `(out, in)` matrix of 1-D linear interpolation weights with half-pixel centers.
fn interp_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0f64; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let t = src - i0 as f64;
        m[o * inp + i0] += 1.0 - t;
        m[o * inp + i1] += t;
    }
    m
}

/// Bilinear resize of `(N, C, H, W)` to `(N, C, out_h, out_w)` as two separable matmuls.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let (dev, dt) = (x.device(), x.dtype());
    let rx = Tensor::from_vec(interp_matrix(out_w, w), (out_w, w), dev)?.to_dtype(dt)?;
    let ry = Tensor::from_vec(interp_matrix(out_h, h), (out_h, h), dev)?.to_dtype(dt)?;
    let y = x.broadcast_matmul(&rx.t()?)?;
    Ok(ry.broadcast_matmul(&y)?)
}

/// Spatial size of pyramid level `level` for an `h x w` input.
pub fn level_size(h: usize, w: usize, level: usize) -> (usize, usize) {
    let f = 1usize << level;
    (h.div_ceil(f), w.div_ceil(f))
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn check_finite(t: &Tensor) -> Result<bool> {
    let s = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    Ok(s.is_finite())
}

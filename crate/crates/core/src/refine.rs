//! Non-local spatial propagation.
//!
//! A guidance head predicts, per pixel, `K` fractional neighbor offsets, `K`
//! affinities and an anchoring confidence. Each iteration mixes every pixel with
//! its bilinearly sampled neighbors and then pulls measured pixels back toward
//! the sparse input.

use candle::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::depthio::DepthMap;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvSpec, Init};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub neighbors: usize,
    pub iterations: usize,
    pub hidden: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            neighbors: 8,
            iterations: 6,
            hidden: 16,
        }
    }
}

/// Integer base offsets `(dy, dx)`: the square rings around the pixel, innermost first.
pub fn base_offsets(k: usize) -> Vec<(i64, i64)> {
    let mut out = Vec::with_capacity(k);
    let mut r = 1i64;
    while out.len() < k {
        for dy in -r..=r {
            for dx in -r..=r {
                if dy.abs().max(dx.abs()) == r && out.len() < k {
                    out.push((dy, dx));
                }
            }
        }
        r += 1;
    }
    out
}

/// Per-pixel neighbors, affinities and confidence, with the bilinear sampling
/// taps precomputed. Sample positions are clamped to the image.
#[derive(Debug, Clone)]
pub struct PropagationPlan {
    k: usize,
    height: usize,
    width: usize,
    /// `(N, K, 2, H, W)` learned displacement added to the base offsets, `(dy, dx)`.
    pub offsets: Tensor,
    /// `(N, K, H, W)`, non-negative with `sum_k a_k <= 1`.
    pub affinities: Tensor,
    /// `(N, 1, H, W)` in `[0, 1]`.
    pub confidence: Tensor,
    /// Four bilinear taps: flat indices `(N, K*H*W)` and weights `(N, K, H, W)`.
    taps: Vec<(Tensor, Tensor)>,
}

impl PropagationPlan {
    /// Builds a plan from learned offsets `(N, K, 2, H, W)`, non-negative raw
    /// affinities `(N, K, H, W)` and confidence `(N, 1, H, W)`. Affinities are
    /// rescaled by `max(sum_k a_k, 1)`.
    pub fn new(offsets: &Tensor, raw_affinities: &Tensor, confidence: &Tensor) -> Result<Self> {
        let (n, k, h, w) = raw_affinities.dims4()?;
        if offsets.dims() != [n, k, 2, h, w] || confidence.dims() != [n, 1, h, w] {
            return Err(Error::Shape(format!(
                "plan parts offsets {:?}, affinities {:?}, confidence {:?}",
                offsets.dims(),
                raw_affinities.dims(),
                confidence.dims()
            )));
        }
        let min = raw_affinities.flatten_all()?.min(0)?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if min < 0.0 {
            return Err(Error::Range(format!("negative affinity {min}")));
        }
        let abs_sum = raw_affinities.sum_keepdim(1)?;
        let denom = ((abs_sum - 1.0)?.relu()? + 1.0)?;
        let affinities = raw_affinities.broadcast_div(&denom)?;
        let taps = bilinear_taps(offsets, k, h, w)?;
        Ok(Self {
            k,
            height: h,
            width: w,
            offsets: offsets.clone(),
            affinities,
            confidence: confidence.clone(),
            taps,
        })
    }

    pub fn neighbors(&self) -> usize {
        self.k
    }

    /// `(N, K, H, W)` neighbor values of `d` `(N, 1, H, W)`.
    pub fn sample(&self, d: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = d.dims4()?;
        if (h, w) != (self.height, self.width) {
            return Err(Error::Shape(format!(
                "plan is {}x{}, depth is {}x{}",
                self.width, self.height, w, h
            )));
        }
        let flat = d.reshape((n, h * w))?;
        let mut acc: Option<Tensor> = None;
        for (idx, weight) in &self.taps {
            let v = flat.gather(idx, 1)?.reshape((n, self.k, h, w))?.mul(weight)?;
            acc = Some(match acc {
                Some(a) => (a + v)?,
                None => v,
            });
        }
        Ok(acc.expect("four taps"))
    }
}

fn bilinear_taps(offsets: &Tensor, k: usize, h: usize, w: usize) -> Result<Vec<(Tensor, Tensor)>> {
    let (n, dev, dt) = (offsets.dim(0)?, offsets.device().clone(), offsets.dtype());
    let base = base_offsets(k);
    let mut gy = Vec::with_capacity(k * h * w);
    let mut gx = Vec::with_capacity(k * h * w);
    for (dy, dx) in &base {
        for y in 0..h {
            for x in 0..w {
                gy.push((y as i64 + dy) as f64);
                gx.push((x as i64 + dx) as f64);
            }
        }
    }
    let gy = Tensor::from_vec(gy, (1, k, h, w), &dev)?.to_dtype(dt)?;
    let gx = Tensor::from_vec(gx, (1, k, h, w), &dev)?.to_dtype(dt)?;
    let py = offsets.narrow(2, 0, 1)?.squeeze(2)?.broadcast_add(&gy)?.clamp(0.0, (h - 1) as f64)?;
    let px = offsets.narrow(2, 1, 1)?.squeeze(2)?.broadcast_add(&gx)?.clamp(0.0, (w - 1) as f64)?;
    let y0 = py.detach().floor()?;
    let x0 = px.detach().floor()?;
    let ty = (&py - &y0)?;
    let tx = (&px - &x0)?;
    let y1 = (&y0 + 1.0)?.clamp(0.0, (h - 1) as f64)?;
    let x1 = (&x0 + 1.0)?.clamp(0.0, (w - 1) as f64)?;
    let index = |yy: &Tensor, xx: &Tensor| -> Result<Tensor> {
        Ok(((yy * w as f64)? + xx)?.to_dtype(DType::U32)?.reshape((n, k * h * w))?)
    };
    let one_y = ty.affine(-1.0, 1.0)?;
    let one_x = tx.affine(-1.0, 1.0)?;
    Ok(vec![
        (index(&y0, &x0)?, (&one_y * &one_x)?),
        (index(&y0, &x1)?, (&one_y * &tx)?),
        (index(&y1, &x0)?, (&ty * &one_x)?),
        (index(&y1, &x1)?, (&ty * &tx)?),
    ])
}

/// Subtracted from the affinity logits so a fresh head starts close to identity.
const AFFINITY_SHIFT: f64 = 3.0;

/// Guidance head mapping the finest fused feature to a plan.
#[derive(Debug, Clone)]
pub struct PlanHead {
    trunk: Conv2d,
    offset: Conv2d,
    affinity: Conv2d,
    confidence: Conv2d,
    k: usize,
}

impl PlanHead {
    pub fn new(init: &Init, channels: usize, cfg: &RefineConfig) -> Result<Self> {
        if cfg.neighbors == 0 || cfg.hidden == 0 {
            return Err(Error::Config("refinement needs at least one neighbor and a positive width".into()));
        }
        let k = cfg.neighbors;
        Ok(Self {
            trunk: Conv2d::new(&init.pp("trunk"), channels, cfg.hidden, ConvSpec::k(3))?,
            offset: Conv2d::new(&init.pp("offset"), cfg.hidden, 2 * k, ConvSpec::k(3).gain(0.0))?,
            affinity: Conv2d::new(&init.pp("affinity"), cfg.hidden, k, ConvSpec::k(3).gain(1.0))?,
            confidence: Conv2d::new(&init.pp("confidence"), cfg.hidden, 1, ConvSpec::k(3).gain(1.0))?,
            k,
        })
    }

    pub fn plan(&self, feature: &Tensor) -> Result<PropagationPlan> {
        let (n, _, h, w) = feature.dims4()?;
        let x = nn::leaky_relu(&self.trunk.forward(feature)?)?;
        let offsets = self.offset.forward(&x)?.reshape((n, self.k, 2, h, w))?;
        let affinities = nn::sigmoid(&(self.affinity.forward(&x)? - AFFINITY_SHIFT)?)?;
        let confidence = nn::sigmoid(&self.confidence.forward(&x)?)?;
        PropagationPlan::new(&offsets, &affinities, &confidence)
    }
}

pub fn plan_from_features(head: &PlanHead, f0: &Tensor) -> Result<PropagationPlan> {
    head.plan(f0)
}

fn anchor(d: &Tensor, plan: &PropagationPlan, s: &Tensor) -> Result<Tensor> {
    let c = &plan.confidence;
    let pulled = ((d * c)? + (s * c.affine(-1.0, 1.0)?)?)?;
    Ok(s.gt(0.0)?.where_cond(&pulled, d)?)
}

/// `iterations` rounds of `d <- (1 - sum|a|) d + sum a_k d(p + o_k)`, each followed
/// (and the whole loop preceded) by anchoring on valid `s`: `c d + (1 - c) s`.
/// The result is clamped at 0.
pub fn propagate(d0: &Tensor, plan: &PropagationPlan, s: &Tensor, iterations: usize) -> Result<Tensor> {
    if d0.dims() != s.dims() || d0.dims()[2..] != plan.affinities.dims()[2..] {
        return Err(Error::Shape(format!(
            "propagation inputs d0 {:?}, s {:?}, plan {:?}",
            d0.dims(),
            s.dims(),
            plan.affinities.dims()
        )));
    }
    let s = s.detach();
    let keep = plan.affinities.abs()?.sum_keepdim(1)?.affine(-1.0, 1.0)?;
    let mut d = anchor(d0, plan, &s)?;
    for _ in 0..iterations {
        let mixed = plan.sample(&d)?.mul(&plan.affinities)?.sum_keepdim(1)?;
        d = ((&d * &keep)? + mixed)?;
        d = anchor(&d, plan, &s)?;
    }
    Ok(d.relu()?)
}

/// [`propagate`] on single maps.
pub fn propagate_map(d0: &DepthMap, plan: &PropagationPlan, s: &DepthMap, iterations: usize) -> Result<DepthMap> {
    let dt = plan.affinities.dtype();
    let dev = plan.affinities.device();
    let out = propagate(&d0.to_tensor(dev, dt)?, plan, &s.to_tensor(dev, dt)?, iterations)?;
    DepthMap::from_tensor(&out)
}

/// `sum_k |a_k|` per pixel, `(N, 1, H, W)`.
pub fn affinity_mass(plan: &PropagationPlan) -> Result<Tensor> {
    Ok(plan.affinities.abs()?.sum_keepdim(1)?)
}

//! Training targets and losses: pseudo ground-truth uncertainty, multi-scale
//! ground truths, the per-scale loss and the total loss.
//!
//! `|.|` terms are mean absolute errors and `||.||` terms root-mean-square errors,
//! both taken over pixels where the ground truth is valid.

use candle::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::depthio::DepthMap;
use crate::error::{Error, Result};
use crate::uffm::{pool_valid_tensor, ScaleOutput, UncertaintyMap};

/// Stabilizer inside the root of RMS terms; subtracted back so a zero error gives exactly 0.
const RMS_EPS: f64 = 1e-18;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Error tolerance of the pseudo uncertainty.
    pub b: f64,
    /// Per-scale decay; scale `n` (0 = finest) is weighted by `gamma^n`.
    pub gamma: f64,
    pub coarse_weight: f64,
    pub scales: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            b: 0.1,
            gamma: 0.8,
            coarse_weight: 0.05,
            scales: 4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.b > 0.0) {
            return Err(Error::Config(format!("tolerance b must be > 0, got {}", self.b)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }

    /// `(gamma^0, gamma^1, ...)` for `scales` levels.
    pub fn scale_weights(&self) -> Vec<f64> {
        (0..self.scales).map(|n| self.gamma.powi(n as i32)).collect()
    }
}

/// `1 - exp(-|d - g| / (b g))` for a valid reference `g`; 0 when `g` is invalid.
pub fn pseudo_uncertainty_value(d: f64, g: f64, b: f64) -> f64 {
    if g > 0.0 {
        -(-(d - g).abs() / (b * g)).exp_m1()
    } else {
        0.0
    }
}

/// Pixelwise pseudo uncertainty of prediction `d` against reference `g`.
pub fn pseudo_uncertainty_map(d: &DepthMap, g: &DepthMap, b: f64) -> Result<UncertaintyMap> {
    if d.dims() != g.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs reference {:?}", d.dims(), g.dims())));
    }
    let values = d
        .values()
        .iter()
        .zip(g.values())
        .map(|(d, g)| pseudo_uncertainty_value(*d as f64, *g as f64, b) as f32)
        .collect();
    UncertaintyMap::new(d.width(), d.height(), values)
}

/// Differentiable pseudo uncertainty on tensors. Pixels with `g <= 0` yield 0
/// and carry no gradient.
pub fn pseudo_uncertainty(d: &Tensor, g: &Tensor, b: f64) -> Result<Tensor> {
    let mask = g.gt(0.0)?;
    let safe_g = mask.where_cond(g, &g.ones_like()?)?;
    let ratio = (d - &safe_g)?.abs()?.div(&(&safe_g * b)?)?;
    let u = ratio.neg()?.exp()?.affine(-1.0, 1.0)?;
    Ok(mask.where_cond(&u, &u.zeros_like()?)?)
}

/// Validity-aware average pooling of `G` to `levels` scales `1, 1/2, 1/4, ...`.
pub fn multiscale_gt(gt: &DepthMap, levels: usize) -> Vec<DepthMap> {
    (0..levels).map(|n| gt.valid_mean_pool(1 << n)).collect()
}

/// Masked mean of `x` over `mask`; `None` if the mask is empty.
fn masked_mean(x: &Tensor, mask: &Tensor, count: f64) -> Result<Tensor> {
    let zeros = x.zeros_like()?;
    Ok((mask.where_cond(x, &zeros)?.sum_all()? / count)?)
}

fn valid_count(g: &Tensor) -> Result<(Tensor, f64)> {
    let mask = g.gt(0.0)?;
    let count = mask.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    Ok((mask, count))
}

fn rms_from_mean_square(ms: &Tensor) -> Result<Tensor> {
    Ok(((ms + RMS_EPS)?.sqrt()? - RMS_EPS.sqrt())?)
}

/// Root-mean-square error over valid `g` pixels (zero tensor if none).
pub fn masked_rmse(d: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (mask, count) = valid_count(g)?;
    if count == 0.0 {
        return Ok(Tensor::zeros((), d.dtype(), d.device())?);
    }
    rms_from_mean_square(&masked_mean(&(d - g)?.sqr()?, &mask, count)?)
}

/// Mean absolute error over valid `g` pixels (zero tensor if none).
pub fn masked_mae(d: &Tensor, g: &Tensor) -> Result<Tensor> {
    let (mask, count) = valid_count(g)?;
    if count == 0.0 {
        return Ok(Tensor::zeros((), d.dtype(), d.device())?);
    }
    masked_mean(&(d - g)?.abs()?, &mask, count)
}

#[derive(Debug, Clone)]
pub struct ScaleLoss {
    pub value: Tensor,
    /// False when `g` had no valid pixel; `value` is then 0.
    pub supervised: bool,
}

/// `0.5 * |u - u_hat| + ||d - g||` with `u_hat = pseudo_uncertainty(d, g, b)`.
pub fn scale_loss(d: &Tensor, u: &Tensor, g: &Tensor, b: f64) -> Result<ScaleLoss> {
    if d.dims() != g.dims() || u.dims() != g.dims() {
        return Err(Error::Shape(format!(
            "scale loss inputs d {:?}, u {:?}, g {:?}",
            d.dims(),
            u.dims(),
            g.dims()
        )));
    }
    let (mask, count) = valid_count(g)?;
    if count == 0.0 {
        return Ok(ScaleLoss {
            value: Tensor::zeros((), d.dtype(), d.device())?,
            supervised: false,
        });
    }
    let u_hat = pseudo_uncertainty(d, g, b)?;
    let unc = masked_mean(&(u - u_hat)?.abs()?, &mask, count)?;
    let depth = rms_from_mean_square(&masked_mean(&(d - g)?.sqr()?, &mask, count)?)?;
    Ok(ScaleLoss {
        value: ((unc * 0.5)? + depth)?,
        supervised: true,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaleTerms {
    /// 0 = finest.
    pub level: usize,
    pub weight: f64,
    pub global: f64,
    pub local: f64,
    pub fused: f64,
    pub rec: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub scales: Vec<ScaleTerms>,
    pub coarse: f64,
    pub final_l1: f64,
    pub final_l2: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombines the parts: `sum w_n L_rec^n + c ||D' - G|| + |D - G| + ||D - G||`.
    pub fn recombine(&self, coarse_weight: f64) -> f64 {
        self.scales.iter().map(|s| s.weight * s.rec).sum::<f64>() + coarse_weight * self.coarse + self.final_l1 + self.final_l2
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Total training loss. `scales` are ordered coarse to fine, so the last entry is
/// level 0; `gt` is the full-resolution ground truth `(N, 1, H, W)`.
pub fn total_loss(
    scales: &[ScaleOutput],
    coarse: &Tensor,
    refined: &Tensor,
    gt: &Tensor,
    cfg: &LossConfig,
) -> Result<(Tensor, LossBreakdown)> {
    cfg.validate()?;
    if scales.len() != cfg.scales {
        return Err(Error::Config(format!("{} scale outputs for {} configured scales", scales.len(), cfg.scales)));
    }
    let weights = cfg.scale_weights();
    let mut total = Tensor::zeros((), refined.dtype(), refined.device())?;
    let mut breakdown = LossBreakdown::default();
    for (idx, out) in scales.iter().enumerate() {
        let level = scales.len() - 1 - idx;
        let g = pool_valid_tensor(gt, 1 << level)?;
        let lg = scale_loss(&out.global_depth, &out.global_uncertainty_pred, &g, cfg.b)?.value;
        let ll = scale_loss(&out.local_depth, &out.local_uncertainty_pred, &g, cfg.b)?.value;
        let lf = scale_loss(&out.depth, &out.uncertainty, &g, cfg.b)?.value;
        let rec = ((((&lg + &ll)? * 0.5)?) + &lf)?;
        total = (total + (&rec * weights[level])?)?;
        breakdown.scales.push(ScaleTerms {
            level,
            weight: weights[level],
            global: scalar(&lg)?,
            local: scalar(&ll)?,
            fused: scalar(&lf)?,
            rec: scalar(&rec)?,
        });
    }
    breakdown.scales.sort_by_key(|s| s.level);
    let coarse_term = masked_rmse(coarse, gt)?;
    let l1 = masked_mae(refined, gt)?;
    let l2 = masked_rmse(refined, gt)?;
    total = (total + (&coarse_term * cfg.coarse_weight)? + &l1 + &l2)?;
    breakdown.coarse = scalar(&coarse_term)?;
    breakdown.final_l1 = scalar(&l1)?;
    breakdown.final_l2 = scalar(&l2)?;
    breakdown.total = scalar(&total)?;
    Ok((total, breakdown))
}

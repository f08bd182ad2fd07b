//! Uncertainty-guided feature fusion.
//!
//! At each scale from 1/8 to 1, both branch features get a depth/uncertainty head
//! conditioned on the upsampled result of the previous scale. Branch uncertainties
//! are overwritten with the pseudo uncertainty wherever the pooled sparse input is
//! valid, then the features are fused with `(1 - u)` weights and a third head
//! predicts the scale's depth and uncertainty.

use candle::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::depthio::DepthMap;
use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvSpec, Init};
use crate::objective::pseudo_uncertainty;
use crate::sffm::{depth_with_mask, GatedFusion};
use crate::twobranch::{FeaturePyramid, PYRAMID_LEVELS};

/// Per-pixel uncertainty in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl UncertaintyMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} uncertainty map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Range(format!("uncertainty {v} outside [0, 1]")));
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// Reads a single `(1, 1, H, W)` plane.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if (n, c) != (1, 1) {
            return Err(Error::Shape(format!("expected a single plane, got {:?}", t.dims())));
        }
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(w, h, values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// 8-bit grayscale rendering of `1 - u`.
    pub fn confidence_image(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let c = 1.0 - self.get(x as usize, y as usize);
            image::Luma([(c * 255.0).round() as u8])
        })
    }
}

/// Validity-aware downsampling of a sparse map; `factor` must be 1, 2, 4 or 8.
pub fn sparsity_aware_pool(s: &DepthMap, factor: usize) -> Result<DepthMap> {
    if ![1, 2, 4, 8].contains(&factor) {
        return Err(Error::Config(format!("pooling factor must be 1, 2, 4 or 8, got {factor}")));
    }
    Ok(s.valid_mean_pool(factor))
}

/// Tensor counterpart of [`DepthMap::valid_mean_pool`] for `(N, 1, H, W)` inputs.
/// The result is detached.
pub fn pool_valid_tensor(t: &Tensor, factor: usize) -> Result<Tensor> {
    let t = t.detach();
    if factor == 1 {
        return Ok(t);
    }
    let (_, _, h, w) = t.dims4()?;
    let ph = h.div_ceil(factor) * factor - h;
    let pw = w.div_ceil(factor) * factor - w;
    let padded = t.pad_with_zeros(2, 0, ph)?.pad_with_zeros(3, 0, pw)?;
    let mask = padded.gt(0.0)?.to_dtype(t.dtype())?;
    let valid = (&padded * &mask)?;
    let sum = valid.avg_pool2d(factor)?;
    let count = mask.avg_pool2d(factor)?;
    let has = count.gt(0.0)?;
    let safe = has.where_cond(&count, &count.ones_like()?)?;
    Ok(has.where_cond(&sum.div(&safe)?, &sum.zeros_like()?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    Uncertainty,
    Plain,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncertainty" => Ok(Self::Uncertainty),
            "plain" => Ok(Self::Plain),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UffmConfig {
    /// Hidden width of every depth/uncertainty head.
    pub head_width: usize,
    /// Tolerance of the uncertainty replacement.
    pub b: f64,
    pub mode: FusionMode,
    /// Depth in meters every head outputs for a zero feature.
    #[serde(default = "crate::sffm::default_depth_prior")]
    pub depth_prior: f64,
}

impl Default for UffmConfig {
    fn default() -> Self {
        Self {
            head_width: 16,
            b: 0.1,
            mode: FusionMode::Uncertainty,
            depth_prior: crate::sffm::default_depth_prior(),
        }
    }
}

/// Depth/uncertainty head: conv3x3 + LeakyReLU trunk, then a depth conv and a
/// sigmoid uncertainty conv. The input is the feature concatenated with a
/// 2-channel prior `(d, u)` and the pooled sparse depth with its mask. The depth conv predicts a correction in softplus
/// space on top of the prior depth, or on top of `depth_prior` without one.
#[derive(Debug, Clone)]
pub struct UdmHead {
    pub trunk: Conv2d,
    pub depth: Conv2d,
    pub uncertainty: Conv2d,
    base_logit: f64,
}

/// Smallest prior depth mapped back through the inverse softplus.
const MIN_PRIOR_DEPTH: f64 = 1e-3;

fn inverse_softplus_tensor(y: &Tensor) -> Result<Tensor> {
    let y = y.maximum(MIN_PRIOR_DEPTH)?;
    Ok((&y + y.neg()?.exp()?.affine(-1.0, 1.0)?.log()?)?)
}

impl UdmHead {
    pub fn new(init: &Init, channels: usize, hidden: usize, depth_prior: f64) -> Result<Self> {
        Ok(Self {
            trunk: Conv2d::new(&init.pp("trunk"), channels + 4, hidden, ConvSpec::k(3))?,
            depth: Conv2d::new(&init.pp("depth"), hidden, 1, ConvSpec::k(3).gain(1.0))?,
            uncertainty: Conv2d::new(&init.pp("unc"), hidden, 1, ConvSpec::k(3).gain(1.0))?,
            base_logit: nn::inverse_softplus(depth_prior),
        })
    }

    /// Returns `(d, u)`, each `(N, 1, H, W)`. A missing prior is fed as zeros;
    /// `sparse` is the `(N, 1, H, W)` pooled sparse depth of this scale.
    pub fn forward(&self, f: &Tensor, prior: Option<(&Tensor, &Tensor)>, sparse: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, _, h, w) = f.dims4()?;
        let (input, base) = match prior {
            Some((d, u)) => (Tensor::cat(&[d, u], 1)?, Some(inverse_softplus_tensor(d)?)),
            None => (Tensor::zeros((n, 2, h, w), f.dtype(), f.device())?, None),
        };
        let x = Tensor::cat(&[f, &input, &depth_with_mask(sparse)?], 1)?;
        let x = nn::leaky_relu(&self.trunk.forward(&x)?)?;
        let logit = self.depth.forward(&x)?;
        let logit = match base {
            Some(b) => (logit + b)?,
            None => (logit + self.base_logit)?,
        };
        Ok((nn::softplus(&logit)?, nn::sigmoid(&self.uncertainty.forward(&x)?)?))
    }
}

/// Uncertainty with the pseudo uncertainty of `d` against `s_pooled` substituted
/// wherever `s_pooled` is valid.
pub fn replace_uncertainty(u: &Tensor, d: &Tensor, s_pooled: &Tensor, b: f64) -> Result<Tensor> {
    if u.dims() != d.dims() || u.dims() != s_pooled.dims() {
        return Err(Error::Shape(format!(
            "replacement inputs u {:?}, d {:?}, s {:?}",
            u.dims(),
            d.dims(),
            s_pooled.dims()
        )));
    }
    let exact = pseudo_uncertainty(d, s_pooled, b)?;
    Ok(s_pooled.gt(0.0)?.where_cond(&exact, u)?)
}

/// `Gate((1 - u_l) f_l ++ (1 - u_g) f_g)`, or `Gate(f_l ++ f_g)` in plain mode.
pub fn fuse(
    gate: &GatedFusion,
    f_l: &Tensor,
    f_g: &Tensor,
    u_l: &Tensor,
    u_g: &Tensor,
    mode: FusionMode,
) -> Result<Tensor> {
    let (nl, _, hl, wl) = f_l.dims4()?;
    let (ng, _, hg, wg) = f_g.dims4()?;
    let spatial = [u_l.dims4()?, u_g.dims4()?];
    if (nl, hl, wl) != (ng, hg, wg) || spatial.iter().any(|&(n, c, h, w)| (n, c, h, w) != (nl, 1, hl, wl)) {
        return Err(Error::Shape(format!(
            "fusion inputs f_l {:?}, f_g {:?}, u_l {:?}, u_g {:?}",
            f_l.dims(),
            f_g.dims(),
            u_l.dims(),
            u_g.dims()
        )));
    }
    let x = match mode {
        FusionMode::Uncertainty => {
            let wl = u_l.affine(-1.0, 1.0)?;
            let wg = u_g.affine(-1.0, 1.0)?;
            Tensor::cat(&[&f_l.broadcast_mul(&wl)?, &f_g.broadcast_mul(&wg)?], 1)?
        }
        FusionMode::Plain => Tensor::cat(&[f_l, f_g], 1)?,
    };
    gate.forward_concat(&x)
}

#[derive(Debug, Clone)]
pub struct UffmBlock {
    pub local_head: UdmHead,
    pub global_head: UdmHead,
    pub gate: GatedFusion,
    pub fused_head: UdmHead,
}

impl UffmBlock {
    pub fn new(init: &Init, channels: usize, cfg: &UffmConfig) -> Result<Self> {
        let (hidden, prior) = (cfg.head_width, cfg.depth_prior);
        Ok(Self {
            local_head: UdmHead::new(&init.pp("local"), channels, hidden, prior)?,
            global_head: UdmHead::new(&init.pp("global"), channels, hidden, prior)?,
            gate: GatedFusion::new(&init.pp("gate"), 2 * channels, channels)?,
            fused_head: UdmHead::new(&init.pp("fused"), channels, hidden, prior)?,
        })
    }
}

/// Everything one scale produces; all tensors share the scale's spatial size.
#[derive(Debug, Clone)]
pub struct ScaleOutput {
    /// 0 = full resolution.
    pub level: usize,
    pub depth: Tensor,
    pub uncertainty: Tensor,
    pub feature: Tensor,
    pub local_depth: Tensor,
    /// After replacement at pooled-valid pixels.
    pub local_uncertainty: Tensor,
    /// Raw head output.
    pub local_uncertainty_pred: Tensor,
    pub global_depth: Tensor,
    pub global_uncertainty: Tensor,
    pub global_uncertainty_pred: Tensor,
    pub pooled_sparse: Tensor,
}

impl ScaleOutput {
    /// Depth map of batch item `i`.
    pub fn depth_map(&self, i: usize) -> Result<DepthMap> {
        DepthMap::from_tensor(&self.depth.narrow(0, i, 1)?)
    }

    pub fn uncertainty_map(&self, i: usize) -> Result<UncertaintyMap> {
        UncertaintyMap::from_tensor(&self.uncertainty.narrow(0, i, 1)?)
    }

    /// Replaced local uncertainty of batch item `i`.
    pub fn local_uncertainty_map(&self, i: usize) -> Result<UncertaintyMap> {
        UncertaintyMap::from_tensor(&self.local_uncertainty.narrow(0, i, 1)?)
    }

    pub fn global_uncertainty_map(&self, i: usize) -> Result<UncertaintyMap> {
        UncertaintyMap::from_tensor(&self.global_uncertainty.narrow(0, i, 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct Uffm {
    /// Indexed by level, 0 = finest.
    blocks: Vec<UffmBlock>,
    cfg: UffmConfig,
}

impl Uffm {
    /// `widths[i]` is the channel count of pyramid level `i`.
    pub fn new(init: &Init, widths: &[usize], cfg: UffmConfig) -> Result<Self> {
        if widths.len() != PYRAMID_LEVELS {
            return Err(Error::Config(format!("UFFM needs {PYRAMID_LEVELS} pyramid widths, got {}", widths.len())));
        }
        if !(cfg.b > 0.0) || cfg.head_width == 0 || !(cfg.depth_prior > 0.0) {
            return Err(Error::Config("UFFM needs b > 0, a positive head width and a positive depth prior".into()));
        }
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| UffmBlock::new(&init.pp(format!("scale{i}")), c, &cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, cfg })
    }

    pub fn config(&self) -> &UffmConfig {
        &self.cfg
    }

    pub fn blocks(&self) -> &[UffmBlock] {
        &self.blocks
    }

    pub fn forward(&self, local: &FeaturePyramid, global: &FeaturePyramid, sparse: &Tensor) -> Result<Vec<ScaleOutput>> {
        self.forward_with(local, global, sparse, true)
    }

    /// Coarse-to-fine pass; with `feed_prior = false` every head gets a zero prior.
    pub fn forward_with(
        &self,
        local: &FeaturePyramid,
        global: &FeaturePyramid,
        sparse: &Tensor,
        feed_prior: bool,
    ) -> Result<Vec<ScaleOutput>> {
        if local.levels.len() != self.blocks.len() || global.levels.len() != self.blocks.len() {
            return Err(Error::Shape(format!(
                "expected {} pyramid levels, got {} local and {} global",
                self.blocks.len(),
                local.levels.len(),
                global.levels.len()
            )));
        }
        let mut outputs = Vec::with_capacity(self.blocks.len());
        let mut prev: Option<(Tensor, Tensor)> = None;
        for level in (0..self.blocks.len()).rev() {
            let block = &self.blocks[level];
            let f_l = &local.levels[level];
            let f_g = &global.levels[level];
            if f_l.dims() != f_g.dims() {
                return Err(Error::Shape(format!(
                    "level {level}: local {:?} and global {:?} features differ",
                    f_l.dims(),
                    f_g.dims()
                )));
            }
            let (_, _, h, w) = f_l.dims4()?;
            let s = pool_valid_tensor(sparse, 1 << level)?;
            if s.dims4()?.2 != h || s.dims4()?.3 != w {
                return Err(Error::Shape(format!(
                    "level {level}: pooled sparse {:?} does not match features {:?}",
                    s.dims(),
                    f_l.dims()
                )));
            }
            let prior = match (&prev, feed_prior) {
                (Some((d, u)), true) => Some((nn::resize_bilinear(d, h, w)?, nn::resize_bilinear(u, h, w)?)),
                _ => None,
            };
            let prior_ref = prior.as_ref().map(|(d, u)| (d, u));
            let (d_l, u_l_pred) = block.local_head.forward(f_l, prior_ref, &s)?;
            let (d_g, u_g_pred) = block.global_head.forward(f_g, prior_ref, &s)?;
            let u_l = replace_uncertainty(&u_l_pred, &d_l, &s, self.cfg.b)?;
            let u_g = replace_uncertainty(&u_g_pred, &d_g, &s, self.cfg.b)?;
            let feature = fuse(&block.gate, f_l, f_g, &u_l, &u_g, self.cfg.mode)?;
            let (depth, uncertainty) = block.fused_head.forward(&feature, prior_ref, &s)?;
            prev = Some((depth.clone(), uncertainty.clone()));
            outputs.push(ScaleOutput {
                level,
                depth,
                uncertainty,
                feature,
                local_depth: d_l,
                local_uncertainty: u_l,
                local_uncertainty_pred: u_l_pred,
                global_depth: d_g,
                global_uncertainty: u_g,
                global_uncertainty_pred: u_g_pred,
                pooled_sparse: s,
            });
        }
        Ok(outputs)
    }
}

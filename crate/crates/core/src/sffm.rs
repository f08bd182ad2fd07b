//! Sparse feature filling: image and depth conv stacks, gated filling of the
//! depth features from the image features, and the coarse depth head.
//!
//! Feature fields are `(N, C, H, W)` tensors throughout.

use candle::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvSpec, GroupNorm, Init, Linear};

const NORM_GROUPS: usize = 4;

/// Gated convolution followed by squeeze-excitation channel attention.
///
/// `y = lrelu(conv_f(a ++ b)) * sigmoid(conv_g(a ++ b))`, then every channel of
/// `y` is rescaled by `sigmoid(W2 relu(W1 mean_hw(y)))`.
#[derive(Debug, Clone)]
pub struct GatedFusion {
    pub feature: Conv2d,
    pub gate: Conv2d,
    pub squeeze: Linear,
    pub excite: Linear,
}

impl GatedFusion {
    pub fn new(init: &Init, cin: usize, cout: usize) -> Result<Self> {
        let hidden = (cout / 4).max(4);
        Ok(Self {
            feature: Conv2d::new(&init.pp("feature"), cin, cout, ConvSpec::k(3))?,
            gate: Conv2d::new(&init.pp("gate"), cin, cout, ConvSpec::k(3).gain(3f64.sqrt()))?,
            squeeze: Linear::new(&init.pp("squeeze"), cout, hidden)?,
            excite: Linear::new(&init.pp("excite"), hidden, cout)?,
        })
    }

    pub fn forward(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (na, _, ha, wa) = a.dims4()?;
        let (nb, _, hb, wb) = b.dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "gated fusion inputs {:?} and {:?} differ spatially",
                a.dims(),
                b.dims()
            )));
        }
        self.forward_concat(&Tensor::cat(&[a, b], 1)?)
    }

    /// Gate activations `sigmoid(conv_g(x))` for a pre-concatenated input.
    pub fn gate_values(&self, x: &Tensor) -> Result<Tensor> {
        nn::sigmoid(&self.gate.forward(x)?)
    }

    pub fn forward_concat(&self, x: &Tensor) -> Result<Tensor> {
        let y = nn::leaky_relu(&self.feature.forward(x)?)?.mul(&self.gate_values(x)?)?;
        let pooled = y.mean(D::Minus1)?.mean(D::Minus1)?;
        let scale = nn::sigmoid(&self.excite.forward(&self.squeeze.forward(&pooled)?.relu()?)?)?;
        Ok(y.broadcast_mul(&scale.unsqueeze(2)?.unsqueeze(3)?)?)
    }
}

/// conv3x3 -> group norm -> LeakyReLU.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    conv: Conv2d,
    norm: GroupNorm,
}

impl ConvNormAct {
    pub fn new(init: &Init, cin: usize, cout: usize, spec: ConvSpec) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&init.pp("conv"), cin, cout, spec.no_bias())?,
            norm: GroupNorm::new(&init.pp("norm"), cout, NORM_GROUPS)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        nn::leaky_relu(&self.norm.forward(&self.conv.forward(x)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SffmConfig {
    pub channels: usize,
    /// Depth in meters the coarse head outputs for a zero feature.
    #[serde(default = "default_depth_prior")]
    pub depth_prior: f64,
}

pub(crate) fn default_depth_prior() -> f64 {
    2.5
}

impl Default for SffmConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            depth_prior: default_depth_prior(),
        }
    }
}

pub struct SffmOutput {
    /// Stable initial feature `F`.
    pub feature: Tensor,
    /// Coarse depth `D'`, non-negative.
    pub coarse: Tensor,
    pub rgb_feature: Tensor,
    pub depth_feature: Tensor,
    /// Depth features after gated filling from the image features.
    pub filled: Tensor,
}

#[derive(Debug, Clone)]
pub struct Sffm {
    rgb: [ConvNormAct; 2],
    depth: [ConvNormAct; 2],
    fill: GatedFusion,
    merge: GatedFusion,
    coarse_hidden: Conv2d,
    coarse_out: Conv2d,
    channels: usize,
}

/// Stacks a sparse depth tensor with its validity mask: `(N, 1, H, W) -> (N, 2, H, W)`.
pub fn depth_with_mask(sparse: &Tensor) -> Result<Tensor> {
    let mask = sparse.gt(0.0)?.to_dtype(sparse.dtype())?;
    Ok(Tensor::cat(&[sparse, &mask], 1)?)
}

impl Sffm {
    pub fn new(init: &Init, cfg: SffmConfig) -> Result<Self> {
        let c = cfg.channels;
        if c == 0 || !(cfg.depth_prior > 0.0) {
            return Err(Error::Config("SFFM needs a positive channel count and depth prior".into()));
        }
        Ok(Self {
            rgb: [
                ConvNormAct::new(&init.pp("rgb0"), 3, c, ConvSpec::k(3))?,
                ConvNormAct::new(&init.pp("rgb1"), c, c, ConvSpec::k(3))?,
            ],
            depth: [
                ConvNormAct::new(&init.pp("dep0"), 2, c, ConvSpec::k(3))?,
                ConvNormAct::new(&init.pp("dep1"), c, c, ConvSpec::k(3))?,
            ],
            fill: GatedFusion::new(&init.pp("fill"), 2 * c, c)?,
            merge: GatedFusion::new(&init.pp("merge"), 2 * c, c)?,
            coarse_hidden: Conv2d::new(&init.pp("coarse0"), c, c, ConvSpec::k(3))?,
            coarse_out: Conv2d::new(&init.pp("coarse1"), c, 1, ConvSpec::k(1).gain(1.0).bias_init(nn::inverse_softplus(cfg.depth_prior)))?,
            channels: c,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `image`: `(N, 3, H, W)` in `[0, 1]`; `sparse`: `(N, 1, H, W)` meters, 0 = invalid.
    pub fn forward(&self, image: &Tensor, sparse: &Tensor) -> Result<SffmOutput> {
        let (ni, ci, hi, wi) = image.dims4()?;
        let (ns, cs, hs, ws) = sparse.dims4()?;
        if ci != 3 || cs != 1 || (ni, hi, wi) != (ns, hs, ws) {
            return Err(Error::Shape(format!(
                "SFFM expects (N,3,H,W) image and (N,1,H,W) depth, got {:?} and {:?}",
                image.dims(),
                sparse.dims()
            )));
        }
        let rgb_feature = self.rgb[1].forward(&self.rgb[0].forward(image)?)?;
        let depth_feature = self.depth[1].forward(&self.depth[0].forward(&depth_with_mask(sparse)?)?)?;
        let filled = self.fill.forward(&depth_feature, &rgb_feature)?;
        let feature = self.merge.forward(&filled, &rgb_feature)?;
        let coarse = nn::softplus(&self.coarse_out.forward(&nn::leaky_relu(&self.coarse_hidden.forward(&feature)?)?)?)?;
        Ok(SffmOutput {
            feature,
            coarse,
            rgb_feature,
            depth_feature,
            filled,
        })
    }

    pub fn dtype(&self) -> DType {
        self.coarse_out.weight.dtype()
    }
}

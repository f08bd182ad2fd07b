//! Two-branch multi-scale feature extraction.
//!
//! The local branch is a residual conv encoder over five stages (1 .. 1/16); the
//! global branch embeds 4x4 patches with a kernel-7 conv and runs four
//! spatial-reduction attention stages (1/4 .. 1/32). Both branches decode with
//! concat + 1x1 skip fusion into aligned pyramids at scales {1, 1/2, 1/4, 1/8}.

use candle::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvSpec, GroupNorm, Init, LayerNorm, Linear};
use crate::sffm::ConvNormAct;

pub const PYRAMID_LEVELS: usize = 4;

/// Feature fields at scales 1, 1/2, 1/4, 1/8 (level `i` has size `ceil(input / 2^i)`).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    /// `(channels, height, width)` per level.
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.levels
            .iter()
            .map(|t| {
                let (_, c, h, w) = t.dims4().expect("pyramid levels are 4-d");
                (c, h, w)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BranchConfig {
    /// Channel widths of the four pyramid levels shared by both branches.
    pub pyramid_widths: Vec<usize>,
    /// Local encoder stage widths at scales 1 .. 1/16.
    pub local_widths: Vec<usize>,
    pub local_blocks: usize,
    /// Global stage widths at scales 1/4 .. 1/32.
    pub global_widths: Vec<usize>,
    pub global_heads: Vec<usize>,
    pub global_sr_ratios: Vec<usize>,
    pub global_depths: Vec<usize>,
    pub mlp_ratio: usize,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self {
            pyramid_widths: vec![16, 24, 32, 48],
            local_widths: vec![16, 24, 32, 48, 64],
            local_blocks: 1,
            global_widths: vec![16, 24, 32, 32],
            global_heads: vec![1, 1, 2, 2],
            global_sr_ratios: vec![8, 4, 2, 1],
            global_depths: vec![1, 1, 1, 1],
            mlp_ratio: 2,
        }
    }
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.pyramid_widths.len() != PYRAMID_LEVELS {
            return bad(format!("pyramid_widths needs {PYRAMID_LEVELS} entries"));
        }
        if self.local_widths.len() != 5 {
            return bad("local_widths needs 5 entries (scales 1 .. 1/16)".into());
        }
        for (name, v) in [
            ("global_widths", &self.global_widths),
            ("global_heads", &self.global_heads),
            ("global_sr_ratios", &self.global_sr_ratios),
            ("global_depths", &self.global_depths),
        ] {
            if v.len() != 4 {
                return bad(format!("{name} needs 4 entries (scales 1/4 .. 1/32)"));
            }
        }
        let all = self
            .pyramid_widths
            .iter()
            .chain(&self.local_widths)
            .chain(&self.global_widths)
            .chain(&self.global_heads)
            .chain(&self.global_sr_ratios);
        if all.into_iter().any(|v| *v == 0) || self.mlp_ratio == 0 || self.local_blocks == 0 {
            return bad("widths, heads, ratios and block counts must be > 0".into());
        }
        for (w, h) in self.global_widths.iter().zip(&self.global_heads) {
            if w % h != 0 {
                return bad(format!("global width {w} is not divisible by {h} heads"));
            }
        }
        Ok(())
    }
}

/// Residual basic block with group norm.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
    shortcut: Option<(Conv2d, GroupNorm)>,
}

impl ResBlock {
    fn new(init: &Init, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let shortcut = if stride != 1 || cin != cout {
            Some((
                Conv2d::new(&init.pp("down"), cin, cout, ConvSpec::k(1).stride(stride).no_bias())?,
                GroupNorm::new(&init.pp("down_norm"), cout, 4)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(&init.pp("conv1"), cin, cout, ConvSpec::k(3).stride(stride).no_bias())?,
            norm1: GroupNorm::new(&init.pp("norm1"), cout, 4)?,
            conv2: Conv2d::new(&init.pp("conv2"), cout, cout, ConvSpec::k(3).no_bias())?,
            norm2: GroupNorm::new(&init.pp("norm2"), cout, 4)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = nn::leaky_relu(&self.norm1.forward(&self.conv1.forward(x)?)?)?;
        let y = self.norm2.forward(&self.conv2.forward(&y)?)?;
        let skip = match &self.shortcut {
            Some((conv, norm)) => norm.forward(&conv.forward(x)?)?,
            None => x.clone(),
        };
        nn::leaky_relu(&(y + skip)?)
    }
}

/// Upsample `x` to the skip's size, concatenate, fuse with 1x1 then refine with 3x3.
#[derive(Debug, Clone)]
struct DecoderBlock {
    fuse: ConvNormAct,
    refine: ConvNormAct,
}

impl DecoderBlock {
    fn new(init: &Init, cin: usize, cskip: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            fuse: ConvNormAct::new(&init.pp("fuse"), cin + cskip, cout, ConvSpec::k(1))?,
            refine: ConvNormAct::new(&init.pp("refine"), cout, cout, ConvSpec::k(3))?,
        })
    }

    fn forward(&self, x: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = skip.dims4()?;
        let up = nn::resize_bilinear(x, h, w)?;
        self.refine.forward(&self.fuse.forward(&Tensor::cat(&[&up, skip], 1)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LocalBranch {
    stages: Vec<Vec<ResBlock>>,
    decoders: Vec<DecoderBlock>,
}

impl LocalBranch {
    pub fn new(init: &Init, in_channels: usize, cfg: &BranchConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut cin = in_channels;
        for (i, &w) in cfg.local_widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let mut blocks = Vec::new();
            for b in 0..cfg.local_blocks {
                let init = init.pp(format!("stage{i}")).pp(format!("block{b}"));
                blocks.push(ResBlock::new(&init, cin, w, if b == 0 { stride } else { 1 })?);
                cin = w;
            }
            stages.push(blocks);
        }
        // decoders[i] produces pyramid level i from the level below and encoder stage i.
        let mut decoders = Vec::new();
        for i in 0..PYRAMID_LEVELS {
            let below = if i == PYRAMID_LEVELS - 1 {
                cfg.local_widths[4]
            } else {
                cfg.pyramid_widths[i + 1]
            };
            decoders.push(DecoderBlock::new(
                &init.pp(format!("dec{i}")),
                below,
                cfg.local_widths[i],
                cfg.pyramid_widths[i],
            )?);
        }
        Ok(Self { stages, decoders })
    }

    pub fn forward(&self, feature: &Tensor) -> Result<FeaturePyramid> {
        let mut skips = Vec::with_capacity(self.stages.len());
        let mut x = feature.clone();
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x)?;
            }
            skips.push(x.clone());
        }
        let mut levels = vec![None; PYRAMID_LEVELS];
        let mut y = skips[4].clone();
        for i in (0..PYRAMID_LEVELS).rev() {
            y = self.decoders[i].forward(&y, &skips[i])?;
            levels[i] = Some(y.clone());
        }
        Ok(FeaturePyramid {
            levels: levels.into_iter().map(|l| l.expect("every level decoded")).collect(),
        })
    }
}

fn tokens_to_map(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, _, c) = x.dims3()?;
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((n, c, h, w))?)
}

fn map_to_tokens(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?)
}

/// Multi-head attention whose keys and values come from a spatially reduced map.
#[derive(Debug, Clone)]
pub struct SrAttention {
    heads: usize,
    query: Linear,
    key_value: Linear,
    proj: Linear,
    reduce: Option<(Conv2d, LayerNorm, usize)>,
}

impl SrAttention {
    fn new(init: &Init, dim: usize, heads: usize, sr: usize) -> Result<Self> {
        let reduce = if sr > 1 {
            Some((
                Conv2d::new(&init.pp("sr"), dim, dim, ConvSpec::k(sr).stride(sr).gain(3f64.sqrt()))?,
                LayerNorm::new(&init.pp("sr_norm"), dim)?,
                sr,
            ))
        } else {
            None
        };
        Ok(Self {
            heads,
            query: Linear::new(&init.pp("q"), dim, dim)?,
            key_value: Linear::new(&init.pp("kv"), dim, 2 * dim)?,
            proj: Linear::new(&init.pp("proj"), dim, dim)?,
            reduce,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (n, l, c) = x.dims3()?;
        Ok(x.reshape((n, l, self.heads, c / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    /// Softmax attention weights `(N, heads, H*W, M)`.
    pub fn weights(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        Ok(self.weights_and_values(x, h, w)?.0)
    }

    fn weights_and_values(&self, x: &Tensor, h: usize, w: usize) -> Result<(Tensor, Tensor)> {
        let (_, _, c) = x.dims3()?;
        let source = match &self.reduce {
            Some((conv, norm, sr)) => {
                let map = tokens_to_map(x, h, w)?;
                let map = map.pad_with_zeros(2, 0, h.next_multiple_of(*sr) - h)?;
                let map = map.pad_with_zeros(3, 0, w.next_multiple_of(*sr) - w)?;
                norm.forward(&map_to_tokens(&conv.forward(&map)?)?)?
            }
            None => x.clone(),
        };
        let q = self.split_heads(&self.query.forward(x)?)?;
        let kv = self.key_value.forward(&source)?;
        let k = self.split_heads(&kv.narrow(2, 0, c)?)?;
        let v = self.split_heads(&kv.narrow(2, c, c)?)?;
        let scale = 1.0 / ((c / self.heads) as f64).sqrt();
        let attn = nn::softmax_last(&(q.matmul(&k.t()?.contiguous()?)? * scale)?)?;
        Ok((attn, v))
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let (n, l, c) = x.dims3()?;
        let (attn, v) = self.weights_and_values(x, h, w)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((n, l, c))?;
        self.proj.forward(&out)
    }
}

/// Feed-forward with a depthwise 3x3 conv between the two projections (positional cue).
#[derive(Debug, Clone)]
struct MixFfn {
    fc1: Linear,
    dw: Conv2d,
    fc2: Linear,
}

impl MixFfn {
    fn new(init: &Init, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&init.pp("fc1"), dim, hidden)?,
            dw: Conv2d::new(&init.pp("dw"), hidden, hidden, ConvSpec::k(3).groups(hidden))?,
            fc2: Linear::new(&init.pp("fc2"), hidden, dim)?,
        })
    }

    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let y = self.fc1.forward(x)?;
        let y = map_to_tokens(&self.dw.forward(&tokens_to_map(&y, h, w)?)?)?.gelu_erf()?;
        self.fc2.forward(&y)
    }
}

#[derive(Debug, Clone)]
struct TransformerBlock {
    norm1: LayerNorm,
    attn: SrAttention,
    norm2: LayerNorm,
    ffn: MixFfn,
}

impl TransformerBlock {
    fn forward(&self, x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, h, w)?)?;
        Ok((&x + self.ffn.forward(&self.norm2.forward(&x)?, h, w)?)?)
    }
}

#[derive(Debug, Clone)]
struct GlobalStage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl GlobalStage {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let map = self.embed.forward(x)?;
        let (_, _, h, w) = map.dims4()?;
        let mut t = self.embed_norm.forward(&map_to_tokens(&map)?)?;
        for b in &self.blocks {
            t = b.forward(&t, h, w)?;
        }
        tokens_to_map(&self.norm.forward(&t)?, h, w)
    }
}

#[derive(Debug, Clone)]
pub struct GlobalBranch {
    stages: Vec<GlobalStage>,
    /// Decoder from 1/32 to 1/16, then to pyramid levels 3 and 2 (1/8, 1/4).
    dec16: DecoderBlock,
    dec8: DecoderBlock,
    dec4: DecoderBlock,
    /// Skip projection of the full-resolution input for the synthesized 1/2 level.
    half_skip: ConvNormAct,
    dec2: DecoderBlock,
    dec1: DecoderBlock,
}

impl GlobalBranch {
    pub fn new(init: &Init, in_channels: usize, cfg: &BranchConfig) -> Result<Self> {
        cfg.validate()?;
        let gw = &cfg.global_widths;
        let pw = &cfg.pyramid_widths;
        let mut stages = Vec::new();
        let mut cin = in_channels;
        for i in 0..4 {
            let si = init.pp(format!("stage{i}"));
            let spec = if i == 0 {
                ConvSpec::k(7).stride(4)
            } else {
                ConvSpec::k(3).stride(2)
            };
            let dim = gw[i];
            let mut blocks = Vec::new();
            for b in 0..cfg.global_depths[i] {
                let bi = si.pp(format!("block{b}"));
                blocks.push(TransformerBlock {
                    norm1: LayerNorm::new(&bi.pp("norm1"), dim)?,
                    attn: SrAttention::new(&bi.pp("attn"), dim, cfg.global_heads[i], cfg.global_sr_ratios[i])?,
                    norm2: LayerNorm::new(&bi.pp("norm2"), dim)?,
                    ffn: MixFfn::new(&bi.pp("ffn"), dim, dim * cfg.mlp_ratio)?,
                });
            }
            stages.push(GlobalStage {
                embed: Conv2d::new(&si.pp("embed"), cin, dim, spec.gain(3f64.sqrt()))?,
                embed_norm: LayerNorm::new(&si.pp("embed_norm"), dim)?,
                blocks,
                norm: LayerNorm::new(&si.pp("norm"), dim)?,
            });
            cin = dim;
        }
        Ok(Self {
            stages,
            dec16: DecoderBlock::new(&init.pp("dec16"), gw[3], gw[2], gw[2])?,
            dec8: DecoderBlock::new(&init.pp("dec8"), gw[2], gw[1], pw[3])?,
            dec4: DecoderBlock::new(&init.pp("dec4"), pw[3], gw[0], pw[2])?,
            half_skip: ConvNormAct::new(&init.pp("half_skip"), in_channels, pw[1], ConvSpec::k(3).stride(2))?,
            dec2: DecoderBlock::new(&init.pp("dec2"), pw[2], pw[1], pw[1])?,
            dec1: DecoderBlock::new(&init.pp("dec1"), pw[1], in_channels, pw[0])?,
        })
    }

    /// Stage outputs at scales 1/4, 1/8, 1/16, 1/32.
    pub fn encode(&self, feature: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(4);
        let mut x = feature.clone();
        for s in &self.stages {
            x = s.forward(&x)?;
            out.push(x.clone());
        }
        Ok(out)
    }

    pub fn forward(&self, feature: &Tensor) -> Result<FeaturePyramid> {
        let e = self.encode(feature)?;
        let y16 = self.dec16.forward(&e[3], &e[2])?;
        let l3 = self.dec8.forward(&y16, &e[1])?;
        let l2 = self.dec4.forward(&l3, &e[0])?;
        let half = self.half_skip.forward(feature)?;
        let l1 = self.dec2.forward(&l2, &half)?;
        let l0 = self.dec1.forward(&l1, feature)?;
        Ok(FeaturePyramid {
            levels: vec![l0, l1, l2, l3],
        })
    }

    /// Attention weights of the first block of the first stage for `feature`.
    pub fn first_attention_weights(&self, feature: &Tensor) -> Result<Tensor> {
        let s = &self.stages[0];
        let map = s.embed.forward(feature)?;
        let (_, _, h, w) = map.dims4()?;
        let t = s.embed_norm.forward(&map_to_tokens(&map)?)?;
        let b = &s.blocks[0];
        b.attn.weights(&b.norm1.forward(&t)?, h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle::{DType, Device, IndexOp};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_map(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn branches(c: usize) -> (ParamStore, LocalBranch, GlobalBranch) {
        let store = ParamStore::new();
        let init = Init::new(&store, 11, DType::F32, &Device::Cpu);
        let cfg = BranchConfig::default();
        let l = LocalBranch::new(&init.pp("local"), c, &cfg).unwrap();
        let g = GlobalBranch::new(&init.pp("global"), c, &cfg).unwrap();
        (store, l, g)
    }

    #[test]
    fn pyramids_align_at_nyu_size() {
        let (_, l, g) = branches(32);
        let f = rand_map(&[1, 32, 228, 304], 1);
        let pl = l.forward(&f).unwrap();
        let pg = g.forward(&f).unwrap();
        let sizes: Vec<(usize, usize)> = pl.shapes().iter().map(|s| (s.2, s.1)).collect();
        assert_eq!(sizes, vec![(304, 228), (152, 114), (76, 57), (38, 29)]);
        assert_eq!(pl.shapes(), pg.shapes());
        for t in pl.levels.iter().chain(&pg.levels) {
            assert!(nn::check_finite(t).unwrap());
        }
    }

    #[test]
    fn local_branch_maps_zero_to_zero() {
        let (_, l, _) = branches(8);
        let z = Tensor::zeros((1, 8, 20, 24), DType::F32, &Device::Cpu).unwrap();
        for t in l.forward(&z).unwrap().levels {
            assert_eq!(t.abs().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        }
    }

    #[test]
    fn branches_are_deterministic() {
        let (_, l1, g1) = branches(8);
        let (_, l2, g2) = branches(8);
        let f = rand_map(&[1, 8, 24, 20], 3);
        for (a, b) in l1.forward(&f).unwrap().levels.iter().zip(l2.forward(&f).unwrap().levels.iter()) {
            assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
        for (a, b) in g1.forward(&f).unwrap().levels.iter().zip(g2.forward(&f).unwrap().levels.iter()) {
            assert_eq!(a.flatten_all().unwrap().to_vec1::<f32>().unwrap(), b.flatten_all().unwrap().to_vec1::<f32>().unwrap());
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (_, _, g) = branches(8);
        let w = g.first_attention_weights(&rand_map(&[2, 8, 48, 64], 4)).unwrap();
        let (n, heads, l, _) = w.dims4().unwrap();
        assert_eq!((n, heads, l), (2, 1, 12 * 16));
        for s in w.sum(3).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn global_branch_sees_far_pixels() {
        let (_, _, g) = branches(8);
        let f = rand_map(&[1, 8, 48, 64], 5);
        let base = g.forward(&f).unwrap().levels[3].i((0, .., 0, 0)).unwrap().to_vec1::<f32>().unwrap();
        // bump one pixel in the opposite corner
        let mut v = f.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let idx = 3 * 48 * 64 + 47 * 64 + 63;
        v[idx] += 5.0;
        let f2 = Tensor::from_vec(v, (1, 8, 48, 64), &Device::Cpu).unwrap();
        let moved = g.forward(&f2).unwrap().levels[3].i((0, .., 0, 0)).unwrap().to_vec1::<f32>().unwrap();
        let delta: f32 = base.iter().zip(&moved).map(|(a, b)| (a - b).abs()).sum();
        assert!(delta > 0.0);
    }

    #[test]
    fn global_branch_is_lighter() {
        let (store, _, _) = branches(16);
        assert!(store.count("global.") < store.count("local."), "global {} vs local {}", store.count("global."), store.count("local."));
    }

    #[test]
    fn config_validation() {
        let mut cfg = BranchConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.global_heads = vec![3, 1, 2, 2];
        assert!(cfg.validate().is_err());
        let mut cfg = BranchConfig::default();
        cfg.local_widths.pop();
        assert!(cfg.validate().is_err());
    }
}

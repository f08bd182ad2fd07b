//! The assembled completion network: SFFM, both branches, UFFM and propagation.

use candle::{DType, Device, Tensor};

use crate::depthio::{DepthMap, ImageRgb};
use crate::error::{Error, Result};
use crate::nn::{Init, ParamStore};
use crate::pipeline::config::ModelConfig;
use crate::refine::{self, PlanHead, PropagationPlan};
use crate::sffm::{Sffm, SffmOutput};
use crate::twobranch::{GlobalBranch, LocalBranch};
use crate::uffm::{ScaleOutput, Uffm};

pub struct Prediction {
    pub sffm: SffmOutput,
    /// Coarse to fine; the last entry is full resolution.
    pub scales: Vec<ScaleOutput>,
    pub plan: PropagationPlan,
    /// Finest UFFM depth, the input to propagation.
    pub initial: Tensor,
    pub refined: Tensor,
}

impl Prediction {
    pub fn coarse(&self) -> &Tensor {
        &self.sffm.coarse
    }

    pub fn finest(&self) -> &ScaleOutput {
        self.scales.last().expect("at least one scale")
    }
}

pub struct SparseDc {
    cfg: ModelConfig,
    store: ParamStore,
    sffm: Sffm,
    local: LocalBranch,
    global: GlobalBranch,
    uffm: Uffm,
    plan_head: PlanHead,
    device: Device,
    dtype: DType,
}

impl SparseDc {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new();
        let init = Init::new(&store, seed, dtype, device);
        let c = cfg.sffm.channels;
        let widths = &cfg.branches.pyramid_widths;
        Ok(Self {
            sffm: Sffm::new(&init.pp("sffm"), cfg.sffm)?,
            local: LocalBranch::new(&init.pp("local"), c, &cfg.branches)?,
            global: GlobalBranch::new(&init.pp("global"), c, &cfg.branches)?,
            uffm: Uffm::new(&init.pp("uffm"), widths, cfg.uffm)?,
            plan_head: PlanHead::new(&init.pp("refine"), widths[0], &cfg.refine)?,
            cfg: cfg.clone(),
            store,
            device: device.clone(),
            dtype,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn uffm(&self) -> &Uffm {
        &self.uffm
    }

    /// Overwrites all parameters; any name or shape mismatch is a config error.
    pub fn load_params(&self, values: &std::collections::BTreeMap<String, Tensor>) -> Result<()> {
        self.store.assign(values).map_err(|e| match e {
            Error::Shape(m) | Error::Config(m) => Error::Config(format!("checkpoint does not fit the model: {m}")),
            other => other,
        })
    }

    /// `image` `(N, 3, H, W)`, `sparse` `(N, 1, H, W)` in meters.
    pub fn forward(&self, image: &Tensor, sparse: &Tensor) -> Result<Prediction> {
        let sffm = self.sffm.forward(image, sparse)?;
        let local = self.local.forward(&sffm.feature)?;
        let global = self.global.forward(&sffm.feature)?;
        let scales = self.uffm.forward(&local, &global, sparse)?;
        let finest = scales.last().expect("four scales");
        let plan = refine::plan_from_features(&self.plan_head, &finest.feature)?;
        let initial = finest.depth.clone();
        let refined = refine::propagate(&initial, &plan, sparse, self.cfg.refine.iterations)?;
        Ok(Prediction {
            sffm,
            scales,
            plan,
            initial,
            refined,
        })
    }

    pub fn forward_maps(&self, image: &ImageRgb, sparse: &DepthMap) -> Result<Prediction> {
        if image.dims() != sparse.dims() {
            return Err(Error::Shape(format!("image {:?} vs sparse {:?}", image.dims(), sparse.dims())));
        }
        self.forward(
            &image.to_tensor(&self.device, self.dtype)?,
            &sparse.to_tensor(&self.device, self.dtype)?,
        )
    }

    /// Completed depth clamped to `[0, depth_cap]`.
    pub fn complete(&self, image: &ImageRgb, sparse: &DepthMap) -> Result<DepthMap> {
        let pred = self.forward_maps(image, sparse)?;
        self.to_depth_map(&pred.refined)
    }

    pub fn to_depth_map(&self, t: &Tensor) -> Result<DepthMap> {
        let mut d = DepthMap::from_tensor(&t.narrow(0, 0, 1)?)?;
        d.clamp_max(self.cfg.depth_cap as f32);
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic;

    #[test]
    fn end_to_end_shapes_and_finiteness() {
        let cfg = ModelConfig::default();
        let m = SparseDc::new(&cfg, 1, DType::F32, &Device::Cpu).unwrap();
        let s = &synthetic::scenes(1, 0).unwrap()[0];
        let sparse = crate::patterns::sample_random(&s.gt, 50, 1).unwrap();
        let p = m.forward_maps(&s.image, &sparse).unwrap();
        assert_eq!(p.refined.dims(), &[1, 1, 48, 64]);
        assert_eq!(p.coarse().dims(), &[1, 1, 48, 64]);
        assert_eq!(p.scales.len(), 4);
        let d = m.complete(&s.image, &DepthMap::zeros(64, 48)).unwrap();
        assert!(d.values().iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 10.0));
        assert!(m.params().count("") > 10_000);
    }
}

//! Adam with global-norm gradient clipping and serializable state.

use std::collections::BTreeMap;

use candle::backprop::GradStore;
use candle::{DType, Tensor};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter that received a gradient. Gradients are
    /// rescaled so their global L2 norm is at most `clip`. Returns the norm before
    /// clipping.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, clip: f64) -> Result<f64> {
        let vars = params.vars();
        let mut sq = 0.0f64;
        for (_, var) in &vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Config(format!("non-finite gradient norm {norm}")));
        }
        let scale = if norm > clip { clip / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, var) in &vars {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = (g.detach() * scale)?;
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, InitKind};
    use candle::Device;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let store = ParamStore::new();
        let init = Init::new(&store, 0, DType::F64, &Device::Cpu);
        let w = init.tensor("w", &[3], InitKind::Ones).unwrap();
        let target = Tensor::new(&[0.0f64, 2.0, 1.0], &Device::Cpu).unwrap();
        let loss = (&w - &target).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut adam = Adam::new(0.1);
        let norm = adam.step(&store, &grads, 100.0).unwrap();
        assert!((norm - 8f64.sqrt()).abs() < 1e-12);
        let after = store.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        assert!((after[0] - 0.9).abs() < 1e-6);
        assert!((after[1] - 1.1).abs() < 1e-6);
        // zero gradient stays put
        assert!((after[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn converges_on_a_quadratic_with_clipping() {
        let store = ParamStore::new();
        let init = Init::new(&store, 0, DType::F64, &Device::Cpu);
        init.tensor("w", &[2], InitKind::Constant(5.0)).unwrap();
        let mut adam = Adam::new(0.05);
        for _ in 0..500 {
            let w = store.get("w").unwrap();
            let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
            adam.step(&store, &loss.backward().unwrap(), 1.0).unwrap();
        }
        let w = store.get("w").unwrap().as_tensor().to_vec1::<f64>().unwrap();
        assert!(w.iter().all(|v| v.abs() < 0.05), "{w:?}");
    }
}

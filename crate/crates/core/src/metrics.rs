//! Depth-completion evaluation metrics over valid ground-truth pixels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::depthio::DepthMap;
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "rmse,mae,irmse,imae,rel,delta1,delta2,delta3,n_valid";

/// Metrics in meters (`irmse`, `imae` in 1/m). `n_inverse` counts the pixels
/// entering the inverse metrics (valid ground truth and positive prediction).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: f64,
    pub mae: f64,
    pub irmse: f64,
    pub imae: f64,
    pub rel: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_valid: usize,
    pub n_inverse: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct Sums {
    n: usize,
    sq: f64,
    abs: f64,
    rel: f64,
    delta: [usize; 3],
    n_inv: usize,
    inv_sq: f64,
    inv_abs: f64,
}

impl Sums {
    fn add(&mut self, p: f64, g: f64) {
        let e = p - g;
        self.n += 1;
        self.sq += e * e;
        self.abs += e.abs();
        self.rel += e.abs() / g;
        if p > 0.0 {
            let ratio = (p / g).max(g / p);
            for (k, count) in self.delta.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(k as i32 + 1) {
                    *count += 1;
                }
            }
            let ie = 1.0 / p - 1.0 / g;
            self.n_inv += 1;
            self.inv_sq += ie * ie;
            self.inv_abs += ie.abs();
        }
    }

    fn report(&self) -> MetricsReport {
        let n = self.n as f64;
        let (irmse, imae) = if self.n_inv > 0 {
            let m = self.n_inv as f64;
            ((self.inv_sq / m).sqrt(), self.inv_abs / m)
        } else {
            (0.0, 0.0)
        };
        MetricsReport {
            rmse: (self.sq / n).sqrt(),
            mae: self.abs / n,
            irmse,
            imae,
            rel: self.rel / n,
            delta1: self.delta[0] as f64 / n,
            delta2: self.delta[1] as f64 / n,
            delta3: self.delta[2] as f64 / n,
            n_valid: self.n,
            n_inverse: self.n_inv,
        }
    }
}

/// Metrics of `pred` against every pixel with `gt > 0`. Pixels with `pred = 0`
/// count in the linear metrics and are skipped by the inverse ones.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<MetricsReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    let mut sums = Sums::default();
    for (p, g) in pred.values().iter().zip(gt.values()) {
        if *g > 0.0 {
            sums.add(*p as f64, *g as f64);
        }
    }
    if sums.n == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(sums.report())
}

/// Pools reports by pixel count, recombining squared errors before the root.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MetricsReport> {
    if reports.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    if reports.len() == 1 {
        return Ok(reports[0]);
    }
    let n: usize = reports.iter().map(|r| r.n_valid).sum();
    let m: usize = reports.iter().map(|r| r.n_inverse).sum();
    if n == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let wmean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(|r| r.n_valid as f64 * f(r)).sum::<f64>() / n as f64;
    let imean = |f: &dyn Fn(&MetricsReport) -> f64| {
        if m == 0 {
            0.0
        } else {
            reports.iter().map(|r| r.n_inverse as f64 * f(r)).sum::<f64>() / m as f64
        }
    };
    Ok(MetricsReport {
        rmse: wmean(&|r| r.rmse * r.rmse).sqrt(),
        mae: wmean(&|r| r.mae),
        irmse: imean(&|r| r.irmse * r.irmse).sqrt(),
        imae: imean(&|r| r.imae),
        rel: wmean(&|r| r.rel),
        delta1: wmean(&|r| r.delta1),
        delta2: wmean(&|r| r.delta2),
        delta3: wmean(&|r| r.delta3),
        n_valid: n,
        n_inverse: m,
    })
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.rmse, self.mae, self.irmse, self.imae, self.rel, self.delta1, self.delta2, self.delta3, self.n_valid
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, format!("{CSV_HEADER}\n{}\n", self.csv_row())).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn px(p: f32, g: f32) -> MetricsReport {
        compute_metrics(&DepthMap::new(1, 1, vec![p]).unwrap(), &DepthMap::new(1, 1, vec![g]).unwrap()).unwrap()
    }

    #[test]
    fn identity_is_perfect() {
        let g = DepthMap::from_fn(5, 4, |x, y| 1.0 + (x + y) as f32).unwrap();
        let r = compute_metrics(&g, &g).unwrap();
        assert_eq!((r.rmse, r.mae, r.rel, r.irmse), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
        assert_eq!(r.n_valid, 20);
    }

    #[test]
    fn single_pixel_fixtures() {
        let r = px(2.0, 1.0);
        assert_eq!((r.rmse, r.mae, r.rel, r.irmse, r.imae), (1.0, 1.0, 1.0, 0.5, 0.5));
        assert_eq!((r.delta1, r.delta2, r.delta3), (0.0, 0.0, 0.0));
        assert_eq!(px(1.2, 1.0).delta1, 1.0);
        let miss = px(0.0, 2.0);
        assert_eq!((miss.rmse, miss.mae, miss.rel, miss.delta3), (2.0, 2.0, 1.0, 0.0));
        assert_eq!((miss.n_inverse, miss.irmse), (0, 0.0));
    }

    #[test]
    fn errors_and_csv() {
        let z = DepthMap::zeros(3, 3);
        assert!(matches!(compute_metrics(&z, &z), Err(Error::EmptyEvaluation)));
        assert!(compute_metrics(&DepthMap::zeros(2, 3), &z).is_err());
        assert!(aggregate(&[]).is_err());
        let r = px(2.0, 1.0);
        assert_eq!(r.csv_row(), "1,1,0.5,0.5,1,0,0,0,1");
        let dir = tempfile::tempdir().unwrap();
        r.write_csv(&dir.path().join("m.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        r.write_json(&dir.path().join("m.json")).unwrap();
        let back: MetricsReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("m.json")).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    fn maps() -> impl Strategy<Value = (DepthMap, DepthMap)> {
        (1usize..8, 1usize..8).prop_flat_map(|(w, h)| {
            (
                prop::collection::vec(prop_oneof![Just(0.0f32), 0.1f32..10.0], w * h),
                prop::collection::vec(0.1f32..10.0, w * h),
            )
                .prop_map(move |(p, g)| (DepthMap::new(w, h, p).unwrap(), DepthMap::new(w, h, g).unwrap()))
        })
    }

    proptest! {
        #[test]
        fn scale_equivariance_and_delta_symmetry((p, g) in maps(), c in 0.1f32..10.0) {
            let r = compute_metrics(&p, &g).unwrap();
            let scale = |m: &DepthMap| DepthMap::new(m.width(), m.height(), m.values().iter().map(|v| v * c).collect()).unwrap();
            let s = compute_metrics(&scale(&p), &scale(&g)).unwrap();
            let c = c as f64;
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-4 * (1.0 + a.abs().max(b.abs()));
            prop_assert!(close(s.rmse, r.rmse * c));
            prop_assert!(close(s.mae, r.mae * c));
            prop_assert!(close(s.irmse, r.irmse / c));
            prop_assert!(close(s.imae, r.imae / c));
            prop_assert!(close(s.rel, r.rel));
            prop_assert!(r.delta1 <= r.delta2 && r.delta2 <= r.delta3 && r.delta3 <= 1.0);

            let pos = DepthMap::new(p.width(), p.height(), p.values().iter().map(|v| v.max(0.05)).collect()).unwrap();
            let a = compute_metrics(&pos, &g).unwrap();
            let b = compute_metrics(&g, &pos).unwrap();
            prop_assert_eq!((a.delta1, a.delta2, a.delta3), (b.delta1, b.delta2, b.delta3));
        }
    }
}

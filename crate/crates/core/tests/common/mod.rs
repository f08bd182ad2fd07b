//! Independent reference implementations used by the integration and acceptance
//! tests. Everything here works on plain `f64` slices with explicit loops.

#![allow(dead_code)]

use candle::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsedc::depthio::DepthMap;
use sparsedc::sffm::GatedFusion;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_vec(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn tensor(values: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(values, shape, &Device::Cpu).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    tensor((0..n).map(|_| rng.random_range(lo..hi)).collect(), shape)
}

/// `1 - e^(-r)` with `r = |d - g| / (b g)`, 0 for an invalid reference.
pub fn pseudo_uncertainty(d: f64, g: f64, b: f64) -> f64 {
    if g <= 0.0 {
        return 0.0;
    }
    let r = (d - g).abs() / (b * g);
    1.0 - 1.0 / r.exp()
}

/// Validity-aware mean pooling computed by scattering every input pixel into its
/// output cell. Output is `ceil(w / f) x ceil(h / f)`, row-major.
pub fn window_pool(values: &[f32], w: usize, h: usize, f: usize) -> (usize, usize, Vec<f64>) {
    let (ow, oh) = ((w + f - 1) / f, (h + f - 1) / f);
    let mut sum = vec![0.0f64; ow * oh];
    let mut count = vec![0usize; ow * oh];
    for (i, v) in values.iter().enumerate() {
        if *v > 0.0 {
            let cell = (i / w / f) * ow + (i % w) / f;
            sum[cell] += *v as f64;
            count[cell] += 1;
        }
    }
    let out = sum.iter().zip(&count).map(|(s, c)| if *c > 0 { s / *c as f64 } else { 0.0 }).collect();
    (ow, oh, out)
}

pub fn random_sparse_map(rng: &mut ChaCha8Rng, w: usize, h: usize, density: f64) -> DepthMap {
    DepthMap::from_fn(w, h, |_, _| if rng.random_bool(density) { rng.random_range(0.2f32..9.0) } else { 0.0 }).unwrap()
}

/// Same-padding, stride-1 convolution of one `(C, H, W)` image.
pub fn conv2d(x: &[f64], c: usize, h: usize, w: usize, weight: &[f64], bias: &[f64], out: usize, k: usize) -> Vec<f64> {
    let p = k as isize / 2;
    let mut y = vec![0.0; out * h * w];
    for o in 0..out {
        for i in 0..h {
            for j in 0..w {
                let mut acc = bias[o];
                for ci in 0..c {
                    for ki in 0..k {
                        for kj in 0..k {
                            let (yi, xj) = (i as isize + ki as isize - p, j as isize + kj as isize - p);
                            if yi < 0 || xj < 0 || yi >= h as isize || xj >= w as isize {
                                continue;
                            }
                            acc += weight[((o * c + ci) * k + ki) * k + kj] * x[(ci * h + yi as usize) * w + xj as usize];
                        }
                    }
                }
                y[(o * h + i) * w + j] = acc;
            }
        }
    }
    y
}

fn lrelu(v: f64) -> f64 {
    if v >= 0.0 {
        v
    } else {
        0.2 * v
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Uncertainty-weighted gated fusion written out pixel by pixel for a batch of
/// `(N, C, H, W)` features and `(N, 1, H, W)` uncertainties.
pub fn fusion(gate: &GatedFusion, f_l: &Tensor, f_g: &Tensor, u_l: &Tensor, u_g: &Tensor) -> Vec<f64> {
    let (n, c, h, w) = f_l.dims4().unwrap();
    let (fl, fg, ul, ug) = (to_vec(f_l), to_vec(f_g), to_vec(u_l), to_vec(u_g));
    let wf = to_vec(&gate.feature.weight);
    let bf = to_vec(gate.feature.bias.as_ref().unwrap());
    let wg = to_vec(&gate.gate.weight);
    let bg = to_vec(gate.gate.bias.as_ref().unwrap());
    let (w1, b1) = (to_vec(&gate.squeeze.weight), to_vec(&gate.squeeze.bias));
    let (w2, b2) = (to_vec(&gate.excite.weight), to_vec(&gate.excite.bias));
    let out = bf.len();
    let hidden = b1.len();
    let k = gate.feature.weight.dim(3).unwrap();
    let mut result = Vec::with_capacity(n * out * h * w);
    for b in 0..n {
        let mut x = vec![0.0; 2 * c * h * w];
        for ch in 0..c {
            for p in 0..h * w {
                x[ch * h * w + p] = (1.0 - ul[b * h * w + p]) * fl[(b * c + ch) * h * w + p];
                x[(c + ch) * h * w + p] = (1.0 - ug[b * h * w + p]) * fg[(b * c + ch) * h * w + p];
            }
        }
        let feat = conv2d(&x, 2 * c, h, w, &wf, &bf, out, k);
        let gates = conv2d(&x, 2 * c, h, w, &wg, &bg, out, k);
        let y: Vec<f64> = feat.iter().zip(&gates).map(|(f, g)| lrelu(*f) * sigmoid(*g)).collect();
        let mean: Vec<f64> = (0..out).map(|o| y[o * h * w..(o + 1) * h * w].iter().sum::<f64>() / (h * w) as f64).collect();
        let z: Vec<f64> = (0..hidden)
            .map(|j| (b1[j] + (0..out).map(|o| w1[j * out + o] * mean[o]).sum::<f64>()).max(0.0))
            .collect();
        for o in 0..out {
            let s = sigmoid(b2[o] + (0..hidden).map(|j| w2[o * hidden + j] * z[j]).sum::<f64>());
            result.extend(y[o * h * w..(o + 1) * h * w].iter().map(|v| v * s));
        }
    }
    result
}

/// `(mean |p - g|, sqrt(mean (p - g)^2))` over pixels with `g > 0`.
pub fn mae_rmse(p: &[f64], g: &[f64]) -> (f64, f64) {
    let pairs: Vec<(f64, f64)> = p.iter().zip(g).filter(|(_, g)| **g > 0.0).map(|(p, g)| (*p, *g)).collect();
    if pairs.is_empty() {
        return (0.0, 0.0);
    }
    let n = pairs.len() as f64;
    let mae = pairs.iter().map(|(p, g)| (p - g).abs()).sum::<f64>() / n;
    let mse = pairs.iter().map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / n;
    (mae, mse.sqrt())
}

/// `0.5 mean |u - u_hat(d, g)| + rmse(d, g)` over pixels with `g > 0`.
pub fn scale_loss(d: &[f64], u: &[f64], g: &[f64], b: f64) -> f64 {
    let valid: Vec<usize> = (0..g.len()).filter(|i| g[*i] > 0.0).collect();
    if valid.is_empty() {
        return 0.0;
    }
    let n = valid.len() as f64;
    let unc = valid.iter().map(|&i| (u[i] - pseudo_uncertainty(d[i], g[i], b)).abs()).sum::<f64>() / n;
    unc * 0.5 + mae_rmse(d, g).1
}

/// Perturbs one scalar entry of `var` in place.
pub fn nudge(var: &Var, index: usize, delta: f64) {
    let t = var.as_tensor();
    let mut v = to_vec(t);
    v[index] += delta;
    var.set(&Tensor::from_vec(v, t.dims(), t.device()).unwrap().to_dtype(t.dtype()).unwrap()).unwrap();
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub struct GradCheck {
    pub checked: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

/// Central-difference check of `loss` w.r.t. `count` random scalar entries drawn
/// from `params` (weighted uniformly over tensors).
pub fn grad_check(
    params: &[(String, Var)],
    loss: &dyn Fn() -> Tensor,
    count: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> GradCheck {
    let grads = loss().backward().unwrap();
    let mut rng = rng(seed);
    let mut report = GradCheck {
        checked: 0,
        worst: 0.0,
        failures: Vec::new(),
    };
    for _ in 0..count {
        let (name, var) = &params[rng.random_range(0..params.len())];
        let index = rng.random_range(0..var.elem_count());
        let analytic = grads.get(var.as_tensor()).map(|g| to_vec(g)[index]).unwrap_or(0.0);
        let original = var.as_tensor().copy().unwrap();
        nudge(var, index, step);
        let up = scalar(&loss());
        nudge(var, index, -2.0 * step);
        let down = scalar(&loss());
        var.set(&original).unwrap();
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic, numeric, 1e-4);
        report.checked += 1;
        report.worst = report.worst.max(err);
        if err >= tolerance {
            report.failures.push(format!("{name}[{index}]: analytic {analytic:.6e} numeric {numeric:.6e}"));
        }
    }
    report
}

//! Seeded simulators for sparse depth input patterns.
//!
//! Every generator only ever copies ground-truth values: the valid pixels of
//! an output are a subset of the valid pixels of `gt` and carry identical values.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depthio::{DepthMap, ImageRgb};
use crate::error::{Error, Result};

/// Default lattice spacing of the shift-grid pattern in pixels.
pub const DEFAULT_GRID_STRIDE: usize = 12;
/// Non-maximum suppression radius of the keypoint detector.
pub const KEYPOINT_NMS_RADIUS: usize = 3;
const HARRIS_K: f64 = 0.05;
/// Corner responses at or below this value are not keypoints.
const HARRIS_THRESHOLD: f64 = 1e-6;
const HOLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a sample id so each sample gets its own RNG stream
/// regardless of loading order.
pub fn derive_seed(seed: u64, sample_id: &str) -> u64 {
    // FNV-1a over the id, then a splitmix finalizer over (seed, hash).
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in sample_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h.rotate_left(17);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn keep_indices(gt: &DepthMap, indices: impl IntoIterator<Item = usize>) -> DepthMap {
    let mut values = vec![0.0f32; gt.values().len()];
    for i in indices {
        values[i] = gt.values()[i];
    }
    DepthMap::new(gt.width(), gt.height(), values).expect("copied from a valid map")
}

/// `min(n, #valid)` pixels drawn uniformly without replacement from the valid pixels of `gt`.
pub fn sample_random(gt: &DepthMap, n: usize, seed: u64) -> Result<DepthMap> {
    let valid = gt.valid_indices();
    if valid.is_empty() {
        return Err(Error::EmptyInput("ground truth has no valid pixels".into()));
    }
    let mut rng = rng_for(seed);
    let amount = n.min(valid.len());
    let picked = index::sample(&mut rng, valid.len(), amount);
    Ok(keep_indices(gt, picked.into_iter().map(|i| valid[i])))
}

/// Regular lattice with spacing `stride` and a random offset in `[0, stride)^2`.
pub fn sample_shift_grid(gt: &DepthMap, stride: usize, seed: u64) -> Result<DepthMap> {
    let mut rng = rng_for(seed);
    let dx = rng.random_range(0..stride.max(2));
    let dy = rng.random_range(0..stride.max(2));
    sample_grid_with_shift(gt, stride, (dx, dy))
}

pub fn sample_grid_with_shift(gt: &DepthMap, stride: usize, (dx, dy): (usize, usize)) -> Result<DepthMap> {
    if stride < 2 {
        return Err(Error::Config(format!("grid stride must be >= 2, got {stride}")));
    }
    let mut out = DepthMap::zeros(gt.width(), gt.height());
    for y in (dy..gt.height()).step_by(stride) {
        for x in (dx..gt.width()).step_by(stride) {
            out.set(x, y, gt.get(x, y));
        }
    }
    Ok(out)
}

/// Axis-aligned pixel rectangle `[x, x + w) x [y, y + h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn overlaps(&self, other: &Rect) -> bool {
        self.x < other.x + other.w && other.x < self.x + self.w && self.y < other.y + other.h && other.y < self.y + self.h
    }
}

fn random_rect(rng: &mut ChaCha8Rng, width: usize, height: usize) -> Rect {
    let side = |rng: &mut ChaCha8Rng, dim: usize| {
        let lo = dim.div_ceil(8).max(1);
        let hi = (dim / 2).max(lo);
        rng.random_range(lo..=hi)
    };
    let w = side(rng, width);
    let h = side(rng, height);
    let x = rng.random_range(0..=width - w);
    let y = rng.random_range(0..=height - h);
    Rect { x, y, w, h }
}

/// Two randomly placed rectangles receiving `n1` and `n2` uniform samples.
///
/// Returns the sparse map together with the two rectangles. Pixels already
/// taken by the first rectangle are not drawn again for the second.
pub fn sample_uneven_with_regions(gt: &DepthMap, (n1, n2): (usize, usize), seed: u64) -> Result<(DepthMap, [Rect; 2])> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::Config("uneven density counts must be >= 1".into()));
    }
    let mut rng = rng_for(seed);
    let rects = [random_rect(&mut rng, gt.width(), gt.height()), random_rect(&mut rng, gt.width(), gt.height())];
    let mut taken = vec![false; gt.values().len()];
    for (rect, n) in rects.iter().zip([n1, n2]) {
        let mut candidates = Vec::new();
        for y in rect.y..rect.y + rect.h {
            for x in rect.x..rect.x + rect.w {
                let i = y * gt.width() + x;
                if gt.values()[i] > 0.0 && !taken[i] {
                    candidates.push(i);
                }
            }
        }
        let amount = n.min(candidates.len());
        for k in index::sample(&mut rng, candidates.len(), amount) {
            taken[candidates[k]] = true;
        }
    }
    let kept = taken.iter().enumerate().filter(|(_, t)| **t).map(|(i, _)| i);
    Ok((keep_indices(gt, kept), rects))
}

pub fn sample_uneven(gt: &DepthMap, counts: (usize, usize), seed: u64) -> Result<DepthMap> {
    sample_uneven_with_regions(gt, counts, seed).map(|(d, _)| d)
}

/// Harris corner response on a grayscale raster (replicated borders, 3x3 structure-tensor window).
pub fn corner_response(gray: &[f32], width: usize, height: usize) -> Vec<f64> {
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, width as isize - 1) as usize;
        let y = y.clamp(0, height as isize - 1) as usize;
        gray[y * width + x] as f64
    };
    let mut ixx = vec![0.0f64; width * height];
    let mut iyy = vec![0.0f64; width * height];
    let mut ixy = vec![0.0f64; width * height];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let gx = 0.5 * (at(x + 1, y) - at(x - 1, y));
            let gy = 0.5 * (at(x, y + 1) - at(x, y - 1));
            let i = y as usize * width + x as usize;
            ixx[i] = gx * gx;
            iyy[i] = gy * gy;
            ixy[i] = gx * gy;
        }
    }
    let window = |buf: &[f64], x: isize, y: isize| {
        let mut s = 0.0;
        for oy in -1..=1 {
            for ox in -1..=1 {
                let xx = (x + ox).clamp(0, width as isize - 1) as usize;
                let yy = (y + oy).clamp(0, height as isize - 1) as usize;
                s += buf[yy * width + xx];
            }
        }
        s
    };
    let mut out = vec![0.0f64; width * height];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let a = window(&ixx, x, y);
            let b = window(&iyy, x, y);
            let c = window(&ixy, x, y);
            out[y as usize * width + x as usize] = a * b - c * c - HARRIS_K * (a + b) * (a + b);
        }
    }
    out
}

/// Local maxima of the corner response above threshold, strongest first.
///
/// Ties are broken by raster order, both within the suppression window and in
/// the final ranking, so the result is fully deterministic.
pub fn detect_corners(image: &ImageRgb, radius: usize) -> Vec<(usize, usize, f64)> {
    let (w, h) = image.dims();
    let resp = corner_response(&image.grayscale(), w, h);
    let r = radius as isize;
    let mut corners = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let v = resp[i];
            if v <= HARRIS_THRESHOLD {
                continue;
            }
            let mut is_max = true;
            'win: for oy in -r..=r {
                for ox in -r..=r {
                    let (xx, yy) = (x as isize + ox, y as isize + oy);
                    if xx < 0 || yy < 0 || xx >= w as isize || yy >= h as isize || (ox == 0 && oy == 0) {
                        continue;
                    }
                    let j = yy as usize * w + xx as usize;
                    if resp[j] > v || (resp[j] == v && j < i) {
                        is_max = false;
                        break 'win;
                    }
                }
            }
            if is_max {
                corners.push((x, y, v));
            }
        }
    }
    corners.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.1, a.0).cmp(&(b.1, b.0))));
    corners
}

/// The `k` strongest corners of `image` that are valid in `gt`.
pub fn sample_keypoints(gt: &DepthMap, image: &ImageRgb, k: usize) -> Result<DepthMap> {
    if gt.dims() != image.dims() {
        return Err(Error::Shape(format!("image {:?} vs depth {:?}", image.dims(), gt.dims())));
    }
    let mut out = DepthMap::zeros(gt.width(), gt.height());
    if k == 0 {
        return Ok(out);
    }
    let mut placed = 0;
    for (x, y, _) in detect_corners(image, KEYPOINT_NMS_RADIUS) {
        if placed == k {
            break;
        }
        if gt.is_valid(x, y) {
            out.set(x, y, gt.get(x, y));
            placed += 1;
        }
    }
    Ok(out)
}

/// Random sampling followed by removal of one `hole_side` square; also returns the square.
pub fn sample_big_holes_with_region(gt: &DepthMap, n: usize, hole_side: usize, seed: u64) -> Result<(DepthMap, Rect)> {
    let (w, h) = gt.dims();
    if hole_side > w.min(h) {
        return Err(Error::Config(format!("hole side {hole_side} exceeds min({w}, {h})")));
    }
    let mut out = sample_random(gt, n, seed)?;
    let mut rng = rng_for(seed ^ HOLE_STREAM);
    let hole = Rect {
        x: rng.random_range(0..=w - hole_side),
        y: rng.random_range(0..=h - hole_side),
        w: hole_side,
        h: hole_side,
    };
    for y in hole.y..hole.y + hole.h {
        for x in hole.x..hole.x + hole.w {
            out.set(x, y, 0.0);
        }
    }
    Ok((out, hole))
}

pub fn sample_big_holes(gt: &DepthMap, n: usize, hole_side: usize, seed: u64) -> Result<DepthMap> {
    sample_big_holes_with_region(gt, n, hole_side, seed).map(|(d, _)| d)
}

/// Invalidates `floor(p * H)` distinct rows with `p ~ U(0, max_fraction)`.
pub fn mask_rows(s: &DepthMap, max_fraction: f64, seed: u64) -> Result<DepthMap> {
    check_row_fraction(max_fraction)?;
    let mut rng = rng_for(seed);
    let p = if max_fraction > 0.0 {
        rng.random_range(0.0..max_fraction)
    } else {
        0.0
    };
    Ok(mask_rows_with_fraction(s, p, &mut rng).0)
}

fn check_row_fraction(f: f64) -> Result<()> {
    if !(0.0..=0.95).contains(&f) {
        return Err(Error::Config(format!("row mask fraction must lie in [0, 0.95], got {f}")));
    }
    Ok(())
}

/// Masks exactly `floor(p * H)` rows chosen uniformly; returns the map and the masked rows.
pub fn mask_rows_with_fraction(s: &DepthMap, p: f64, rng: &mut impl Rng) -> (DepthMap, Vec<usize>) {
    let h = s.height();
    let count = ((p * h as f64).floor() as usize).min(h);
    let mut rows = index::sample(rng, h, count).into_vec();
    rows.sort_unstable();
    let mut out = s.clone();
    for &y in &rows {
        for x in 0..s.width() {
            out.set(x, y, 0.0);
        }
    }
    (out, rows)
}

/// Declarative sparsification pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Pattern {
    RandomN { n: usize },
    ShiftGrid { stride: usize },
    UnevenDensity { n1: usize, n2: usize },
    Keypoint { k: usize },
    BigHoles { n: usize, hole_side: usize },
    /// Row masking applied to the ground truth itself, or to `n` random points first.
    RowMask {
        max_fraction: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        n: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    #[serde(flatten)]
    pub pattern: Pattern,
    #[serde(default)]
    pub seed: u64,
}

impl PatternSpec {
    pub fn new(pattern: Pattern, seed: u64) -> Self {
        Self { pattern, seed }
    }

    pub fn random(n: usize, seed: u64) -> Self {
        Self::new(Pattern::RandomN { n }, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::Pattern {
                spec: self.to_string(),
                reason: reason.into(),
            })
        };
        match self.pattern {
            Pattern::RandomN { n } if n < 1 => bad("n must be >= 1"),
            Pattern::ShiftGrid { stride } if stride < 2 => bad("stride must be >= 2"),
            Pattern::UnevenDensity { n1, n2 } if n1 < 1 || n2 < 1 => bad("n1 and n2 must be >= 1"),
            Pattern::RowMask { max_fraction, .. } if !(0.0..=0.95).contains(&max_fraction) => {
                bad("max_fraction must lie in [0, 0.95]")
            }
            _ => Ok(()),
        }
    }

    /// Applies the pattern with the spec seed as-is.
    pub fn apply(&self, gt: &DepthMap, image: &ImageRgb) -> Result<DepthMap> {
        self.apply_with_seed(gt, image, self.seed)
    }

    /// Applies the pattern with a per-sample stream derived from the spec seed.
    pub fn apply_for(&self, gt: &DepthMap, image: &ImageRgb, sample_id: &str) -> Result<DepthMap> {
        self.apply_with_seed(gt, image, derive_seed(self.seed, sample_id))
    }

    fn apply_with_seed(&self, gt: &DepthMap, image: &ImageRgb, seed: u64) -> Result<DepthMap> {
        self.validate()?;
        match self.pattern {
            Pattern::RandomN { n } => sample_random(gt, n, seed),
            Pattern::ShiftGrid { stride } => sample_shift_grid(gt, stride, seed),
            Pattern::UnevenDensity { n1, n2 } => sample_uneven(gt, (n1, n2), seed),
            Pattern::Keypoint { k } => sample_keypoints(gt, image, k),
            Pattern::BigHoles { n, hole_side } => sample_big_holes(gt, n, hole_side, seed),
            Pattern::RowMask { max_fraction, n } => {
                let base = match n {
                    Some(n) => sample_random(gt, n, seed)?,
                    None => gt.clone(),
                };
                mask_rows(&base, max_fraction, seed ^ HOLE_STREAM.rotate_left(7))
            }
        }
    }

    fn kind(&self) -> &'static str {
        match self.pattern {
            Pattern::RandomN { .. } => "random_n",
            Pattern::ShiftGrid { .. } => "shift_grid",
            Pattern::UnevenDensity { .. } => "uneven_density",
            Pattern::Keypoint { .. } => "keypoint",
            Pattern::BigHoles { .. } => "big_holes",
            Pattern::RowMask { .. } => "row_mask",
        }
    }
}

impl fmt::Display for PatternSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.kind())?;
        match self.pattern {
            Pattern::RandomN { n } => write!(f, "n={n}")?,
            Pattern::ShiftGrid { stride } => write!(f, "stride={stride}")?,
            Pattern::UnevenDensity { n1, n2 } => write!(f, "n1={n1},n2={n2}")?,
            Pattern::Keypoint { k } => write!(f, "k={k}")?,
            Pattern::BigHoles { n, hole_side } => write!(f, "n={n},hole_side={hole_side}")?,
            Pattern::RowMask { max_fraction, n } => {
                write!(f, "max_fraction={max_fraction}")?;
                if let Some(n) = n {
                    write!(f, ",n={n}")?;
                }
            }
        }
        write!(f, ",seed={}", self.seed)
    }
}

impl FromStr for PatternSpec {
    type Err = Error;

    /// Parses `kind:key=val,key=val`, e.g. `random_n:n=500,seed=7`.
    fn from_str(s: &str) -> Result<Self> {
        let err = |reason: String| Error::Pattern {
            spec: s.to_string(),
            reason,
        };
        let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut kv = std::collections::BTreeMap::new();
        for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got `{part}`")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut take = |key: &str| kv.remove(key);
        let int = |v: Option<String>, key: &str, default: Option<usize>| -> Result<usize> {
            match v {
                Some(v) => v.parse().map_err(|_| err(format!("`{key}` must be an integer, got `{v}`"))),
                None => default.ok_or_else(|| err(format!("missing `{key}`"))),
            }
        };
        let seed = match take("seed") {
            Some(v) => v.parse().map_err(|_| err(format!("`seed` must be an integer, got `{v}`")))?,
            None => 0,
        };
        let pattern = match kind.trim() {
            "random_n" | "random" => Pattern::RandomN {
                n: int(take("n"), "n", None)?,
            },
            "shift_grid" => Pattern::ShiftGrid {
                stride: int(take("stride"), "stride", Some(DEFAULT_GRID_STRIDE))?,
            },
            "uneven_density" | "uneven" => Pattern::UnevenDensity {
                n1: int(take("n1"), "n1", None)?,
                n2: int(take("n2"), "n2", None)?,
            },
            "keypoint" | "keypoints" => Pattern::Keypoint {
                k: int(take("k"), "k", None)?,
            },
            "big_holes" => Pattern::BigHoles {
                n: int(take("n"), "n", None)?,
                hole_side: int(take("hole_side"), "hole_side", None)?,
            },
            "row_mask" => {
                let max_fraction = match take("max_fraction") {
                    Some(v) => v
                        .parse()
                        .map_err(|_| err(format!("`max_fraction` must be a number, got `{v}`")))?,
                    None => 0.95,
                };
                let n = match take("n") {
                    Some(v) => Some(int(Some(v), "n", None)?),
                    None => None,
                };
                Pattern::RowMask { max_fraction, n }
            }
            other => return Err(err(format!("unknown pattern kind `{other}`"))),
        };
        if let Some(k) = kv.keys().next() {
            return Err(err(format!("unknown key `{k}`")));
        }
        let spec = PatternSpec { pattern, seed };
        spec.validate()?;
        Ok(spec)
    }
}

//! Depth and image containers, 16-bit depth encoding, NYU-style preprocessing,
//! and the tab-separated dataset manifest.

use std::fs;
use std::path::{Path, PathBuf};

use candle::{DType, Device, Tensor};
use image::{DynamicImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Meters per unit of the on-disk depth format (16-bit millimeters).
pub const MILLIMETERS: f64 = 0.001;

/// Source resolution of NYU frames and the crop taken after halving them.
pub const NYU_CROP: (usize, usize) = (304, 228);
/// Depth upper bound used for indoor data, in meters.
pub const NYU_MAX_DEPTH: f32 = 10.0;

/// Single-channel field of metric depths; `0.0` marks a pixel without a measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Size(format!("depth map must be non-empty, got {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height} depth map",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Range(format!("depth values must be finite and >= 0, got {v}")));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        assert!(width > 0 && height > 0, "depth map must be non-empty");
        Self {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(f(x, y));
            }
        }
        Self::new(width, height, values)
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

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.get(x, y) > 0.0
    }

    /// Sets a pixel. Non-finite or negative values are stored as invalid.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.values[y * self.width + x] = if v.is_finite() && v > 0.0 { v } else { 0.0 };
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }

    /// Flat indices (`y * width + x`) of valid pixels in raster order.
    pub fn valid_indices(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn max_value(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    pub fn clamp_max(&mut self, max: f32) {
        for v in &mut self.values {
            *v = v.min(max);
        }
    }

    /// Validity-aware average pooling over `factor x factor` windows.
    ///
    /// Output size is `ceil(width / factor) x ceil(height / factor)`; windows at the
    /// right and bottom border may be partial. An output pixel is the mean of the
    /// valid pixels in its window, or invalid when the window has none.
    pub fn valid_mean_pool(&self, factor: usize) -> DepthMap {
        assert!(factor >= 1, "pooling factor must be >= 1");
        if factor == 1 {
            return self.clone();
        }
        let ow = self.width.div_ceil(factor);
        let oh = self.height.div_ceil(factor);
        let mut out = vec![0.0f32; ow * oh];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut sum = 0.0f64;
                let mut count = 0usize;
                for y in oy * factor..((oy + 1) * factor).min(self.height) {
                    for x in ox * factor..((ox + 1) * factor).min(self.width) {
                        let v = self.get(x, y);
                        if v > 0.0 {
                            sum += v as f64;
                            count += 1;
                        }
                    }
                }
                if count > 0 {
                    out[oy * ow + ox] = (sum / count as f64) as f32;
                }
            }
        }
        DepthMap {
            width: ow,
            height: oh,
            values: out,
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<DepthMap> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Size(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut values = Vec::with_capacity(width * height);
        for y in y0..y0 + height {
            values.extend_from_slice(&self.values[y * self.width + x0..y * self.width + x0 + width]);
        }
        DepthMap::new(width, height, values)
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (1, 1, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    /// Reads a `(1, 1, H, W)` or `(H, W)` tensor back. Negative and non-finite
    /// entries become invalid pixels.
    pub fn from_tensor(t: &Tensor) -> Result<DepthMap> {
        let t = t.to_dtype(DType::F32)?;
        let dims = t.dims().to_vec();
        let (h, w) = match dims.as_slice() {
            [1, 1, h, w] | [1, h, w] | [h, w] => (*h, *w),
            _ => return Err(Error::Shape(format!("expected a single depth plane, got {dims:?}"))),
        };
        let values = t.flatten_all()?.to_vec1::<f32>()?;
        let values = values
            .into_iter()
            .map(|v| if v.is_finite() && v > 0.0 { v } else { 0.0 })
            .collect();
        DepthMap::new(w, h, values)
    }
}

/// RGB image with channels normalized to `[0, 1]`, stored interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Size(format!("image must be non-empty, got {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x3 image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Range("image values must be finite".into()));
        }
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let data = img.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        ImageBuffer::<Rgb<u8>, _>::from_raw(self.width as u32, self.height as u32, raw)
            .expect("buffer length matches dimensions")
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

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Luma with Rec. 601 weights.
    pub fn grayscale(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect()
    }

    /// Box-filter downsampling by an integer factor (ceil output size).
    pub fn downsample(&self, factor: usize) -> ImageRgb {
        assert!(factor >= 1);
        let ow = self.width.div_ceil(factor);
        let oh = self.height.div_ceil(factor);
        let mut data = Vec::with_capacity(ow * oh * 3);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = [0.0f32; 3];
                let mut n = 0.0f32;
                for y in oy * factor..((oy + 1) * factor).min(self.height) {
                    for x in ox * factor..((ox + 1) * factor).min(self.width) {
                        let p = self.pixel(x, y);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                        n += 1.0;
                    }
                }
                data.extend(acc.iter().map(|a| a / n));
            }
        }
        ImageRgb {
            width: ow,
            height: oh,
            data,
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<ImageRgb> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Size(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for y in y0..y0 + height {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        ImageRgb::new(width, height, data)
    }

    /// `(1, 3, H, W)` planar tensor.
    pub fn to_tensor(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, self.height, self.width, 3), device)?;
        Ok(t.permute((0, 3, 1, 2))?.contiguous()?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: ImageRgb,
    pub sparse: DepthMap,
    pub gt: DepthMap,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: ImageRgb, sparse: DepthMap, gt: DepthMap) -> Result<Self> {
        if image.dims() != gt.dims() || sparse.dims() != gt.dims() {
            return Err(Error::Shape(format!(
                "image {:?}, sparse {:?} and gt {:?} must share dimensions",
                image.dims(),
                sparse.dims(),
                gt.dims()
            )));
        }
        Ok(Self {
            id: id.into(),
            image,
            sparse,
            gt,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.gt.dims()
    }
}

/// Converts a 16-bit single-channel raster to metric depth (`raw * scale`).
pub fn decode_depth(raw: &DynamicImage, scale: f64) -> Result<DepthMap> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Range(format!("depth scale must be > 0, got {scale}")));
    }
    let (w, h) = (raw.width() as usize, raw.height() as usize);
    let values: Vec<f32> = match raw {
        DynamicImage::ImageLuma16(buf) => buf.as_raw().iter().map(|v| (*v as f64 * scale) as f32).collect(),
        DynamicImage::ImageLuma8(buf) => buf.as_raw().iter().map(|v| (*v as f64 * scale) as f32).collect(),
        other => {
            return Err(Error::Format(format!(
                "depth raster must be single-channel, got {:?}",
                other.color()
            )))
        }
    };
    DepthMap::new(w, h, values)
}

/// Quantizes depth to `round(value / scale)` in 16 bits; invalid pixels stay 0.
pub fn encode_depth(d: &DepthMap, scale: f64) -> Result<ImageBuffer<Luma<u16>, Vec<u16>>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Range(format!("depth scale must be > 0, got {scale}")));
    }
    let mut raw = Vec::with_capacity(d.values.len());
    for &v in &d.values {
        let q = (v as f64 / scale).round();
        if q > u16::MAX as f64 {
            return Err(Error::Range(format!(
                "depth {v} m exceeds the 16-bit range at scale {scale}"
            )));
        }
        raw.push(q as u16);
    }
    Ok(ImageBuffer::from_raw(d.width as u32, d.height as u32, raw).expect("buffer length matches dimensions"))
}

/// Halves a 640x480-class sample, center-crops 304x228 and clamps depth to 10 m.
///
/// Both depth maps are halved with validity-aware averaging, so a downsampled
/// pixel is invalid iff its 2x2 source window holds no measurement.
pub fn preprocess_nyu(s: &Sample) -> Result<Sample> {
    let (cw, ch) = NYU_CROP;
    let (w, h) = s.dims();
    if w < 2 * cw || h < 2 * ch {
        return Err(Error::Size(format!(
            "NYU preprocessing needs at least {}x{} input, got {w}x{h}",
            2 * cw,
            2 * ch
        )));
    }
    let image = s.image.downsample(2);
    let mut sparse = s.sparse.valid_mean_pool(2);
    let mut gt = s.gt.valid_mean_pool(2);
    let x0 = (image.width() - cw) / 2;
    let y0 = (image.height() - ch) / 2;
    let image = image.crop(x0, y0, cw, ch)?;
    sparse = sparse.crop(x0, y0, cw, ch)?;
    gt = gt.crop(x0, y0, cw, ch)?;
    sparse.clamp_max(NYU_MAX_DEPTH);
    gt.clamp_max(NYU_MAX_DEPTH);
    Sample::new(s.id.clone(), image, sparse, gt)
}

pub fn read_depth_file(path: &Path) -> Result<DepthMap> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    decode_depth(&img, MILLIMETERS)
}

pub fn write_depth_file(path: &Path, d: &DepthMap) -> Result<()> {
    let buf = encode_depth(d, MILLIMETERS)?;
    buf.save(path).map_err(|e| Error::image(path, e))
}

pub fn read_image_file(path: &Path) -> Result<ImageRgb> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?;
    Ok(ImageRgb::from_rgb8(&img.to_rgb8()))
}

pub fn write_image_file(path: &Path, img: &ImageRgb) -> Result<()> {
    img.to_rgb8().save(path).map_err(|e| Error::image(path, e))
}

/// Normalizes a depth map to an 8-bit grayscale preview (brighter = nearer, invalid = black).
pub fn depth_preview(d: &DepthMap) -> image::GrayImage {
    let max = d.max_value().max(f32::EPSILON);
    let raw = d
        .values
        .iter()
        .map(|&v| if v > 0.0 { (255.0 * (1.0 - 0.8 * v / max)).round() as u8 } else { 0 })
        .collect();
    ImageBuffer::from_raw(d.width as u32, d.height as u32, raw).expect("buffer length matches dimensions")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub depth: PathBuf,
    pub split: Split,
}

impl ManifestEntry {
    /// Sample id derived from the depth file stem.
    pub fn id(&self) -> String {
        self.depth
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.depth.display().to_string())
    }

    /// Loads the pair; the stored depth is the ground truth and `sparse` starts empty.
    pub fn load(&self) -> Result<Sample> {
        let image = read_image_file(&self.image)?;
        let gt = read_depth_file(&self.depth)?;
        let sparse = DepthMap::zeros(gt.width(), gt.height());
        Sample::new(self.id(), image, sparse, gt)
    }
}

/// Dataset manifest: UTF-8, one `image<TAB>depth<TAB>split` line per sample.
///
/// Relative paths resolve against the manifest's directory. Blank lines and
/// lines starting with `#` are skipped.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Format(format!(
                    "manifest line {}: expected 3 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let resolve = |p: &str| {
                let p = Path::new(p);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }
            };
            entries.push(ManifestEntry {
                image: resolve(fields[0]),
                depth: resolve(fields[1]),
                split: fields[2].parse()?,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::parse(&text, base)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut text = String::new();
        for e in &self.entries {
            let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
            text.push_str(&format!("{}\t{}\t{}\n", rel(&e.image), rel(&e.depth), e.split));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::GrayImage;
    use proptest::prelude::*;

    fn luma16(vals: &[u16], w: u32, h: u32) -> DynamicImage {
        DynamicImage::ImageLuma16(ImageBuffer::from_raw(w, h, vals.to_vec()).unwrap())
    }

    #[test]
    fn decode_scales_raw_units() {
        let d = decode_depth(&luma16(&[1000, 0, 12345], 3, 1), 0.001).unwrap();
        assert_eq!(d.get(0, 0), 1.0);
        assert_eq!(d.get(1, 0), 0.0);
        assert!(!d.is_valid(1, 0));
        assert!((d.get(2, 0) - 12.345).abs() < 1e-6);
    }

    #[test]
    fn decode_rejects_multichannel() {
        let rgb = DynamicImage::ImageRgb8(RgbImage::new(2, 2));
        assert!(matches!(decode_depth(&rgb, 0.001), Err(Error::Format(_))));
        let gray = DynamicImage::ImageLuma8(GrayImage::new(2, 2));
        assert!(decode_depth(&gray, 0.001).is_ok());
        assert!(matches!(decode_depth(&gray, 0.0), Err(Error::Range(_))));
    }

    #[test]
    fn encode_quantizes_and_checks_range() {
        let d = DepthMap::new(3, 1, vec![1.0, 0.0, 9.9994]).unwrap();
        let raw = encode_depth(&d, 0.001).unwrap();
        assert_eq!(raw.as_raw()[0], 1000);
        assert_eq!(raw.as_raw()[1], 0);
        let q = raw.as_raw()[2];
        assert!(q == 9999 || q == 10000);
        assert!((q as f64 * 0.001 - 9.9994f32 as f64).abs() <= 0.0005 + 1e-9);

        let big = DepthMap::new(1, 1, vec![70.0]).unwrap();
        assert!(matches!(encode_depth(&big, 0.001), Err(Error::Range(_))));
        assert!(encode_depth(&big, 0.002).is_ok());
    }

    #[test]
    fn depth_map_rejects_bad_values() {
        assert!(DepthMap::new(2, 1, vec![1.0, -1.0]).is_err());
        assert!(DepthMap::new(2, 1, vec![1.0, f32::NAN]).is_err());
        assert!(DepthMap::new(0, 1, vec![]).is_err());
        assert!(DepthMap::new(2, 2, vec![1.0]).is_err());
    }

    fn nyu_like(w: usize, h: usize) -> Sample {
        let image = ImageRgb::from_fn(w, h, |x, y| [x as f32 / w as f32, y as f32 / h as f32, 0.5]).unwrap();
        let gt = DepthMap::from_fn(w, h, |x, y| if (x / 4 + y / 4) % 7 == 0 { 0.0 } else { 1.0 + (x + y) as f32 * 0.01 })
            .unwrap();
        Sample::new("nyu", image, DepthMap::zeros(w, h), gt).unwrap()
    }

    #[test]
    fn nyu_preprocessing_sizes_and_clamp() {
        let out = preprocess_nyu(&nyu_like(640, 480)).unwrap();
        assert_eq!(out.dims(), (304, 228));
        assert_eq!(out.image.dims(), (304, 228));
        assert_eq!(out.sparse.valid_count(), 0);
        assert!(out.gt.values().iter().all(|v| *v <= NYU_MAX_DEPTH));

        let mut s = nyu_like(640, 480);
        s.gt.set(16 + 100, 12 + 100, 12.0);
        s.gt.set(17 + 100, 12 + 100, 12.0);
        s.gt.set(16 + 100, 13 + 100, 12.0);
        s.gt.set(17 + 100, 13 + 100, 12.0);
        let out = preprocess_nyu(&s).unwrap();
        // source window (116..118, 112..114) lands at (58, 56) after halving, minus the (8, 6) crop offset.
        assert_eq!(out.gt.get(58 - 8, 56 - 6), 10.0);

        assert!(matches!(preprocess_nyu(&nyu_like(320, 240)), Err(Error::Size(_))));
    }

    #[test]
    fn nyu_preprocessing_propagates_invalid_windows() {
        let mut s = nyu_like(640, 480);
        for (x, y) in [(200, 100), (201, 100), (200, 101), (201, 101)] {
            s.gt.set(x, y, 0.0);
        }
        let out = preprocess_nyu(&s).unwrap();
        assert!(!out.gt.is_valid(100 - 8, 50 - 6));
        s.gt.set(201, 101, 3.0);
        let out = preprocess_nyu(&s).unwrap();
        assert_eq!(out.gt.get(100 - 8, 50 - 6), 3.0);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let text = "# comment\nrgb/a.png\tdepth/a.png\ttrain\n/abs/b.png\tdepth/b.png\tval\n\n";
        let m = Manifest::parse(text, dir.path()).unwrap();
        assert_eq!(m.entries.len(), 2);
        assert_eq!(m.entries[0].image, dir.path().join("rgb/a.png"));
        assert_eq!(m.entries[1].image, PathBuf::from("/abs/b.png"));
        assert_eq!(m.entries[1].split, Split::Val);
        assert_eq!(m.entries[0].id(), "a");
        let path = dir.path().join("manifest.tsv");
        m.write(&path).unwrap();
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back.entries, m.entries);
        assert!(Manifest::parse("a.png\tb.png\n", dir.path()).is_err());
        assert!(Manifest::parse("a.png\tb.png\tholdout\n", dir.path()).is_err());
    }

    #[test]
    fn depth_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let d = DepthMap::from_fn(5, 4, |x, y| if x == y { 0.0 } else { 0.5 + x as f32 * 1.234 + y as f32 }).unwrap();
        write_depth_file(&path, &d).unwrap();
        let back = read_depth_file(&path).unwrap();
        for (a, b) in d.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 0.0005 + 1e-6);
            assert_eq!(*a == 0.0, *b == 0.0);
        }
    }

    proptest! {
        #[test]
        fn encode_decode_within_half_quantum(vals in proptest::collection::vec(prop_oneof![Just(0.0f32), 0.001f32..65.0], 12)) {
            let d = DepthMap::new(4, 3, vals).unwrap();
            let back = decode_depth(&DynamicImage::ImageLuma16(encode_depth(&d, MILLIMETERS).unwrap()), MILLIMETERS).unwrap();
            for (a, b) in d.values().iter().zip(back.values()) {
                prop_assert!((*a as f64 - *b as f64).abs() <= MILLIMETERS / 2.0 + 1e-5);
                if *a == 0.0 { prop_assert_eq!(*b, 0.0); }
                prop_assert!(*b >= 0.0 && b.is_finite());
            }
        }

        #[test]
        fn preprocess_always_304x228(w in 608usize..700, h in 456usize..520) {
            let out = preprocess_nyu(&nyu_like(w, h)).unwrap();
            prop_assert_eq!(out.dims(), NYU_CROP);
            prop_assert!(out.gt.values().iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}

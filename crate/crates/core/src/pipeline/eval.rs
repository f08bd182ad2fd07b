//! Evaluation over a manifest and single-image completion.

use std::path::{Path, PathBuf};

use candle::Device;

use crate::depthio::{self, DepthMap, Manifest, Sample};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::patterns::PatternSpec;
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::config::Preprocess;
use crate::pipeline::model::SparseDc;

pub fn preprocess(sample: &Sample, mode: Preprocess) -> Result<Sample> {
    match mode {
        Preprocess::None => Ok(sample.clone()),
        Preprocess::Nyu => depthio::preprocess_nyu(sample),
    }
}

/// Loads every manifest entry and applies `mode`.
pub fn load_samples<'a>(entries: impl IntoIterator<Item = &'a depthio::ManifestEntry>, mode: Preprocess) -> Result<Vec<Sample>> {
    entries.into_iter().map(|e| preprocess(&e.load()?, mode)).collect()
}

/// Sparsifies each ground truth with `pattern` (stream derived per sample id),
/// completes it and pools the metrics over all valid ground-truth pixels.
pub fn evaluate_samples(model: &SparseDc, samples: &[Sample], pattern: &PatternSpec) -> Result<MetricsReport> {
    let reports = samples
        .iter()
        .map(|s| {
            let sparse = pattern.apply_for(&s.gt, &s.image, &s.id)?;
            let pred = model.complete(&s.image, &sparse)?;
            metrics::compute_metrics(&pred, &s.gt)
        })
        .collect::<Result<Vec<_>>>()?;
    metrics::aggregate(&reports)
}

pub fn evaluate(checkpoint: &Path, manifest_path: &Path, pattern: &PatternSpec) -> Result<MetricsReport> {
    let ckpt = Checkpoint::load(checkpoint, &Device::Cpu)?;
    let model = ckpt.build_model(&Device::Cpu)?;
    let manifest = Manifest::load(manifest_path)?;
    if manifest.entries.is_empty() {
        return Err(Error::EmptyInput(format!("manifest {} has no entries", manifest_path.display())));
    }
    let samples = load_samples(&manifest.entries, ckpt.model.preprocess)?;
    evaluate_samples(&model, &samples, pattern)
}

/// Files written by [`complete_files`].
#[derive(Debug, Clone)]
pub struct Completed {
    pub depth: DepthMap,
    pub written: Vec<PathBuf>,
}

/// Completes one image/sparse pair read from disk and writes a 16-bit depth PNG.
/// With `dump_weights`, also writes the per-scale `1 - u_l` and `1 - u_g` maps
/// next to `out` as `<stem>_local_s<level>.png` and `<stem>_global_s<level>.png`.
pub fn complete_files(checkpoint: &Path, image: &Path, sparse: &Path, out: &Path, dump_weights: bool) -> Result<Completed> {
    let ckpt = Checkpoint::load(checkpoint, &Device::Cpu)?;
    let model = ckpt.build_model(&Device::Cpu)?;
    let rgb = depthio::read_image_file(image)?;
    let s = depthio::read_depth_file(sparse)?;
    let sample = preprocess(&Sample::new("input", rgb, s.clone(), s)?, ckpt.model.preprocess)?;
    let pred = model.forward_maps(&sample.image, &sample.sparse)?;
    let depth = model.to_depth_map(&pred.refined)?;
    depthio::write_depth_file(out, &depth)?;
    let mut written = vec![out.to_path_buf()];
    if dump_weights {
        let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "depth".into());
        let dir = out.parent().unwrap_or_else(|| Path::new("."));
        for scale in &pred.scales {
            for (branch, map) in [("local", scale.local_uncertainty_map(0)?), ("global", scale.global_uncertainty_map(0)?)] {
                let path = dir.join(format!("{stem}_{branch}_s{}.png", scale.level));
                map.confidence_image().save(&path).map_err(|e| Error::image(&path, e))?;
                written.push(path);
            }
        }
    }
    Ok(Completed { depth, written })
}

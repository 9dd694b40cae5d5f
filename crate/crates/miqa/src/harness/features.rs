//! Feature-map visualization: per-stage fused maps as channel-mean
//! heatmaps, fused vectors as 1-D strip images.

use std::path::{Path, PathBuf};

use candle_core::Tensor;

use crate::error::Result;
use crate::raster::Raster;

use super::checkpoint::LoadedModel;
use super::data::load_input;

const STRIP_HEIGHT: usize = 32;

fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        values.iter().map(|v| (v - min) / (max - min)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// Channel-mean heatmap of a (1, C, H, W) tensor, nearest-upsampled to
/// `target` pixels per side.
fn heatmap(map: &Tensor, target: usize) -> Result<Raster> {
    let (_, _, h, w) = map.dims4()?;
    let mean = map.mean(1)?.squeeze(0)?.to_dtype(candle_core::DType::F64)?;
    let values = min_max_normalize(&mean.flatten_all()?.to_vec1::<f64>()?);
    let mut out = Raster::constant(1, target, target, 0.0)?;
    for y in 0..target {
        for x in 0..target {
            let sy = y * h / target;
            let sx = x * w / target;
            out.set(0, y, x, values[sy * w + sx]);
        }
    }
    Ok(out)
}

/// Render a (1, L) vector as an L-wide intensity strip.
fn strip(vector: &Tensor) -> Result<Raster> {
    let values = min_max_normalize(
        &vector
            .to_dtype(candle_core::DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?,
    );
    let width = values.len();
    let mut out = Raster::constant(1, STRIP_HEIGHT, width, 0.0)?;
    for (x, &v) in values.iter().enumerate() {
        for y in 0..STRIP_HEIGHT {
            out.set(0, y, x, v);
        }
    }
    Ok(out)
}

/// Export F{i}.png per fused stage plus FW.png / FS.png into `out_dir`,
/// returning the written paths.
pub fn export_feature_maps(loaded: &LoadedModel, image_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let cfg = &loaded.config.model;
    let input = load_input(
        image_path,
        cfg.input_resolution,
        cfg.normalization.as_ref(),
        cfg.precision.dtype(),
        &candle_core::Device::Cpu,
    )?
    .unsqueeze(0)?;
    let detail = loaded.model.forward_detail(&input, false)?;

    let mut written = Vec::new();
    for (stage, tensor) in &detail.fused_stages {
        let path = out_dir.join(format!("F{stage}.png"));
        heatmap(tensor, cfg.input_resolution)?.save_png(&path)?;
        written.push(path);
    }
    let fw_path = out_dir.join("FW.png");
    strip(&detail.f_w)?.save_png(&fw_path)?;
    written.push(fw_path);
    let fs_path = out_dir.join("FS.png");
    strip(&detail.f_s)?.save_png(&fs_path)?;
    written.push(fs_path);
    Ok(written)
}

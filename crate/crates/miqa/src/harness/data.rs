//! Image ingestion for the model: decode, channel replication, resize,
//! normalization, tensor conversion.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::Result;
use crate::model::Normalization;
use crate::raster::Raster;

/// Load one image as a normalized (3, res, res) tensor.
pub fn load_input(
    path: &Path,
    resolution: usize,
    normalization: Option<&Normalization>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let raster = Raster::load(path)?
        .to_rgb()
        .resize_bilinear(resolution, resolution);
    let tensor = raster.to_tensor(dtype, device)?;
    normalize(&tensor, normalization, dtype, device)
}

pub fn normalize(
    tensor: &Tensor,
    normalization: Option<&Normalization>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    match normalization {
        None => Ok(tensor.clone()),
        Some(n) => {
            let mean = Tensor::from_vec(n.mean.to_vec(), (3, 1, 1), device)?.to_dtype(dtype)?;
            let std = Tensor::from_vec(n.std.to_vec(), (3, 1, 1), device)?.to_dtype(dtype)?;
            Ok(tensor.broadcast_sub(&mean)?.broadcast_div(&std)?)
        }
    }
}

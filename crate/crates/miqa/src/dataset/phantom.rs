//! Synthetic pristine slices for desk-scale runs: smooth anatomy-like
//! blobs over a soft vignette, deterministic per (seed).

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::Result;
use crate::raster::Raster;

use super::distort::derive_seed;

/// One grayscale phantom slice of the given square size.
pub fn phantom_slice(size: usize, seed: u64) -> Raster {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n_blobs = rng.random_range(3..=6);
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            (
                rng.random_range(0.15..0.85) * size as f64, // cy
                rng.random_range(0.15..0.85) * size as f64, // cx
                rng.random_range(0.06..0.22) * size as f64, // radius
                rng.random_range(0.25..0.75),               // intensity
            )
        })
        .collect();
    let (fy, fx) = (rng.random_range(2.0..5.0), rng.random_range(2.0..5.0));
    let texture_amp = rng.random_range(0.02..0.05);
    let center = (size as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dy = (y as f64 - center) / size as f64;
            let dx = (x as f64 - center) / size as f64;
            // soft circular field-of-view falloff
            let vignette = (1.0 - 2.2 * (dy * dy + dx * dx)).max(0.0);
            let mut v = 0.12 * vignette;
            for &(cy, cx, r, a) in &blobs {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                v += a * (-d2 / (2.0 * r * r)).exp();
            }
            v += texture_amp
                * ((y as f64 * fy * std::f64::consts::TAU / size as f64).sin()
                    * (x as f64 * fx * std::f64::consts::TAU / size as f64).cos());
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Raster::new(1, size, size, data).expect("phantom dimensions are consistent")
}

/// Write `patients x slices` pristine phantoms named `p{P:02}_s{S:02}.png`.
pub fn write_phantom_set(
    dir: &Path,
    patients: usize,
    slices_per_patient: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for p in 1..=patients {
        for s in 1..=slices_per_patient {
            let name = format!("p{p:02}_s{s:02}.png");
            let slice_seed = derive_seed(seed, &["phantom", &name]);
            let img = phantom_slice(size, slice_seed);
            let path = dir.join(&name);
            img.save_png(&path)?;
            paths.push(path);
        }
    }
    Ok(paths)
}

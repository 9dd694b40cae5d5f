//! Planar floating-point raster images in [0, 1].
//!
//! Distortion synthesis and model ingestion both work on this type; 8- and
//! 16-bit PNGs are accepted on read, final rasters are stored as 8-bit PNG.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::Config(format!("raster must have 1 or 3 channels, got {channels}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape("Raster::new", channels * height * width, data.len()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn from_dynamic(img: &DynamicImage) -> Result<Self> {
        use DynamicImage::*;
        match img {
            ImageLuma8(_) | ImageLumaA8(_) => {
                let g = img.to_luma8();
                let (w, h) = (g.width() as usize, g.height() as usize);
                let data = g.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
                Self::new(1, h, w, data)
            }
            ImageLuma16(_) | ImageLumaA16(_) => {
                let g = img.to_luma16();
                let (w, h) = (g.width() as usize, g.height() as usize);
                let data = g.pixels().map(|p| p.0[0] as f64 / 65535.0).collect();
                Self::new(1, h, w, data)
            }
            _ => {
                let rgb = img.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let mut data = vec![0.0; 3 * h * w];
                for (x, y, p) in rgb.enumerate_pixels() {
                    for c in 0..3 {
                        data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
                    }
                }
                Self::new(3, h, w, data)
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_dynamic(&img)
    }

    fn quantize(v: f64) -> u8 {
        (v.clamp(0.0, 1.0) * 255.0).round() as u8
    }

    pub fn to_dynamic(&self) -> DynamicImage {
        let (w, h) = (self.width as u32, self.height as u32);
        if self.channels == 1 {
            let buf = ImageBuffer::from_fn(w, h, |x, y| {
                Luma([Self::quantize(self.get(0, y as usize, x as usize))])
            });
            DynamicImage::ImageLuma8(buf)
        } else {
            let buf = ImageBuffer::from_fn(w, h, |x, y| {
                Rgb([
                    Self::quantize(self.get(0, y as usize, x as usize)),
                    Self::quantize(self.get(1, y as usize, x as usize)),
                    Self::quantize(self.get(2, y as usize, x as usize)),
                ])
            });
            DynamicImage::ImageRgb8(buf)
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_dynamic().save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Replicate a single channel to three; three-channel rasters pass through.
    pub fn to_rgb(&self) -> Raster {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(3 * self.height * self.width);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        Raster {
            channels: 3,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Bilinear resize with edge clamping.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Raster {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let mut data = vec![0.0; self.channels * height * width];
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        for c in 0..self.channels {
            for y in 0..height {
                let fy = ((y as f64 + 0.5) * sy - 0.5).max(0.0);
                let y0 = (fy as usize).min(self.height - 1);
                let y1 = (y0 + 1).min(self.height - 1);
                let wy = fy - y0 as f64;
                for x in 0..width {
                    let fx = ((x as f64 + 0.5) * sx - 0.5).max(0.0);
                    let x0 = (fx as usize).min(self.width - 1);
                    let x1 = (x0 + 1).min(self.width - 1);
                    let wx = fx - x0 as f64;
                    let top = self.get(c, y0, x0) * (1.0 - wx) + self.get(c, y0, x1) * wx;
                    let bottom = self.get(c, y1, x0) * (1.0 - wx) + self.get(c, y1, x1) * wx;
                    data[(c * height + y) * width + x] = top * (1.0 - wy) + bottom * wy;
                }
            }
        }
        Raster {
            channels: self.channels,
            height,
            width,
            data,
        }
    }

    /// (C, H, W) tensor on the given device.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_vec(self.data.clone(), (self.channels, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }
}

/// Peak signal-to-noise ratio in dB between two equally shaped rasters on
/// the unit scale; +inf for identical inputs.
pub fn psnr(a: &Raster, b: &Raster) -> Result<f64> {
    if a.channels != b.channels || a.height != b.height || a.width != b.width {
        return Err(Error::shape(
            "psnr",
            format!("{}x{}x{}", a.channels, a.height, a.width),
            format!("{}x{}x{}", b.channels, b.height, b.width),
        ));
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

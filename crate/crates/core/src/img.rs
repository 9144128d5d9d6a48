//! Float image types shared across rendering, mapping, and localization,
//! plus PNG and raw-f32 file exchange.
//!
//! Color images hold RGB in `[0, 1]`; depth images hold scene units with 0
//! marking invalid pixels. The raw-f32 format is little-endian: magic
//! `F32I`, u32 width, u32 height, then `width*height` f32 values row-major.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const F32_MAGIC: &[u8; 4] = b"F32I";

/// Row-major RGB image with f64 channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: u32,
    pub height: u32,
    data: Vec<[f64; 3]>,
}

impl ImageRgb {
    pub fn new(width: u32, height: u32) -> Self {
        ImageRgb {
            width,
            height,
            data: vec![[0.0; 3]; (width * height) as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [f64; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img[(x, y)] = f(x, y);
            }
        }
        img
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    pub fn same_size(&self, other: &ImageRgb) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Luma on the `[0, 255]` scale: `0.299 R + 0.587 G + 0.114 B`.
    pub fn to_grayscale(&self) -> ImageGray {
        let data = self
            .data
            .iter()
            .map(|[r, g, b]| 255.0 * (0.299 * r + 0.587 * g + 0.114 * b))
            .collect();
        ImageGray {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut out = image::RgbImage::new(self.width, self.height);
        for (i, px) in self.data.iter().enumerate() {
            let x = i as u32 % self.width;
            let y = i as u32 / self.width;
            out.put_pixel(
                x,
                y,
                image::Rgb(px.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)),
            );
        }
        out.save(path).map_err(Error::Image)
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(Error::Image)?.to_rgb8();
        let (width, height) = img.dimensions();
        let data = img
            .pixels()
            .map(|p| [0, 1, 2].map(|c| p.0[c] as f64 / 255.0))
            .collect();
        Ok(ImageRgb {
            width,
            height,
            data,
        })
    }
}

impl std::ops::Index<(u32, u32)> for ImageRgb {
    type Output = [f64; 3];
    fn index(&self, (x, y): (u32, u32)) -> &[f64; 3] {
        &self.data[(y * self.width + x) as usize]
    }
}

impl std::ops::IndexMut<(u32, u32)> for ImageRgb {
    fn index_mut(&mut self, (x, y): (u32, u32)) -> &mut [f64; 3] {
        &mut self.data[(y * self.width + x) as usize]
    }
}

/// Row-major single-channel f64 image (depth, occupancy, gradients, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGray {
    pub width: u32,
    pub height: u32,
    data: Vec<f64>,
}

impl ImageGray {
    pub fn new(width: u32, height: u32) -> Self {
        ImageGray {
            width,
            height,
            data: vec![0.0; (width * height) as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> f64) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img[(x, y)] = f(x, y);
            }
        }
        img
    }

    pub fn from_vec(width: u32, height: u32, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), (width * height) as usize);
        ImageGray {
            width,
            height,
            data,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_size(&self, other: &ImageGray) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Writes as raw little-endian f32 with the `F32I` header.
    pub fn save_f32(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(12 + self.data.len() * 4);
        bytes.extend_from_slice(F32_MAGIC);
        bytes.extend_from_slice(&self.width.to_le_bytes());
        bytes.extend_from_slice(&self.height.to_le_bytes());
        for v in &self.data {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_f32(path: &Path) -> Result<Self> {
        let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[0..4] != F32_MAGIC {
            return Err(Error::malformed("f32 image", "missing F32I header"));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let expected = 12 + (width as usize) * (height as usize) * 4;
        if bytes.len() != expected {
            return Err(Error::malformed(
                "f32 image",
                format!("expected {expected} bytes for {width}x{height}, got {}", bytes.len()),
            ));
        }
        let data = bytes[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(ImageGray {
            width,
            height,
            data,
        })
    }
}

impl std::ops::Index<(u32, u32)> for ImageGray {
    type Output = f64;
    fn index(&self, (x, y): (u32, u32)) -> &f64 {
        &self.data[(y * self.width + x) as usize]
    }
}

impl std::ops::IndexMut<(u32, u32)> for ImageGray {
    fn index_mut(&mut self, (x, y): (u32, u32)) -> &mut f64 {
        &mut self.data[(y * self.width + x) as usize]
    }
}

/// A boolean image, used for pixel-selection masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    pub width: u32,
    pub height: u32,
    data: Vec<bool>,
}

impl PixelMask {
    pub fn new(width: u32, height: u32) -> Self {
        PixelMask {
            width,
            height,
            data: vec![false; (width * height) as usize],
        }
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        PixelMask {
            width,
            height,
            data: vec![value; (width * height) as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut mask = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                mask[(x, y)] = f(x, y);
            }
        }
        mask
    }

    pub fn values(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn same_size_as(&self, width: u32, height: u32) -> bool {
        self.width == width && self.height == height
    }
}

impl std::ops::Index<(u32, u32)> for PixelMask {
    type Output = bool;
    fn index(&self, (x, y): (u32, u32)) -> &bool {
        &self.data[(y * self.width + x) as usize]
    }
}

impl std::ops::IndexMut<(u32, u32)> for PixelMask {
    fn index_mut(&mut self, (x, y): (u32, u32)) -> &mut bool {
        &mut self.data[(y * self.width + x) as usize]
    }
}

/// Peak signal-to-noise ratio in dB between two color images (peak 1.0).
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> f64 {
    assert!(a.same_size(b), "psnr requires matching dimensions");
    let n = (a.pixels().len() * 3) as f64;
    let mse: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(pa, pb)| {
            (0..3)
                .map(|c| {
                    let d = pa[c] - pb[c];
                    d * d
                })
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    if mse < 1e-12 {
        return 120.0;
    }
    10.0 * (1.0 / mse).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_weights() {
        let img = ImageRgb::from_fn(2, 1, |x, _| if x == 0 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 1.0] });
        let gray = img.to_grayscale();
        assert!((gray[(0, 0)] - 0.299 * 255.0).abs() < 1e-12);
        assert!((gray[(1, 0)] - (0.587 + 0.114) * 255.0).abs() < 1e-12);
    }

    #[test]
    fn f32_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.f32");
        let img = ImageGray::from_fn(5, 3, |x, y| (x as f64 + 10.0 * y as f64) / 7.0);
        img.save_f32(&path).unwrap();
        let back = ImageGray::load_f32(&path).unwrap();
        assert_eq!(back.width, 5);
        assert_eq!(back.height, 3);
        for (a, b) in img.values().iter().zip(back.values()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn f32_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.f32");
        let img = ImageGray::new(4, 4);
        img.save_f32(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(ImageGray::load_f32(&path).is_err());
    }

    #[test]
    fn png_round_trip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = ImageRgb::from_fn(8, 6, |x, y| [x as f64 / 7.0, y as f64 / 5.0, 0.25]);
        img.save_png(&path).unwrap();
        let back = ImageRgb::load_png(&path).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            for c in 0..3 {
                assert!((a[c] - b[c]).abs() <= 0.5 / 255.0 + 1e-9);
            }
        }
    }

    #[test]
    fn psnr_identical_is_capped() {
        let img = ImageRgb::from_fn(4, 4, |x, y| [x as f64 / 3.0, y as f64 / 3.0, 0.5]);
        assert_eq!(psnr(&img, &img), 120.0);
        let mut other = img.clone();
        other.pixels_mut()[0] = [0.0, 0.0, 0.0];
        assert!(psnr(&img, &other) < 120.0);
    }
}

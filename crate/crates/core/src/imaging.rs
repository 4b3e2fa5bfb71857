//! Grayscale intensity grids and the resampling / file helpers shared by the
//! dataset, pipeline and service code.

use std::hash::{Hash, Hasher};
use std::path::Path;

use image::{imageops, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::geometry::BinaryMask;

/// Row-major grayscale image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "image buffer has {} values, expected {height}×{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_vec(
            height,
            width,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: f32) {
        self.data[row * self.width + col] = v;
    }

    /// Antialiased (triangle filter) resize.
    pub fn resized(&self, height: usize, width: usize) -> GrayImage {
        if (height, width) == self.shape() {
            return self.clone();
        }
        let buf: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone())
                .expect("buffer length matches dimensions");
        let out = imageops::resize(&buf, width as u32, height as u32, imageops::FilterType::Triangle);
        GrayImage {
            height,
            width,
            data: out.into_raw(),
        }
    }

    /// Stable content hash, used to key scripted backends by image.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.height.hash(&mut h);
        self.width.hash(&mut h);
        for v in &self.data {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn mean(&self) -> f32 {
        self.data.iter().sum::<f32>() / self.data.len().max(1) as f32
    }

    /// Decodes any supported 8-bit image, converting color to luma.
    pub fn decode(bytes: &[u8]) -> Result<GrayImage> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        let (w, h) = img.dimensions();
        GrayImage::from_u8(h as usize, w as usize, img.as_raw())
    }

    pub fn load(path: &Path) -> Result<GrayImage> {
        let bytes = std::fs::read(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        GrayImage::decode(&bytes).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        save_gray_png(path, self.height, self.width, &self.to_u8())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        encode_gray_png(self.height, self.width, &self.to_u8())
    }
}

pub fn save_gray_png(path: &Path, height: usize, width: usize, bytes: &[u8]) -> Result<()> {
    image::save_buffer_with_format(
        path,
        bytes,
        width as u32,
        height as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )?;
    Ok(())
}

pub fn encode_gray_png(height: usize, width: usize, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    image::write_buffer_with_format(
        &mut out,
        bytes,
        width as u32,
        height as u32,
        image::ExtendedColorType::L8,
        image::ImageFormat::Png,
    )?;
    Ok(out.into_inner())
}

/// Loads an 8-bit mask file, nonzero = foreground.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let err = |reason: String| Error::Ingestion {
        path: path.to_path_buf(),
        reason,
    };
    let img = image::open(path).map_err(|e| err(e.to_string()))?.to_luma8();
    let (w, h) = img.dimensions();
    BinaryMask::from_u8(h as usize, w as usize, img.as_raw())
}

pub fn decode_mask(bytes: &[u8]) -> Result<BinaryMask> {
    let img = image::load_from_memory(bytes)?.to_luma8();
    let (w, h) = img.dimensions();
    BinaryMask::from_u8(h as usize, w as usize, img.as_raw())
}

pub fn save_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    save_gray_png(path, mask.height(), mask.width(), &mask.to_u8())
}

/// Nearest-neighbour mask resize sampling each output pixel at its center.
pub fn resize_mask(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    if mask.shape() == (height, width) {
        return mask.clone();
    }
    let sy = mask.height() as f64 / height as f64;
    let sx = mask.width() as f64 / width as f64;
    let src_col: Vec<usize> = (0..width)
        .map(|c| (((c as f64 + 0.5) * sx) as usize).min(mask.width() - 1))
        .collect();
    BinaryMask::from_fn(height, width, |r, c| {
        let sr = (((r as f64 + 0.5) * sy) as usize).min(mask.height() - 1);
        mask.get(sr, src_col[c])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_keeps_constant_images_constant() {
        let img = GrayImage::from_fn(20, 30, |_, _| 0.4);
        let r = img.resized(64, 48);
        assert_eq!(r.shape(), (64, 48));
        assert!(r.data().iter().all(|v| (v - 0.4).abs() < 1e-5));
    }

    #[test]
    fn mask_resize_upscales_blocks_exactly() {
        let m = BinaryMask::from_fn(4, 4, |r, c| r == 1 && c >= 2);
        let big = resize_mask(&m, 8, 8);
        let expect = BinaryMask::from_fn(8, 8, |r, c| (2..4).contains(&r) && c >= 4);
        assert_eq!(big, expect);
    }

    #[test]
    fn png_roundtrip() {
        let img = GrayImage::from_fn(5, 7, |r, c| ((r * 7 + c) as f32) / 40.0);
        let bytes = img.encode_png().unwrap();
        let back = GrayImage::decode(&bytes).unwrap();
        assert_eq!(back.to_u8(), img.to_u8());
    }
}

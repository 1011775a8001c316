//! Image, manifest and feature-table IO.

mod image_file;
mod manifest;
mod table;

use std::fmt;

use crate::error::{Error, Result};

pub use image_file::{decode_image, encode_png, encode_ppm, load_image, save_image};
pub use manifest::{load_manifest, parse_manifest, CorpusManifest, Label, ManifestEntry};
pub use table::{
    load_feature_table, parse_feature_table, save_feature_table, write_feature_table, FeatureRow, FEATURE_TABLE_HEADER,
};

/// An 8-bit RGB raster, row-major with interleaved channels.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        let expected = width
            .checked_mul(height)
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| Error::invalid(format!("image dimensions {width}x{height} overflow")))?;
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "{width}x{height} RGB image needs {expected} samples, got {}",
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RgbImage { width, height, data }
    }

    /// Builds an image by evaluating `f(row, col, channel)` for every sample.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for row in 0..height {
            for col in 0..width {
                for c in 0..3 {
                    data.push(f(row, col, c));
                }
            }
        }
        RgbImage { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.data[(row * self.width + col) * 3 + channel]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, channel: usize, value: u8) {
        self.data[(row * self.width + col) * 3 + channel] = value;
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Copies the `width`x`height` window whose top-left corner is (`row`, `col`).
    pub fn crop(&self, row: usize, col: usize, width: usize, height: usize) -> Result<RgbImage> {
        if row + height > self.height || col + width > self.width {
            return Err(Error::invalid(format!(
                "crop {width}x{height}+{col}+{row} exceeds {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for r in row..row + height {
            let start = (r * self.width + col) * 3;
            data.extend_from_slice(&self.data[start..start + width * 3]);
        }
        Ok(RgbImage { width, height, data })
    }
}

impl fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RgbImage({}x{})", self.width, self.height)
    }
}

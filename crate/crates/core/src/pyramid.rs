//! Exact four-level resolution pyramid.
//!
//! Level 0 is the input image. Each coarser level is obtained by 2x2 average
//! pooling of the integer image above it; the averages are kept exactly as
//! integers in units of 1/4 ([`QuarterImage`]) and rounded half-up to produce
//! the next integer image. No floating point is involved anywhere.

use crate::corpus_io::RgbImage;
use crate::error::{Error, Result};

/// Number of integer levels x⁽⁰⁾..x⁽³⁾.
pub const LEVELS: usize = 4;

/// A 3-channel image whose samples are stored in quarter units: a stored
/// value `q` represents `q / 4`, so `q ∈ [0, 1020]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuarterImage {
    width: usize,
    height: usize,
    data: Vec<u16>,
}

impl QuarterImage {
    pub fn new(width: usize, height: usize, data: Vec<u16>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "{width}x{height} quarter image needs {} samples, got {}",
                width * height * 3,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|&&q| q > 1020) {
            return Err(Error::invalid(format!("quarter value {bad} exceeds 1020")));
        }
        Ok(QuarterImage { width, height, data })
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
    pub fn data(&self) -> &[u16] {
        &self.data
    }

    /// Stored value (in quarters) at `(row, col, channel)`.
    #[inline]
    pub fn get(&self, row: usize, col: usize, channel: usize) -> u16 {
        self.data[(row * self.width + col) * 3 + channel]
    }

    /// Real value at `(row, col, channel)`.
    #[inline]
    pub fn value(&self, row: usize, col: usize, channel: usize) -> f64 {
        f64::from(self.get(row, col, channel)) / 4.0
    }
}

/// Center crop to the largest multiple of 8 in each dimension.
pub fn crop_to_multiple_of_8(img: &RgbImage) -> Result<RgbImage> {
    let (w, h) = (img.width(), img.height());
    if w < 8 || h < 8 {
        return Err(Error::invalid(format!("image {w}x{h} is smaller than 8x8")));
    }
    let (cw, ch) = (w / 8 * 8, h / 8 * 8);
    if (cw, ch) == (w, h) {
        return Ok(img.clone());
    }
    img.crop((h - ch) / 2, (w - cw) / 2, cw, ch)
}

/// 2x2 block sums, i.e. block means in quarter units.
pub fn avgpool2x2(x: &RgbImage) -> Result<QuarterImage> {
    let (w, h) = (x.width(), x.height());
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::invalid(format!(
            "cannot 2x2-pool a {w}x{h} image (odd dimension)"
        )));
    }
    let (ow, oh) = (w / 2, h / 2);
    let mut data = Vec::with_capacity(ow * oh * 3);
    for i in 0..oh {
        for j in 0..ow {
            for c in 0..3 {
                let sum = u16::from(x.get(2 * i, 2 * j, c))
                    + u16::from(x.get(2 * i, 2 * j + 1, c))
                    + u16::from(x.get(2 * i + 1, 2 * j, c))
                    + u16::from(x.get(2 * i + 1, 2 * j + 1, c));
                data.push(sum);
            }
        }
    }
    Ok(QuarterImage {
        width: ow,
        height: oh,
        data,
    })
}

/// Round-half-up of a quarter value: `floor(q/4 + 1/2)`.
#[inline]
pub fn round_quarter_value(q: u16) -> u8 {
    // q ≤ 1020 so the result is ≤ 255
    ((q + 2) / 4) as u8
}

pub fn round_quarter(y: &QuarterImage) -> RgbImage {
    let data = y.data.iter().map(|&q| round_quarter_value(q)).collect();
    RgbImage::new(y.width, y.height, data).expect("dimensions carried over")
}

/// x⁽⁰⁾..x⁽³⁾ and the exact averages y⁽¹⁾..y⁽³⁾.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pyramid {
    x: [RgbImage; LEVELS],
    y: [QuarterImage; LEVELS - 1],
}

impl Pyramid {
    /// Integer image at `level` (0 = full resolution, 3 = the 1/8 prompt).
    pub fn x(&self, level: usize) -> &RgbImage {
        &self.x[level]
    }

    /// Exact average image at `level` ∈ 1..=3.
    pub fn y(&self, level: usize) -> &QuarterImage {
        assert!((1..LEVELS).contains(&level), "y is defined for levels 1..=3");
        &self.y[level - 1]
    }
}

/// Builds the pyramid of an image whose dimensions are multiples of 8.
pub fn build_pyramid(img: &RgbImage) -> Result<Pyramid> {
    let (w, h) = (img.width(), img.height());
    if w == 0 || h == 0 || w % 8 != 0 || h % 8 != 0 {
        return Err(Error::invalid(format!(
            "pyramid input {w}x{h} is not a multiple of 8 (crop first)"
        )));
    }
    let y1 = avgpool2x2(img)?;
    let x1 = round_quarter(&y1);
    let y2 = avgpool2x2(&x1)?;
    let x2 = round_quarter(&y2);
    let y3 = avgpool2x2(&x2)?;
    let x3 = round_quarter(&y3);
    Ok(Pyramid {
        x: [img.clone(), x1, x2, x3],
        y: [y1, y2, y3],
    })
}

/// Recovers the last pixel of a 2x2 group from the group sum (the quarter
/// value of its average) and the other three pixels. `None` means the inputs
/// are not consistent with any real 8-bit block.
#[inline]
pub fn fourth_pixel(y_quarters: u16, p1: u8, p2: u8, p3: u8) -> Option<u8> {
    let v = i32::from(y_quarters) - i32::from(p1) - i32::from(p2) - i32::from(p3);
    u8::try_from(v).ok()
}

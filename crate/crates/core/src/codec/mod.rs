//! Lossless compression driven by the context model.
//!
//! Stream layout (integers little-endian):
//!
//! | field            | size                                         |
//! |------------------|----------------------------------------------|
//! | magic `ZEDC`     | 4                                            |
//! | version          | u16                                          |
//! | width, height    | u32 each, multiples of 8                     |
//! | weights digest   | 32 (SHA-256 of the serialized weights)        |
//! | x⁽³⁾             | `(w/8)·(h/8)·3` raw bytes                     |
//! | rounding codes   | levels 3, 2, 1; 2 bits per sample of y⁽ˡ⁾, four per byte LSB first, each level padded to a byte |
//! | coded length     | u32                                          |
//! | coded pixels     | range-coded TL, TR, BL of every group, levels 2, 1, 0 |
//!
//! A rounding code is `q mod 4` of the quarter value `q = 4y`; it maps to the
//! correction `y − x ∈ {0, +¼, −½, −¼}`. Within a level, groups are coded in
//! raster order, positions TL, TR, BL, channels R, G, B. The bottom-right
//! pixel of each group is implied by `y` and is never transmitted.

mod range;

use rayon::prelude::*;

use crate::corpus_io::RgbImage;
use crate::error::{Error, Result};
use crate::mixture::{LogisticMixtureParams, MixtureRef, NUM_SYMBOLS};
use crate::net::model::{activate, group_base};
use crate::net::{head_row, trunk_features, ModelWeights, Position, CODED_LEVELS};
use crate::pyramid::{build_pyramid, fourth_pixel, QuarterImage, LEVELS};

pub use range::{RangeDecoder, RangeEncoder, TOTAL, TOTAL_BITS};

pub const CODEC_MAGIC: &[u8; 4] = b"ZEDC";
pub const CODEC_VERSION: u16 = 1;
/// Bytes before the x⁽³⁾ section.
pub const HEADER_LEN: usize = 4 + 2 + 4 + 4 + 32;
/// Largest accepted width or height.
pub const MAX_SIDE: u32 = 1 << 15;

/// Cumulative frequencies over the 256 symbols, totalling 2¹⁶, every symbol
/// with mass at least 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedCdf {
    cdf: [u32; NUM_SYMBOLS + 1],
}

impl QuantizedCdf {
    /// Each symbol gets `1 + ⌊p · (2¹⁶ − 256)⌋`; what is left over goes to
    /// the most probable symbol (the first one on ties).
    pub fn from_pmf(pmf: &[f64; NUM_SYMBOLS]) -> Self {
        let spread = f64::from(TOTAL - NUM_SYMBOLS as u32);
        let mut freq = [0u32; NUM_SYMBOLS];
        let mut argmax = 0;
        for (s, &p) in pmf.iter().enumerate() {
            let p = if p.is_finite() { p.clamp(0.0, 1.0) } else { 0.0 };
            freq[s] = 1 + (p * spread).floor() as u32;
            if p > pmf[argmax] {
                argmax = s;
            }
        }
        let sum: u32 = freq.iter().sum();
        if sum <= TOTAL {
            freq[argmax] += TOTAL - sum;
        } else {
            freq[argmax] -= sum - TOTAL;
        }
        let mut cdf = [0u32; NUM_SYMBOLS + 1];
        for s in 0..NUM_SYMBOLS {
            cdf[s + 1] = cdf[s] + freq[s];
        }
        QuantizedCdf { cdf }
    }

    pub fn cdf(&self) -> &[u32; NUM_SYMBOLS + 1] {
        &self.cdf
    }

    pub fn start(&self, symbol: u8) -> u32 {
        self.cdf[usize::from(symbol)]
    }

    pub fn freq(&self, symbol: u8) -> u32 {
        self.cdf[usize::from(symbol) + 1] - self.cdf[usize::from(symbol)]
    }

    /// The symbol whose interval contains `v < TOTAL`.
    pub fn symbol_for(&self, v: u32) -> u8 {
        (self.cdf.partition_point(|&c| c <= v) - 1) as u8
    }
}

pub fn quantize_cdf(params: &LogisticMixtureParams) -> QuantizedCdf {
    quantize_ref(&params.view())
}

fn quantize_ref(m: &MixtureRef<'_>) -> QuantizedCdf {
    let mut table = [0.0; NUM_SYMBOLS];
    m.pmf_table(&mut table);
    QuantizedCdf::from_pmf(&table)
}

/// A parsed compressed image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub width: u32,
    pub height: u32,
    pub digest: [u8; 32],
    /// x⁽³⁾, row-major RGB.
    pub base: Vec<u8>,
    /// Packed rounding codes of y⁽¹⁾, y⁽²⁾, y⁽³⁾ (index `level − 1`).
    pub rounding: [Vec<u8>; 3],
    pub coded: Vec<u8>,
}

fn samples_at(width: u32, height: u32, level: usize) -> usize {
    (width as usize >> level) * (height as usize >> level) * 3
}

fn pack_codes(y: &QuarterImage) -> Vec<u8> {
    let mut out = vec![0u8; y.data().len().div_ceil(4)];
    for (i, &q) in y.data().iter().enumerate() {
        out[i / 4] |= ((q & 3) as u8) << (2 * (i % 4));
    }
    out
}

fn code_at(packed: &[u8], i: usize) -> u8 {
    (packed[i / 4] >> (2 * (i % 4))) & 3
}

/// Quarter value from a rounded pixel and its 2-bit code.
fn restore_quarter(x: u8, code: u8) -> Option<u16> {
    let q = 4 * i32::from(x)
        + match code {
            0 => 0,
            1 => 1,
            2 => -2,
            _ => -1,
        };
    (0..=1020).contains(&q).then_some(q as u16)
}

impl Bitstream {
    /// Bits spent outside the range-coded section.
    pub fn side_info_bits(&self) -> u64 {
        8 * (self.to_bytes().len() - self.coded.len()) as u64
    }

    /// Bits of the range-coded pixel section.
    pub fn coded_bits(&self) -> u64 {
        8 * self.coded.len() as u64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.base.len() + self.coded.len() + 64);
        out.extend_from_slice(CODEC_MAGIC);
        out.extend_from_slice(&CODEC_VERSION.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.base);
        for level in (1..LEVELS).rev() {
            out.extend_from_slice(&self.rounding[level - 1]);
        }
        out.extend_from_slice(&(self.coded.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.coded);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| Error::Corrupt(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(corrupt("stream shorter than its header"));
        }
        if &bytes[..4] != CODEC_MAGIC {
            return Err(corrupt("bad magic (not a compressed image)"));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CODEC_VERSION {
            return Err(Error::Corrupt(format!("unsupported stream version {version}")));
        }
        let width = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
        let height = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes"));
        if width == 0 || height == 0 || width % 8 != 0 || height % 8 != 0 || width > MAX_SIDE || height > MAX_SIDE {
            return Err(Error::Corrupt(format!("invalid image size {width}x{height}")));
        }
        let digest: [u8; 32] = bytes[14..46].try_into().expect("32 bytes");
        let mut pos = HEADER_LEN;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos
                .checked_add(n)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| corrupt("stream is truncated"))?;
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        let base = take(samples_at(width, height, 3))?.to_vec();
        let mut rounding: [Vec<u8>; 3] = Default::default();
        for level in (1..LEVELS).rev() {
            let n = samples_at(width, height, level);
            let packed = take(n.div_ceil(4))?;
            if n % 4 != 0 && packed[packed.len() - 1] >> (2 * (n % 4)) != 0 {
                return Err(corrupt("non-zero padding in rounding codes"));
            }
            rounding[level - 1] = packed.to_vec();
        }
        let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        let coded = take(len)?.to_vec();
        if pos != bytes.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes after the stream",
                bytes.len() - pos
            )));
        }
        Ok(Bitstream {
            width,
            height,
            digest,
            base,
            rounding,
            coded,
        })
    }
}

const GROUP_CHUNK: usize = 1024;

fn known_from(x: &RgbImage, i: usize, j: usize, pos: Position) -> Vec<u8> {
    Position::ALL[..pos.index()]
        .iter()
        .flat_map(|p| {
            let (dr, dc) = p.offset();
            x.pixel(2 * i + dr, 2 * j + dc)
        })
        .collect()
}

/// Quantized distributions of the 9 coded samples of a group, ordered
/// TL R,G,B, TR R,G,B, BL R,G,B.
fn group_cdfs(
    weights: &ModelWeights,
    level: usize,
    y: &QuarterImage,
    feature: &[f32],
    x: &RgbImage,
    i: usize,
    j: usize,
) -> Vec<QuantizedCdf> {
    let k = weights.config().mixtures;
    let mut params = vec![0.0; 9 * k];
    let mut out = Vec::with_capacity(9);
    for pos in Position::ALL {
        let raw = head_row(weights, level, pos, feature, &known_from(x, i, j, pos));
        activate(&raw, group_base(y, i, j), k, &mut params);
        for c in 0..3 {
            let e = &params[c * 3 * k..(c + 1) * 3 * k];
            out.push(quantize_ref(&MixtureRef::new(&e[..k], &e[k..2 * k], &e[2 * k..])));
        }
    }
    out
}

/// Compresses an image whose sides are multiples of 8.
pub fn encode(image: &RgbImage, weights: &ModelWeights) -> Result<Bitstream> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 || w % 8 != 0 || h % 8 != 0 {
        return Err(Error::invalid(format!(
            "cannot compress a {w}x{h} image; sides must be multiples of 8"
        )));
    }
    if w > MAX_SIDE as usize || h > MAX_SIDE as usize {
        return Err(Error::invalid(format!(
            "image {w}x{h} exceeds the {MAX_SIDE} pixel limit"
        )));
    }
    let p = build_pyramid(image)?;
    let channels = weights.config().trunk_channels;
    let mut enc = RangeEncoder::new();
    for level in (0..CODED_LEVELS).rev() {
        let (y, x) = (p.y(level + 1), p.x(level));
        let features = trunk_features(weights, level, y)?;
        let groups = y.width() * y.height();
        for first in (0..groups).step_by(GROUP_CHUNK) {
            let chunk: Vec<Vec<QuantizedCdf>> = (first..(first + GROUP_CHUNK).min(groups))
                .into_par_iter()
                .map(|g| {
                    let (i, j) = (g / y.width(), g % y.width());
                    group_cdfs(weights, level, y, &features[g * channels..(g + 1) * channels], x, i, j)
                })
                .collect();
            for (offset, cdfs) in chunk.iter().enumerate() {
                let g = first + offset;
                let (i, j) = (g / y.width(), g % y.width());
                for pos in Position::ALL {
                    let (dr, dc) = pos.offset();
                    for c in 0..3 {
                        let s = x.get(2 * i + dr, 2 * j + dc, c);
                        let cdf = &cdfs[pos.index() * 3 + c];
                        enc.encode(cdf.start(s), cdf.freq(s));
                    }
                }
            }
        }
    }
    Ok(Bitstream {
        width: w as u32,
        height: h as u32,
        digest: weights.digest(),
        base: p.x(3).data().to_vec(),
        rounding: [pack_codes(p.y(1)), pack_codes(p.y(2)), pack_codes(p.y(3))],
        coded: enc.finish(),
    })
}

/// Reconstructs y⁽ˡ⁾ from x⁽ˡ⁾ and the level's rounding codes.
fn restore_level(x: &RgbImage, packed: &[u8], level: usize) -> Result<QuarterImage> {
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            restore_quarter(v, code_at(packed, i))
                .ok_or_else(|| Error::Corrupt(format!("rounding code out of range at level {level}")))
        })
        .collect::<Result<Vec<u16>>>()?;
    QuarterImage::new(x.width(), x.height(), data)
}

/// Decodes and also returns the reconstructed y⁽¹⁾, y⁽²⁾, y⁽³⁾.
pub(crate) fn decode_with_contexts(bs: &Bitstream, weights: &ModelWeights) -> Result<(RgbImage, Vec<QuarterImage>)> {
    let expected = weights.digest();
    if bs.digest != expected {
        return Err(Error::DigestMismatch {
            expected: hex(&bs.digest),
            actual: hex(&expected),
        });
    }
    let (w, h) = (bs.width as usize, bs.height as usize);
    let mut x = RgbImage::new(w >> 3, h >> 3, bs.base.clone())?;
    let channels = weights.config().trunk_channels;
    let mut dec = RangeDecoder::new(&bs.coded)?;
    let mut contexts = Vec::new();
    for level in (0..CODED_LEVELS).rev() {
        let y = restore_level(&x, &bs.rounding[level], level + 1)?;
        let features = trunk_features(weights, level, &y)?;
        let mut next = RgbImage::filled(2 * y.width(), 2 * y.height(), [0, 0, 0]);
        for i in 0..y.height() {
            for j in 0..y.width() {
                let g = i * y.width() + j;
                let feature = &features[g * channels..(g + 1) * channels];
                let k = weights.config().mixtures;
                let mut params = vec![0.0; 9 * k];
                for pos in Position::ALL {
                    let raw = head_row(weights, level, pos, feature, &known_from(&next, i, j, pos));
                    activate(&raw, group_base(&y, i, j), k, &mut params);
                    let (dr, dc) = pos.offset();
                    for c in 0..3 {
                        let e = &params[c * 3 * k..(c + 1) * 3 * k];
                        let cdf = quantize_ref(&MixtureRef::new(&e[..k], &e[k..2 * k], &e[2 * k..]));
                        let s = cdf.symbol_for(dec.peek()?);
                        dec.consume(cdf.start(s), cdf.freq(s))?;
                        next.set(2 * i + dr, 2 * j + dc, c, s);
                    }
                }
                for c in 0..3 {
                    let last = fourth_pixel(
                        y.get(i, j, c),
                        next.get(2 * i, 2 * j, c),
                        next.get(2 * i, 2 * j + 1, c),
                        next.get(2 * i + 1, 2 * j, c),
                    )
                    .ok_or_else(|| {
                        Error::Corrupt(format!("implied bottom-right pixel out of range at level {level}"))
                    })?;
                    next.set(2 * i + 1, 2 * j + 1, c, last);
                }
            }
        }
        contexts.push(y);
        x = next;
    }
    if !dec.is_exhausted() {
        return Err(Error::Corrupt(
            "range-coded section does not end where the pixels do".into(),
        ));
    }
    contexts.reverse();
    Ok((x, contexts))
}

/// Exact inverse of [`encode`]. The weights digest is checked before any
/// decoding work.
pub fn decode(bitstream: &Bitstream, weights: &ModelWeights) -> Result<RgbImage> {
    decode_with_contexts(bitstream, weights).map(|(img, _)| img)
}

/// Parses and decodes a serialized stream.
pub fn decode_bytes(bytes: &[u8], weights: &ModelWeights) -> Result<RgbImage> {
    decode(&Bitstream::from_bytes(bytes)?, weights)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::nll_entropy_maps;
    use crate::net::{init_weights, NetConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, w: usize, h: usize) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RgbImage::from_fn(w, h, |_, _, _| rng.random())
    }

    fn random_params(rng: &mut ChaCha8Rng) -> LogisticMixtureParams {
        let k = rng.random_range(1..=10);
        LogisticMixtureParams::new(
            (0..k).map(|_| rng.random_range(-5.0..5.0)).collect(),
            (0..k).map(|_| rng.random_range(-20.0..275.0)).collect(),
            (0..k).map(|_| rng.random_range(-4.0..5.0)).collect(),
        )
    }

    #[test]
    fn point_mass_quantization() {
        let cdf = quantize_cdf(&LogisticMixtureParams::single(100.0, 0.01));
        assert_eq!(cdf.freq(100), TOTAL - 255);
        assert!((0..=255u8).filter(|&s| s != 100).all(|s| cdf.freq(s) == 1));
    }

    #[test]
    fn quantized_tables_are_valid_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let p = random_params(&mut rng);
            let cdf = quantize_cdf(&p);
            assert_eq!(cdf.cdf()[0], 0);
            assert_eq!(cdf.cdf()[256], TOTAL);
            assert!(cdf.cdf().windows(2).all(|w| w[1] > w[0]));
            assert_eq!(cdf, quantize_cdf(&p));
            for v in [0, 1, TOTAL / 2, TOTAL - 1] {
                let s = cdf.symbol_for(v);
                assert!(cdf.start(s) <= v && v < cdf.start(s) + cdf.freq(s));
            }
        }
    }

    #[test]
    fn rounding_codes_invert_round_half_up() {
        for q in 0..=1020u16 {
            let x = crate::pyramid::round_quarter_value(q);
            assert_eq!(restore_quarter(x, (q & 3) as u8), Some(q));
        }
        assert_eq!(restore_quarter(255, 1), None);
        assert_eq!(restore_quarter(0, 2), None);
    }

    #[test]
    fn random_images_round_trip() {
        let w = init_weights(NetConfig::tiny(), 1).unwrap();
        for seed in 0..5 {
            let img = random_image(seed, 16 + 8 * (seed as usize % 2), 24);
            let bs = encode(&img, &w).unwrap();
            let bytes = bs.to_bytes();
            assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), bs);
            assert_eq!(decode_bytes(&bytes, &w).unwrap(), img);
        }
    }

    #[test]
    fn decoder_contexts_equal_encoder_contexts() {
        let w = init_weights(NetConfig::tiny(), 2).unwrap();
        let img = random_image(9, 32, 16);
        let (out, contexts) = decode_with_contexts(&encode(&img, &w).unwrap(), &w).unwrap();
        assert_eq!(out, img);
        let p = build_pyramid(&img).unwrap();
        for level in 1..=3 {
            assert_eq!(&contexts[level - 1], p.y(level));
        }
    }

    #[test]
    fn coded_bits_track_the_model_nll() {
        let w = init_weights(NetConfig::tiny(), 4).unwrap();
        let img = RgbImage::from_fn(32, 32, |r, c, ch| ((r * 7 + c * 3) as u8).wrapping_add(ch as u8 * 50));
        let bs = encode(&img, &w).unwrap();
        let maps = nll_entropy_maps(&w, &build_pyramid(&img).unwrap()).unwrap();
        let nll_bits: f64 = maps.iter().flat_map(|m| &m.nll).sum::<f64>() / std::f64::consts::LN_2;
        let bits = bs.coded_bits() as f64;
        assert!(bits <= 1.03 * nll_bits + 128.0, "{bits} vs {nll_bits}");
        assert!(bits >= 0.97 * nll_bits, "{bits} vs {nll_bits}");
    }

    #[test]
    fn digest_mismatch_is_reported_first() {
        let w = init_weights(NetConfig::tiny(), 1).unwrap();
        let other = init_weights(NetConfig::tiny(), 2).unwrap();
        let bs = encode(&random_image(1, 16, 16), &w).unwrap();
        assert!(matches!(decode(&bs, &other), Err(Error::DigestMismatch { .. })));
    }

    #[test]
    fn bit_flips_never_panic() {
        let w = init_weights(NetConfig::tiny(), 1).unwrap();
        let img = random_image(5, 8, 8);
        let bytes = encode(&img, &w).unwrap().to_bytes();
        for bit in 0..bytes.len() * 8 {
            let mut bad = bytes.clone();
            bad[bit / 8] ^= 1 << (bit % 8);
            if let Ok(out) = decode_bytes(&bad, &w) {
                assert_ne!(out, img, "flip of bit {bit} went unnoticed");
            }
        }
    }

    #[test]
    fn malformed_headers() {
        let w = init_weights(NetConfig::tiny(), 1).unwrap();
        let bytes = encode(&random_image(1, 8, 8), &w).unwrap().to_bytes();
        assert!(Bitstream::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Bitstream::from_bytes(&extra).is_err());
        let mut odd = bytes.clone();
        odd[6] = 9;
        assert!(Bitstream::from_bytes(&odd).is_err());
        assert!(encode(&random_image(1, 12, 8), &w).is_err());
    }
}

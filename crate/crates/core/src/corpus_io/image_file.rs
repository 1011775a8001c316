use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat};

use super::RgbImage;
use crate::error::{Error, Result};

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Reads a PNG (8-bit gray, gray+alpha, RGB, RGBA or palette) or binary PPM
/// (P6, maxval 255). Gray is replicated to three channels and alpha dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

/// Decodes an in-memory PNG or PPM. `origin` only labels errors.
pub fn decode_image(bytes: &[u8], origin: &Path) -> Result<RgbImage> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes, origin)
    } else if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes, origin)
    } else {
        Err(Error::format(
            origin,
            "unsupported image format (expected PNG or binary PPM P6)",
        ))
    }
}

fn decode_png(bytes: &[u8], origin: &Path) -> Result<RgbImage> {
    let decoded = image::ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png)
        .decode()
        .map_err(|e| Error::format(origin, format!("PNG decode failed: {e}")))?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let data = match decoded {
        DynamicImage::ImageRgb8(buf) => buf.into_raw(),
        DynamicImage::ImageRgba8(buf) => buf
            .into_raw()
            .chunks_exact(4)
            .flat_map(|px| [px[0], px[1], px[2]])
            .collect(),
        DynamicImage::ImageLuma8(buf) => buf.into_raw().iter().flat_map(|&v| [v, v, v]).collect(),
        DynamicImage::ImageLumaA8(buf) => buf
            .into_raw()
            .chunks_exact(2)
            .flat_map(|px| [px[0], px[0], px[0]])
            .collect(),
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            return Err(Error::format(
                origin,
                "unsupported bit depth: 16-bit images are rejected, convert to 8-bit first",
            ))
        }
        other => {
            return Err(Error::format(
                origin,
                format!("unsupported PNG color type {:?}", other.color()),
            ))
        }
    };
    RgbImage::new(width, height, data).map_err(|e| Error::format(origin, e.to_string()))
}

/// Minimal P6 reader: magic, width, height, maxval (must be 255), one
/// whitespace byte, then raw samples. `#` comments are allowed in the header.
fn decode_ppm(bytes: &[u8], origin: &Path) -> Result<RgbImage> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // skip whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos || pos - start > 9 {
            return Err(Error::format(origin, format!("malformed PPM header field {}", i + 1)));
        }
        // at most 9 ASCII digits, cannot overflow
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(origin, "malformed PPM header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::format(
            origin,
            format!("unsupported PPM maxval {maxval} (only 8-bit, maxval 255, is accepted)"),
        ));
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::format(origin, "PPM header not terminated by whitespace")),
    }
    let needed = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::format(origin, "PPM dimensions overflow"))?;
    let payload = &bytes[pos..];
    if payload.len() < needed {
        return Err(Error::format(
            origin,
            format!("truncated PPM: {needed} samples expected, {} present", payload.len()),
        ));
    }
    RgbImage::new(width, height, payload[..needed].to_vec()).map_err(|e| Error::format(origin, e.to_string()))
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut out);
    image::ImageEncoder::write_image(
        encoder,
        img.data(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::invalid(format!("PNG encode failed: {e}")))?;
    Ok(out)
}

/// Writes PNG for a `.png` extension and PPM otherwise.
pub fn save_image(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let bytes = if is_png { encode_png(img)? } else { encode_ppm(img) };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

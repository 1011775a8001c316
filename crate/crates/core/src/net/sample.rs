use rand::Rng;

use super::model::{activate, group_base, trunk_features};
use super::{ModelWeights, Position, Real};
use crate::corpus_io::RgbImage;
use crate::error::Result;
use crate::mixture::MixtureRef;
use crate::pyramid::{fourth_pixel, QuarterImage};

#[derive(Clone, Debug)]
pub struct SampledLevel {
    pub image: RgbImage,
    /// Bottom-right samples that fell outside [0, 255] and were clamped.
    pub violations: usize,
}

/// Samples the three coded pixels of every group from the model's own
/// conditionals (TL, then TR given TL, then BL given both) and completes each
/// group with the pixel implied by the context average.
///
/// Groups are independent, so all top-left pixels are drawn first, then all
/// top-right, then all bottom-left; draws within a plane follow raster group
/// order and R, G, B per pixel.
pub fn sample_level<T: Real, R: Rng + ?Sized>(
    weights: &ModelWeights<T>,
    level: usize,
    y_lr: &QuarterImage,
    rng: &mut R,
) -> Result<SampledLevel> {
    let features = trunk_features(weights, level, y_lr)?;
    let (rows, cols) = (y_lr.height(), y_lr.width());
    let channels = weights.config().trunk_channels;
    let k = weights.config().mixtures;
    let mut image = RgbImage::filled(2 * cols, 2 * rows, [0, 0, 0]);
    let mut params = vec![0.0; 9 * k];

    for pos in Position::ALL {
        for i in 0..rows {
            for j in 0..cols {
                let g = i * cols + j;
                let known: Vec<u8> = Position::ALL[..pos.index()]
                    .iter()
                    .flat_map(|p| {
                        let (dr, dc) = p.offset();
                        image.pixel(2 * i + dr, 2 * j + dc)
                    })
                    .collect();
                let raw = super::head_row(weights, level, pos, &features[g * channels..(g + 1) * channels], &known);
                activate(&raw, group_base(y_lr, i, j), k, &mut params);
                let (dr, dc) = pos.offset();
                for c in 0..3 {
                    let e = &params[c * 3 * k..(c + 1) * 3 * k];
                    let m = MixtureRef::new(&e[..k], &e[k..2 * k], &e[2 * k..]);
                    image.set(2 * i + dr, 2 * j + dc, c, m.sample(rng));
                }
            }
        }
    }

    let mut violations = 0;
    for i in 0..rows {
        for j in 0..cols {
            for c in 0..3 {
                let q = y_lr.get(i, j, c);
                let (a, b, d) = (
                    image.get(2 * i, 2 * j, c),
                    image.get(2 * i, 2 * j + 1, c),
                    image.get(2 * i + 1, 2 * j, c),
                );
                let last = fourth_pixel(q, a, b, d).unwrap_or_else(|| {
                    violations += 1;
                    (i32::from(q) - i32::from(a) - i32::from(b) - i32::from(d)).clamp(0, 255) as u8
                });
                image.set(2 * i + 1, 2 * j + 1, c, last);
            }
        }
    }
    Ok(SampledLevel { image, violations })
}

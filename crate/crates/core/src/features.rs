//! Per-pixel coding cost and entropy maps, their level-wise averages, and the
//! decision statistics derived from them.

use std::f64::consts::LN_2;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus_io::RgbImage;
use crate::error::{Error, Result};
use crate::net::{analyze_level, ModelWeights, Position, Real, CODED_LEVELS};
use crate::pyramid::{Pyramid, QuarterImage};

/// NLL and entropy (nats) of every coded pixel-channel of one level.
///
/// Entries are indexed `((group · 3 + position) · 3 + channel)`, groups in
/// raster order over the `rows × cols` context grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelMaps {
    pub level: usize,
    pub rows: usize,
    pub cols: usize,
    pub nll: Vec<f64>,
    pub h: Vec<f64>,
}

impl LevelMaps {
    fn index(&self, row: usize, col: usize, pos: Position, channel: usize) -> usize {
        ((row * self.cols + col) * 3 + pos.index()) * 3 + channel
    }

    pub fn nll_at(&self, row: usize, col: usize, pos: Position, channel: usize) -> f64 {
        self.nll[self.index(row, col, pos, channel)]
    }

    pub fn h_at(&self, row: usize, col: usize, pos: Position, channel: usize) -> f64 {
        self.h[self.index(row, col, pos, channel)]
    }

    /// Channel-averaged `nll − h` of a coded pixel.
    pub fn gap_at(&self, row: usize, col: usize, pos: Position) -> f64 {
        (0..3)
            .map(|c| self.nll_at(row, col, pos, c) - self.h_at(row, col, pos, c))
            .sum::<f64>()
            / 3.0
    }

    pub fn mean_nll(&self) -> Result<f64> {
        mean(&self.nll, self.level)
    }

    pub fn mean_h(&self) -> Result<f64> {
        mean(&self.h, self.level)
    }
}

fn mean(values: &[f64], level: usize) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid(format!("level {level} maps are empty")));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Maps of one level given its context `y_lr = y⁽ˡ⁺¹⁾` and the actual pixels
/// `x_hr = x⁽ˡ⁾`.
pub fn level_maps<T: Real>(
    weights: &ModelWeights<T>,
    level: usize,
    y_lr: &QuarterImage,
    x_hr: &RgbImage,
) -> Result<LevelMaps> {
    let dist = analyze_level(weights, level, y_lr, x_hr)?;
    let (rows, cols) = dist.group_dims();
    let pairs: Vec<(f64, f64)> = (0..rows * cols)
        .into_par_iter()
        .flat_map_iter(|g| {
            let (i, j) = (g / cols, g % cols);
            let dist = &dist;
            Position::ALL.into_iter().flat_map(move |pos| {
                let (dr, dc) = pos.offset();
                (0..3).map(move |c| {
                    let m = dist.get_group(g, pos, c);
                    let actual = x_hr.get(2 * i + dr, 2 * j + dc, c);
                    (-m.log_pmf(actual), m.entropy_nats())
                })
            })
        })
        .collect();
    let (nll, h) = pairs.into_iter().unzip();
    Ok(LevelMaps {
        level,
        rows,
        cols,
        nll,
        h,
    })
}

/// Teacher-forced maps for levels 0, 1 and 2.
pub fn nll_entropy_maps<T: Real>(weights: &ModelWeights<T>, pyramid: &Pyramid) -> Result<[LevelMaps; 3]> {
    let maps: Vec<LevelMaps> = (0..CODED_LEVELS)
        .map(|l| level_maps(weights, l, pyramid.y(l + 1), pyramid.x(l)))
        .collect::<Result<_>>()?;
    Ok(maps.try_into().expect("three levels"))
}

/// Level-wise spatial means (nats per coded pixel-channel).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub nll: [f64; 3],
    pub h: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionStats {
    /// Coding-cost gap `nll − h` per level.
    pub d: [f64; 3],
    /// `d[0] − d[1]`.
    pub delta01: f64,
    pub abs_d0: f64,
    pub abs_delta01: f64,
}

impl FeatureVector {
    pub fn statistics(&self) -> DecisionStats {
        let d: [f64; 3] = std::array::from_fn(|l| self.nll[l] - self.h[l]);
        let delta01 = d[0] - d[1];
        DecisionStats {
            d,
            delta01,
            abs_d0: d[0].abs(),
            abs_delta01: delta01.abs(),
        }
    }

    /// The same quantities in bits.
    pub fn in_bits(&self) -> FeatureVector {
        FeatureVector {
            nll: self.nll.map(|v| v / LN_2),
            h: self.h.map(|v| v / LN_2),
        }
    }
}

/// Averages every level's maps over positions and channels.
pub fn aggregate(maps: &[LevelMaps; 3]) -> Result<FeatureVector> {
    let mut fv = FeatureVector {
        nll: [0.0; 3],
        h: [0.0; 3],
    };
    for (l, m) in maps.iter().enumerate() {
        fv.nll[l] = m.mean_nll()?;
        fv.h[l] = m.mean_h()?;
    }
    Ok(fv)
}

/// Affine decoding of an exported map: `value = offset + scale · pixel`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapExport {
    pub level: usize,
    pub file: String,
    pub width: usize,
    pub height: usize,
    pub offset: f64,
    /// Zero when the map is constant; every pixel then decodes to `offset`.
    pub scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSidecar {
    /// What the pixels hold.
    pub quantity: String,
    pub levels: Vec<MapExport>,
}

pub const SIDECAR_NAME: &str = "maps.json";

/// Writes one grayscale PNG per level of the channel-averaged `nll − h` map
/// (`gap_level{l}.png`, one pixel per image pixel, bottom-right pixels of
/// each group written as 0) and a `maps.json` sidecar with the affine
/// parameters. Returns the PNG paths.
pub fn export_maps(maps: &[LevelMaps; 3], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut levels = Vec::new();
    for m in maps {
        let gaps: Vec<(usize, usize, f64)> = (0..m.rows)
            .flat_map(|i| (0..m.cols).map(move |j| (i, j)))
            .flat_map(|(i, j)| {
                Position::ALL.into_iter().map(move |pos| {
                    let (dr, dc) = pos.offset();
                    (2 * i + dr, 2 * j + dc, m.gap_at(i, j, pos))
                })
            })
            .collect();
        let lo = gaps.iter().map(|g| g.2).fold(f64::INFINITY, f64::min);
        let hi = gaps.iter().map(|g| g.2).fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::Numerical(format!(
                "level {} gap map is empty or non-finite",
                m.level
            )));
        }
        let scale = (hi - lo) / 255.0;
        let (width, height) = (2 * m.cols, 2 * m.rows);
        let mut pixels = vec![0u8; width * height];
        for &(r, c, v) in &gaps {
            pixels[r * width + c] = if scale > 0.0 {
                ((v - lo) / scale).round().clamp(0.0, 255.0) as u8
            } else {
                0
            };
        }
        let file = format!("gap_level{}.png", m.level);
        let path = dir.join(&file);
        image::save_buffer_with_format(
            &path,
            &pixels,
            width as u32,
            height as u32,
            image::ExtendedColorType::L8,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::format(&path, e.to_string()))?;
        written.push(path);
        levels.push(MapExport {
            level: m.level,
            file,
            width,
            height,
            offset: lo,
            scale,
        });
    }
    let sidecar = MapSidecar {
        quantity: "channel-averaged nll - h in nats; bottom-right pixels of each 2x2 group are uncoded and stored as 0"
            .into(),
        levels,
    };
    let path = dir.join(SIDECAR_NAME);
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::format(&path, e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(written)
}

/// Reads back an exported level: decoded gap values, row-major over the
/// image grid, `None` at the uncoded bottom-right pixels.
pub fn read_exported_map(dir: impl AsRef<Path>, level: usize) -> Result<(MapExport, Vec<Option<f64>>)> {
    let dir = dir.as_ref();
    let path = dir.join(SIDECAR_NAME);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: MapSidecar = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let entry = sidecar
        .levels
        .into_iter()
        .find(|e| e.level == level)
        .ok_or_else(|| Error::format(&path, format!("no entry for level {level}")))?;
    let png = dir.join(&entry.file);
    let img = image::open(&png)
        .map_err(|e| Error::format(&png, e.to_string()))?
        .into_luma8();
    if img.width() as usize != entry.width || img.height() as usize != entry.height {
        return Err(Error::format(&png, "size disagrees with the sidecar"));
    }
    let values = img
        .enumerate_pixels()
        .map(|(c, r, p)| {
            let coded = r % 2 == 0 || c % 2 == 0;
            coded.then(|| entry.offset + entry.scale * f64::from(p.0[0]))
        })
        .collect();
    Ok((entry, values))
}

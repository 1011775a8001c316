//! The conditional pixel predictor.
//!
//! For each coded level l ∈ {0, 1, 2} a dedicated convolutional trunk reads
//! the exact low-resolution image y⁽ˡ⁺¹⁾ and produces one feature vector per
//! 2x2 group of x⁽ˡ⁾. Three per-position heads turn the feature, plus the
//! already-known pixels of the group, into logistic-mixture parameters for
//! the top-left, top-right and bottom-left pixels in that order. The
//! bottom-right pixel is implied by the group average.

pub(crate) mod model;
pub(crate) mod real;
mod sample;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::MAX_COMPONENTS;

pub use model::{analyze_level, head_row, trunk_features, DistributionMap, LevelForward};
pub use real::Real;
pub use sample::{sample_level, SampledLevel};
pub use weights::{init_weights, ModelWeights, TensorSpec, WEIGHTS_MAGIC, WEIGHTS_VERSION};

/// Number of predicted levels (0, 1, 2).
pub const CODED_LEVELS: usize = 3;
/// Convolution kernel size of the trunk.
pub const KERNEL: usize = 3;

/// Coded positions of a 2x2 group, in factorization order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Position {
    TopLeft = 0,
    TopRight = 1,
    BottomLeft = 2,
}

impl Position {
    pub const ALL: [Position; 3] = [Position::TopLeft, Position::TopRight, Position::BottomLeft];

    pub fn index(self) -> usize {
        self as usize
    }

    /// `(row, col)` offset inside the group.
    pub fn offset(self) -> (usize, usize) {
        match self {
            Position::TopLeft => (0, 0),
            Position::TopRight => (0, 1),
            Position::BottomLeft => (1, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Logistic components per pixel channel (K).
    pub mixtures: usize,
    pub trunk_depth: usize,
    pub trunk_channels: usize,
    pub head_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            mixtures: 10,
            trunk_depth: 4,
            trunk_channels: 32,
            head_width: 64,
        }
    }
}

impl NetConfig {
    /// The small configuration used by gradient checks and quick tests.
    pub fn tiny() -> Self {
        NetConfig {
            mixtures: 2,
            trunk_depth: 1,
            trunk_channels: 4,
            head_width: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mixtures == 0 || self.mixtures > MAX_COMPONENTS {
            return Err(Error::invalid(format!(
                "mixture count {} outside 1..={MAX_COMPONENTS}",
                self.mixtures
            )));
        }
        if self.trunk_depth == 0 || self.trunk_channels == 0 || self.head_width == 0 {
            return Err(Error::invalid(
                "trunk depth, trunk channels and head width must be positive",
            ));
        }
        Ok(())
    }

    /// Side of the square low-resolution window that can influence a group.
    pub fn receptive_field(&self) -> usize {
        2 * self.trunk_depth + 1
    }

    /// Raw head outputs per coded pixel: 3 channels × K × (logit, mean, log-scale).
    pub fn head_outputs(&self) -> usize {
        9 * self.mixtures
    }
}

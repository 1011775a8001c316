//! Zero-shot detection of generated images from the gap between the coding
//! cost a learned lossless model assigns to an image and the cost it expects.
//!
//! The pipeline: [`pyramid`] builds an exact multi-resolution decomposition,
//! [`net`] predicts a [`mixture`] for each coded pixel from the next coarser
//! level, [`features`] turns those predictions into per-level NLL and entropy,
//! and [`eval`] scores and evaluates the resulting statistics. [`codec`]
//! drives a range coder with the same predictions.

pub mod codec;
pub mod corpus_io;
pub mod error;
pub mod eval;
pub mod features;
pub mod mixture;
pub mod net;
pub mod pyramid;
pub mod trainer;

pub use corpus_io::{Label, RgbImage};
pub use error::{Error, Result};
pub use features::{DecisionStats, FeatureVector, LevelMaps};
pub use net::{ModelWeights, NetConfig};
pub use pyramid::{build_pyramid, Pyramid};

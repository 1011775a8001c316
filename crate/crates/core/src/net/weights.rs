use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{NetConfig, Real, CODED_LEVELS, KERNEL};
use crate::error::{Error, Result};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"ZEDW";
pub const WEIGHTS_VERSION: u16 = 1;

/// Initial component scale of an untrained model.
const INITIAL_SCALE: f64 = 8.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub range: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvSlot {
    pub cin: usize,
    pub cout: usize,
    /// `[9·cin, cout]`, row index `(ky·3 + kx)·cin + ci`.
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct HeadSlot {
    pub inputs: usize,
    pub hidden: usize,
    pub outputs: usize,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct LevelSlots {
    pub trunk: Vec<ConvSlot>,
    pub heads: [HeadSlot; 3],
}

/// Flat parameter layout; fully determined by [`NetConfig`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct Layout {
    pub levels: Vec<LevelSlots>,
    pub tensors: Vec<TensorSpec>,
    pub len: usize,
}

impl Layout {
    pub fn new(config: &NetConfig) -> Layout {
        let mut tensors = Vec::new();
        let mut len = 0;
        let mut alloc = |name: String, dims: Vec<usize>| {
            let size: usize = dims.iter().product();
            let range = len..len + size;
            len += size;
            tensors.push(TensorSpec {
                name,
                dims,
                range: range.clone(),
            });
            range
        };
        let c = config.trunk_channels;
        let mut levels = Vec::with_capacity(CODED_LEVELS);
        for level in 0..CODED_LEVELS {
            let mut trunk = Vec::with_capacity(config.trunk_depth);
            for layer in 0..config.trunk_depth {
                let cin = if layer == 0 { 3 } else { c };
                trunk.push(ConvSlot {
                    cin,
                    cout: c,
                    weight: alloc(
                        format!("level{level}.trunk{layer}.weight"),
                        vec![KERNEL * KERNEL * cin, c],
                    ),
                    bias: alloc(format!("level{level}.trunk{layer}.bias"), vec![c]),
                });
            }
            let mut made = Vec::with_capacity(3);
            for (pos, name) in ["tl", "tr", "bl"].iter().enumerate() {
                let inputs = c + 3 * pos;
                let (hidden, outputs) = (config.head_width, config.head_outputs());
                made.push(HeadSlot {
                    inputs,
                    hidden,
                    outputs,
                    w1: alloc(format!("level{level}.head_{name}.fc1.weight"), vec![inputs, hidden]),
                    b1: alloc(format!("level{level}.head_{name}.fc1.bias"), vec![hidden]),
                    w2: alloc(format!("level{level}.head_{name}.fc2.weight"), vec![hidden, outputs]),
                    b2: alloc(format!("level{level}.head_{name}.fc2.bias"), vec![outputs]),
                });
            }
            let heads: [HeadSlot; 3] = made.try_into().expect("three heads");
            levels.push(LevelSlots { trunk, heads });
        }
        Layout { levels, tensors, len }
    }
}

/// All network parameters as one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T: Real = f32> {
    config: NetConfig,
    pub(crate) layout: Layout,
    values: Vec<T>,
}

impl<T: Real> ModelWeights<T> {
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let values = vec![T::zero(); layout.len];
        Ok(ModelWeights { config, layout, values })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.values[t.range.clone()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self.layout.tensors.iter().find(|t| t.name == name)?.range.clone();
        Some(&mut self.values[range])
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config,
            layout: self.layout.clone(),
            values: self.values.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Deterministic fan-in-scaled uniform initialization.
///
/// Hidden layers use the ReLU bound `sqrt(6 / fan_in)`, output layers
/// `1 / sqrt(fan_in)`. Output biases start every component centred on the
/// low-resolution value (zero mean offset) with scale 8.
pub fn init_weights(config: NetConfig, seed: u64) -> Result<ModelWeights<f32>> {
    let mut weights = ModelWeights::<f32>::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.mixtures;
    let layout = weights.layout.clone();
    let mut fill = |values: &mut [f32], range: &Range<usize>, bound: f64| {
        for v in &mut values[range.clone()] {
            *v = rng.random_range(-bound..bound) as f32;
        }
    };
    for level in &layout.levels {
        for conv in &level.trunk {
            let fan_in = (KERNEL * KERNEL * conv.cin) as f64;
            fill(&mut weights.values, &conv.weight, (6.0 / fan_in).sqrt());
        }
        for head in &level.heads {
            fill(&mut weights.values, &head.w1, (6.0 / head.inputs as f64).sqrt());
            fill(&mut weights.values, &head.w2, 1.0 / (head.hidden as f64).sqrt());
            let b2 = &mut weights.values[head.b2.clone()];
            for c in 0..3 {
                for j in 0..k {
                    b2[c * 3 * k + 2 * k + j] = INITIAL_SCALE.ln() as f32;
                }
            }
        }
    }
    Ok(weights)
}

impl ModelWeights<f32> {
    /// Serializes into the `ZEDW` container.
    ///
    /// Layout (little-endian): magic `ZEDW`, version u16, then u32 fields
    /// mixtures, trunk_depth, trunk_channels, head_width, kernel, levels, then
    /// a u32 tensor count and per tensor: u16 name length, UTF-8 name, u8
    /// rank, u32 dims, f32 payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.values.len() * 4);
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
        for v in [
            self.config.mixtures,
            self.config.trunk_depth,
            self.config.trunk_channels,
            self.config.head_width,
            KERNEL,
            CODED_LEVELS,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.layout.tensors.len() as u32).to_le_bytes());
        for t in &self.layout.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &self.values[t.range.clone()] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != WEIGHTS_MAGIC {
            return Err(r.err("not a weights file (bad magic)"));
        }
        let version = r.u16()?;
        if version != WEIGHTS_VERSION {
            return Err(r.err(format!("unsupported weights version {version}")));
        }
        let mut fields = [0usize; 6];
        for f in &mut fields {
            *f = r.u32()? as usize;
        }
        let [mixtures, trunk_depth, trunk_channels, head_width, kernel, levels] = fields;
        if kernel != KERNEL || levels != CODED_LEVELS {
            return Err(r.err(format!("unsupported kernel {kernel} / level count {levels}")));
        }
        // bound the layout size before allocating anything proportional to it
        if trunk_depth > 64 || trunk_channels > 1024 || head_width > 4096 {
            return Err(r.err("network dimensions out of supported range"));
        }
        let config = NetConfig {
            mixtures,
            trunk_depth,
            trunk_channels,
            head_width,
        };
        config.validate().map_err(|e| r.err(e.to_string()))?;
        let layout = Layout::new(&config);
        if layout.len * 4 > bytes.len() {
            return Err(r.err("weights file is truncated"));
        }
        let count = r.u32()? as usize;
        if count != layout.tensors.len() {
            return Err(r.err(format!(
                "expected {} tensors, file declares {count}",
                layout.tensors.len()
            )));
        }
        let mut values = vec![0f32; layout.len];
        for spec in &layout.tensors {
            let name_len = r.u16()? as usize;
            let name = r.take(name_len)?;
            if name != spec.name.as_bytes() {
                return Err(r.err(format!(
                    "expected tensor `{}`, found `{}`",
                    spec.name,
                    String::from_utf8_lossy(name)
                )));
            }
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            if dims != spec.dims {
                return Err(r.err(format!(
                    "tensor `{}` has dims {dims:?}, expected {:?}",
                    spec.name, spec.dims
                )));
            }
            for v in &mut values[spec.range.clone()] {
                let raw = r.take(4)?;
                *v = f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]);
                if !v.is_finite() {
                    return Err(r.err(format!("tensor `{}` contains a non-finite value", spec.name)));
                }
            }
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last tensor"));
        }
        Ok(ModelWeights { config, layout, values })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if !self.is_finite() {
            return Err(Error::Numerical(format!(
                "refusing to save non-finite weights to {}",
                path.display()
            )));
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// SHA-256 of the serialized container.
    pub fn digest(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        out.copy_from_slice(&Sha256::digest(self.to_bytes()));
        out
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::format(self.origin, message)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.err("weights file is truncated"))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_weights(NetConfig::tiny(), 5).unwrap();
        let b = init_weights(NetConfig::tiny(), 5).unwrap();
        let c = init_weights(NetConfig::tiny(), 6).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn layout_matches_config() {
        let w = ModelWeights::<f32>::zeros(NetConfig::default()).unwrap();
        let conv0 = w.tensor("level0.trunk0.weight").unwrap();
        assert_eq!(conv0.len(), 9 * 3 * 32);
        let fc1 = w.tensor("level2.head_bl.fc1.weight").unwrap();
        assert_eq!(fc1.len(), (32 + 6) * 64);
        assert_eq!(w.tensor("level1.head_tr.fc2.bias").unwrap().len(), 90);
        let end = w.tensors().last().unwrap().range.end;
        assert_eq!(end, w.len());
    }

    #[test]
    fn container_round_trips_bit_exactly() {
        let w = init_weights(NetConfig::tiny(), 9).unwrap();
        let bytes = w.to_bytes();
        let back = ModelWeights::from_bytes(&bytes, Path::new("w")).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(&bytes[..4], b"ZEDW");
    }

    #[test]
    fn container_rejects_damage() {
        let w = init_weights(NetConfig::tiny(), 9).unwrap();
        let bytes = w.to_bytes();
        assert!(ModelWeights::from_bytes(&bytes[..bytes.len() - 1], Path::new("w")).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(ModelWeights::from_bytes(&extra, Path::new("w")).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        let err = ModelWeights::from_bytes(&nan, Path::new("w")).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn save_refuses_non_finite() {
        let mut w = init_weights(NetConfig::tiny(), 1).unwrap();
        w.values_mut()[0] = f32::INFINITY;
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(w.save(dir.path().join("w.zedw")), Err(Error::Numerical(_))));
    }

    #[test]
    fn digest_tracks_values() {
        let a = init_weights(NetConfig::tiny(), 1).unwrap();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.values_mut()[3] += 1.0;
        assert_ne!(a.digest(), b.digest());
    }
}

//! Named float tensors, their on-disk format and deterministic initialization.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! "SCANWT01" | u32 tensor count | per tensor:
//!     u16 name length | UTF-8 name | u8 rank | u32 dim * rank | f32 * prod(dims)
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionLayerWeights, AttentionWeights, Linear};
use crate::error::{Result, ScanError, WeightFileError};
use crate::heads::HeatmapHeadWeights;
use crate::inference::PipelineConfig;
use crate::sparse::SscLayer;

pub const MAGIC: &[u8; 8] = b"SCANWT01";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(ScanError::Shape(format!("shape {shape:?} does not hold {} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    fn bits_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Named tensors, kept in name order.
#[derive(Clone, Debug, Default)]
pub struct ModelWeights {
    tensors: BTreeMap<String, Tensor>,
}

impl PartialEq for ModelWeights {
    /// Bitwise comparison of every value, so NaN payloads compare too.
    fn eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((na, a), (nb, b))| na == nb && a.bits_eq(b))
    }
}

impl ModelWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(WeightFileError::DuplicateName(name).into());
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WeightFileError> {
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) {
                WeightFileError::Truncated(bytes.len() as u64)
            } else {
                WeightFileError::BadMagic
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(WeightFileError::BadMagic);
        }
        let mut r = Reader { bytes, pos: 8 };
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_at = r.pos as u64;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| WeightFileError::BadName(name_at))?
                .to_owned();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= bytes.len() - r.pos))
                .ok_or(WeightFileError::Truncated(bytes.len() as u64))?;
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
                .collect();
            if tensors.insert(name.clone(), Tensor { shape, data }).is_some() {
                return Err(WeightFileError::DuplicateName(name));
            }
        }
        if r.pos != bytes.len() {
            return Err(WeightFileError::TrailingBytes((bytes.len() - r.pos) as u64));
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&std::fs::read(path)?)?)
    }

    fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| WeightFileError::Missing(name.to_owned()))?;
        if t.shape != shape {
            return Err(WeightFileError::BadShape {
                name: name.to_owned(),
                found: t.shape.clone(),
                expected: shape.to_vec(),
            }
            .into());
        }
        Ok(t)
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let t = self.expect(name, &[rows, cols])?;
        Ok(Array2::from_shape_fn((rows, cols), |(i, j)| t.data[i * cols + j] as f64))
    }

    fn vector(&self, name: &str, len: usize) -> Result<Array1<f64>> {
        let t = self.expect(name, &[len])?;
        Ok(t.data.iter().map(|&v| v as f64).collect())
    }

    fn kernel(&self, name: &str, volume: usize, c_in: usize, c_out: usize) -> Result<Array3<f64>> {
        let t = self.expect(name, &[volume, c_in, c_out])?;
        Ok(Array3::from_shape_fn((volume, c_in, c_out), |(o, i, j)| {
            t.data[(o * c_in + i) * c_out + j] as f64
        }))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightFileError> {
        if self.bytes.len() - self.pos < n {
            return Err(WeightFileError::Truncated(self.bytes.len() as u64));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, WeightFileError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, WeightFileError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// How a tensor is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zero,
    /// Uniform in `[-b, b]`, `b = sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

const CUBE: usize = 27;
const SQUARE: usize = 9;

fn push_linear(out: &mut Vec<ManifestEntry>, prefix: &str, c_in: usize, c_out: usize, bias: bool) {
    out.push(ManifestEntry {
        name: format!("{prefix}.weight"),
        shape: vec![c_in, c_out],
        init: Init::Xavier { fan_in: c_in, fan_out: c_out },
    });
    if bias {
        out.push(ManifestEntry {
            name: format!("{prefix}.bias"),
            shape: vec![c_out],
            init: Init::Zero,
        });
    }
}

fn push_kernel(out: &mut Vec<ManifestEntry>, prefix: &str, volume: usize, c_in: usize, c_out: usize) {
    out.push(ManifestEntry {
        name: format!("{prefix}.weight"),
        shape: vec![volume, c_in, c_out],
        init: Init::Xavier {
            fan_in: volume * c_in,
            fan_out: volume * c_out,
        },
    });
    out.push(ManifestEntry {
        name: format!("{prefix}.bias"),
        shape: vec![c_out],
        init: Init::Zero,
    });
}

fn attention_prefixes(cfg: &PipelineConfig) -> Vec<String> {
    if cfg.attention.share_weights {
        vec!["attn.shared".to_owned()]
    } else {
        (1..=2)
            .flat_map(|s| (0..cfg.attention.depth).map(move |d| format!("attn.s{s}.d{d}")))
            .collect()
    }
}

/// Every tensor the model needs, in a fixed order.
pub fn manifest(cfg: &PipelineConfig) -> Vec<ManifestEntry> {
    let c = cfg.channels;
    let n = cfg.n_classes;
    let e = cfg.attention.embed_dim();
    let mut out = Vec::new();
    for b in 1..=4 {
        let c_in = if b == 1 { 4 } else { c };
        push_kernel(&mut out, &format!("block{b}.ssc1"), CUBE, c_in, c);
        push_kernel(&mut out, &format!("block{b}.ssc2"), CUBE, c, c);
        push_linear(&mut out, &format!("block{b}.proj"), c, c, true);
    }
    for b in 2..=4 {
        push_kernel(&mut out, &format!("aux{b}"), CUBE, c, n);
    }
    for p in attention_prefixes(cfg) {
        push_linear(&mut out, &format!("{p}.query"), c, e, false);
        push_linear(&mut out, &format!("{p}.key.fc1"), c, e, true);
        push_linear(&mut out, &format!("{p}.key.fc2"), e, e, true);
        push_linear(&mut out, &format!("{p}.value.fc1"), c, e, true);
        push_linear(&mut out, &format!("{p}.value.fc2"), e, e, true);
        push_linear(&mut out, &format!("{p}.out"), e, c, true);
    }
    push_kernel(&mut out, "heatmap.ssc1", SQUARE, c, c);
    push_kernel(&mut out, "heatmap.ssc2", SQUARE, c, c);
    push_linear(&mut out, "heatmap.proj", c, 1, true);
    push_linear(&mut out, "semantic.fc1", 4 * c, c, true);
    push_linear(&mut out, "semantic.fc2", c, n, true);
    push_linear(&mut out, "offset.fc1", 4 * c, c, true);
    push_linear(&mut out, "offset.fc2", c, 2, true);
    out
}

/// Seeded initialization of every manifest tensor; biases are zero.
pub fn init_weights(cfg: &PipelineConfig, seed: u64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ModelWeights::new();
    for entry in manifest(cfg) {
        let t = match entry.init {
            Init::Zero => Tensor::zeros(entry.shape),
            Init::Xavier { fan_in, fan_out } => {
                let b = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                let n = entry.shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-b..=b)).collect();
                Tensor { shape: entry.shape, data }
            }
        };
        w.insert(entry.name, t).expect("manifest names are unique");
    }
    w
}

/// All-zero weights with the manifest shapes.
pub fn zero_weights(cfg: &PipelineConfig) -> ModelWeights {
    let mut w = ModelWeights::new();
    for entry in manifest(cfg) {
        w.insert(entry.name, Tensor::zeros(entry.shape)).expect("manifest names are unique");
    }
    w
}

/// One backbone block: two SSC layers and the voxel-to-point projection.
#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub ssc1: SscLayer,
    pub ssc2: SscLayer,
    pub proj: Linear,
}

/// Typed, shape-checked view of [`ModelWeights`] for a given configuration.
#[derive(Clone, Debug)]
pub struct Model {
    pub blocks: Vec<BlockWeights>,
    /// Voxel semantic heads of blocks 2, 3 and 4.
    pub aux: Vec<SscLayer>,
    pub attention: AttentionWeights,
    pub heatmap: HeatmapHeadWeights,
    pub semantic: Vec<Linear>,
    pub offset: Vec<Linear>,
}

impl Model {
    pub fn from_weights(w: &ModelWeights, cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let n = cfg.n_classes;
        let e = cfg.attention.embed_dim();
        let linear = |p: &str, c_in: usize, c_out: usize, relu: bool| -> Result<Linear> {
            Linear::new(w.matrix(&format!("{p}.weight"), c_in, c_out)?, w.vector(&format!("{p}.bias"), c_out)?, relu)
        };
        let cubic = |p: &str, c_in: usize, c_out: usize, relu: bool| -> Result<SscLayer> {
            SscLayer::cubic(
                3,
                w.kernel(&format!("{p}.weight"), CUBE, c_in, c_out)?,
                w.vector(&format!("{p}.bias"), c_out)?,
                relu,
            )
        };
        let planar = |p: &str| -> Result<SscLayer> {
            SscLayer::planar(3, w.kernel(&format!("{p}.weight"), SQUARE, c, c)?, w.vector(&format!("{p}.bias"), c)?, true)
        };
        let mut blocks = Vec::with_capacity(4);
        for b in 1..=4 {
            let c_in = if b == 1 { 4 } else { c };
            blocks.push(BlockWeights {
                ssc1: cubic(&format!("block{b}.ssc1"), c_in, c, true)?,
                ssc2: cubic(&format!("block{b}.ssc2"), c, c, true)?,
                proj: linear(&format!("block{b}.proj"), c, c, true)?,
            });
        }
        let aux = (2..=4)
            .map(|b| cubic(&format!("aux{b}"), c, n, false))
            .collect::<Result<Vec<_>>>()?;
        let layer = |p: &str| -> Result<AttentionLayerWeights> {
            Ok(AttentionLayerWeights {
                query: w.matrix(&format!("{p}.query.weight"), c, e)?,
                key: vec![linear(&format!("{p}.key.fc1"), c, e, true)?, linear(&format!("{p}.key.fc2"), e, e, false)?],
                value: vec![
                    linear(&format!("{p}.value.fc1"), c, e, true)?,
                    linear(&format!("{p}.value.fc2"), e, e, false)?,
                ],
                out: linear(&format!("{p}.out"), e, c, false)?,
            })
        };
        let attention = if cfg.attention.share_weights {
            AttentionWeights::shared(layer("attn.shared")?, cfg.attention.depth)
        } else {
            let stage = |s: usize| -> Result<Vec<Arc<AttentionLayerWeights>>> {
                (0..cfg.attention.depth)
                    .map(|d| layer(&format!("attn.s{s}.d{d}")).map(Arc::new))
                    .collect()
            };
            AttentionWeights::new(stage(1)?, stage(2)?)?
        };
        Ok(Self {
            blocks,
            aux,
            attention,
            heatmap: HeatmapHeadWeights {
                ssc1: planar("heatmap.ssc1")?,
                ssc2: planar("heatmap.ssc2")?,
                proj: linear("heatmap.proj", c, 1, false)?,
            },
            semantic: vec![linear("semantic.fc1", 4 * c, c, true)?, linear("semantic.fc2", c, n, false)?],
            offset: vec![linear("offset.fc1", 4 * c, c, true)?, linear("offset.fc2", c, 2, false)?],
        })
    }
}

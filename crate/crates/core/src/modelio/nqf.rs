//! The NQF container.
//!
//! ```text
//! "NQF1"
//! header      u32 vocab_size, n_layers, n_heads, head_dim, hidden_dim,
//!                 ffn_dim, max_seq_len
//!             u8 norm_kind (0 layernorm, 1 rmsnorm)
//!             u8 activation_kind (0 gelu, 1 silu-gated)
//!             u16 reserved (0)
//!             f32 rope_theta
//!             u32 tensor_count
//! table       per tensor:
//!             u16 name_len, name (UTF-8)
//!             u8 dtype (0 fp32, 1 int4)
//!             u8 recipe_len, recipe (ASCII, empty for fp32)
//!             u8 ndims (1 or 2), u32 dims[ndims]
//!             u64 offset, u64 size
//! payload     blobs in table order, each starting at the next 64-byte
//!             boundary, zero padding in between; int4 blobs hold packed
//!             codes, then f32 scales, then zero-points (asymmetric only)
//! trailer     u32 CRC-32 (IEEE) of every preceding byte
//! ```
//! All integers and floats are little-endian. The layout is canonical: a
//! valid file is exactly what [`NqfFile::to_bytes`] writes for its contents.

use std::path::Path;

use crate::error::{Error, Result};
use crate::quant::{QuantRecipe, QuantizedTensor};
use crate::runtime::{ActivationKind, ModelConfig, NormKind};

pub const MAGIC: &[u8; 4] = b"NQF1";
pub const ALIGN: usize = 64;
const HEADER_LEN: usize = 4 + 7 * 4 + 4 + 4 + 4;
// name_len + dtype + recipe_len + ndims + one dim + offset + size
const MIN_ENTRY_LEN: usize = 2 + 1 + 1 + 1 + 4 + 8 + 8;

const DTYPE_F32: u8 = 0;
const DTYPE_INT4: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32 { dims: Vec<usize>, data: Vec<f32> },
    Int4(QuantizedTensor),
}

impl TensorData {
    pub fn dims(&self) -> Vec<usize> {
        match self {
            TensorData::F32 { dims, .. } => dims.clone(),
            TensorData::Int4(q) => vec![q.rows(), q.cols()],
        }
    }

    /// Size of the payload blob in bytes.
    pub fn payload_bytes(&self) -> usize {
        match self {
            TensorData::F32 { data, .. } => data.len() * 4,
            TensorData::Int4(q) => q.storage_bytes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub data: TensorData,
}

/// Config plus an ordered tensor table.
#[derive(Debug, Clone, PartialEq)]
pub struct NqfFile {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
}

#[inline]
fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

fn norm_tag(kind: NormKind) -> u8 {
    match kind {
        NormKind::LayerNorm => 0,
        NormKind::RmsNorm => 1,
    }
}

fn act_tag(kind: ActivationKind) -> u8 {
    match kind {
        ActivationKind::Gelu => 0,
        ActivationKind::SiluGated => 1,
    }
}

struct Entry {
    name: String,
    dtype: u8,
    recipe: Option<QuantRecipe>,
    dims: Vec<usize>,
    offset: usize,
    size: usize,
}

fn entry_len(name: &str, recipe: &str, ndims: usize) -> usize {
    2 + name.len() + 1 + 1 + recipe.len() + 1 + 4 * ndims + 8 + 8
}

impl NqfFile {
    fn check_writable(&self) -> Result<()> {
        self.config.validate()?;
        let mut seen = std::collections::HashSet::new();
        for t in &self.tensors {
            if t.name.is_empty() || t.name.len() > usize::from(u16::MAX) {
                return Err(Error::Format(format!("tensor name {:?} has invalid length", t.name)));
            }
            if !seen.insert(t.name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name {:?}", t.name)));
            }
            let dims = t.data.dims();
            if dims.is_empty() || dims.len() > 2 || dims.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
                return Err(Error::Format(format!("tensor {} has unsupported dims {dims:?}", t.name)));
            }
            match &t.data {
                TensorData::F32 { dims, data } => {
                    if dims.iter().product::<usize>() != data.len() {
                        return Err(Error::Format(format!(
                            "tensor {}: dims {dims:?} do not match {} values",
                            t.name,
                            data.len()
                        )));
                    }
                }
                TensorData::Int4(q) => q.validate()?,
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_writable()?;
        let recipes: Vec<String> = self
            .tensors
            .iter()
            .map(|t| match &t.data {
                TensorData::F32 { .. } => String::new(),
                TensorData::Int4(q) => q.recipe().to_string(),
            })
            .collect();
        let table_len: usize = self
            .tensors
            .iter()
            .zip(&recipes)
            .map(|(t, r)| entry_len(&t.name, r, t.data.dims().len()))
            .sum();
        let mut offset = align_up(HEADER_LEN + table_len);
        let mut offsets = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            offsets.push(offset);
            offset = align_up(offset + t.data.payload_bytes());
        }
        let payload_end = match (self.tensors.last(), offsets.last()) {
            (Some(t), Some(&o)) => o + t.data.payload_bytes(),
            _ => align_up(HEADER_LEN + table_len),
        };

        let c = &self.config;
        let mut out = Vec::with_capacity(payload_end + 4);
        out.extend_from_slice(MAGIC);
        for v in [
            c.vocab_size,
            c.n_layers,
            c.n_heads,
            c.head_dim,
            c.hidden_dim,
            c.ffn_dim,
            c.max_seq_len,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(norm_tag(c.norm_kind));
        out.push(act_tag(c.activation_kind));
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&c.rope_theta.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());

        for ((t, recipe), &off) in self.tensors.iter().zip(&recipes).zip(&offsets) {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(match t.data {
                TensorData::F32 { .. } => DTYPE_F32,
                TensorData::Int4(_) => DTYPE_INT4,
            });
            out.push(recipe.len() as u8);
            out.extend_from_slice(recipe.as_bytes());
            let dims = t.data.dims();
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&(off as u64).to_le_bytes());
            out.extend_from_slice(&(t.data.payload_bytes() as u64).to_le_bytes());
        }

        for (t, &off) in self.tensors.iter().zip(&offsets) {
            out.resize(off, 0);
            match &t.data {
                TensorData::F32 { data, .. } => {
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                TensorData::Int4(q) => {
                    out.extend_from_slice(q.packed());
                    for s in q.scales() {
                        out.extend_from_slice(&s.to_le_bytes());
                    }
                    out.extend_from_slice(q.zero_points());
                }
            }
        }
        out.resize(payload_end, 0);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses and fully validates a container. Structure, bounds and size
    /// formulas are checked before the checksum and before any payload is read.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let mut dims = [0usize; 7];
        for d in dims.iter_mut() {
            *d = r.u32()? as usize;
        }
        let norm_kind = match r.u8()? {
            0 => NormKind::LayerNorm,
            1 => NormKind::RmsNorm,
            t => return Err(Error::Format(format!("unknown norm kind tag {t}"))),
        };
        let activation_kind = match r.u8()? {
            0 => ActivationKind::Gelu,
            1 => ActivationKind::SiluGated,
            t => return Err(Error::Format(format!("unknown activation tag {t}"))),
        };
        if r.u16()? != 0 {
            return Err(Error::Format("reserved header field is not zero".into()));
        }
        let rope_theta = f32::from_le_bytes(r.array()?);
        let config = ModelConfig {
            vocab_size: dims[0],
            n_layers: dims[1],
            n_heads: dims[2],
            head_dim: dims[3],
            hidden_dim: dims[4],
            ffn_dim: dims[5],
            max_seq_len: dims[6],
            norm_kind,
            activation_kind,
            rope_theta,
        };
        let count = r.u32()? as usize;

        let mut entries = Vec::with_capacity(count.min(bytes.len() / MIN_ENTRY_LEN));
        for _ in 0..count {
            let name_len = usize::from(r.u16()?);
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            let dtype = r.u8()?;
            let recipe_len = usize::from(r.u8()?);
            let recipe_raw = r.take(recipe_len)?;
            let recipe = match dtype {
                DTYPE_F32 if recipe_len == 0 => None,
                DTYPE_INT4 => Some(
                    std::str::from_utf8(recipe_raw)
                        .map_err(|_| Error::Format("recipe is not ASCII".into()))?
                        .parse::<QuantRecipe>()
                        .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?,
                ),
                _ => return Err(Error::Format(format!("tensor {name}: bad dtype {dtype}"))),
            };
            let ndims = usize::from(r.u8()?);
            if !(1..=2).contains(&ndims) {
                return Err(Error::Format(format!("tensor {name}: {ndims} dims")));
            }
            let mut tdims = Vec::with_capacity(ndims);
            for _ in 0..ndims {
                tdims.push(r.u32()? as usize);
            }
            let offset = usize::try_from(r.u64()?)
                .map_err(|_| Error::Format(format!("tensor {name}: offset overflows")))?;
            let size = usize::try_from(r.u64()?)
                .map_err(|_| Error::Format(format!("tensor {name}: size overflows")))?;
            entries.push(Entry {
                name,
                dtype,
                recipe,
                dims: tdims,
                offset,
                size,
            });
        }

        // canonical placement and size formulas
        let mut expected = align_up(r.pos);
        let mut payload_end = expected;
        let mut names = std::collections::HashSet::new();
        for e in &entries {
            if !names.insert(e.name.as_str()) {
                return Err(Error::Format(format!("duplicate tensor name {:?}", e.name)));
            }
            let want = expected_size(e)?;
            if e.size != want {
                return Err(Error::Format(format!(
                    "tensor {}: size {} does not match formula {want}",
                    e.name, e.size
                )));
            }
            if e.offset != expected {
                return Err(Error::Format(format!(
                    "tensor {}: offset {} is not the canonical {expected}",
                    e.name, e.offset
                )));
            }
            payload_end = e
                .offset
                .checked_add(e.size)
                .ok_or_else(|| Error::Format("payload end overflows".into()))?;
            expected = align_up(payload_end);
        }
        let total = payload_end
            .checked_add(4)
            .ok_or_else(|| Error::Format("file length overflows".into()))?;
        if bytes.len() < total {
            return Err(Error::TruncatedFile {
                needed: total as u64,
                available: bytes.len() as u64,
            });
        }
        if bytes.len() > total {
            return Err(Error::Format(format!(
                "{} trailing bytes after checksum",
                bytes.len() - total
            )));
        }
        let stored = u32::from_le_bytes(bytes[payload_end..total].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..payload_end]);
        if stored != computed {
            return Err(Error::ChecksumMismatch { stored, computed });
        }
        config.validate().map_err(|e| Error::Format(format!("header: {e}")))?;

        // padding between blobs must be zero for the layout to be canonical
        let mut cursor = r.pos;
        let mut tensors = Vec::with_capacity(entries.len());
        for e in entries {
            if bytes[cursor..e.offset].iter().any(|&b| b != 0) {
                return Err(Error::Format("non-zero padding".into()));
            }
            let blob = &bytes[e.offset..e.offset + e.size];
            cursor = e.offset + e.size;
            let data = match e.recipe {
                None => TensorData::F32 {
                    data: blob
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                    dims: e.dims,
                },
                Some(recipe) => {
                    let (rows, cols) = (e.dims[0], e.dims[1]);
                    let codes = rows * cols / 2;
                    let groups = rows * (cols / recipe.granularity.effective_group_size(cols));
                    let packed = blob[..codes].to_vec();
                    let scales = blob[codes..codes + groups * 4]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect();
                    let zero_points = blob[codes + groups * 4..].to_vec();
                    TensorData::Int4(QuantizedTensor::from_parts(
                        rows,
                        cols,
                        recipe,
                        packed,
                        scales,
                        zero_points,
                    )?)
                }
            };
            tensors.push(NamedTensor { name: e.name, data });
        }
        if bytes[cursor..payload_end].iter().any(|&b| b != 0) {
            return Err(Error::Format("non-zero padding".into()));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Payload size implied by an entry's dtype, dims and recipe.
fn expected_size(e: &Entry) -> Result<usize> {
    let overflow = || Error::Format(format!("tensor {}: size overflows", e.name));
    if e.dims.contains(&0) {
        return Err(Error::Format(format!("tensor {}: zero dimension", e.name)));
    }
    let elems = e
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(overflow)?;
    match (e.dtype, e.recipe) {
        (DTYPE_F32, None) => elems.checked_mul(4).ok_or_else(overflow),
        (DTYPE_INT4, Some(recipe)) => {
            if e.dims.len() != 2 {
                return Err(Error::Format(format!("tensor {}: int4 needs 2 dims", e.name)));
            }
            let (rows, cols) = (e.dims[0], e.dims[1]);
            let group = recipe.granularity.effective_group_size(cols);
            if cols % 2 != 0 || cols % group != 0 {
                return Err(Error::Format(format!(
                    "tensor {}: cols {cols} incompatible with group size {group}",
                    e.name
                )));
            }
            Ok(super::memory::int4_bytes(rows as u64, cols as u64, group as u64, recipe.scheme)
                .try_into()
                .map_err(|_| overflow())?)
        }
        _ => Err(Error::Format(format!("tensor {}: inconsistent dtype", e.name))),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            Error::TruncatedFile {
                needed: (self.pos as u64).saturating_add(n as u64),
                available: self.bytes.len() as u64,
            },
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

//! On-disk container for frozen-encoder features and model tensors.
//!
//! Layout: magic bytes `CSRFPK1\n`, a u32 little-endian header length, a
//! UTF-8 JSON header, then a payload of concatenated little-endian arrays
//! at header-declared offsets. The format is language-neutral and
//! round-trips bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CSRFPK1\n";

/// Element type of one stored tensor. Encoder features are always `F32`;
/// checkpoints may store `F64` when trained in double precision.
#[derive(Debug, Clone, PartialEq)]
pub enum PackData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl PackData {
    fn len(&self) -> usize {
        match self {
            PackData::F32(v) => v.len(),
            PackData::F64(v) => v.len(),
        }
    }

    fn dtype(&self) -> &'static str {
        match self {
            PackData::F32(_) => "f32",
            PackData::F64(_) => "f64",
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            PackData::F32(v) => v.len() * 4,
            PackData::F64(v) => v.len() * 8,
        }
    }

    fn all_finite(&self) -> bool {
        match self {
            PackData::F32(v) => v.iter().all(|x| x.is_finite()),
            PackData::F64(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

/// One named tensor inside a pack.
#[derive(Debug, Clone, PartialEq)]
pub struct PackEntry {
    pub shape: Vec<usize>,
    pub data: PackData,
}

impl PackEntry {
    /// Converts to a 2-D array in the requested scalar type.
    pub fn to_array2<F: Scalar>(&self) -> Result<Array2<F>> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!(
                "expected rank-2 entry, got shape {:?}",
                self.shape
            )));
        }
        let values = self.values_as::<F>();
        Array2::from_shape_vec((self.shape[0], self.shape[1]), values)
            .map_err(|e| Error::Shape(e.to_string()))
    }

    /// Converts to a 1-D array in the requested scalar type.
    pub fn to_array1<F: Scalar>(&self) -> Result<Array1<F>> {
        if self.shape.len() != 1 {
            return Err(Error::Shape(format!(
                "expected rank-1 entry, got shape {:?}",
                self.shape
            )));
        }
        Ok(Array1::from_vec(self.values_as::<F>()))
    }

    fn values_as<F: Scalar>(&self) -> Vec<F> {
        match &self.data {
            PackData::F32(v) => v.iter().map(|&x| F::from_f64c(x as f64)).collect(),
            PackData::F64(v) => v.iter().map(|&x| F::from_f64c(x)).collect(),
        }
    }
}

/// Container of per-layer encoder features (or arbitrary named tensors)
/// for one subject: an image, a text, or a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack {
    pub subject_id: String,
    /// Keyed by layer tag, e.g. "vis.L0", "vis.cls", "txt.L3", "txt.eot", "joint".
    pub entries: BTreeMap<String, PackEntry>,
    /// Small JSON metadata (token counts, config hashes, ...).
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    tag: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset from payload start.
    offset: u64,
    /// Element count.
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    subject_id: String,
    entries: Vec<HeaderEntry>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

impl FeaturePack {
    pub fn new(subject_id: impl Into<String>) -> Self {
        FeaturePack {
            subject_id: subject_id.into(),
            entries: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn insert_f32(&mut self, tag: &str, shape: Vec<usize>, values: Vec<f32>) -> Result<()> {
        self.insert(tag, shape, PackData::F32(values))
    }

    pub fn insert_f64(&mut self, tag: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        self.insert(tag, shape, PackData::F64(values))
    }

    fn insert(&mut self, tag: &str, shape: Vec<usize>, data: PackData) -> Result<()> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape(format!(
                "entry `{tag}`: shape {shape:?} holds {expect} values, got {}",
                data.len()
            )));
        }
        if !data.all_finite() {
            return Err(Error::Numeric(format!(
                "entry `{tag}` contains non-finite values"
            )));
        }
        self.entries
            .insert(tag.to_string(), PackEntry { shape, data });
        Ok(())
    }

    pub fn entry(&self, tag: &str) -> Result<&PackEntry> {
        self.entries.get(tag).ok_or_else(|| {
            Error::Corrupt(format!(
                "pack `{}` has no entry `{tag}` (has: {})",
                self.subject_id,
                self.entries.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.entries.is_empty() {
            return Err(Error::Precondition(format!(
                "pack `{}` has no entries",
                self.subject_id
            )));
        }
        let mut header = Header {
            subject_id: self.subject_id.clone(),
            entries: Vec::with_capacity(self.entries.len()),
            meta: self.meta.clone(),
        };
        let mut payload = Vec::new();
        for (tag, entry) in &self.entries {
            header.entries.push(HeaderEntry {
                tag: tag.clone(),
                shape: entry.shape.clone(),
                dtype: entry.data.dtype().to_string(),
                offset: payload.len() as u64,
                len: entry.data.len() as u64,
            });
            match &entry.data {
                PackData::F32(v) => {
                    for x in v {
                        payload.extend_from_slice(&x.to_le_bytes());
                    }
                }
                PackData::F64(v) => {
                    for x in v {
                        payload.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let header_bytes = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + 4 + header_bytes.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(Error::Corrupt("bad magic bytes".into()));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Corrupt("header extends past end of file".into()))?;
        let header: Header = serde_json::from_slice(&bytes[12..header_end])
            .map_err(|e| Error::Corrupt(format!("header JSON: {e}")))?;
        let payload = &bytes[header_end..];

        let mut pack = FeaturePack::new(header.subject_id);
        pack.meta = header.meta;
        for he in header.entries {
            let expect: usize = he.shape.iter().product();
            if expect != he.len as usize {
                return Err(Error::Corrupt(format!(
                    "entry `{}`: shape {:?} inconsistent with len {}",
                    he.tag, he.shape, he.len
                )));
            }
            let elem_size = match he.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(Error::Corrupt(format!("unknown dtype `{other}`"))),
            };
            let start = he.offset as usize;
            let end = start
                .checked_add(he.len as usize * elem_size)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| {
                    Error::Corrupt(format!(
                        "entry `{}` at offset {} overruns payload of {} bytes",
                        he.tag,
                        he.offset,
                        payload.len()
                    ))
                })?;
            let raw = &payload[start..end];
            let data = match he.dtype.as_str() {
                "f32" => PackData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                _ => PackData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            if !data.all_finite() {
                return Err(Error::Corrupt(format!(
                    "entry `{}` contains non-finite values",
                    he.tag
                )));
            }
            pack.entries.insert(
                he.tag,
                PackEntry {
                    shape: he.shape,
                    data,
                },
            );
        }
        Ok(pack)
    }

    pub fn payload_byte_len(&self) -> usize {
        self.entries.values().map(|e| e.data.byte_len()).sum()
    }
}

/// Writes a pack; parent directories must exist.
pub fn write_feature_pack(pack: &FeaturePack, path: &Path) -> Result<()> {
    let bytes = pack.to_bytes()?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn read_feature_pack(path: &Path) -> Result<FeaturePack> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    FeaturePack::from_bytes(&bytes).map_err(|e| match e {
        Error::Corrupt(msg) => Error::Corrupt(format!("{}: {msg}", path.display())),
        other => other,
    })
}

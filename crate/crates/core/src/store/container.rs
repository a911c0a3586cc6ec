//! Binary weight container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "GPRB"
//! 4       4     version, u32 little-endian (1)
//! 8       8     index length in bytes, u64 little-endian
//! 16      n     index: UTF-8 JSON {name: {dtype, shape, offset, nbytes}}
//! 16+n    ...   payload: raw little-endian row-major tensor data
//! ```
//!
//! Offsets are relative to the start of the payload. Writers emit the index
//! with names sorted and the payload in the same order, so equal tensor sets
//! always produce identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::scalar::{DType, Real};
use crate::spectra::{SpectraError, WeightTensor};

pub const MAGIC: &[u8; 4] = b"GPRB";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

/// A tensor as stored, in its on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    F32(WeightTensor<f32>),
    F64(WeightTensor<f64>),
}

impl StoredTensor {
    pub fn name(&self) -> &str {
        match self {
            StoredTensor::F32(t) => t.name(),
            StoredTensor::F64(t) => t.name(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            StoredTensor::F32(_) => DType::F32,
            StoredTensor::F64(_) => DType::F64,
        }
    }

    /// Widened copy for metric computation.
    pub fn to_f64(&self) -> WeightTensor<f64> {
        match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.clone(),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        fn put<T: Real>(t: &WeightTensor<T>, out: &mut Vec<u8>) {
            for &x in t.data() {
                x.write_le(out);
            }
        }
        match self {
            StoredTensor::F32(t) => put(t, out),
            StoredTensor::F64(t) => put(t, out),
        }
    }
}

impl From<WeightTensor<f32>> for StoredTensor {
    fn from(t: WeightTensor<f32>) -> Self {
        StoredTensor::F32(t)
    }
}

impl From<WeightTensor<f64>> for StoredTensor {
    fn from(t: WeightTensor<f64>) -> Self {
        StoredTensor::F64(t)
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// Serializes tensors into the canonical container byte layout.
pub fn encode_container(tensors: &[StoredTensor]) -> Result<Vec<u8>, StoreError> {
    let mut sorted: Vec<&StoredTensor> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.name().cmp(b.name()));
    if let Some(w) = sorted.windows(2).find(|w| w[0].name() == w[1].name()) {
        return Err(StoreError::DuplicateName(w[0].name().to_string()));
    }
    let mut index = BTreeMap::new();
    let mut payload = Vec::new();
    for t in &sorted {
        let offset = payload.len() as u64;
        t.write_payload(&mut payload);
        index.insert(
            t.name().to_string(),
            IndexEntry {
                dtype: t.dtype(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            },
        );
    }
    let index_json = serde_json::to_vec(&index).map_err(|e| StoreError::CorruptIndex(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + index_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(index_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&index_json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn decode_tensor<T: Real>(name: &str, shape: Vec<usize>, bytes: &[u8]) -> Result<WeightTensor<T>, StoreError> {
    let size = T::DTYPE.size();
    let data: Vec<T> = bytes.chunks_exact(size).map(T::read_le).collect();
    WeightTensor::new(name, shape, data).map_err(|e| match e {
        SpectraError::NonFinite => StoreError::NonFinite(name.to_string()),
        other => StoreError::CorruptIndex(format!("tensor {name:?}: {other}")),
    })
}

/// Parses and validates container bytes. Tensors come back sorted by name.
pub fn decode_container(bytes: &[u8]) -> Result<Vec<StoredTensor>, StoreError> {
    if bytes.len() < MAGIC.len() {
        return Err(StoreError::TruncatedPayload(format!("{} byte file", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(StoreError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(StoreError::TruncatedPayload("header shorter than 16 bytes".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(StoreError::UnsupportedVersion(version));
    }
    let index_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let available = (bytes.len() - HEADER_LEN) as u64;
    if index_len > available {
        return Err(StoreError::TruncatedPayload(format!(
            "index length {index_len} exceeds remaining {available} bytes"
        )));
    }
    let index_end = HEADER_LEN + index_len as usize;
    let index: BTreeMap<String, IndexEntry> =
        serde_json::from_slice(&bytes[HEADER_LEN..index_end]).map_err(|e| StoreError::CorruptIndex(e.to_string()))?;
    let payload = &bytes[index_end..];

    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(index.len());
    for (name, e) in &index {
        let count = element_count(&e.shape)
            .ok_or_else(|| StoreError::CorruptIndex(format!("tensor {name:?}: shape overflows")))?;
        let expected = (count as u64).checked_mul(e.dtype.size() as u64);
        if expected != Some(e.nbytes) {
            return Err(StoreError::CorruptIndex(format!(
                "tensor {name:?}: nbytes {} does not match shape {:?} of {:?}",
                e.nbytes, e.shape, e.dtype
            )));
        }
        let end = e
            .offset
            .checked_add(e.nbytes)
            .ok_or_else(|| StoreError::CorruptIndex(format!("tensor {name:?}: offset overflows")))?;
        if end > payload.len() as u64 {
            return Err(StoreError::TruncatedPayload(format!(
                "tensor {name:?} ends at {end}, payload has {} bytes",
                payload.len()
            )));
        }
        spans.push((e.offset, end, name));
    }
    spans.sort();
    if let Some(w) = spans.windows(2).find(|w| w[1].0 < w[0].1) {
        return Err(StoreError::CorruptIndex(format!("tensors {:?} and {:?} overlap", w[0].2, w[1].2)));
    }

    index
        .into_iter()
        .map(|(name, e)| {
            let bytes = &payload[e.offset as usize..(e.offset + e.nbytes) as usize];
            Ok(match e.dtype {
                DType::F32 => StoredTensor::F32(decode_tensor(&name, e.shape, bytes)?),
                DType::F64 => StoredTensor::F64(decode_tensor(&name, e.shape, bytes)?),
            })
        })
        .collect()
}

pub fn write_container(path: impl AsRef<Path>, tensors: &[StoredTensor]) -> Result<(), StoreError> {
    let bytes = encode_container(tensors)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<Vec<StoredTensor>, StoreError> {
    decode_container(&fs::read(path)?)
}

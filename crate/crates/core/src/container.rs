//! Self-describing binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes   b"OCTC"
//! version      u32       1
//! header_len   u64       byte length of the JSON header
//! header       UTF-8 JSON {"tensors":[{"name","dtype","shape","offset","nbytes"}, ...]}
//! payload      concatenated raw little-endian tensor data
//! ```
//!
//! `offset` is relative to the start of the payload. Tensors are stored
//! back to back in header order with no padding, and the payload must end
//! exactly after the last tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"OCTC";
pub const VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 16;
const MAX_RANK: usize = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated {0}")]
    Truncated(&'static str),
    #[error("malformed header field `{field}`: {reason}")]
    Header { field: String, reason: String },
    #[error("payload length mismatch: header describes {expected} bytes, found {actual}")]
    PayloadLengthMismatch { expected: u64, actual: u64 },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ContainerError {
    fn from(e: std::io::Error) -> Self {
        ContainerError::Io(e.to_string())
    }
}

fn header_err(field: impl Into<String>, reason: impl Into<String>) -> ContainerError {
    ContainerError::Header {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    I32,
    I64,
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::I32 | DType::F32 => 4,
            DType::I64 | DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U8(Vec<u8>),
    I32(Vec<i32>),
    I64(Vec<i64>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::U8(_) => DType::U8,
            TensorData::I32(_) => DType::I32,
            TensorData::I64(_) => DType::I64,
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::U8(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::U8(v) => out.extend_from_slice(v),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        fn chunks<const N: usize, T>(bytes: &[u8], f: fn([u8; N]) -> T) -> Vec<T> {
            bytes
                .chunks_exact(N)
                .map(|c| f(c.try_into().expect("chunk size")))
                .collect()
        }
        match dtype {
            DType::U8 => TensorData::U8(bytes.to_vec()),
            DType::I32 => TensorData::I32(chunks(bytes, i32::from_le_bytes)),
            DType::I64 => TensorData::I64(chunks(bytes, i64::from_le_bytes)),
            DType::F32 => TensorData::F32(chunks(bytes, f32::from_le_bytes)),
            DType::F64 => TensorData::F64(chunks(bytes, f64::from_le_bytes)),
        }
    }

    /// Widens any numeric payload to f64.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::I64(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<Self, ContainerError> {
        let name = name.into();
        let numel = checked_numel(&shape).ok_or_else(|| header_err("shape", "element count overflows"))?;
        if numel != data.len() {
            return Err(header_err(
                "shape",
                format!("`{name}`: shape {shape:?} holds {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(Self { name, shape, data })
    }

    pub fn nbytes(&self) -> usize {
        self.data.len() * self.data.dtype().size()
    }
}

fn checked_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderJson {
    tensors: Vec<EntryJson>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryJson {
    name: String,
    dtype: DType,
    shape: Vec<u64>,
    offset: u64,
    nbytes: u64,
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    tensors: Vec<Tensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor, replacing any tensor with the same name in place.
    pub fn insert(&mut self, tensor: Tensor) {
        match self.tensors.iter_mut().find(|t| t.name == tensor.name) {
            Some(slot) => *slot = tensor,
            None => self.tensors.push(tensor),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries: Vec<EntryJson> = self
            .tensors
            .iter()
            .map(|t| {
                let nbytes = t.nbytes() as u64;
                let e = EntryJson {
                    name: t.name.clone(),
                    dtype: t.data.dtype(),
                    shape: t.shape.iter().map(|&d| d as u64).collect(),
                    offset,
                    nbytes,
                };
                offset += nbytes;
                e
            })
            .collect();
        let header = serde_json::to_vec(&HeaderJson { tensors: entries }).expect("header serializes");
        let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + offset as usize);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            t.data.write_le(&mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ContainerError> {
        if bytes.len() < 4 {
            return Err(ContainerError::Truncated("magic"));
        }
        if bytes[..4] != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        if bytes.len() < 8 {
            return Err(ContainerError::Truncated("version"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        if bytes.len() < PREAMBLE_LEN {
            return Err(ContainerError::Truncated("header length"));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let rest = &bytes[PREAMBLE_LEN..];
        if header_len > rest.len() as u64 {
            return Err(ContainerError::Truncated("header"));
        }
        let (header_bytes, payload) = rest.split_at(header_len as usize);
        let header_str = std::str::from_utf8(header_bytes)
            .map_err(|e| header_err("header", format!("not UTF-8: {e}")))?;
        let header: HeaderJson =
            serde_json::from_str(header_str).map_err(|e| header_err("header", e.to_string()))?;

        let mut expected_offset = 0u64;
        let mut plan = Vec::with_capacity(header.tensors.len());
        for (i, e) in header.tensors.iter().enumerate() {
            let field = |f: &str| format!("tensors[{i}].{f}");
            if e.name.is_empty() {
                return Err(header_err(field("name"), "empty name"));
            }
            if header.tensors[..i].iter().any(|p| p.name == e.name) {
                return Err(header_err(field("name"), format!("duplicate name `{}`", e.name)));
            }
            if e.shape.len() > MAX_RANK {
                return Err(header_err(field("shape"), format!("rank {} exceeds {MAX_RANK}", e.shape.len())));
            }
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| header_err(field("shape"), "element count overflows"))?;
            let want = numel
                .checked_mul(e.dtype.size() as u64)
                .ok_or_else(|| header_err(field("nbytes"), "byte count overflows"))?;
            if e.nbytes != want {
                return Err(header_err(
                    field("nbytes"),
                    format!("{} does not match shape × dtype = {want}", e.nbytes),
                ));
            }
            if e.offset != expected_offset {
                return Err(header_err(
                    field("offset"),
                    format!("expected {expected_offset}, got {}", e.offset),
                ));
            }
            expected_offset = expected_offset
                .checked_add(e.nbytes)
                .ok_or_else(|| header_err(field("nbytes"), "payload size overflows"))?;
            plan.push((e, numel));
        }
        if expected_offset != payload.len() as u64 {
            return Err(ContainerError::PayloadLengthMismatch {
                expected: expected_offset,
                actual: payload.len() as u64,
            });
        }

        let mut tensors = Vec::with_capacity(plan.len());
        for (e, _numel) in plan {
            let start = e.offset as usize;
            let end = start + e.nbytes as usize;
            let shape = e
                .shape
                .iter()
                .map(|&d| usize::try_from(d).map_err(|_| header_err("shape", "dimension too large")))
                .collect::<Result<Vec<_>, _>>()?;
            tensors.push(Tensor {
                name: e.name.clone(),
                shape,
                data: TensorData::read_le(e.dtype, &payload[start..end]),
            });
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, ContainerError> {
        Self::decode(&fs::read(path)?)
    }
}

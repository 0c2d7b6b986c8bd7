//! `P3DT` binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "P3DT" | version u8 = 1 | dtype u8 | rank u8 | reserved u8 = 0 | rank × u32 dims | row-major data
//! ```
//!
//! dtype codes: 1 = f32, 2 = f64, 3 = u8.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"P3DT";
pub const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
            DType::U8 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U8),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<u32>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn new(shape: Vec<u32>, data: TensorData) -> Result<Self> {
        let n: usize = shape.iter().map(|&d| d as usize).product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "tensor file shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        if shape.len() > u8::MAX as usize {
            return Err(Error::Dimension(format!(
                "rank {} exceeds 255",
                shape.len()
            )));
        }
        Ok(TensorFile { shape, data })
    }

    pub fn f64(t: &Tensor) -> Self {
        TensorFile {
            shape: dims(t),
            data: TensorData::F64(t.data().to_vec()),
        }
    }

    pub fn f32(t: &Tensor) -> Self {
        TensorFile {
            shape: dims(t),
            data: TensorData::F32(t.data().iter().map(|&v| v as f32).collect()),
        }
    }

    /// Quantizes values in `[0, 1]` to bytes.
    pub fn u8_unit(t: &Tensor) -> Self {
        let data = t
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        TensorFile {
            shape: dims(t),
            data: TensorData::U8(data),
        }
    }

    /// Converts to an `f64` tensor; u8 data is mapped back to `[0, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| f64::from(x) / 255.0).collect(),
        };
        Tensor::new(
            self.shape.iter().map(|&d| d as usize).collect::<Vec<_>>(),
            data,
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.data.dtype();
        let mut out =
            Vec::with_capacity(8 + 4 * self.shape.len() + dtype.width() * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(dtype.code());
        out.push(self.shape.len() as u8);
        out.push(0);
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err("missing P3DT magic".into());
        }
        if bytes[4] != VERSION {
            return Err(format!("unsupported version {}", bytes[4]));
        }
        let dtype =
            DType::from_code(bytes[5]).ok_or_else(|| format!("unknown dtype code {}", bytes[5]))?;
        let rank = bytes[6] as usize;
        let header = 8 + 4 * rank;
        if bytes.len() < header {
            return Err("truncated header".into());
        }
        let shape: Vec<u32> = (0..rank)
            .map(|i| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()))
            .collect();
        let n: usize = shape.iter().map(|&d| d as usize).product();
        let body = &bytes[header..];
        if body.len() != n * dtype.width() {
            return Err(format!(
                "expected {} data bytes, found {}",
                n * dtype.width(),
                body.len()
            ));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::U8 => TensorData::U8(body.to_vec()),
        };
        Ok(TensorFile { shape, data })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        TensorFile::decode(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}

fn dims(t: &Tensor) -> Vec<u32> {
    t.shape().iter().map(|&d| d as u32).collect()
}

/// Writes through a sibling temp file and renames, so readers never observe
/// a partially written file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

//! The `CSGT` tensor container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | field                                   |
//! |--------------|-----------------------------------------|
//! | 4            | magic `"CSGT"`                          |
//! | 2            | version, `u16` = 1                      |
//! | 1            | dtype: 1 = `f32`, 2 = `f64`             |
//! | 1            | rank: 4 (tensor) or 5 (slice corpus)    |
//! | 4 × rank     | dims, `u32` each                        |
//! | rest         | payload, row-major, last index fastest  |
//!
//! A rank-5 file is a stack of equally shaped rank-4 tensors; dim 0 is the
//! number of tensors.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{check_finite, Shape4, Tensor4};

pub const MAGIC: [u8; 4] = *b"CSGT";
pub const VERSION: u16 = 1;

/// Scalar width of a file payload. Values are always `f64` in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::Unsupported { what: "dtype", value: other.into() }),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Tensor(Tensor4),
    Stack(Vec<Tensor4>),
}

/// A decoded container: payload plus the on-disk scalar width.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dtype: Dtype,
    pub payload: Payload,
}

impl TensorFile {
    pub fn into_tensor(self) -> Result<Tensor4> {
        match self.payload {
            Payload::Tensor(t) => Ok(t),
            Payload::Stack(_) => Err(Error::ShapeMismatch(
                "expected a rank-4 tensor file, found a rank-5 corpus".into(),
            )),
        }
    }

    pub fn into_stack(self) -> Result<Vec<Tensor4>> {
        match self.payload {
            Payload::Stack(s) => Ok(s),
            Payload::Tensor(_) => Err(Error::ShapeMismatch(
                "expected a rank-5 corpus file, found a rank-4 tensor".into(),
            )),
        }
    }
}

fn header(dtype: Dtype, dims: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(8 + 4 * dims.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(dims.len() as u8);
    for &d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::DimensionOverflow(dims.iter().map(|&x| x as u32).collect()))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

fn push_values(out: &mut Vec<u8>, dtype: Dtype, values: &[f64]) -> Result<()> {
    match dtype {
        Dtype::F64 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => {
            for (index, &v) in values.iter().enumerate() {
                let narrow = v as f32;
                if !narrow.is_finite() {
                    return Err(Error::NonFinite { index });
                }
                out.extend_from_slice(&narrow.to_le_bytes());
            }
        }
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor4, dtype: Dtype) -> Result<Vec<u8>> {
    let mut out = header(dtype, &t.shape())?;
    push_values(&mut out, dtype, t.as_slice())?;
    Ok(out)
}

/// Encodes a non-empty stack of tensors sharing one shape as a rank-5 file.
pub fn encode_stack(items: &[Tensor4], dtype: Dtype) -> Result<Vec<u8>> {
    let first = items.first().ok_or(Error::EmptyCorpus)?;
    let shape = first.shape();
    if let Some(bad) = items.iter().find(|t| t.shape() != shape) {
        return Err(Error::ShapeMismatch(format!(
            "stack mixes shapes {shape:?} and {:?}",
            bad.shape()
        )));
    }
    let mut out = header(dtype, &[items.len(), shape[0], shape[1], shape[2], shape[3]])?;
    for t in items {
        push_values(&mut out, dtype, t.as_slice())?;
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<TensorFile> {
    let fixed = bytes.get(..8).ok_or(Error::Truncated { expected: 8, found: bytes.len() })?;
    let magic: [u8; 4] = fixed[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u16::from_le_bytes([fixed[4], fixed[5]]);
    if version != VERSION {
        return Err(Error::Unsupported { what: "version", value: version.into() });
    }
    let dtype = Dtype::from_code(fixed[6])?;
    let rank = fixed[7] as usize;
    if rank != 4 && rank != 5 {
        return Err(Error::Unsupported { what: "rank", value: rank as u32 });
    }
    let header_len = 8 + 4 * rank;
    let dim_bytes = bytes
        .get(8..header_len)
        .ok_or(Error::Truncated { expected: header_len, found: bytes.len() })?;
    let dims: Vec<u32> = dim_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if dims.contains(&0) {
        return Err(Error::ZeroDimension(dims.iter().map(|&d| d as usize).collect()));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .and_then(|n| n.checked_mul(dtype.width()))
        .filter(|&n| n <= isize::MAX as usize)
        .ok_or_else(|| Error::DimensionOverflow(dims.clone()))?;
    let body = &bytes[header_len..];
    if body.len() < count {
        return Err(Error::Truncated { expected: count, found: body.len() });
    }
    if body.len() > count {
        return Err(Error::Unsupported {
            what: "trailing byte count",
            value: (body.len() - count) as u32,
        });
    }
    let values: Vec<f64> = match dtype {
        Dtype::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    check_finite(&values)?;

    let dims: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    let payload = if rank == 4 {
        Payload::Tensor(Tensor4::new([dims[0], dims[1], dims[2], dims[3]], values)?)
    } else {
        let shape: Shape4 = [dims[1], dims[2], dims[3], dims[4]];
        let per: usize = shape.iter().product();
        Payload::Stack(
            values
                .chunks_exact(per)
                .map(|c| Tensor4::new(shape, c.to_vec()))
                .collect::<Result<_>>()?,
        )
    };
    Ok(TensorFile { dtype, payload })
}

pub fn read_file(path: impl AsRef<Path>) -> Result<TensorFile> {
    decode(&fs::read(path)?)
}

pub fn write_tensor_file(path: impl AsRef<Path>, t: &Tensor4, dtype: Dtype) -> Result<()> {
    fs::write(path, encode_tensor(t, dtype)?)?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Tensor4> {
    read_file(path)?.into_tensor()
}

pub fn write_stack_file(path: impl AsRef<Path>, items: &[Tensor4], dtype: Dtype) -> Result<()> {
    fs::write(path, encode_stack(items, dtype)?)?;
    Ok(())
}

pub fn read_stack_file(path: impl AsRef<Path>) -> Result<Vec<Tensor4>> {
    read_file(path)?.into_stack()
}

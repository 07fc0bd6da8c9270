//! Row-major tensors and the `SWATTNS1` binary file format.
//!
//! Layout on disk (all integers little-endian, no padding):
//!
//! | bytes          | content                                  |
//! |----------------|------------------------------------------|
//! | 8              | magic `SWATTNS1`                         |
//! | 4              | `u32` rank                               |
//! | 8 × rank       | `u64` extents, outermost first           |
//! | 1              | precision tag (0 = f32, 1 = f64)         |
//! | width × numel  | raw little-endian payload                |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Precision, Scalar};

pub const MAGIC: &[u8; 8] = b"SWATTNS1";

/// Dense row-major buffer with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    /// Build from `f64` values, rounding each to storage precision.
    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::narrow(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.widen()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::narrow(v.widen())).collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let width = T::PRECISION.byte_width();
        let mut out = Vec::with_capacity(8 + 4 + 8 * self.rank() + 1 + width * self.numel());
        write_header(&mut out, &self.shape, T::PRECISION.tag());
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    /// Decode a tensor; fails if the file holds the other precision.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        match AnyTensor::from_bytes(bytes)? {
            AnyTensor::F32(t) => t.downcast(),
            AnyTensor::F64(t) => t.downcast(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    fn downcast<U: Scalar>(self) -> Result<Tensor<U>> {
        if T::PRECISION != U::PRECISION {
            return Err(Error::PrecisionMismatch {
                expected: U::PRECISION,
                found: T::PRECISION,
            });
        }
        Ok(self.cast())
    }
}

/// A tensor whose precision is only known at run time (e.g. loaded from disk).
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn precision(&self) -> Precision {
        match self {
            AnyTensor::F32(_) => Precision::F32,
            AnyTensor::F64(_) => Precision::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (shape, tag, payload) = read_header(bytes)?;
        let precision = Precision::from_tag(tag).ok_or(Error::UnknownPrecision(tag))?;
        match precision {
            Precision::F32 => decode_payload(shape, payload).map(AnyTensor::F32),
            Precision::F64 => decode_payload(shape, payload).map(AnyTensor::F64),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub fn save_tensor<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    t.save(path)
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Tensor::load(path)
}

pub(crate) fn write_header(out: &mut Vec<u8>, shape: &[usize], tag: u8) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &extent in shape {
        out.extend_from_slice(&(extent as u64).to_le_bytes());
    }
    out.push(tag);
}

/// Returns `(shape, tag, payload)`.
pub(crate) fn read_header(bytes: &[u8]) -> Result<(Vec<usize>, u8, &[u8])> {
    if bytes.len() < 12 {
        return Err(Error::MalformedHeader(format!(
            "{} bytes is shorter than the fixed header",
            bytes.len()
        )));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::MalformedHeader("bad magic bytes".into()));
    }
    let rank = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let extents_end = 12usize
        .checked_add(rank.checked_mul(8).ok_or_else(|| rank_overflow(rank))?)
        .ok_or_else(|| rank_overflow(rank))?;
    if bytes.len() < extents_end + 1 {
        return Err(Error::MalformedHeader(format!(
            "rank {rank} header needs {} bytes, file has {}",
            extents_end + 1,
            bytes.len()
        )));
    }
    let shape = bytes[12..extents_end]
        .chunks_exact(8)
        .map(|c| {
            usize::try_from(u64::from_le_bytes(c.try_into().unwrap()))
                .map_err(|_| Error::MalformedHeader("extent does not fit in usize".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((shape, bytes[extents_end], &bytes[extents_end + 1..]))
}

fn rank_overflow(rank: usize) -> Error {
    Error::MalformedHeader(format!("rank {rank} overflows"))
}

fn decode_payload<T: Scalar>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<T>> {
    let width = T::PRECISION.byte_width();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::MalformedHeader("element count overflows".into()))?;
    let expected = numel
        .checked_mul(width)
        .ok_or_else(|| Error::MalformedHeader("payload size overflows".into()))?;
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            got: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let data = payload.chunks_exact(width).map(T::read_le).collect();
    Tensor::new(shape, data)
}

/// Write-temp-then-rename so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = match dir {
        Some(d) => d.join(&tmp_name),
        None => tmp_name.into(),
    };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

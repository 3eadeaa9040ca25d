//! Named-tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DATA" | u32 version | u32 metadata_len | metadata (UTF-8)
//! u32 count | count × (u32 name_len, name, u8 dtype, u32 rank, rank × u64 extent)
//! payload: each tensor's values in header order, f64 or f32 per dtype
//! ```

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DATA";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F64,
    F32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F64 => 0,
            DType::F32 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DType::F64),
            1 => Ok(DType::F32),
            other => Err(Error::Data(format!("unknown dtype code {other}"))),
        }
    }
}

pub fn write_archive<W: Write>(
    out: &mut W,
    params: &ParamStore,
    metadata: &str,
    dtype: DType,
) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(metadata.len() as u32).to_le_bytes())?;
    out.write_all(metadata.as_bytes())?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[dtype.code()])?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for (_, t) in params.iter() {
        for &v in t.data() {
            match dtype {
                DType::F64 => out.write_all(&v.to_le_bytes())?,
                DType::F32 => out.write_all(&(v as f32).to_le_bytes())?,
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Data(e.to_string()))
}

/// Returns the parameters and the metadata string.
pub fn read_archive<R: Read>(input: &mut R) -> Result<(ParamStore, String)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Data("not a tensor archive".into()));
    }
    let version = read_u32(input)?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported archive version {version}")));
    }
    let meta_len = read_u32(input)? as usize;
    let metadata = read_string(input, meta_len)?;
    let count = read_u32(input)? as usize;
    let mut headers = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(input)? as usize;
        let name = read_string(input, name_len)?;
        let mut code = [0u8; 1];
        input.read_exact(&mut code)?;
        let dtype = DType::from_code(code[0])?;
        let rank = read_u32(input)? as usize;
        let shape = (0..rank)
            .map(|_| read_u64(input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        headers.push((name, dtype, shape));
    }
    let mut params = ParamStore::new();
    for (name, dtype, shape) in headers {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            match dtype {
                DType::F64 => {
                    let mut b = [0u8; 8];
                    input.read_exact(&mut b)?;
                    data.push(f64::from_le_bytes(b));
                }
                DType::F32 => {
                    let mut b = [0u8; 4];
                    input.read_exact(&mut b)?;
                    data.push(f32::from_le_bytes(b) as f64);
                }
            }
        }
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok((params, metadata))
}

pub fn archive_bytes(params: &ParamStore, metadata: &str) -> Vec<u8> {
    let mut buf = Vec::new();
    write_archive(&mut buf, params, metadata, DType::F64).expect("in-memory write");
    buf
}

/// Hex SHA-256 of arbitrary bytes; used as a content hash for artifacts.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

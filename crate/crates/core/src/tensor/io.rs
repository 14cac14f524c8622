//! FBT1 tensor files.
//!
//! Layout: `b"FBT1"`, little-endian `u32` rank, `rank` little-endian `u32`
//! extents, one `u8` dtype code, then the raw little-endian element buffer.

use std::fs;
use std::path::Path;

use super::element::{DType, Element};
use super::Tensor;
use crate::error::{Error, Result};

pub const FBT_MAGIC: &[u8; 4] = b"FBT1";

pub fn encode_tensor<T: Element>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * tensor.rank() + T::DTYPE.size() * tensor.len());
    out.extend_from_slice(FBT_MAGIC);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(T::DTYPE as u8);
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> std::result::Result<&'a [u8], String> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| format!("truncated at byte {}", *pos))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

fn u32_at(bytes: &[u8], pos: &mut usize) -> std::result::Result<u32, String> {
    Ok(u32::from_le_bytes(take(bytes, pos, 4)?.try_into().unwrap()))
}

/// Decodes one tensor from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode_tensor<T: Element>(bytes: &[u8]) -> std::result::Result<(Tensor<T>, usize), String> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != FBT_MAGIC {
        return Err("bad magic, expected FBT1".into());
    }
    let rank = u32_at(bytes, &mut pos)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u32_at(bytes, &mut pos)? as usize);
    }
    let code = take(bytes, &mut pos, 1)?[0];
    let dtype = DType::from_code(code).ok_or_else(|| format!("unknown dtype code {code}"))?;
    if dtype != T::DTYPE {
        return Err(format!("dtype {dtype:?} where {:?} was expected", T::DTYPE));
    }
    let len: usize = shape.iter().product();
    let size = dtype.size();
    let raw = take(bytes, &mut pos, len * size)?;
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    let tensor = Tensor::new(shape, data).map_err(|e| e.to_string())?;
    Ok((tensor, pos))
}

pub fn write_tensor<T: Element>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_tensor(tensor))?;
    Ok(())
}

pub fn read_tensor<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    let (tensor, used) = decode_tensor(&bytes).map_err(|r| Error::format(path, r))?;
    if used != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(tensor)
}

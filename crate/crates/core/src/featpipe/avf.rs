use std::fs;
use std::path::Path;

use crate::gradcore::{DType, Scalar, Tensor};

use super::FeatError;

pub const AVF_MAGIC: &[u8; 4] = b"AVF1";

/// Writes `magic | dtype u8 | rank u8 | extents u32… | row-major LE values`.
pub fn write_avf<T: Scalar>(path: &Path, tensor: &Tensor<T>) -> Result<(), FeatError> {
    let mut buf = Vec::with_capacity(6 + 4 * tensor.rank() + tensor.len() * T::DTYPE.size_of());
    buf.extend_from_slice(AVF_MAGIC);
    buf.push(T::DTYPE.code());
    buf.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    T::to_le_bytes_vec(tensor.data(), &mut buf);
    fs::write(path, buf).map_err(|source| FeatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads an AVF1 file, converting its values to `T`.
pub fn read_avf<T: Scalar>(path: &Path) -> Result<Tensor<T>, FeatError> {
    let bytes = fs::read(path).map_err(|source| FeatError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |msg: &str| FeatError::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 6 || &bytes[..4] != AVF_MAGIC {
        return Err(bad("missing AVF1 magic"));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| bad("unknown dtype code"))?;
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let body = &bytes[header..];
    if body.len() != count * dtype.size_of() {
        return Err(bad("payload length does not match extents"));
    }
    let values: Vec<T> = match dtype {
        DType::F32 => body
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_chunk(c) as f64))
            .collect(),
        DType::F64 => body.chunks_exact(8).map(|c| T::lit(f64::from_le_chunk(c))).collect(),
    };
    Tensor::new(shape, values).map_err(|e| bad(&e.to_string()))
}

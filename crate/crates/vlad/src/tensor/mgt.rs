//! The MGT1 raw tensor file format.
//!
//! Layout: magic `MGT1` (4 bytes), u32 little-endian rank, `rank` u32
//! little-endian extents, one u8 dtype code (0 = f32, 1 = f64), then the
//! scalars as raw little-endian bytes in row-major order. Writers are
//! byte-deterministic: the same tensor always serializes to the same bytes.

use std::io::{Read, Write};
use std::path::Path;

use super::{Dtype, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MGT1";

/// Serialize a tensor into any writer.
pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u32).to_le_bytes())?;
    }
    w.write_all(&[T::DTYPE.code()])?;
    w.write_all(&t.to_le_bytes())?;
    Ok(())
}

/// Header of an MGT1 blob: extents and dtype, without the payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MgtHeader {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
}

impl MgtHeader {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn payload_bytes(&self) -> usize {
        self.numel() * self.dtype.size_bytes()
    }
}

fn bad(path: &str, msg: impl Into<String>) -> Error {
    Error::FileFormat {
        path: path.to_string(),
        msg: msg.into(),
    }
}

/// Read and validate the header, leaving the reader at the payload.
pub fn read_header<R: Read>(r: &mut R, path: &str) -> Result<MgtHeader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| bad(path, "truncated header"))?;
    if &magic != MAGIC {
        return Err(bad(path, format!("bad magic {magic:?}, expected \"MGT1\"")));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)
        .map_err(|_| bad(path, "truncated rank"))?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank > 8 {
        return Err(bad(path, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf)
            .map_err(|_| bad(path, "truncated extents"))?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let mut code = [0u8; 1];
    r.read_exact(&mut code)
        .map_err(|_| bad(path, "truncated dtype"))?;
    let dtype = Dtype::from_code(code[0])
        .ok_or_else(|| bad(path, format!("unknown dtype code {}", code[0])))?;
    Ok(MgtHeader { shape, dtype })
}

/// Deserialize a tensor, requiring the stored dtype to match `T`.
pub fn read_tensor<T: Scalar, R: Read>(r: &mut R, path: &str) -> Result<Tensor<T>> {
    let header = read_header(r, path)?;
    if header.dtype != T::DTYPE {
        return Err(bad(
            path,
            format!("stored dtype {} but {} requested", header.dtype, T::DTYPE),
        ));
    }
    let mut payload = vec![0u8; header.payload_bytes()];
    r.read_exact(&mut payload)
        .map_err(|_| bad(path, "truncated payload"))?;
    let size = T::DTYPE.size_bytes();
    let data: Vec<T> = payload.chunks_exact(size).map(T::read_le).collect();
    Ok(Tensor::new(header.shape, data)?)
}

pub fn write_to_path<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_tensor(&mut file, t)?;
    file.flush()?;
    Ok(())
}

pub fn read_from_path<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    read_tensor(&mut file, &path.display().to_string())
}

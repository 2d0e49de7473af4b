//! The "ADVT" tensor-container format.
//!
//! Layout: magic bytes `ADVT`; format version as 4-byte little-endian
//! unsigned; tensor count (4-byte LE); then per tensor: name length
//! (4-byte LE) + UTF-8 name, rank (4-byte LE), dims (4-byte LE each),
//! dtype tag (one byte, 0 = f32, 1 = f64), raw little-endian data.
//! Write → read → write produces byte-identical files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::models::ParamSet;
use crate::scalar::{Dtype, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ADVT";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<S: Scalar>(path: &Path, tensors: &[(String, Tensor<S>)]) -> Result<()> {
    let bytes = encode(tensors);
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode(&bytes, &path.display().to_string())
}

pub fn encode<S: Scalar>(tensors: &[(String, Tensor<S>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.push(S::DTYPE as u8);
        for &v in tensor.iter() {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                path: self.path.into(),
                detail: format!("truncated while reading {what} at byte {}", self.pos),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }
}

pub fn decode<S: Scalar>(bytes: &[u8], path: &str) -> Result<Vec<(String, Tensor<S>)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            path: path.into(),
            detail: "bad magic (expected ADVT)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            path: path.into(),
            detail: format!("unsupported format version {version}"),
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|_| {
            Error::Format {
                path: path.into(),
                detail: "tensor name is not UTF-8".into(),
            }
        })?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dim")? as usize);
        }
        let tag = r.take(1, "dtype")?[0];
        let dtype = Dtype::from_tag(tag).ok_or_else(|| Error::Format {
            path: path.into(),
            detail: format!("unknown dtype tag {tag}"),
        })?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.size_bytes(), "tensor data")?;
        let data: Vec<S> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| S::from_f64_lossy(f32::read_le(c).to_f64_lossy()))
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| S::from_f64_lossy(f64::read_le(c)))
                .collect(),
        };
        tensors.push((name, Tensor::new(shape, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            path: path.into(),
            detail: format!("{} trailing bytes after tensor data", bytes.len() - r.pos),
        });
    }
    Ok(tensors)
}

/// Flattens a parameter set into named tensors under `prefix.`.
pub fn params_to_tensors<S: Scalar>(prefix: &str, params: &ParamSet<S>) -> Vec<(String, Tensor<S>)> {
    params
        .entries()
        .iter()
        .map(|e| (format!("{prefix}.{}", e.name), e.value.clone()))
        .collect()
}

/// Loads `prefix.`-named tensors back into a parameter set; every entry
/// of `params` must be present with a matching shape.
pub fn load_params<S: Scalar>(
    prefix: &str,
    tensors: &[(String, Tensor<S>)],
    params: &mut ParamSet<S>,
    path: &str,
) -> Result<()> {
    for i in 0..params.entries().len() {
        let want = format!("{prefix}.{}", params.entries()[i].name);
        let found = tensors.iter().find(|(name, _)| *name == want);
        match found {
            Some((_, tensor)) if tensor.shape() == params.entries()[i].value.shape() => {
                params.set_by_index(i, tensor.clone());
            }
            Some((_, tensor)) => {
                return Err(Error::Format {
                    path: path.into(),
                    detail: format!(
                        "tensor {want} has shape {:?}, expected {:?}",
                        tensor.shape(),
                        params.entries()[i].value.shape()
                    ),
                })
            }
            None => {
                return Err(Error::Format {
                    path: path.into(),
                    detail: format!("missing tensor {want}"),
                })
            }
        }
    }
    Ok(())
}

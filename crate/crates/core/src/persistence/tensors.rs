//! Named tensor files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic  b"CBRT"
//! u32    format version (1)
//! u32    tensor count
//! per tensor:
//!   u32  name length, then UTF-8 name bytes
//!   u8   dtype (0 = f64)
//!   u32  rank, then rank × u64 dimensions
//!   f64  × product(dimensions), row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::repro::ByteReader;

const MAGIC: &[u8; 4] = b"CBRT";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Tensor {
            name: name.into(),
            shape,
            data,
        }
    }

    /// Bitwise equality (distinguishes `-0.0` and NaN payloads).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.name == other.name
            && self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

pub fn encode(tensors: &[(&str, &[usize], &[f64])]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape.iter() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<Tensor>> {
    let mut r = ByteReader { bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::corrupt(path, "not a tensor file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::corrupt(path, format!("unsupported tensor file version {version}")));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::corrupt(path, "tensor name is not utf-8"))?;
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::corrupt(path, format!("unsupported dtype {dtype} for `{name}`")));
        }
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::corrupt(path, "tensor size overflows"))?;
        let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::corrupt(path, "tensor size overflows"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(Error::corrupt(path, "trailing bytes after last tensor"));
    }
    Ok(tensors)
}

pub fn write(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let refs: Vec<(&str, &[usize], &[f64])> = tensors
        .iter()
        .map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.as_slice()))
        .collect();
    fs::write(path, encode(&refs)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(values in prop::collection::vec(any::<f64>(), 0..40), split in 0usize..5) {
            let split = split.min(values.len());
            let tensors = vec![
                Tensor::new("a", vec![split], values[..split].to_vec()),
                Tensor::new("b.c", vec![1, values.len() - split], values[split..].to_vec()),
            ];
            let refs: Vec<_> = tensors.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.as_slice())).collect();
            let bytes = encode(&refs);
            let back = decode(&bytes, Path::new("x")).unwrap();
            prop_assert!(back.iter().zip(&tensors).all(|(a, b)| a.bit_eq(b)));
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let bytes = encode(&[("w", &[2], &[1.0, 2.0])]);
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(
                decode(&bytes[..cut], Path::new("x")),
                Err(Error::CorruptFile { .. })
            ));
        }
    }
}

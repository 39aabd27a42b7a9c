//! `.ptf` tensor files.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | content                                  |
//! |--------------|------------------------------------------|
//! | 0..4         | magic `PRLT`                             |
//! | 4            | version, currently `1`                   |
//! | 5            | dtype: `1` = f32, `2` = f64              |
//! | 6            | ndim                                     |
//! | 7..7+4·ndim  | dims as u32                              |
//! | rest         | row-major payload                        |
//!
//! Feature bundles are always written as f32. Checkpoints use f64 so that a
//! reloaded model reproduces the in-memory forward pass exactly.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

pub const MAGIC: &[u8; 4] = b"PRLT";
pub const VERSION: u8 = 1;
const HEADER_FIXED: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PtfError {
    #[error("bad magic bytes {0:?}, expected \"PRLT\"")]
    BadMagic(Vec<u8>),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unsupported dtype byte {0}")]
    DType(u8),
    #[error("truncated at byte offset {offset}: need {needed} bytes, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("{extra} trailing bytes after payload ending at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("payload value {index} is not finite")]
    NonFinite { index: usize },
    #[error("invalid tensor: {0}")]
    Tensor(TensorError),
    #[error("{0}")]
    Io(String),
}

pub fn encode(tensor: &Tensor, dtype: DType) -> Vec<u8> {
    let shape = tensor.shape();
    let mut out = Vec::with_capacity(HEADER_FIXED + 4 * shape.len() + tensor.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        DType::F32 => {
            for &v in tensor.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn need(bytes: &[u8], offset: usize, needed: usize) -> Result<(), PtfError> {
    if bytes.len() < offset + needed {
        return Err(PtfError::Truncated {
            offset,
            needed,
            len: bytes.len(),
        });
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<(Tensor, DType), PtfError> {
    need(bytes, 0, HEADER_FIXED)?;
    if &bytes[0..4] != MAGIC {
        return Err(PtfError::BadMagic(bytes[0..4].to_vec()));
    }
    if bytes[4] != VERSION {
        return Err(PtfError::Version(bytes[4]));
    }
    let dtype = match bytes[5] {
        1 => DType::F32,
        2 => DType::F64,
        other => return Err(PtfError::DType(other)),
    };
    let ndim = bytes[6] as usize;
    need(bytes, HEADER_FIXED, 4 * ndim)?;
    let shape: Vec<usize> = bytes[HEADER_FIXED..HEADER_FIXED + 4 * ndim]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let start = HEADER_FIXED + 4 * ndim;
    let width = dtype.width();
    // Report the first value that does not fit.
    if bytes.len() < start + count * width {
        let available = (bytes.len() - start) / width;
        return Err(PtfError::Truncated {
            offset: start + available * width,
            needed: width,
            len: bytes.len(),
        });
    }
    let end = start + count * width;
    if bytes.len() > end {
        return Err(PtfError::TrailingBytes {
            offset: end,
            extra: bytes.len() - end,
        });
    }
    let payload = &bytes[start..end];
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    };
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(PtfError::NonFinite { index });
    }
    let tensor = Tensor::new(shape, data).map_err(PtfError::Tensor)?;
    Ok((tensor, dtype))
}

pub fn write_file(path: &Path, tensor: &Tensor, dtype: DType) -> std::io::Result<Vec<u8>> {
    let bytes = encode(tensor, dtype);
    fs::write(path, &bytes)?;
    Ok(bytes)
}

pub fn read_file(path: &Path) -> Result<(Tensor, DType, Vec<u8>), PtfError> {
    let bytes = fs::read(path).map_err(|e| PtfError::Io(e.to_string()))?;
    let (t, d) = decode(&bytes)?;
    Ok((t, d, bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&t, DType::F32);
        let mut expected = b"PRLT".to_vec();
        expected.extend_from_slice(&[1, 1, 2]);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode(&t, DType::F32);
        // header is 11 bytes; keep one full value plus half of the next
        let err = decode(&bytes[..11 + 6]).unwrap_err();
        assert_eq!(
            err,
            PtfError::Truncated {
                offset: 15,
                needed: 4,
                len: 17
            }
        );
    }

    #[test]
    fn rejects_header_corruption_and_nan() {
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut bytes = encode(&t, DType::F32);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(PtfError::BadMagic(_))));

        let mut bytes = encode(&t, DType::F32);
        bytes[4] = 9;
        assert_eq!(decode(&bytes), Err(PtfError::Version(9)));

        let mut bytes = encode(&t, DType::F32);
        bytes[5] = 7;
        assert_eq!(decode(&bytes), Err(PtfError::DType(7)));

        let mut bytes = encode(&t, DType::F32);
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(decode(&bytes), Err(PtfError::NonFinite { index: 0 }));

        let mut bytes = encode(&t, DType::F32);
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(PtfError::TrailingBytes { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            vals in proptest::collection::vec(-1e6f32..1e6, 1..40),
            wide in any::<bool>(),
        ) {
            let t = Tensor::new(vec![vals.len()], vals.iter().map(|&v| v as f64).collect()).unwrap();
            let dtype = if wide { DType::F64 } else { DType::F32 };
            let (back, d) = decode(&encode(&t, dtype)).unwrap();
            prop_assert_eq!(d, dtype);
            prop_assert_eq!(back, t);
        }
    }
}

//! FTNS tensor serialization: the checkpoint and wire-payload format.
//!
//! Layout: magic `FTNS` (0x46 0x54 0x4E 0x53), u8 version = 1, u8 dtype
//! (1 = f32, 2 = f64), u8 ndim, u8 zero pad, then `ndim` dimension sizes as
//! u32 little-endian, then row-major values little-endian.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Dtype, Scalar, Tensor, TensorError};

pub const FTNS_MAGIC: [u8; 4] = [0x46, 0x54, 0x4E, 0x53];
pub const FTNS_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum FtnsError {
    #[error("bad magic bytes {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype tag {0}")]
    UnsupportedDtype(u8),
    #[error("dtype mismatch: file holds {file:?}, caller expects {expected:?}")]
    DtypeMismatch { file: Dtype, expected: Dtype },
    #[error("truncated input: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("{0} trailing bytes after tensor payload")]
    TrailingBytes(usize),
    #[error("invalid tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Tensor of either supported precision, as read from a file whose dtype is
/// not known in advance.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }
}

pub fn encode_tensor<T: Scalar>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * tensor.rank() + T::BYTES * tensor.len());
    out.extend_from_slice(&FTNS_MAGIC);
    out.push(FTNS_VERSION);
    out.push(T::DTYPE as u8);
    out.push(tensor.rank() as u8);
    out.push(0);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut out);
    }
    out
}

fn need(bytes: &[u8], n: usize) -> Result<(), FtnsError> {
    if bytes.len() < n {
        return Err(FtnsError::Truncated {
            needed: n,
            have: bytes.len(),
        });
    }
    Ok(())
}

/// Parses one tensor and returns it with the number of bytes consumed,
/// allowing concatenated streams.
pub fn decode_tensor_prefix(bytes: &[u8]) -> Result<(AnyTensor, usize), FtnsError> {
    need(bytes, 8)?;
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != FTNS_MAGIC {
        return Err(FtnsError::BadMagic(magic));
    }
    if bytes[4] != FTNS_VERSION {
        return Err(FtnsError::UnsupportedVersion(bytes[4]));
    }
    let dtype = match bytes[5] {
        1 => Dtype::F32,
        2 => Dtype::F64,
        other => return Err(FtnsError::UnsupportedDtype(other)),
    };
    let ndim = bytes[6] as usize;
    let header = 8 + 4 * ndim;
    need(bytes, header)?;
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let off = 8 + 4 * i;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let mut count: usize = 1;
    for &d in &shape {
        count = count.checked_mul(d).ok_or(FtnsError::Truncated {
            needed: usize::MAX,
            have: bytes.len(),
        })?;
    }

    fn read_values<T: Scalar>(
        bytes: &[u8],
        header: usize,
        count: usize,
        shape: Vec<usize>,
    ) -> Result<(Tensor<T>, usize), FtnsError> {
        let total = count
            .checked_mul(T::BYTES)
            .and_then(|n| n.checked_add(header))
            .ok_or(FtnsError::Truncated {
                needed: usize::MAX,
                have: bytes.len(),
            })?;
        need(bytes, total)?;
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            data.push(T::read_le(&bytes[header + i * T::BYTES..]));
        }
        Ok((Tensor::new(shape, data)?, total))
    }

    match dtype {
        Dtype::F32 => {
            let (t, used) = read_values::<f32>(bytes, header, count, shape)?;
            Ok((AnyTensor::F32(t), used))
        }
        Dtype::F64 => {
            let (t, used) = read_values::<f64>(bytes, header, count, shape)?;
            Ok((AnyTensor::F64(t), used))
        }
    }
}

/// Decodes a buffer that must contain exactly one tensor.
pub fn decode_tensor(bytes: &[u8]) -> Result<AnyTensor, FtnsError> {
    let (t, used) = decode_tensor_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FtnsError::TrailingBytes(bytes.len() - used));
    }
    Ok(t)
}

/// Decodes a single tensor of a known element type.
pub fn decode_tensor_typed<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>, FtnsError> {
    match (decode_tensor(bytes)?, T::DTYPE) {
        (AnyTensor::F32(t), Dtype::F32) => Ok(t.convert()),
        (AnyTensor::F64(t), Dtype::F64) => Ok(t.convert()),
        (other, expected) => Err(FtnsError::DtypeMismatch {
            file: match other {
                AnyTensor::F32(_) => Dtype::F32,
                AnyTensor::F64(_) => Dtype::F64,
            },
            expected,
        }),
    }
}

pub fn write_ftns<T: Scalar>(path: &Path, tensor: &Tensor<T>) -> Result<(), FtnsError> {
    fs::write(path, encode_tensor(tensor)).map_err(|source| FtnsError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_ftns(path: &Path) -> Result<AnyTensor, FtnsError> {
    let bytes = fs::read(path).map_err(|source| FtnsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_tensor(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::{rng_for, uniform};

    #[test]
    fn round_trip_f32_identity() {
        let mut rng = rng_for(21, &[1]);
        let t = Tensor::<f32>::from_fn(vec![2, 3, 4], |_| uniform(&mut rng, -5.0, 5.0) as f32);
        let bytes = encode_tensor(&t);
        match decode_tensor(&bytes).unwrap() {
            AnyTensor::F32(back) => assert_eq!(back, t),
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn round_trip_f64_preserves_all_bits() {
        let t = Tensor::<f64>::new(
            vec![3],
            vec![std::f64::consts::PI, f64::MIN_POSITIVE, -1.0 / 3.0],
        )
        .unwrap();
        let bytes = encode_tensor(&t);
        match decode_tensor(&bytes).unwrap() {
            AnyTensor::F64(back) => {
                for (a, b) in back.data().iter().zip(t.data()) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn truncated_input_is_an_error() {
        let t = Tensor::<f32>::zeros(vec![4, 4]);
        let bytes = encode_tensor(&t);
        for cut in [0, 3, 7, 10, bytes.len() - 1] {
            let err = decode_tensor(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, FtnsError::Truncated { .. }), "cut={cut} {err}");
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let t = Tensor::<f32>::zeros(vec![2]);
        let mut bytes = encode_tensor(&t);
        bytes[0] = b'X';
        assert!(matches!(
            decode_tensor(&bytes).unwrap_err(),
            FtnsError::BadMagic(_)
        ));
        let mut bytes = encode_tensor(&t);
        bytes[4] = 9;
        assert!(matches!(
            decode_tensor(&bytes).unwrap_err(),
            FtnsError::UnsupportedVersion(9)
        ));
        let mut bytes = encode_tensor(&t);
        bytes[5] = 7;
        assert!(matches!(
            decode_tensor(&bytes).unwrap_err(),
            FtnsError::UnsupportedDtype(7)
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let t = Tensor::<f32>::zeros(vec![2]);
        let mut bytes = encode_tensor(&t);
        bytes.push(0);
        assert!(matches!(
            decode_tensor(&bytes).unwrap_err(),
            FtnsError::TrailingBytes(1)
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = std::env::temp_dir().join("fedsoda_ftns_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ftns");
        let t = Tensor::<f64>::from_fn(vec![5], |i| i as f64 * 0.5);
        write_ftns(&path, &t).unwrap();
        match read_ftns(&path).unwrap() {
            AnyTensor::F64(back) => assert_eq!(back, t),
            _ => panic!("wrong dtype"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn header_is_exactly_as_specified() {
        let t = Tensor::<f32>::zeros(vec![2, 3]);
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[0..4], &[0x46, 0x54, 0x4E, 0x53]);
        assert_eq!(bytes[4], 1); // version
        assert_eq!(bytes[5], 1); // dtype f32
        assert_eq!(bytes[6], 2); // ndim
        assert_eq!(bytes[7], 0); // pad
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &3u32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 6 * 4);
    }
}

//! Portable tensor files.
//!
//! Layout: one ASCII header line `TSR1 <ndims> <d0> ... <dn-1> <f32|f64>\n`
//! followed by the raw little-endian scalars in row-major order. Readers also
//! accept the dtype token written as `dtype=f32`.

use std::io::{Read, Write};
use std::path::Path;

use super::{Precision, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &str = "TSR1";
const MAX_HEADER: usize = 256;

/// A tensor read from disk in whichever precision the file declares.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            AnyTensor::F32(_) => Precision::Single,
            AnyTensor::F64(_) => Precision::Double,
        }
    }

    /// Converts to the requested precision (exact when widening).
    pub fn into_precision<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn header<T: Scalar>(dims: &[usize]) -> String {
    let mut h = format!("{MAGIC} {}", dims.len());
    for d in dims {
        h.push_str(&format!(" {d}"));
    }
    h.push(' ');
    h.push_str(T::PRECISION.dtype_name());
    h.push('\n');
    h
}

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = header::<T>(t.dims()).into_bytes();
    out.extend_from_slice(&t.to_le_bytes());
    out
}

pub fn write_tensor<T: Scalar>(mut w: impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(&encode(t))?;
    Ok(())
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode(t))?;
    Ok(())
}

fn parse_body<T: Scalar>(dims: &[usize], body: &[u8]) -> Result<Tensor<T>> {
    let n: usize = dims.iter().product();
    if body.len() != n * T::BYTES {
        return Err(Error::Format(format!(
            "expected {} data bytes for {:?}, found {}",
            n * T::BYTES,
            dims,
            body.len()
        )));
    }
    let data = body.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(dims, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let nl = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| Error::Format("header is not ASCII".into()))?;
    let mut tokens = header.split_ascii_whitespace();
    if tokens.next() != Some(MAGIC) {
        return Err(Error::Format(format!("bad magic, expected {MAGIC}")));
    }
    let ndims: usize = tokens
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Format("bad ndims".into()))?;
    if ndims == 0 || ndims > super::MAX_RANK {
        return Err(Error::Format(format!("unsupported rank {ndims}")));
    }
    let dims = (0..ndims)
        .map(|_| tokens.next().and_then(|t| t.parse::<usize>().ok()).filter(|&d| d > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Format("bad dimension list".into()))?;
    let dtype = tokens.next().ok_or_else(|| Error::Format("missing dtype".into()))?;
    if tokens.next().is_some() {
        return Err(Error::Format("trailing header tokens".into()));
    }
    let body = &bytes[nl + 1..];
    match dtype.trim_start_matches("dtype=") {
        "f32" => Ok(AnyTensor::F32(parse_body(&dims, body)?)),
        "f64" => Ok(AnyTensor::F64(parse_body(&dims, body)?)),
        other => Err(Error::Format(format!("unknown dtype {other}"))),
    }
}

pub fn read_tensor(mut r: impl Read) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn load(path: impl AsRef<Path>) -> Result<AnyTensor> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_exact() {
        let t = Tensor::<f32>::zeros(&[2, 3, 4, 5]).unwrap();
        let bytes = encode(&t);
        assert!(bytes.starts_with(b"TSR1 4 2 3 4 5 f32\n"));
        assert_eq!(bytes.len(), "TSR1 4 2 3 4 5 f32\n".len() + 120 * 4);
    }

    #[test]
    fn little_endian_payload() {
        let t = Tensor::<f32>::new(&[1], vec![1.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0x00, 0x80, 0x3f]);
    }

    #[test]
    fn rejects_malformed() {
        assert!(decode(b"TSR2 1 1 f32\n\0\0\0\0").is_err());
        assert!(decode(b"TSR1 1 2 f32\n\0\0\0\0").is_err());
        assert!(decode(b"TSR1 1 1 f16\n\0\0").is_err());
        assert!(decode(b"TSR1 2 1 f32\n\0\0\0\0").is_err());
        assert!(decode(b"no newline").is_err());
        assert!(decode(b"TSR1 1 0 f32\n").is_err());
    }

    #[test]
    fn accepts_dtype_prefix() {
        let t = decode(b"TSR1 1 1 dtype=f64\n\0\0\0\0\0\0\xf0\x3f").unwrap();
        assert_eq!(t, AnyTensor::F64(Tensor::new(&[1], vec![1.0]).unwrap()));
    }

    proptest! {
        #[test]
        fn roundtrip(dims in proptest::collection::vec(1usize..4, 1..5), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((i as u64 ^ seed) as f64).sin()).collect();
            let t = Tensor::<f64>::new(&dims, data).unwrap();
            prop_assert_eq!(decode(&encode(&t)).unwrap(), AnyTensor::F64(t.clone()));
            let s: Tensor<f32> = t.cast();
            prop_assert_eq!(decode(&encode(&s)).unwrap(), AnyTensor::F32(s));
        }
    }
}

//! `VAOT1` raw tensor files: 5-byte magic, u8 dtype tag, u32 LE rank, u32 LE
//! dims, then the row-major little-endian payload.

use std::path::Path;

use super::{read_file, write_file};
use crate::error::{Error, Result};
use crate::grid::Tensor;

const MAGIC: &[u8; 5] = b"VAOT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    /// Used for checkpoints so that restored state is bit-exact.
    F64 = 2,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode_tensor(t: &Tensor, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * t.shape().len() + dtype.width() * t.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype as u8);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: String| Error::format(path, reason);
    if bytes.len() < 10 || &bytes[..5] != MAGIC {
        return Err(bad("missing VAOT1 magic".into()));
    }
    let dtype = match bytes[5] {
        1 => Dtype::F32,
        2 => Dtype::F64,
        t => return Err(bad(format!("unknown dtype tag {t}"))),
    };
    let u32_at = |off: usize| -> Result<usize> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .ok_or_else(|| bad("header truncated".into()))
    };
    let ndim = u32_at(6)?;
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        shape.push(u32_at(10 + 4 * i)?);
    }
    let start = 10 + 4 * ndim;
    let n: usize = shape.iter().product();
    let expected = n * dtype.width();
    let payload = &bytes[start.min(bytes.len())..];
    if payload.len() != expected {
        return Err(bad(format!(
            "payload has {} bytes, shape {shape:?} needs {expected}",
            payload.len()
        )));
    }
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    write_file(path, &encode_tensor(t, dtype))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&read_file(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = encode_tensor(&t, Dtype::F32);
        let mut expect = b"VAOT1".to_vec();
        expect.push(1);
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn round_trips() {
        let t = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, 1e-9, -7.0, 0.0]).unwrap();
        let p = Path::new("mem");
        assert_eq!(decode_tensor(&encode_tensor(&t, Dtype::F64), p).unwrap(), t);
        let f = decode_tensor(&encode_tensor(&t, Dtype::F32), p).unwrap();
        for (a, b) in f.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let s = Tensor::scalar(3.5);
        assert_eq!(decode_tensor(&encode_tensor(&s, Dtype::F64), p).unwrap(), s);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let b = encode_tensor(&t, Dtype::F32);
        let p = Path::new("mem");
        assert!(decode_tensor(&b[..b.len() - 1], p).is_err());
        let mut m = b.clone();
        m[0] = b'X';
        assert!(decode_tensor(&m, p).is_err());
        let mut d = b.clone();
        d[5] = 9;
        assert!(decode_tensor(&d, p).is_err());
        assert!(decode_tensor(&b[..7], p).is_err());
    }
}

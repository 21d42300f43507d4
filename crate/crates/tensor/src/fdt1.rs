//! The FDT1 raw tensor format: `"FDT1"`, four little-endian `u32` extents
//! `(b, c, h, w)`, a precision byte (4 or 8), then the little-endian payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::{Scalar, Shape, Tensor};

const MAGIC: &[u8; 4] = b"FDT1";
const HEADER: usize = 4 + 16 + 1;

pub fn to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + t.numel() * T::BYTES as usize);
    out.extend_from_slice(MAGIC);
    for e in t.shape().to_array() {
        let e = u32::try_from(e).expect("extent fits in u32");
        out.extend_from_slice(&e.to_le_bytes());
    }
    out.push(T::BYTES);
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes either precision and converts to `T`.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < HEADER || &bytes[..4] != MAGIC {
        return Err(TensorError::Format("missing FDT1 header".into()));
    }
    let ext = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let shape = Shape::new(ext(0), ext(1), ext(2), ext(3));
    let tag = bytes[20];
    let payload = &bytes[HEADER..];
    let expected = shape.numel() * tag as usize;
    if payload.len() != expected {
        return Err(TensorError::Format(format!(
            "payload has {} bytes, shape {shape} with precision {tag} needs {expected}",
            payload.len()
        )));
    }
    let data = match tag {
        4 => payload.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
        8 => payload.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        other => return Err(TensorError::Format(format!("unknown precision tag {other}"))),
    };
    Tensor::new(shape, data)
}

pub fn write<T: Scalar>(mut w: impl Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(&to_bytes(t))?;
    Ok(())
}

pub fn read<T: Scalar>(mut r: impl Read) -> Result<Tensor<T>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, to_bytes(t))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_both_precisions() {
        let t = Tensor::<f64>::seeded_randn(Shape::new(2, 3, 4, 5), 7);
        assert_eq!(from_bytes::<f64>(&to_bytes(&t)).unwrap(), t);
        let s: Tensor<f32> = t.cast();
        assert_eq!(from_bytes::<f32>(&to_bytes(&s)).unwrap(), s);
        // A single-precision file read as double widens exactly.
        assert_eq!(from_bytes::<f64>(&to_bytes(&s)).unwrap(), s.cast::<f64>());
    }

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::ones(Shape::new(1, 2, 3, 4));
        let b = to_bytes(&t);
        assert_eq!(&b[..4], b"FDT1");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(b[20], 4);
        assert_eq!(b.len(), 21 + 24 * 4);
    }

    #[test]
    fn rejects_truncated_and_bad_tags() {
        let mut b = to_bytes(&Tensor::<f64>::ones(Shape::new(1, 1, 2, 2)));
        assert!(from_bytes::<f64>(&b[..b.len() - 1]).is_err());
        b[20] = 2;
        assert!(from_bytes::<f64>(&b).is_err());
        assert!(from_bytes::<f64>(b"FDT").is_err());
    }
}

//! BKT1 tensor files.
//!
//! Layout: magic `BKT1`, `u8` dtype code (0 = f32, 1 = f64), `u8` rank,
//! `rank` little-endian `u32` dimensions, then the row-major payload in
//! little-endian order.

use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BKT1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank()).map_err(|_| TensorError::Format(format!("rank {} too large", t.rank())))?;
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| TensorError::Format(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

/// Decodes a BKT1 buffer, converting the stored dtype to `T` if they differ.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let bad = |m: &str| TensorError::Format(m.to_string());
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing BKT1 magic"));
    }
    let dtype = DType::from_code(bytes[4]).ok_or_else(|| bad(&format!("unknown dtype code {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let numel: usize = shape.iter().product();
    let payload = &bytes[header..];
    if payload.len() != numel * dtype.size() {
        return Err(bad(&format!(
            "payload is {} bytes, shape {shape:?} of {} needs {}",
            payload.len(),
            dtype.name(),
            numel * dtype.size()
        )));
    }
    let data: Vec<T> = match dtype {
        DType::F32 => payload.chunks(4).map(|c| T::from_f64_lossy(f32::read_le(c) as f64)).collect(),
        DType::F64 => payload.chunks(8).map(|c| T::from_f64_lossy(f64::read_le(c))).collect(),
    };
    Tensor::new(&shape, data)
}

pub fn write_bkt<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)?).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_bkt<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn golden_header_bytes() {
        let t = Tensor::<f32>::from_f64(&[2, 1], &[1.0, -2.0]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(
            b,
            vec![
                b'B', b'K', b'T', b'1', 0, 2, 2, 0, 0, 0, 1, 0, 0, 0, //
                0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0,
            ]
        );
    }

    #[test]
    fn rejects_corrupt_input() {
        assert!(decode::<f32>(b"BKT2\0\0").is_err());
        let mut b = encode(&Tensor::<f64>::ones(&[3])).unwrap();
        b.pop();
        assert!(decode::<f64>(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(shape in proptest::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 1)) as f64).sin()).collect();
            let t = Tensor::<f64>::new(&shape, data).unwrap();
            let back: Tensor<f64> = decode(&encode(&t).unwrap()).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
